use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ubf_core::bench::{self, ExperimentConfig, Method, ReportFormat};
use ubf_core::channel::{self, split_train_val, Dataset};
use ubf_core::hpo::{self, SearchSpace, TpeConfig, TrialOutcome};
use ubf_core::mlp::{self, MlpModel};
use ubf_core::optim::{OptimizerKind, SchedulerKind, TrainConfig};
use ubf_core::unrolled::{self, GradMethod, LayerType, UnrolledModel};
use ubf_core::{Error, Result, SystemParams};

#[derive(Parser)]
#[command(name = "ubf", version, about = "Learned and classical MISO downlink beamforming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct SysArgs {
    /// Total transmit power budget.
    #[arg(long, default_value_t = 1.0)]
    p_max: f64,
    /// Receiver noise variance.
    #[arg(long, default_value_t = 0.1)]
    noise_var: f64,
}

impl SysArgs {
    fn for_dataset(self, d: &Dataset) -> Result<SystemParams> {
        let sys = SystemParams {
            k_users: d.k_users,
            m_antennas: d.m_antennas,
            p_max: self.p_max,
            noise_var: self.noise_var,
        };
        sys.validate()?;
        Ok(sys)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Rayleigh channel dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, short = 'k', default_value_t = 4)]
        k: usize,
        #[arg(long, short = 'm', default_value_t = 8)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a classical solver over every channel of a dataset.
    Solve {
        #[arg(long, value_enum)]
        method: SolveMethod,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sys: SysArgs,
    },
    /// Train an unrolled or MLP model on a dataset (90/10 train/validation split).
    Train {
        #[arg(long, value_enum)]
        method: TrainMethod,
        /// JSON training settings; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
        #[command(flatten)]
        sys: SysArgs,
    },
    /// Hyperparameter search over a preset space.
    Hpo {
        #[arg(long, value_enum)]
        space: SpacePreset,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        dataset: PathBuf,
        /// JSON-lines history; an existing file is resumed.
        #[arg(long)]
        history_out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        latency_limit_us: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        sys: SysArgs,
    },
    /// Run an experiment described by a JSON config.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Per-layer mean sum-rate of an unrolled model.
    Diag {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert result rows (JSON) to a CSV or JSON report.
    Report {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long, value_enum)]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SolveMethod {
    Zf,
    Pgd200,
    Wmmse100,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMethod {
    Unrolled,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpacePreset {
    Autopgd,
    Automlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

/// Settings for `ubf train`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSettings {
    depth: usize,
    eta0: f64,
    layer_type: LayerType,
    /// Hidden widths of the MLP.
    hidden: Vec<usize>,
    optimizer: OptimizerKind,
    scheduler: SchedulerKind,
    base_lr: Option<f64>,
    epochs: Option<usize>,
    seed: u64,
    grad_method: GradMethod,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            depth: bench::PGDNET_DEPTH,
            eta0: bench::PGDNET_ETA0,
            layer_type: LayerType::Standard,
            hidden: mlp::DEFAULT_HIDDEN.to_vec(),
            optimizer: OptimizerKind::Adam,
            scheduler: SchedulerKind::Cosine,
            base_lr: None,
            epochs: None,
            seed: 0,
            grad_method: GradMethod::Adjoint,
        }
    }
}

impl TrainSettings {
    fn train_config(&self, n_train: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.optimizer, self.scheduler, n_train);
        if let Some(lr) = self.base_lr {
            cfg.base_lr = lr;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("UBF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::contract(format!("UBF_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::contract(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, count, k, m, out } => {
            let d = channel::generate(seed, count, k, m)?;
            channel::save(&d, &out)?;
            println!("wrote {count} channels (K={k}, M={m}, seed {seed}) to {}", out.display());
        }
        Command::Solve { method, dataset, out, sys } => {
            let d = channel::load(&dataset)?;
            let sys = sys.for_dataset(&d)?;
            let method = match method {
                SolveMethod::Zf => Method::Zf,
                SolveMethod::Pgd200 => Method::Pgd200,
                SolveMethod::Wmmse100 => Method::Wmmse100,
            };
            let reports = method.solver().expect("classical method").solve_all(&d.channels, &sys)?;
            let rates: Vec<f64> = reports.iter().map(|r| r.rate_final).collect();
            let mean_rate = rates.iter().sum::<f64>() / rates.len() as f64;
            write_json(
                &out,
                &serde_json::json!({ "method": method, "mean_rate": mean_rate, "rates": rates }),
            )?;
            println!("{method}: mean sum-rate {mean_rate:.4} bits/s/Hz over {} channels", rates.len());
        }
        Command::Train { method, config, dataset, out_model, sys } => {
            let settings: TrainSettings = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => TrainSettings::default(),
            };
            let d = channel::load(&dataset)?;
            let sys = sys.for_dataset(&d)?;
            let (train, val) = split_train_val(&d)?;
            let cfg = settings.train_config(train.len());
            let best_val = match method {
                TrainMethod::Unrolled => {
                    let model = UnrolledModel::new(sys, settings.layer_type, settings.depth, settings.eta0)?;
                    let (trained, trace) =
                        unrolled::train(&model, &train, &val, &cfg, settings.seed, settings.grad_method)?;
                    trained.save(&out_model)?;
                    trace.best_val_rate
                }
                TrainMethod::Mlp => {
                    let model = MlpModel::new(sys, &settings.hidden, settings.seed)?;
                    let (trained, trace) = mlp::train(&model, &train, &val, &cfg, settings.seed)?;
                    trained.save(&out_model)?;
                    trace.best_val_rate
                }
            };
            println!("best validation sum-rate {best_val:.4}; model written to {}", out_model.display());
        }
        Command::Hpo { space, budget, dataset, history_out, seed, latency_limit_us, epochs, sys } => {
            let d = channel::load(&dataset)?;
            let sys = sys.for_dataset(&d)?;
            let (train, val) = split_train_val(&d)?;
            let probe = channel::generate(bench::LATENCY_PROBE_SEED, bench::LATENCY_PROBE_SIZE, d.k_users, d.m_antennas)?;
            let (space_def, method) = match space {
                SpacePreset::Autopgd => (SearchSpace::auto_pgd(), Method::Autopgd),
                SpacePreset::Automlp => (SearchSpace::auto_mlp(), Method::Automlp),
            };
            let tpe = TpeConfig::with_budget(budget, seed);
            let (best, history) = hpo::run_search(
                &space_def,
                &tpe,
                |a, _| {
                    let (model, val_rate) =
                        bench::train_learned(sys, method, Some(a), &train, &val, seed, epochs, GradMethod::Adjoint)?;
                    let latency_us = hpo::measure_latency(model.beamformer(), &probe.channels)?;
                    Ok(TrialOutcome { val_rate, latency_us: Some(latency_us) })
                },
                latency_limit_us,
                Some(&history_out),
            )?;
            println!(
                "best of {} trials: #{} val sum-rate {:.4} with {}",
                history.len(),
                best.trial_id,
                best.val_rate.unwrap_or(f64::NAN),
                serde_json::to_string(&best.assignment)?
            );
        }
        Command::Bench { config, out_dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(dir) = out_dir {
                cfg.output_dir = dir;
            }
            let outcome = bench::run_experiment(&cfg)?;
            println!("{:<10} {:>10} {:>9} {:>8} {:>20}", "method", "train_size", "mean", "std", "ci95");
            for r in &outcome.rows {
                println!(
                    "{:<10} {:>10} {:>9.4} {:>8.4} [{:>8.4}, {:>8.4}]",
                    r.method.name(),
                    r.train_size,
                    r.mean,
                    r.std,
                    r.ci95_lo,
                    r.ci95_hi
                );
            }
            println!("results written to {}", cfg.output_dir.display());
        }
        Command::Diag { model, dataset, out } => {
            let model = UnrolledModel::load(&model)?;
            let d = channel::load(&dataset)?;
            model.sys.check_channel(d.channels.first().ok_or_else(|| Error::contract("empty dataset"))?)?;
            let rows = bench::diagnostics_report(&model, &d.channels)?;
            bench::write_diagnostics_csv(&rows, fs::File::create(&out)?)?;
            for r in &rows {
                println!("layer {:>3}: {:.4}", r.layer, r.mean_rate);
            }
        }
        Command::Report { rows, format, out } => {
            let rows = bench::read_report(&rows, ReportFormat::Json)?;
            let format = match format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Json => ReportFormat::Json,
            };
            bench::report(&rows, format, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = configure_threads().and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
