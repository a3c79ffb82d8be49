//! Experiment orchestration: trains every configured method over training
//! sizes and seeds, evaluates on a shared test set, and aggregates per-seed
//! rates into summary rows with t-based confidence intervals.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::channel::{generate, split_train_val, ChannelMatrix, Dataset};
use crate::error::{Error, Result};
use crate::hpo::{
    get_cat, get_int, get_real, measure_latency, run_search, Assignment, Beamformer, SearchSpace,
    TpeConfig, TrialOutcome, TrialRecord,
};
use crate::mlp::{self, MlpModel};
use crate::objective::SystemParams;
use crate::optim::{OptimizerKind, SchedulerKind, TrainConfig};
use crate::solvers::{PgdOptions, Solver, WmmseOptions};
use crate::unrolled::{self, GradMethod, LayerType, UnrolledModel};

/// Seed of the shared test set; disjoint from the experiment and search seeds.
pub const DEFAULT_TEST_SEED: u64 = 7777;
/// Model initialization seed = experiment seed + this offset.
pub const INIT_SEED_OFFSET: u64 = 1_000_000;
/// Seed of the fixed channel set used for latency measurement.
pub const LATENCY_PROBE_SEED: u64 = 9_999;
pub const LATENCY_PROBE_SIZE: usize = 64;

pub const PGDNET_DEPTH: usize = 10;
pub const PGDNET_ETA0: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Zf,
    Pgd200,
    Wmmse100,
    Mlp,
    Pgdnet,
    Autopgd,
    Automlp,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Zf,
        Method::Pgd200,
        Method::Wmmse100,
        Method::Mlp,
        Method::Pgdnet,
        Method::Autopgd,
        Method::Automlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Zf => "zf",
            Method::Pgd200 => "pgd200",
            Method::Wmmse100 => "wmmse100",
            Method::Mlp => "mlp",
            Method::Pgdnet => "pgdnet",
            Method::Autopgd => "autopgd",
            Method::Automlp => "automlp",
        }
    }

    /// Methods that need no training data; they get one row with `train_size` 0.
    pub fn is_size_independent(self) -> bool {
        matches!(self, Method::Zf | Method::Pgd200 | Method::Wmmse100)
    }

    pub fn solver(self) -> Option<Solver> {
        match self {
            Method::Zf => Some(Solver::ZeroForcing),
            Method::Pgd200 => Some(Solver::ClassicalPgd(PgdOptions::default())),
            Method::Wmmse100 => Some(Solver::Wmmse(WmmseOptions::default())),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown method {s:?}")))
    }
}

/// Search budget when a size has no explicit entry: 50 trials up to 10³
/// samples, 20 up to 10⁴, 5 beyond.
pub fn default_budget(train_size: usize) -> usize {
    match train_size {
        0..=1000 => 50,
        1001..=10_000 => 20,
        _ => 5,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub sys: SystemParams,
    pub train_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub test_size: usize,
    #[serde(default = "default_test_seed")]
    pub test_seed: u64,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub hpo_budget_per_size: BTreeMap<usize, usize>,
    #[serde(default)]
    pub hpo_seed: u64,
    /// Trials slower than this median per-channel forward time are pruned.
    #[serde(default)]
    pub latency_limit_us: Option<f64>,
    /// Caps the training epochs of every learned method (defaults to 200).
    #[serde(default)]
    pub max_epochs: Option<usize>,
    #[serde(default)]
    pub grad_method: GradMethod,
    pub output_dir: PathBuf,
}

fn default_test_seed() -> u64 {
    DEFAULT_TEST_SEED
}

impl ExperimentConfig {
    /// Sizes {100, 1000}, three seeds, 2000 test channels, 20-trial searches.
    pub fn desk(output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            sys: SystemParams::default(),
            train_sizes: vec![100, 1000],
            seeds: vec![42, 678, 888],
            test_size: 2000,
            test_seed: DEFAULT_TEST_SEED,
            methods: Method::ALL.to_vec(),
            hpo_budget_per_size: [(100, 20), (1000, 20)].into_iter().collect(),
            hpo_seed: 0,
            latency_limit_us: None,
            max_epochs: None,
            grad_method: GradMethod::Adjoint,
            output_dir: output_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sys.validate()?;
        if self.train_sizes.is_empty() {
            return Err(Error::contract("train_sizes must be non-empty"));
        }
        if let Some(&n) = self.train_sizes.iter().find(|&&n| n < 10) {
            return Err(Error::contract(format!("train size {n} is below the minimum of 10")));
        }
        if self.seeds.is_empty() {
            return Err(Error::contract("seeds must be non-empty"));
        }
        if self.test_size == 0 {
            return Err(Error::contract("test_size must be at least 1"));
        }
        if self.seeds.contains(&self.test_seed) || self.test_seed == self.hpo_seed {
            return Err(Error::contract("test_seed must differ from the training and search seeds"));
        }
        if self.hpo_budget_per_size.values().any(|&b| b == 0) {
            return Err(Error::contract("search budgets must be at least 1"));
        }
        if self.max_epochs == Some(0) {
            return Err(Error::contract("max_epochs must be at least 1"));
        }
        Ok(())
    }

    pub fn budget_for(&self, train_size: usize) -> usize {
        self.hpo_budget_per_size
            .get(&train_size)
            .copied()
            .unwrap_or_else(|| default_budget(train_size))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    /// 0 for methods that do not train.
    pub train_size: usize,
    pub per_seed_rates: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub ci95_lo: f64,
    pub ci95_hi: f64,
}

impl ResultRow {
    /// Summary of per-seed rates; a single value gets zero spread.
    pub fn from_rates(method: Method, train_size: usize, per_seed_rates: Vec<f64>) -> Result<Self> {
        if per_seed_rates.is_empty() {
            return Err(Error::contract("a result row needs at least one rate"));
        }
        let (mean, std) = mean_std(&per_seed_rates);
        let (ci95_lo, ci95_hi) = if per_seed_rates.len() >= 2 {
            ci95(&per_seed_rates)?
        } else {
            (mean, mean)
        };
        Ok(ResultRow { method, train_size, per_seed_rates, mean, std, ci95_lo, ci95_hi })
    }
}

/// Mean and sample standard deviation (`n − 1` divisor; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    // Shifted by the first value so identical inputs give exactly that value and zero spread.
    let shift = values[0];
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Two-sided 97.5% Student-t quantiles for df = 1..=30.
const T_975: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145,
    2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048,
    2.045, 2.042,
];

/// `t_{0.025, df}`: tabulated up to 30 degrees of freedom, computed beyond.
pub fn t_quantile_975(df: usize) -> Result<f64> {
    match df {
        0 => Err(Error::contract("t quantile needs at least one degree of freedom")),
        1..=30 => Ok(T_975[df - 1]),
        _ => Ok(StudentsT::new(0.0, 1.0, df as f64)
            .map_err(|e| Error::Numeric(e.to_string()))?
            .inverse_cdf(0.975)),
    }
}

/// 95% confidence interval of the mean: `mean ± t·std/√n`.
pub fn ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::contract(format!("ci95 needs at least 2 values, got {}", values.len())));
    }
    let (mean, std) = mean_std(values);
    ci95_from_summary(mean, std, values.len())
}

/// Same interval from a summary (mean, sample std, count).
pub fn ci95_from_summary(mean: f64, std: f64, n: usize) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::contract("ci95 needs at least 2 values"));
    }
    let half = t_quantile_975(n - 1)? * std / (n as f64).sqrt();
    Ok((mean - half, mean + half))
}

/// Trained model kept on disk by an experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub method: Method,
    pub train_size: usize,
    pub seed: u64,
    pub test_rate: f64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub method: Method,
    pub train_size: usize,
    pub best: TrialRecord,
    pub history_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub models: Vec<ModelArtifact>,
    pub searches: Vec<SearchSummary>,
}

impl ExperimentOutcome {
    pub fn row(&self, method: Method, train_size: usize) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method && r.train_size == train_size)
    }
}

/// A trained learned beamformer of either family.
#[derive(Debug, Clone)]
pub enum LearnedModel {
    Unrolled(UnrolledModel),
    Mlp(MlpModel),
}

impl LearnedModel {
    pub fn mean_rate(&self, channels: &[ChannelMatrix]) -> Result<f64> {
        match self {
            LearnedModel::Unrolled(m) => unrolled::mean_rate(m, channels),
            LearnedModel::Mlp(m) => mlp::mean_rate(m, channels),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            LearnedModel::Unrolled(m) => m.save(path),
            LearnedModel::Mlp(m) => m.save(path),
        }
    }

    pub fn beamformer(&self) -> &dyn Beamformer {
        match self {
            LearnedModel::Unrolled(m) => m,
            LearnedModel::Mlp(m) => m,
        }
    }
}

/// Builds and trains one learned method and returns it with its best validation rate.
/// `assignment` carries searched hyperparameters (required for `autopgd`/`automlp`);
/// the initialization seed is `seed + INIT_SEED_OFFSET`.
#[allow(clippy::too_many_arguments)]
pub fn train_learned(
    sys: SystemParams,
    method: Method,
    assignment: Option<&Assignment>,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
    max_epochs: Option<usize>,
    grad_method: GradMethod,
) -> Result<(LearnedModel, f64)> {
    let train_config = |opt, sched, n| {
        let mut tc = TrainConfig::new(opt, sched, n);
        if let Some(e) = max_epochs {
            tc.epochs = e;
        }
        tc
    };
    let init_seed = seed.wrapping_add(INIT_SEED_OFFSET);
    match method {
        Method::Pgdnet | Method::Autopgd => {
            let (depth, eta0, opt, sched, layer_type) = match (method, assignment) {
                (Method::Pgdnet, _) => (
                    PGDNET_DEPTH,
                    PGDNET_ETA0,
                    OptimizerKind::Adam,
                    SchedulerKind::Cosine,
                    LayerType::Standard,
                ),
                (_, Some(a)) => (
                    get_int(a, "depth")? as usize,
                    get_real(a, "eta0")?,
                    get_cat(a, "optimizer")?.parse()?,
                    get_cat(a, "scheduler")?.parse()?,
                    get_cat(a, "layer_type")?.parse()?,
                ),
                _ => return Err(Error::contract("autopgd needs a searched assignment")),
            };
            let model = UnrolledModel::new(sys, layer_type, depth, eta0)?;
            let tc = train_config(opt, sched, train.len());
            let (trained, trace) = unrolled::train(&model, train, val, &tc, seed, grad_method)?;
            Ok((LearnedModel::Unrolled(trained), trace.best_val_rate))
        }
        Method::Mlp | Method::Automlp => {
            let (model, sched, lr) = match (method, assignment) {
                (Method::Mlp, _) => (MlpModel::baseline(sys, init_seed)?, SchedulerKind::Cosine, None),
                (_, Some(a)) => (
                    MlpModel::with_depth(sys, get_int(a, "depth")? as usize, init_seed)?,
                    get_cat(a, "scheduler")?.parse()?,
                    Some(get_real(a, "lr")?),
                ),
                _ => return Err(Error::contract("automlp needs a searched assignment")),
            };
            let mut tc = train_config(OptimizerKind::Adam, sched, train.len());
            if let Some(lr) = lr {
                tc.base_lr = lr;
            }
            let (trained, trace) = mlp::train(&model, train, val, &tc, seed)?;
            Ok((LearnedModel::Mlp(trained), trace.best_val_rate))
        }
        _ => Err(Error::contract(format!("{method} is not a learned method"))),
    }
}

fn write_rows_json(rows: &[ResultRow], path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(rows)?)?;
    Ok(())
}

fn sorted(mut rows: Vec<ResultRow>) -> Vec<ResultRow> {
    rows.sort_by_key(|r| (r.method, r.train_size));
    rows
}

/// Runs every configured (method, size, seed) cell.
///
/// The output directory receives `models/`, `hpo/` (JSON-lines search
/// histories, resumed when present), `results.partial.json` after every row,
/// and finally `results.csv` and `results.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut outcome = ExperimentOutcome { rows: Vec::new(), models: Vec::new(), searches: Vec::new() };
    if cfg.methods.is_empty() {
        return Ok(outcome);
    }
    let out = &cfg.output_dir;
    let models_dir = out.join("models");
    let hpo_dir = out.join("hpo");
    fs::create_dir_all(&models_dir)?;
    fs::create_dir_all(&hpo_dir)?;
    let partial = out.join("results.partial.json");

    let (k, m) = (cfg.sys.k_users, cfg.sys.m_antennas);
    let test = generate(cfg.test_seed, cfg.test_size, k, m)?.with_tag(crate::channel::SplitTag::Test);
    let probe = generate(LATENCY_PROBE_SEED, LATENCY_PROBE_SIZE, k, m)?;

    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();

    for &method in &methods {
        if let Some(solver) = method.solver() {
            log::info!("{method}: evaluating on {} test channels", test.len());
            let rate = solver
                .mean_rate(&test.channels, &cfg.sys)
                .map_err(|e| e.context(format!("method {method}")))?;
            outcome.rows.push(ResultRow::from_rates(method, 0, vec![rate; cfg.seeds.len()])?);
            write_rows_json(&outcome.rows, &partial)?;
            continue;
        }
        for &n in &cfg.train_sizes {
            let assignment = match method {
                Method::Autopgd | Method::Automlp => {
                    let summary = search(cfg, method, n, &probe, &hpo_dir)
                        .map_err(|e| e.context(format!("method {method}, size {n}, search")))?;
                    let a = summary.best.assignment.clone();
                    outcome.searches.push(summary);
                    Some(a)
                }
                _ => None,
            };
            let mut rates = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                let ctx = |e: Error| e.context(format!("method {method}, size {n}, seed {seed}"));
                let data = generate(seed, n, k, m).map_err(ctx)?;
                let (train, val) = split_train_val(&data).map_err(ctx)?;
                let (model, _) = train_learned(cfg.sys, method, assignment.as_ref(), &train, &val, seed, cfg.max_epochs, cfg.grad_method).map_err(ctx)?;
                let rate = model.mean_rate(&test.channels).map_err(ctx)?;
                let path = models_dir.join(format!("{method}_n{n}_s{seed}.json"));
                model.save(&path).map_err(ctx)?;
                log::info!("{method} N={n} seed={seed}: test rate {rate:.4}");
                outcome.models.push(ModelArtifact { method, train_size: n, seed, test_rate: rate, path });
                rates.push(rate);
            }
            outcome.rows.push(ResultRow::from_rates(method, n, rates)?);
            write_rows_json(&outcome.rows, &partial)?;
        }
    }

    outcome.rows = sorted(outcome.rows);
    report(&outcome.rows, ReportFormat::Csv, &out.join("results.csv"))?;
    report(&outcome.rows, ReportFormat::Json, &out.join("results.json"))?;
    fs::write(out.join("artifacts.json"), serde_json::to_string_pretty(&(&outcome.models, &outcome.searches))?)?;
    Ok(outcome)
}

/// Hyperparameter search for one learned method at one training size, on the search seed's data.
fn search(
    cfg: &ExperimentConfig,
    method: Method,
    n: usize,
    probe: &Dataset,
    hpo_dir: &Path,
) -> Result<SearchSummary> {
    let space = match method {
        Method::Autopgd => SearchSpace::auto_pgd(),
        Method::Automlp => SearchSpace::auto_mlp(),
        _ => return Err(Error::contract(format!("{method} has no search space"))),
    };
    let data = generate(cfg.hpo_seed, n, cfg.sys.k_users, cfg.sys.m_antennas)?;
    let (train, val) = split_train_val(&data)?;
    let tpe = TpeConfig::with_budget(cfg.budget_for(n), cfg.hpo_seed);
    let history_path = hpo_dir.join(format!("{method}_n{n}.jsonl"));
    log::info!("{method} N={n}: {}-trial search", tpe.budget);
    let (best, _) = run_search(
        &space,
        &tpe,
        |a, _| {
            let (model, val_rate) = train_learned(cfg.sys, method, Some(a), &train, &val, cfg.hpo_seed, cfg.max_epochs, cfg.grad_method)?;
            let latency_us = measure_latency(model.beamformer(), &probe.channels)?;
            Ok(TrialOutcome { val_rate, latency_us: Some(latency_us) })
        },
        cfg.latency_limit_us,
        Some(&history_path),
    )?;
    Ok(SearchSummary { method, train_size: n, best, history_path })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::contract(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    method: Method,
    train_size: usize,
    n_seeds: usize,
    mean: f64,
    std: f64,
    ci95_lo: f64,
    ci95_hi: f64,
    per_seed_rates: String,
}

/// Writes rows sorted by (method, train_size).
pub fn report(rows: &[ResultRow], format: ReportFormat, path: &Path) -> Result<()> {
    let rows = sorted(rows.to_vec());
    match format {
        ReportFormat::Json => write_rows_json(&rows, path),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
            for r in &rows {
                w.serialize(CsvRow {
                    method: r.method,
                    train_size: r.train_size,
                    n_seeds: r.per_seed_rates.len(),
                    mean: r.mean,
                    std: r.std,
                    ci95_lo: r.ci95_lo,
                    ci95_hi: r.ci95_hi,
                    per_seed_rates: r
                        .per_seed_rates
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(";"),
                })
                .map_err(csv_err)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

/// Reads rows back from a CSV or JSON report.
pub fn read_report(path: &Path, format: ReportFormat) -> Result<Vec<ResultRow>> {
    match format {
        ReportFormat::Json => Ok(serde_json::from_str(&fs::read_to_string(path)?)?),
        ReportFormat::Csv => {
            let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
            rd.deserialize::<CsvRow>()
                .map(|rec| {
                    let rec = rec.map_err(csv_err)?;
                    let per_seed_rates = rec
                        .per_seed_rates
                        .split(';')
                        .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("rate {s:?}: {e}"))))
                        .collect::<Result<Vec<_>>>()?;
                    if per_seed_rates.len() != rec.n_seeds {
                        return Err(Error::Format("n_seeds disagrees with per_seed_rates".into()));
                    }
                    Ok(ResultRow {
                        method: rec.method,
                        train_size: rec.train_size,
                        per_seed_rates,
                        mean: rec.mean,
                        std: rec.std,
                        ci95_lo: rec.ci95_lo,
                        ci95_hi: rec.ci95_hi,
                    })
                })
                .collect()
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRate {
    pub layer: usize,
    pub mean_rate: f64,
}

/// Mean sum-rate after each layer; row 0 is the zero-forcing input.
pub fn diagnostics_report(model: &UnrolledModel, channels: &[ChannelMatrix]) -> Result<Vec<LayerRate>> {
    if channels.is_empty() {
        return Err(Error::contract("diagnostics need at least one channel"));
    }
    use rayon::prelude::*;
    let traces: Vec<Vec<f64>> = channels
        .par_iter()
        .map(|h| Ok(model.forward(h, true)?.1.expect("diagnostics requested").per_layer_rate))
        .collect::<Result<_>>()?;
    let n = channels.len() as f64;
    Ok((0..=model.depth())
        .map(|layer| LayerRate {
            layer,
            mean_rate: traces.iter().map(|t| t[layer]).sum::<f64>() / n,
        })
        .collect())
}

pub fn write_diagnostics_csv(rows: &[LayerRate], mut w: impl Write) -> Result<()> {
    writeln!(w, "layer,mean_rate")?;
    for r in rows {
        writeln!(w, "{},{}", r.layer, r.mean_rate)?;
    }
    Ok(())
}
