//! Tree-structured Parzen estimator search with a random-search fallback.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::channel::ChannelMatrix;
use crate::error::{Error, Result};
use crate::objective::BeamformingMatrix;
use crate::unrolled::UnrolledModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    /// Inclusive integer range; sampled as a continuous value and rounded.
    Int { lo: i64, hi: i64 },
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Categorical { choices: Vec<String> },
}

impl Domain {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Domain::Int { lo, hi } => lo <= hi,
            Domain::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            Domain::LogUniform { lo, hi } => *lo > 0.0 && hi.is_finite() && lo < hi,
            Domain::Categorical { choices } => !choices.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid domain {self:?}")))
        }
    }

    /// Bounds of the continuous sampling domain (log scale for `LogUniform`).
    fn continuous_bounds(&self) -> Option<(f64, f64)> {
        match *self {
            Domain::Int { lo, hi } => Some((lo as f64, hi as f64)),
            Domain::Uniform { lo, hi } => Some((lo, hi)),
            Domain::LogUniform { lo, hi } => Some((lo.ln(), hi.ln())),
            Domain::Categorical { .. } => None,
        }
    }

    fn encode(&self, v: &ParamValue) -> Option<f64> {
        match (self, v) {
            (Domain::Int { .. }, ParamValue::Int(i)) => Some(*i as f64),
            (Domain::Uniform { .. }, ParamValue::Real(x)) => Some(*x),
            (Domain::LogUniform { .. }, ParamValue::Real(x)) if *x > 0.0 => Some(x.ln()),
            (Domain::Categorical { choices }, ParamValue::Cat(c)) => {
                choices.iter().position(|x| x == c).map(|i| i as f64)
            }
            _ => None,
        }
    }

    fn decode(&self, x: f64) -> ParamValue {
        match self {
            Domain::Int { lo, hi } => ParamValue::Int((x.round() as i64).clamp(*lo, *hi)),
            Domain::Uniform { lo, hi } => ParamValue::Real(x.clamp(*lo, *hi)),
            Domain::LogUniform { lo, hi } => ParamValue::Real(x.exp().clamp(*lo, *hi)),
            Domain::Categorical { choices } => ParamValue::Cat(choices[x as usize].clone()),
        }
    }

    pub fn contains(&self, v: &ParamValue) -> bool {
        match (self, v) {
            (Domain::Int { lo, hi }, ParamValue::Int(i)) => lo <= i && i <= hi,
            (Domain::Uniform { lo, hi }, ParamValue::Real(x))
            | (Domain::LogUniform { lo, hi }, ParamValue::Real(x)) => lo <= x && x <= hi,
            (Domain::Categorical { choices }, ParamValue::Cat(c)) => choices.contains(c),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
}

fn dim(name: &str, domain: Domain) -> Dimension {
    Dimension { name: name.to_string(), domain }
}

fn cats(choices: &[&str]) -> Domain {
    Domain::Categorical { choices: choices.iter().map(|s| s.to_string()).collect() }
}

impl SearchSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self> {
        let space = SearchSpace { dims };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::contract("empty search space"));
        }
        for (i, d) in self.dims.iter().enumerate() {
            d.domain.validate()?;
            if self.dims[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::contract(format!("duplicate dimension {:?}", d.name)));
            }
        }
        Ok(())
    }

    /// Unrolled-network space: depth, initial step size, optimizer, scheduler, layer type.
    pub fn auto_pgd() -> Self {
        SearchSpace {
            dims: vec![
                dim("depth", Domain::Int { lo: 3, hi: 25 }),
                dim("eta0", Domain::LogUniform { lo: 1e-4, hi: 1e-1 }),
                dim("optimizer", cats(&["adam", "sgd"])),
                dim("scheduler", cats(&["cosine", "step"])),
                dim("layer_type", cats(&["standard", "hybrid"])),
            ],
        }
    }

    /// MLP space: depth counted in neuron layers, learning rate, scheduler.
    pub fn auto_mlp() -> Self {
        SearchSpace {
            dims: vec![
                dim("depth", Domain::Int { lo: 3, hi: 8 }),
                dim("lr", Domain::LogUniform { lo: 1e-4, hi: 1e-1 }),
                dim("scheduler", cats(&["cosine", "step"])),
            ],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "autopgd" | "auto_pgd" => Ok(Self::auto_pgd()),
            "automlp" | "auto_mlp" => Ok(Self::auto_mlp()),
            other => Err(Error::contract(format!("unknown search space preset {other:?}"))),
        }
    }

    pub fn contains(&self, a: &Assignment) -> bool {
        a.len() == self.dims.len()
            && self.dims.iter().all(|d| a.get(&d.name).is_some_and(|v| d.domain.contains(v)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Real(f64),
    Cat(String),
}

pub type Assignment = BTreeMap<String, ParamValue>;

fn lookup<'a>(a: &'a Assignment, key: &str) -> Result<&'a ParamValue> {
    a.get(key).ok_or_else(|| Error::contract(format!("assignment lacks {key:?}")))
}

pub fn get_int(a: &Assignment, key: &str) -> Result<i64> {
    match lookup(a, key)? {
        ParamValue::Int(i) => Ok(*i),
        other => Err(Error::contract(format!("{key}: expected integer, got {other:?}"))),
    }
}

pub fn get_real(a: &Assignment, key: &str) -> Result<f64> {
    match lookup(a, key)? {
        ParamValue::Real(x) => Ok(*x),
        ParamValue::Int(i) => Ok(*i as f64),
        other => Err(Error::contract(format!("{key}: expected number, got {other:?}"))),
    }
}

pub fn get_cat<'a>(a: &'a Assignment, key: &str) -> Result<&'a str> {
    match lookup(a, key)? {
        ParamValue::Cat(c) => Ok(c),
        other => Err(Error::contract(format!("{key}: expected category, got {other:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Failed,
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub assignment: Assignment,
    pub val_rate: Option<f64>,
    pub latency_us: Option<f64>,
    pub status: TrialStatus,
}

impl TrialRecord {
    /// Ranking score; failed and pruned trials count as −∞.
    pub fn score(&self) -> f64 {
        match (self.status, self.val_rate) {
            (TrialStatus::Complete, Some(v)) => v,
            _ => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub n_startup: usize,
    pub gamma: f64,
    pub n_candidates: usize,
    pub budget: usize,
    pub seed: u64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig { n_startup: 10, gamma: 0.25, n_candidates: 24, budget: 50, seed: 0 }
    }
}

impl TpeConfig {
    pub fn with_budget(budget: usize, seed: u64) -> Self {
        TpeConfig { budget, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::contract("search budget must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::contract("gamma must lie in (0, 1)"));
        }
        if self.n_candidates == 0 {
            return Err(Error::contract("n_candidates must be positive"));
        }
        Ok(())
    }
}

/// Bandwidth floor as a fraction of the continuous range.
const BANDWIDTH_FLOOR: f64 = 0.01;
const CATEGORICAL_PSEUDO_COUNT: f64 = 1.0;

/// Per-trial generator, independent of how many draws earlier trials made.
fn trial_rng(seed: u64, trial_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial_id as u64);
    rng
}

fn sample_prior(space: &SearchSpace, rng: &mut ChaCha8Rng) -> Assignment {
    space
        .dims
        .iter()
        .map(|d| {
            let x = match &d.domain {
                Domain::Categorical { choices } => rng.random_range(0..choices.len()) as f64,
                Domain::Int { lo, hi } => rng.random_range(*lo as f64 - 0.5..*hi as f64 + 0.5),
                other => {
                    let (lo, hi) = other.continuous_bounds().unwrap();
                    rng.random_range(lo..hi)
                }
            };
            (d.name.clone(), d.domain.decode(x))
        })
        .collect()
}

/// One-dimensional Parzen estimator over the internal representation.
enum Parzen {
    Continuous { centers: Vec<f64>, bandwidth: f64, lo: f64, hi: f64 },
    Categorical { probs: Vec<f64> },
}

impl Parzen {
    /// Continuous bandwidth: Scott's normal-reference rule `1.06·s·n^(−1/5)` with
    /// `s = min(sd, scaled MAD)`, floored at 1% of the range. Categorical
    /// frequencies get a pseudo-count of 1 per choice.
    fn fit(domain: &Domain, xs: &[f64]) -> Self {
        if let Domain::Categorical { choices } = domain {
            let n = choices.len();
            let mut counts = vec![CATEGORICAL_PSEUDO_COUNT; n];
            for &x in xs {
                counts[x as usize] += 1.0;
            }
            let total: f64 = counts.iter().sum();
            return Parzen::Categorical { probs: counts.into_iter().map(|c| c / total).collect() };
        }
        let (lo, hi) = domain.continuous_bounds().unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let scale = match robust_scale(xs) {
            Some(mad) if mad > 0.0 => sd.min(mad),
            _ => sd,
        };
        let scott = 1.06 * scale * n.powf(-0.2);
        Parzen::Continuous {
            centers: xs.to_vec(),
            bandwidth: scott.max(BANDWIDTH_FLOOR * (hi - lo)),
            lo,
            hi,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Parzen::Categorical { probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i as f64;
                    }
                }
                (probs.len() - 1) as f64
            }
            Parzen::Continuous { centers, bandwidth, lo, hi } => {
                let c = centers[rng.random_range(0..centers.len())];
                for _ in 0..100 {
                    let z: f64 = StandardNormal.sample(rng);
                    let x = c + bandwidth * z;
                    if (*lo..=*hi).contains(&x) {
                        return x;
                    }
                }
                c.clamp(*lo, *hi)
            }
        }
    }

    fn log_density(&self, x: f64) -> f64 {
        match self {
            Parzen::Categorical { probs } => probs[x as usize].ln(),
            Parzen::Continuous { centers, bandwidth, lo, hi } => {
                let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                let dens: f64 = centers
                    .iter()
                    .map(|&c| {
                        let mass = normal_cdf((hi - c) / bandwidth) - normal_cdf((lo - c) / bandwidth);
                        let z = (x - c) / bandwidth;
                        inv_sqrt_2pi * (-0.5 * z * z).exp() / (bandwidth * mass.max(1e-300))
                    })
                    .sum::<f64>()
                    / centers.len() as f64;
                dens.max(1e-300).ln()
            }
        }
    }
}

/// Normal-consistent median absolute deviation, `None` below two points.
fn robust_scale(xs: &[f64]) -> Option<f64> {
    fn median(v: &mut [f64]) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        0.5 * (v[(n - 1) / 2] + v[n / 2])
    }
    if xs.len() < 2 {
        return None;
    }
    let mut v = xs.to_vec();
    let med = median(&mut v);
    let mut dev: Vec<f64> = xs.iter().map(|x| (x - med).abs()).collect();
    Some(1.4826 * median(&mut dev))
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Next assignment for trial number `history.len()`.
pub fn suggest(history: &[TrialRecord], space: &SearchSpace, cfg: &TpeConfig) -> Result<Assignment> {
    space.validate()?;
    cfg.validate()?;
    let mut rng = trial_rng(cfg.seed, history.len());
    let n_complete = history.iter().filter(|t| t.status == TrialStatus::Complete).count();
    if n_complete < cfg.n_startup {
        return Ok(sample_prior(space, &mut rng));
    }

    let mut ranked: Vec<&TrialRecord> = history.iter().filter(|t| space.contains(&t.assignment)).collect();
    ranked.sort_by(|a, b| b.score().total_cmp(&a.score()).then(a.trial_id.cmp(&b.trial_id)));
    let n_good = ((cfg.gamma * ranked.len() as f64).ceil() as usize)
        .min(ranked.iter().filter(|t| t.score().is_finite()).count());
    let (good, bad) = ranked.split_at(n_good);
    if good.is_empty() || bad.is_empty() {
        return Ok(sample_prior(space, &mut rng));
    }

    let models: Vec<(Parzen, Parzen)> = space
        .dims
        .iter()
        .map(|d| {
            let xs = |set: &[&TrialRecord]| -> Vec<f64> {
                set.iter().filter_map(|t| d.domain.encode(&t.assignment[&d.name])).collect()
            };
            (Parzen::fit(&d.domain, &xs(good)), Parzen::fit(&d.domain, &xs(bad)))
        })
        .collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..cfg.n_candidates {
        let x: Vec<f64> = models.iter().map(|(l, _)| l.sample(&mut rng)).collect();
        let score: f64 = models
            .iter()
            .zip(&x)
            .map(|((l, g), &xi)| l.log_density(xi) - g.log_density(xi))
            .sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, x));
        }
    }
    let (_, x) = best.unwrap();
    Ok(space
        .dims
        .iter()
        .zip(x)
        .map(|(d, xi)| (d.name.clone(), d.domain.decode(xi)))
        .collect())
}

/// What a trial evaluation reports back to the search loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub val_rate: f64,
    pub latency_us: Option<f64>,
}

fn read_history(path: &Path) -> Result<Vec<TrialRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord = serde_json::from_str(&line)?;
        if rec.trial_id != out.len() {
            return Err(Error::Format(format!(
                "history line {}: trial_id {} out of sequence",
                i + 1,
                rec.trial_id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Best complete trial: highest `val_rate`, ties to the lower `trial_id`.
pub fn best_trial(history: &[TrialRecord]) -> Option<&TrialRecord> {
    history
        .iter()
        .filter(|t| t.status == TrialStatus::Complete)
        .fold(None, |best: Option<&TrialRecord>, t| match best {
            Some(b) if b.score() >= t.score() => Some(b),
            _ => Some(t),
        })
}

/// Runs `cfg.budget` trials sequentially. With `history_path`, previously recorded
/// trials are loaded first and every new record is appended as one JSON line.
pub fn run_search<F>(
    space: &SearchSpace,
    cfg: &TpeConfig,
    mut evaluate: F,
    latency_limit_us: Option<f64>,
    history_path: Option<&Path>,
) -> Result<(TrialRecord, Vec<TrialRecord>)>
where
    F: FnMut(&Assignment, usize) -> Result<TrialOutcome>,
{
    space.validate()?;
    cfg.validate()?;
    let mut history = match history_path {
        Some(p) => read_history(p)?,
        None => Vec::new(),
    };
    if history.len() > cfg.budget {
        return Err(Error::contract(format!(
            "history holds {} trials, budget is {}",
            history.len(),
            cfg.budget
        )));
    }
    let mut sink = match history_path {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };

    while history.len() < cfg.budget {
        let trial_id = history.len();
        let assignment = suggest(&history, space, cfg)?;
        let record = match evaluate(&assignment, trial_id) {
            Ok(out) if !out.val_rate.is_finite() => {
                log::warn!("trial {trial_id}: non-finite validation rate");
                TrialRecord { trial_id, assignment, val_rate: None, latency_us: out.latency_us, status: TrialStatus::Failed }
            }
            Ok(out) => {
                let pruned = matches!((latency_limit_us, out.latency_us), (Some(lim), Some(l)) if l > lim);
                TrialRecord {
                    trial_id,
                    assignment,
                    val_rate: (!pruned).then_some(out.val_rate),
                    latency_us: out.latency_us,
                    status: if pruned { TrialStatus::Pruned } else { TrialStatus::Complete },
                }
            }
            Err(e) => {
                log::warn!("trial {trial_id} failed: {e}");
                TrialRecord { trial_id, assignment, val_rate: None, latency_us: None, status: TrialStatus::Failed }
            }
        };
        log::info!("trial {trial_id}: {:?} val_rate={:?}", record.status, record.val_rate);
        if let Some(f) = sink.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
            f.flush()?;
        }
        history.push(record);
    }

    match best_trial(&history) {
        Some(best) => Ok((best.clone(), history)),
        None => Err(Error::SearchFailed { history }),
    }
}

/// Anything that maps a channel to a beamformer in one forward pass.
pub trait Beamformer: Sync {
    fn beamform(&self, h: &ChannelMatrix) -> Result<BeamformingMatrix>;
}

impl Beamformer for UnrolledModel {
    fn beamform(&self, h: &ChannelMatrix) -> Result<BeamformingMatrix> {
        UnrolledModel::beamform(self, h)
    }
}

pub const LATENCY_WARMUP: usize = 32;
pub const LATENCY_TIMED_CALLS: usize = 256;

/// Median single-channel forward time in microseconds.
pub fn measure_latency<B: Beamformer + ?Sized>(model: &B, channels: &[ChannelMatrix]) -> Result<f64> {
    if channels.len() < LATENCY_WARMUP {
        return Err(Error::contract(format!(
            "latency measurement needs at least {LATENCY_WARMUP} channels, got {}",
            channels.len()
        )));
    }
    for h in channels.iter().take(LATENCY_WARMUP) {
        std::hint::black_box(model.beamform(h)?);
    }
    let mut times = Vec::with_capacity(LATENCY_TIMED_CALLS);
    for h in channels.iter().cycle().take(LATENCY_TIMED_CALLS) {
        let t = Instant::now();
        std::hint::black_box(model.beamform(std::hint::black_box(h))?);
        times.push(t.elapsed().as_secs_f64() * 1e6);
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    Ok(0.5 * (times[(n - 1) / 2] + times[n / 2]))
}
