//! Shared training machinery: optimizers, learning-rate schedules and the
//! full-batch / sequential-minibatch fitting loop with best-validation
//! snapshotting and early stopping.

use std::f64::consts::PI;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Cosine,
    Step,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::contract(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(SchedulerKind::Cosine),
            "step" => Ok(SchedulerKind::Step),
            other => Err(Error::contract(format!("unknown scheduler {other:?}"))),
        }
    }
}

/// Epochs between halvings of the step schedule.
pub const STEP_SCHEDULE_PERIOD: usize = 50;
/// Training sets up to this size are fitted full-batch.
pub const FULL_BATCH_LIMIT: usize = 1000;
pub const MINIBATCH_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub scheduler: SchedulerKind,
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
}

impl TrainConfig {
    /// Defaults: lr 1e-3 (adam) or 1e-2 (sgd), 200 epochs, patience 20,
    /// full batch up to 1000 training samples and 256 above.
    pub fn new(optimizer: OptimizerKind, scheduler: SchedulerKind, n_train: usize) -> Self {
        let base_lr = match optimizer {
            OptimizerKind::Adam => 1e-3,
            OptimizerKind::Sgd => 1e-2,
        };
        TrainConfig {
            optimizer,
            scheduler,
            base_lr,
            epochs: 200,
            batch_size: if n_train <= FULL_BATCH_LIMIT {
                n_train.max(1)
            } else {
                MINIBATCH_SIZE
            },
            early_stop_patience: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::contract(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate at `epoch` (0-based).
pub fn scheduler_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.scheduler {
        SchedulerKind::Cosine => {
            cfg.base_lr * 0.5 * (1.0 + (PI * epoch as f64 / cfg.epochs as f64).cos())
        }
        SchedulerKind::Step => {
            cfg.base_lr * 0.5f64.powi((epoch / STEP_SCHEDULE_PERIOD) as i32)
        }
    }
}

/// Minimizing first-order optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
                t: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - BETA1.powi(*t);
                let c2 = 1.0 - BETA2.powi(*t);
                for i in 0..params.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sum-loss over the training set, accumulated over the epoch's batches.
    pub train_loss: f64,
    /// Mean validation sum-rate after the epoch's updates.
    pub val_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub initial_val_rate: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; `None` means the initial parameters.
    pub best_epoch: Option<usize>,
    pub best_val_rate: f64,
    pub stopped_early: bool,
}

/// Runs the training loop and returns the best-validation snapshot.
///
/// `loss_grad(params, range)` returns the batch sum-loss and its gradient for
/// the training samples in `range`; `validate(params)` returns the mean
/// validation sum-rate (higher is better). `describe` extracts the parameters
/// worth reporting when the loss turns non-finite.
pub fn fit<L, V, D>(
    mut params: Vec<f64>,
    cfg: &TrainConfig,
    n_train: usize,
    mut loss_grad: L,
    mut validate: V,
    describe: D,
) -> Result<(Vec<f64>, TrainTrace)>
where
    L: FnMut(&[f64], Range<usize>) -> Result<(f64, Vec<f64>)>,
    V: FnMut(&[f64]) -> f64,
    D: Fn(&[f64]) -> Vec<f64>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::contract("training set is empty"));
    }
    let mut opt = Optimizer::new(cfg.optimizer, params.len());
    let initial_val_rate = validate(&params);
    if !initial_val_rate.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            params: describe(&params),
        });
    }
    let mut trace = TrainTrace {
        initial_val_rate,
        best_val_rate: initial_val_rate,
        ..Default::default()
    };
    let mut best = params.clone();
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        let lr = scheduler_lr(cfg, epoch);
        let mut train_loss = 0.0;
        let mut start = 0;
        while start < n_train {
            let end = (start + cfg.batch_size).min(n_train);
            let (loss, grad) = loss_grad(&params, start..end)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    params: describe(&params),
                });
            }
            train_loss += loss;
            opt.step(&mut params, &grad, lr);
            start = end;
        }
        let val_rate = validate(&params);
        if !val_rate.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                params: describe(&params),
            });
        }
        trace.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_rate,
        });
        if val_rate > trace.best_val_rate {
            trace.best_val_rate = val_rate;
            trace.best_epoch = Some(epoch);
            best.clone_from(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                trace.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(scheduler: SchedulerKind) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            scheduler,
            base_lr: 0.1,
            epochs: 200,
            batch_size: 10,
            early_stop_patience: 20,
        }
    }

    #[test]
    fn cosine_schedule() {
        let c = cfg(SchedulerKind::Cosine);
        assert_eq!(scheduler_lr(&c, 0), 0.1);
        let last = scheduler_lr(&c, 199);
        let expected = 0.1 * 0.5 * (1.0 + (PI * 199.0 / 200.0).cos());
        assert!((last - expected).abs() < 1e-18);
        assert!(last < 1e-5);
    }

    #[test]
    fn step_schedule() {
        let c = cfg(SchedulerKind::Step);
        assert_eq!(scheduler_lr(&c, 0), 0.1);
        assert_eq!(scheduler_lr(&c, 49), 0.1);
        assert_eq!(scheduler_lr(&c, 50), 0.05);
        assert_eq!(scheduler_lr(&c, 149), 0.025);
    }

    #[test]
    fn defaults_follow_training_size() {
        let small = TrainConfig::new(OptimizerKind::Adam, SchedulerKind::Cosine, 900);
        assert_eq!(small.batch_size, 900);
        assert_eq!(small.base_lr, 1e-3);
        let big = TrainConfig::new(OptimizerKind::Sgd, SchedulerKind::Step, 9000);
        assert_eq!(big.batch_size, 256);
        assert_eq!(big.base_lr, 1e-2);
        assert_eq!((big.epochs, big.early_stop_patience), (200, 20));
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut p = vec![1.0, -2.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 2);
        opt.step(&mut p, &[3.0, -0.5], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn fit_minimizes_quadratic_and_keeps_best() {
        // loss = Σ_i (x - i)² over i in the batch; minimum at the mean index.
        let c = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            scheduler: SchedulerKind::Step,
            base_lr: 0.1,
            epochs: 300,
            batch_size: 4,
            early_stop_patience: 0,
        };
        let (best, trace) = fit(
            vec![10.0],
            &c,
            4,
            |p, r| {
                let loss = r.clone().map(|i| (p[0] - i as f64).powi(2)).sum();
                let g = r.map(|i| 2.0 * (p[0] - i as f64)).sum();
                Ok((loss, vec![g]))
            },
            |p| -(p[0] - 1.5).powi(2),
            |p| p.to_vec(),
        )
        .unwrap();
        assert!((best[0] - 1.5).abs() < 1e-6);
        assert!(trace.best_val_rate >= trace.initial_val_rate);
        assert_eq!(trace.epochs.len(), 300);
    }

    #[test]
    fn fit_reports_non_finite_loss() {
        let c = cfg(SchedulerKind::Cosine);
        let err = fit(
            vec![0.5],
            &c,
            3,
            |_, _| Ok((f64::NAN, vec![0.0])),
            |_| 0.0,
            |p| p.to_vec(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, ref params } if params == &vec![0.5]));
    }

    #[test]
    fn early_stopping_triggers() {
        let mut c = cfg(SchedulerKind::Cosine);
        c.early_stop_patience = 5;
        let (_, trace) = fit(vec![0.0], &c, 1, |_, _| Ok((0.0, vec![0.0])), |_| 1.0, |p| p.to_vec()).unwrap();
        assert!(trace.stopped_early);
        assert_eq!(trace.epochs.len(), 5);
        assert_eq!(trace.best_epoch, None);
    }
}
