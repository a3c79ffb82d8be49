//! Unrolled projected-gradient network.
//!
//! Layer `ℓ` maps `W ← Π(W + η_ℓ · T_ℓ · D(W))`, where `D` is the sum-rate
//! ascent direction, `Π` the power-ball projection and `T_ℓ` either the
//! identity (standard layers) or a learned `M×M` complex matrix (hybrid
//! layers). The input is the zero-forcing beamformer, so the output is
//! power-feasible for any parameter values.
//!
//! Parameter gradients are available two ways: central finite differences
//! over the flat parameter vector, and an adjoint (reverse-mode) pass that
//! differentiates through the projection and uses the exact Hessian–vector
//! product of the sum-rate. The two are checked against each other in tests.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelMatrix, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{CMat, C64};
use crate::objective::{project, rate_unchecked, BeamformingMatrix, RateTerms, SystemParams};
use crate::optim::{fit, TrainConfig, TrainTrace};
use crate::solvers::zero_forcing;

pub use crate::optim::{scheduler_lr, OptimizerKind, SchedulerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerType {
    Standard,
    Hybrid,
}

impl std::str::FromStr for LayerType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(LayerType::Standard),
            "hybrid" => Ok(LayerType::Hybrid),
            other => Err(Error::contract(format!("unknown layer type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Learned step size; may turn negative during training.
    pub eta: f64,
    /// Gradient transformation of hybrid layers, initialized to the identity.
    pub g_transform: Option<CMat>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub train_size: usize,
    pub hpo_trial_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledModel {
    pub layers: Vec<LayerParams>,
    pub layer_type: LayerType,
    pub sys: SystemParams,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct ForwardDiagnostics {
    /// `L + 1` iterates, index 0 is the zero-forcing input.
    pub per_layer_w: Vec<BeamformingMatrix>,
    pub per_layer_rate: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMethod {
    FiniteDifference,
    #[default]
    Adjoint,
}

/// Central-difference step over parameters.
pub const FD_PARAM_STEP: f64 = 1e-5;

impl UnrolledModel {
    /// `depth` layers, every step size set to `eta0`.
    pub fn new(sys: SystemParams, layer_type: LayerType, depth: usize, eta0: f64) -> Result<Self> {
        sys.validate()?;
        if depth == 0 {
            return Err(Error::contract("unrolled model needs at least one layer"));
        }
        if !eta0.is_finite() {
            return Err(Error::contract("initial step size must be finite"));
        }
        let m = sys.m_antennas;
        let layers = (0..depth)
            .map(|_| LayerParams {
                eta: eta0,
                g_transform: (layer_type == LayerType::Hybrid).then(|| CMat::identity(m)),
            })
            .collect();
        Ok(UnrolledModel {
            layers,
            layer_type,
            sys,
            provenance: Provenance::default(),
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn etas(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.eta).collect()
    }

    /// Number of real scalars: `L` (standard) or `L·(1 + 2M²)` (hybrid).
    pub fn param_count(&self) -> usize {
        match self.layer_type {
            LayerType::Standard => self.depth(),
            LayerType::Hybrid => self.depth() * (1 + 2 * self.sys.m_antennas.pow(2)),
        }
    }

    /// Flat parameters: per layer `η`, then (hybrid) `Re(G)` and `Im(G)` row-major.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.push(layer.eta);
            if let Some(g) = &layer.g_transform {
                out.extend(g.as_slice().iter().map(|z| z.re));
                out.extend(g.as_slice().iter().map(|z| z.im));
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            layer.eta = it.next().unwrap();
            if let Some(g) = &mut layer.g_transform {
                let n = g.as_slice().len();
                let re: Vec<f64> = it.by_ref().take(n).collect();
                let im: Vec<f64> = it.by_ref().take(n).collect();
                for (z, (r, i)) in g.as_mut_slice().iter_mut().zip(re.into_iter().zip(im)) {
                    *z = C64::new(r, i);
                }
            }
        }
        Ok(())
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    /// Runs all layers from a given initial iterate.
    fn run_layers(&self, h: &CMat, w0: CMat, mut on_iterate: impl FnMut(&CMat)) -> CMat {
        let mut w = w0;
        on_iterate(&w);
        for layer in &self.layers {
            let dir = RateTerms::new(h, &w, self.sys.noise_var).gradient(h);
            let dir = match &layer.g_transform {
                Some(g) => g.mul(&dir),
                None => dir,
            };
            w = project(&w.add_scaled(layer.eta, &dir), self.sys.p_max);
            on_iterate(&w);
        }
        w
    }

    pub fn forward(
        &self,
        h: &ChannelMatrix,
        diagnostics: bool,
    ) -> Result<(BeamformingMatrix, Option<ForwardDiagnostics>)> {
        let w0 = zero_forcing(h, &self.sys)?.into_matrix();
        let hm = h.matrix();
        if !diagnostics {
            return Ok((BeamformingMatrix(self.run_layers(hm, w0, |_| {})), None));
        }
        let mut per_layer_w = Vec::with_capacity(self.depth() + 1);
        let mut per_layer_rate = Vec::with_capacity(self.depth() + 1);
        let w = self.run_layers(hm, w0, |w| {
            per_layer_rate.push(rate_unchecked(hm, w, self.sys.noise_var));
            per_layer_w.push(BeamformingMatrix(w.clone()));
        });
        Ok((
            BeamformingMatrix(w),
            Some(ForwardDiagnostics {
                per_layer_w,
                per_layer_rate,
            }),
        ))
    }

    pub fn beamform(&self, h: &ChannelMatrix) -> Result<BeamformingMatrix> {
        Ok(self.forward(h, false)?.0)
    }

    /// Sum-rate of one channel from a precomputed zero-forcing input.
    fn rate_from(&self, h: &CMat, w0: &CMat) -> f64 {
        let w = self.run_layers(h, w0.clone(), |_| {});
        rate_unchecked(h, &w, self.sys.noise_var)
    }

    /// Per-sample loss `−R(W_L)` and its parameter gradient via the adjoint pass.
    fn adjoint_sample(&self, h: &CMat, w0: &CMat) -> (f64, Vec<f64>) {
        struct Tape {
            terms: RateTerms,
            dir: CMat,
            step_dir: CMat,
            z: CMat,
            z_norm: f64,
        }
        let p_max = self.sys.p_max;
        let radius = p_max.sqrt();
        let mut tapes = Vec::with_capacity(self.depth());
        let mut w = w0.clone();
        for layer in &self.layers {
            let terms = RateTerms::new(h, &w, self.sys.noise_var);
            let dir = terms.gradient(h);
            let step_dir = match &layer.g_transform {
                Some(g) => g.mul(&dir),
                None => dir.clone(),
            };
            let z = w.add_scaled(layer.eta, &step_dir);
            let z_norm = z.frobenius_norm();
            w = project(&z, p_max);
            tapes.push(Tape {
                terms,
                dir,
                step_dir,
                z,
                z_norm,
            });
        }
        let final_terms = RateTerms::new(h, &w, self.sys.noise_var);
        let loss = -final_terms.sum_rate();
        let mut w_bar = final_terms.gradient(h).scale(-1.0);

        let per_layer = self.param_count() / self.depth();
        let mut grad = vec![0.0; self.param_count()];
        for (l, (layer, tape)) in self.layers.iter().zip(&tapes).enumerate().rev() {
            let z_bar = if tape.z_norm > radius {
                let radial = tape.z.real_inner(&w_bar) / (tape.z_norm * tape.z_norm);
                w_bar.add_scaled(-radial, &tape.z).scale(radius / tape.z_norm)
            } else {
                w_bar
            };
            let base = l * per_layer;
            grad[base] = z_bar.real_inner(&tape.step_dir);
            let s_bar = match &layer.g_transform {
                Some(g) => {
                    let g_bar = z_bar.mul(&tape.dir.hermitian()).scale(layer.eta);
                    let n = g_bar.as_slice().len();
                    for (i, z) in g_bar.as_slice().iter().enumerate() {
                        grad[base + 1 + i] = z.re;
                        grad[base + 1 + n + i] = z.im;
                    }
                    g.hermitian_mul(&z_bar).scale(layer.eta)
                }
                None => z_bar.scale(layer.eta),
            };
            w_bar = z_bar.add_scaled(1.0, &tape.terms.hessian_apply(h, &s_bar));
        }
        (loss, grad)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&ModelFile::from(self))?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        file.try_into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<ModelFile>(s)?.try_into()
    }
}

/// Zero-forcing inputs for a batch of channels, paired with the channel matrices.
fn zf_inputs(channels: &[ChannelMatrix], sys: &SystemParams) -> Result<Vec<(CMat, CMat)>> {
    channels
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            zero_forcing(h, sys)
                .map(|w| (h.matrix().clone(), w.into_matrix()))
                .map_err(|e| e.context(format!("channel {i}")))
        })
        .collect()
}

fn batch_loss(model: &UnrolledModel, batch: &[(CMat, CMat)]) -> f64 {
    let rates: Vec<f64> = batch.par_iter().map(|(h, w0)| model.rate_from(h, w0)).collect();
    -rates.iter().sum::<f64>()
}

fn batch_loss_grad(
    model: &UnrolledModel,
    batch: &[(CMat, CMat)],
    method: GradMethod,
) -> Result<(f64, Vec<f64>)> {
    match method {
        GradMethod::Adjoint => {
            let per_sample: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|(h, w0)| model.adjoint_sample(h, w0))
                .collect();
            let mut loss = 0.0;
            let mut grad = vec![0.0; model.param_count()];
            for (l, g) in per_sample {
                loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            Ok((loss, grad))
        }
        GradMethod::FiniteDifference => {
            let base = model.params();
            let mut grad = Vec::with_capacity(base.len());
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] = base[i] + FD_PARAM_STEP;
                let plus = batch_loss(&model.with_params(&p)?, batch);
                p[i] = base[i] - FD_PARAM_STEP;
                let minus = batch_loss(&model.with_params(&p)?, batch);
                grad.push((plus - minus) / (2.0 * FD_PARAM_STEP));
            }
            Ok((batch_loss(model, batch), grad))
        }
    }
}

/// Gradient of the batch sum-loss `−Σᵢ R(hᵢ, forward(hᵢ))` with respect to [`UnrolledModel::params`].
pub fn param_grad(model: &UnrolledModel, batch: &[ChannelMatrix], method: GradMethod) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let inputs = zf_inputs(batch, &model.sys)?;
    Ok(batch_loss_grad(model, &inputs, method)?.1)
}

/// Batch sum-loss of a model.
pub fn sum_loss(model: &UnrolledModel, batch: &[ChannelMatrix]) -> Result<f64> {
    let inputs = zf_inputs(batch, &model.sys)?;
    Ok(batch_loss(model, &inputs))
}

/// Mean sum-rate of the model over a channel set.
pub fn mean_rate(model: &UnrolledModel, channels: &[ChannelMatrix]) -> Result<f64> {
    if channels.is_empty() {
        return Err(Error::contract("empty channel set"));
    }
    Ok(-sum_loss(model, channels)? / channels.len() as f64)
}

/// Trains step sizes (and hybrid transforms) on the sum-loss, keeping the best-validation snapshot.
pub fn train(
    model: &UnrolledModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    method: GradMethod,
) -> Result<(UnrolledModel, TrainTrace)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract("training and validation sets must be non-empty"));
    }
    let train_inputs = zf_inputs(&train_set.channels, &model.sys)?;
    let val_inputs = zf_inputs(&val_set.channels, &model.sys)?;
    let n_val = val_inputs.len() as f64;
    let template = model.clone();
    let is_hybrid = model.layer_type == LayerType::Hybrid;
    let per_layer = model.param_count() / model.depth();

    let (best, trace) = fit(
        model.params(),
        cfg,
        train_inputs.len(),
        |p, range| {
            let m = template.with_params(p)?;
            batch_loss_grad(&m, &train_inputs[range], method)
        },
        |p| match template.with_params(p) {
            Ok(m) => -batch_loss(&m, &val_inputs) / n_val,
            Err(_) => f64::NAN,
        },
        |p| {
            if is_hybrid {
                p.iter().step_by(per_layer).copied().collect()
            } else {
                p.to_vec()
            }
        },
    )?;
    let mut trained = template.with_params(&best)?;
    trained.provenance.seed = seed;
    trained.provenance.train_size = train_set.len() + val_set.len();
    Ok((trained, trace))
}

type RowsRe = Vec<Vec<[f64; 2]>>;

/// On-disk JSON layout of a model.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    layer_type: LayerType,
    #[serde(rename = "L")]
    depth: usize,
    eta: Vec<f64>,
    #[serde(default)]
    g_transform: Option<Vec<RowsRe>>,
    sys: SystemParams,
    #[serde(default)]
    provenance: Provenance,
}

impl From<&UnrolledModel> for ModelFile {
    fn from(m: &UnrolledModel) -> Self {
        let g_transform = (m.layer_type == LayerType::Hybrid).then(|| {
            m.layers
                .iter()
                .map(|l| {
                    l.g_transform
                        .as_ref()
                        .map(|g| {
                            g.to_rows()
                                .into_iter()
                                .map(|row| row.into_iter().map(|(a, b)| [a, b]).collect())
                                .collect()
                        })
                        .unwrap_or_default()
                })
                .collect()
        });
        ModelFile {
            layer_type: m.layer_type,
            depth: m.depth(),
            eta: m.etas(),
            g_transform,
            sys: m.sys,
            provenance: m.provenance.clone(),
        }
    }
}

impl TryFrom<ModelFile> for UnrolledModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        f.sys.validate()?;
        if f.eta.len() != f.depth || f.depth == 0 {
            return Err(Error::Format(format!(
                "model declares L={} but has {} step sizes",
                f.depth,
                f.eta.len()
            )));
        }
        let m = f.sys.m_antennas;
        let transforms: Vec<Option<CMat>> = match (f.layer_type, f.g_transform) {
            (LayerType::Standard, None) => vec![None; f.depth],
            (LayerType::Standard, Some(_)) => {
                return Err(Error::Format("standard model carries g_transform".into()))
            }
            (LayerType::Hybrid, None) => {
                return Err(Error::Format("hybrid model is missing g_transform".into()))
            }
            (LayerType::Hybrid, Some(gs)) => {
                if gs.len() != f.depth {
                    return Err(Error::Format("one g_transform per layer expected".into()));
                }
                gs.into_iter()
                    .map(|rows| {
                        let rows: Vec<Vec<(f64, f64)>> = rows
                            .into_iter()
                            .map(|r| r.into_iter().map(|[a, b]| (a, b)).collect())
                            .collect();
                        let g = CMat::from_rows(&rows)?;
                        if g.shape() != (m, m) || !g.is_finite() {
                            return Err(Error::Format(format!(
                                "g_transform must be a finite {m}x{m} matrix"
                            )));
                        }
                        Ok(Some(g))
                    })
                    .collect::<Result<_>>()?
            }
        };
        if f.eta.iter().any(|e| !e.is_finite()) {
            return Err(Error::Format("non-finite step size".into()));
        }
        Ok(UnrolledModel {
            layers: f
                .eta
                .into_iter()
                .zip(transforms)
                .map(|(eta, g_transform)| LayerParams { eta, g_transform })
                .collect(),
            layer_type: f.layer_type,
            sys: f.sys,
            provenance: f.provenance,
        })
    }
}
