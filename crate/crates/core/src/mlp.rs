//! Fully-connected baseline mapping `[Re(H), Im(H)]` to a beamforming matrix.
//!
//! The output vector of length `2MK` holds `Re(W)` in its first `MK` entries and
//! `Im(W)` in the rest, both row-major `M×K`. It is projected onto the power ball,
//! and training backpropagates through that projection exactly.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelMatrix, Dataset};
use crate::error::{Error, Result};
use crate::hpo::Beamformer;
use crate::numerics::{CMat, C64};
use crate::objective::{project, BeamformingMatrix, RateTerms, SystemParams};
use crate::optim::{fit, TrainConfig, TrainTrace};
use crate::unrolled::Provenance;

pub const DEFAULT_HIDDEN: [usize; 3] = [256, 256, 256];
pub const HIDDEN_WIDTH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layer_dims: Vec<usize>,
    /// `weights[l]` has shape `(layer_dims[l+1], layer_dims[l])`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub activation: Activation,
    pub sys: SystemParams,
    pub provenance: Provenance,
}

impl MlpModel {
    /// He-initialized network with the given hidden widths, zero biases.
    pub fn new(sys: SystemParams, hidden: &[usize], seed: u64) -> Result<Self> {
        sys.validate()?;
        if hidden.contains(&0) {
            return Err(Error::contract("hidden layers must have positive width"));
        }
        let km = sys.k_users * sys.m_antennas;
        let mut layer_dims = vec![2 * km];
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(2 * km);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (weights, biases) = layer_dims
            .windows(2)
            .map(|d| {
                let normal = Normal::new(0.0, (2.0 / d[0] as f64).sqrt()).unwrap();
                let w = Array2::from_shape_simple_fn((d[1], d[0]), || normal.sample(&mut rng));
                (w, Array1::zeros(d[1]))
            })
            .unzip();
        Ok(MlpModel {
            layer_dims,
            weights,
            biases,
            activation: Activation::Relu,
            sys,
            provenance: Provenance { seed, ..Provenance::default() },
        })
    }

    /// Default baseline: three hidden layers of 256 units.
    pub fn baseline(sys: SystemParams, seed: u64) -> Result<Self> {
        Self::new(sys, &DEFAULT_HIDDEN, seed)
    }

    /// `depth` counts neuron layers including input and output, so `depth − 2` hidden layers.
    pub fn with_depth(sys: SystemParams, depth: usize, seed: u64) -> Result<Self> {
        if depth < 3 {
            return Err(Error::contract(format!("MLP depth must be at least 3, got {depth}")));
        }
        Self::new(sys, &vec![HIDDEN_WIDTH; depth - 2], seed)
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|d| d[1] * (d[0] + 1)).sum()
    }

    /// Flat parameters: per layer, weights row-major then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
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
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for x in w.iter_mut().chain(b.iter_mut()) {
                *x = params[off];
                off += 1;
            }
        }
        Ok(())
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    fn check_dims(&self) -> Result<()> {
        let km = self.sys.k_users * self.sys.m_antennas;
        let n = self.layer_dims.len();
        let ok = n >= 2
            && self.layer_dims[0] == 2 * km
            && self.layer_dims[n - 1] == 2 * km
            && self.weights.len() == n - 1
            && self.biases.len() == n - 1
            && self.layer_dims.windows(2).zip(&self.weights).zip(&self.biases).all(|((d, w), b)| {
                w.dim() == (d[1], d[0]) && b.len() == d[1]
            });
        if !ok {
            return Err(Error::Format("MLP layer shapes inconsistent with layer_dims".into()));
        }
        if self.params().iter().any(|x| !x.is_finite()) {
            return Err(Error::Format("non-finite MLP parameter".into()));
        }
        Ok(())
    }

    /// Layer activations for a batch of feature rows; index 0 is the input.
    fn activations(&self, x: Array2<f64>) -> Vec<Array2<f64>> {
        let last = self.weights.len() - 1;
        let mut acts = vec![x];
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(&w.t()) + b;
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    fn output_matrix(&self, row: ndarray::ArrayView1<f64>) -> CMat {
        let (m, k) = (self.sys.m_antennas, self.sys.k_users);
        let mk = m * k;
        CMat::from_fn(m, k, |i, j| C64::new(row[i * k + j], row[mk + i * k + j]))
    }

    pub fn forward(&self, h: &ChannelMatrix) -> Result<BeamformingMatrix> {
        self.sys.check_channel(h)?;
        let x = Array2::from_shape_vec((1, self.layer_dims[0]), h.features())
            .map_err(|e| Error::contract(e.to_string()))?;
        let acts = self.activations(x);
        let z = self.output_matrix(acts.last().unwrap().row(0));
        Ok(BeamformingMatrix(project(&z, self.sys.p_max)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MlpFile {
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            weights: self.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
            sys: self.sys,
            provenance: self.provenance.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: MlpFile = serde_json::from_str(s)?;
        f.sys.validate()?;
        if f.layer_dims.len() < 2 || f.weights.len() + 1 != f.layer_dims.len() || f.biases.len() != f.weights.len() {
            return Err(Error::Format("MLP file layer counts disagree".into()));
        }
        let weights = f
            .layer_dims
            .windows(2)
            .zip(f.weights)
            .map(|(d, w)| {
                Array2::from_shape_vec((d[1], d[0]), w).map_err(|e| Error::Format(format!("weights: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let model = MlpModel {
            layer_dims: f.layer_dims,
            weights,
            biases: f.biases.into_iter().map(Array1::from).collect(),
            activation: f.activation,
            sys: f.sys,
            provenance: f.provenance,
        };
        model.check_dims()?;
        Ok(model)
    }
}

impl Beamformer for MlpModel {
    fn beamform(&self, h: &ChannelMatrix) -> Result<BeamformingMatrix> {
        self.forward(h)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MlpFile {
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    sys: SystemParams,
    #[serde(default)]
    provenance: Provenance,
}

fn feature_matrix(channels: &[ChannelMatrix]) -> Array2<f64> {
    let d = channels[0].features().len();
    let mut x = Array2::zeros((channels.len(), d));
    for (mut row, h) in x.axis_iter_mut(Axis(0)).zip(channels) {
        row.assign(&Array1::from(h.features()));
    }
    x
}

/// Per-sample loss `−R` and its gradient with respect to the raw output row.
fn output_loss_grad(model: &MlpModel, h: &CMat, row: ndarray::ArrayView1<f64>) -> (f64, Vec<f64>) {
    let z = model.output_matrix(row);
    let w = project(&z, model.sys.p_max);
    let terms = RateTerms::new(h, &w, model.sys.noise_var);
    let w_bar = terms.gradient(h).scale(-1.0);
    let radius = model.sys.p_max.sqrt();
    let z_norm = z.frobenius_norm();
    let z_bar = if z_norm > radius {
        let radial = z.real_inner(&w_bar) / (z_norm * z_norm);
        w_bar.add_scaled(-radial, &z).scale(radius / z_norm)
    } else {
        w_bar
    };
    let mut g: Vec<f64> = z_bar.as_slice().iter().map(|c| c.re).collect();
    g.extend(z_bar.as_slice().iter().map(|c| c.im));
    (-terms.sum_rate(), g)
}

fn batch_loss(model: &MlpModel, x: &Array2<f64>, hs: &[ChannelMatrix]) -> f64 {
    let acts = model.activations(x.clone());
    let out = acts.last().unwrap();
    let rates: Vec<f64> = (0..hs.len())
        .into_par_iter()
        .map(|i| {
            let w = project(&model.output_matrix(out.row(i)), model.sys.p_max);
            RateTerms::new(hs[i].matrix(), &w, model.sys.noise_var).sum_rate()
        })
        .collect();
    -rates.iter().sum::<f64>()
}

/// Batch sum-loss and its gradient by backpropagation.
fn batch_loss_grad(model: &MlpModel, x: &Array2<f64>, hs: &[ChannelMatrix]) -> (f64, Vec<f64>) {
    let acts = model.activations(x.clone());
    let out = acts.last().unwrap();
    let per_sample: Vec<(f64, Vec<f64>)> = (0..hs.len())
        .into_par_iter()
        .map(|i| output_loss_grad(model, hs[i].matrix(), out.row(i)))
        .collect();
    let mut loss = 0.0;
    let mut delta = Array2::zeros(out.dim());
    for (i, (l, g)) in per_sample.into_iter().enumerate() {
        loss += l;
        delta.row_mut(i).assign(&Array1::from(g));
    }

    let n_layers = model.weights.len();
    let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n_layers);
    for l in (0..n_layers).rev() {
        let gw = delta.t().dot(&acts[l]);
        let gb = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut back = delta.dot(&model.weights[l]);
            ndarray::Zip::from(&mut back).and(&acts[l]).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = back;
        }
        grads.push((gw, gb));
    }
    grads.reverse();
    let mut flat = Vec::with_capacity(model.param_count());
    for (gw, gb) in grads {
        flat.extend(gw.iter());
        flat.extend(gb.iter());
    }
    (loss, flat)
}

/// Gradient of the batch sum-loss with respect to [`MlpModel::params`].
pub fn param_grad(model: &MlpModel, batch: &[ChannelMatrix]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    for h in batch {
        model.sys.check_channel(h)?;
    }
    Ok(batch_loss_grad(model, &feature_matrix(batch), batch).1)
}

pub fn sum_loss(model: &MlpModel, batch: &[ChannelMatrix]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    Ok(batch_loss(model, &feature_matrix(batch), batch))
}

pub fn mean_rate(model: &MlpModel, channels: &[ChannelMatrix]) -> Result<f64> {
    Ok(-sum_loss(model, channels)? / channels.len() as f64)
}

/// Trains on the batch sum-loss and returns the best-validation snapshot.
pub fn train(
    model: &MlpModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(MlpModel, TrainTrace)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract("training and validation sets must be non-empty"));
    }
    for h in train_set.channels.iter().chain(&val_set.channels) {
        model.sys.check_channel(h)?;
    }
    let x_train = feature_matrix(&train_set.channels);
    let x_val = feature_matrix(&val_set.channels);
    let n_val = val_set.len() as f64;
    let template = model.clone();
    let (best, trace) = fit(
        model.params(),
        cfg,
        train_set.len(),
        |p, range| {
            let m = template.with_params(p)?;
            let x = x_train.slice(s![range.clone(), ..]).to_owned();
            Ok(batch_loss_grad(&m, &x, &train_set.channels[range]))
        },
        |p| match template.with_params(p) {
            Ok(m) => -batch_loss(&m, &x_val, &val_set.channels) / n_val,
            Err(_) => f64::NAN,
        },
        |_| Vec::new(),
    )?;
    let mut trained = template.with_params(&best)?;
    trained.provenance.seed = seed;
    trained.provenance.train_size = train_set.len() + val_set.len();
    Ok((trained, trace))
}
