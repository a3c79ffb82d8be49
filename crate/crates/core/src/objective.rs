//! Sum-rate objective, its gradient, and the power-ball projection.
//!
//! Gradients use the real-coordinate convention: for a real function `R(W)`
//! the returned matrix is `∂R/∂Re(W) + i·∂R/∂Im(W)`, which is twice the
//! Wirtinger derivative `∂R/∂W*`. With this convention
//! `R(W + εD) = R(W) + ε·Re⟨D, D⟩ + o(ε)`, so plain real finite differences
//! check it directly.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelMatrix;
use crate::error::{Error, Result};
use crate::numerics::CMat;

/// Absolute slack in the feasibility predicate `‖W‖²_F ≤ P_max`.
pub const FEASIBILITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    #[serde(rename = "K")]
    pub k_users: usize,
    #[serde(rename = "M")]
    pub m_antennas: usize,
    pub p_max: f64,
    pub noise_var: f64,
}

impl Default for SystemParams {
    /// 8 antennas, 4 users, unit power budget, noise variance 0.1.
    fn default() -> Self {
        SystemParams {
            k_users: 4,
            m_antennas: 8,
            p_max: 1.0,
            noise_var: 0.1,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_users == 0 || self.m_antennas == 0 {
            return Err(Error::contract("K and M must be positive"));
        }
        if !(self.p_max > 0.0 && self.p_max.is_finite()) {
            return Err(Error::contract(format!("p_max must be positive, got {}", self.p_max)));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::contract(format!(
                "noise_var must be positive, got {}",
                self.noise_var
            )));
        }
        Ok(())
    }

    pub fn check_channel(&self, h: &ChannelMatrix) -> Result<()> {
        if h.users() != self.k_users || h.antennas() != self.m_antennas {
            return Err(Error::contract(format!(
                "channel is {}x{}, system expects {}x{}",
                h.users(),
                h.antennas(),
                self.k_users,
                self.m_antennas
            )));
        }
        Ok(())
    }
}

/// `M×K` matrix whose column `k` is the beamformer of user `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingMatrix(pub CMat);

impl BeamformingMatrix {
    pub fn matrix(&self) -> &CMat {
        &self.0
    }

    pub fn into_matrix(self) -> CMat {
        self.0
    }

    pub fn power(&self) -> f64 {
        self.0.norm_sqr()
    }

    pub fn is_feasible(&self, p: &SystemParams) -> bool {
        self.power() <= p.p_max + FEASIBILITY_SLACK
    }
}

/// Effective channel `G = H·W` and the per-user power terms derived from it.
pub(crate) struct RateTerms {
    pub g: CMat,
    /// `T_k = Σ_j |G_kj|² + σ²`
    pub total: Vec<f64>,
    /// `I_k = T_k − |G_kk|²`
    pub interference: Vec<f64>,
}

impl RateTerms {
    pub fn new(h: &CMat, w: &CMat, noise_var: f64) -> Self {
        let g = h.mul(w);
        let k = g.rows();
        let mut total = Vec::with_capacity(k);
        let mut interference = Vec::with_capacity(k);
        for i in 0..k {
            let mut t = noise_var;
            for j in 0..g.cols() {
                t += g[(i, j)].norm_sqr();
            }
            let signal = if i < g.cols() { g[(i, i)].norm_sqr() } else { 0.0 };
            total.push(t);
            interference.push(t - signal);
        }
        RateTerms {
            g,
            total,
            interference,
        }
    }

    pub fn sum_rate(&self) -> f64 {
        self.total
            .iter()
            .zip(&self.interference)
            .map(|(t, i)| (t / i).ln())
            .sum::<f64>()
            / LN_2
    }

    /// `C∘G` with `C_kj = 1/T_k − [k≠j]/I_k`, scaled by `2/ln 2`.
    fn weighted_g(&self) -> CMat {
        let scale = 2.0 / LN_2;
        let g = &self.g;
        CMat::from_fn(g.rows(), g.cols(), |k, j| {
            let mut c = 1.0 / self.total[k];
            if k != j {
                c -= 1.0 / self.interference[k];
            }
            g[(k, j)] * (c * scale)
        })
    }

    /// Ascent direction `D = (2/ln 2)·Hᴴ(C∘G)`.
    pub fn gradient(&self, h: &CMat) -> CMat {
        h.hermitian_mul(&self.weighted_g())
    }

    /// Directional derivative of the gradient along `v`, i.e. the Hessian of
    /// the sum-rate (as a real symmetric map) applied to `v`.
    pub fn hessian_apply(&self, h: &CMat, v: &CMat) -> CMat {
        let scale = 2.0 / LN_2;
        let g = &self.g;
        let gd = h.mul(v);
        let k_users = g.rows();
        let mut d_total = vec![0.0; k_users];
        let mut d_interf = vec![0.0; k_users];
        for k in 0..k_users {
            let mut s = 0.0;
            let mut own = 0.0;
            for j in 0..g.cols() {
                let a = 2.0 * (g[(k, j)].conj() * gd[(k, j)]).re;
                s += a;
                if j == k {
                    own = a;
                }
            }
            d_total[k] = s;
            d_interf[k] = s - own;
        }
        let inner = CMat::from_fn(g.rows(), g.cols(), |k, j| {
            let t = self.total[k];
            let i = self.interference[k];
            let mut c = 1.0 / t;
            let mut dc = -d_total[k] / (t * t);
            if k != j {
                c -= 1.0 / i;
                dc += d_interf[k] / (i * i);
            }
            (g[(k, j)] * dc + gd[(k, j)] * c) * scale
        });
        h.hermitian_mul(&inner)
    }
}

fn check_dims(h: &ChannelMatrix, w: &BeamformingMatrix, p: &SystemParams) -> Result<()> {
    p.check_channel(h)?;
    if w.0.shape() != (p.m_antennas, p.k_users) {
        return Err(Error::contract(format!(
            "beamformer is {}x{}, expected {}x{}",
            w.0.rows(),
            w.0.cols(),
            p.m_antennas,
            p.k_users
        )));
    }
    Ok(())
}

/// Per-user SINR `|G_kk|² / (Σ_{j≠k} |G_kj|² + σ²)`.
pub fn sinr(h: &ChannelMatrix, w: &BeamformingMatrix, p: &SystemParams) -> Result<Vec<f64>> {
    check_dims(h, w, p)?;
    let t = RateTerms::new(h.matrix(), w.matrix(), p.noise_var);
    Ok(t.total
        .iter()
        .zip(&t.interference)
        .map(|(tot, i)| (tot - i).max(0.0) / i)
        .collect())
}

/// `Σ_k log₂(1 + SINR_k)` in bits/s/Hz.
pub fn sum_rate(h: &ChannelMatrix, w: &BeamformingMatrix, p: &SystemParams) -> Result<f64> {
    check_dims(h, w, p)?;
    Ok(rate_unchecked(h.matrix(), w.matrix(), p.noise_var))
}

#[inline]
pub(crate) fn rate_unchecked(h: &CMat, w: &CMat, noise_var: f64) -> f64 {
    RateTerms::new(h, w, noise_var).sum_rate()
}

/// Steepest-ascent direction of the sum-rate with respect to `W` (see module docs).
pub fn sum_rate_grad(
    h: &ChannelMatrix,
    w: &BeamformingMatrix,
    p: &SystemParams,
) -> Result<CMat> {
    check_dims(h, w, p)?;
    Ok(RateTerms::new(h.matrix(), w.matrix(), p.noise_var).gradient(h.matrix()))
}

/// Euclidean projection onto `{W : ‖W‖_F ≤ √P_max}`.
pub fn prox_power(z: &CMat, p: &SystemParams) -> BeamformingMatrix {
    BeamformingMatrix(project(z, p.p_max))
}

pub(crate) fn project(z: &CMat, p_max: f64) -> CMat {
    let norm = z.frobenius_norm();
    let radius = p_max.sqrt();
    if norm <= radius {
        z.clone()
    } else {
        // Rescale by √P/‖Z‖, then correct the rounding so the result never lands above the ball.
        let mut out = z.scale(radius / norm);
        let n2 = out.norm_sqr();
        if n2 > p_max {
            out = out.scale((p_max / n2).sqrt() * (1.0 - f64::EPSILON));
        }
        out
    }
}

/// Mean sum-rate of a beamformer map over a set of channels.
pub fn mean_rate<F>(channels: &[ChannelMatrix], p: &SystemParams, f: F) -> f64
where
    F: Fn(&ChannelMatrix) -> CMat + Sync,
{
    use rayon::prelude::*;
    let rates: Vec<f64> = channels
        .par_iter()
        .map(|h| rate_unchecked(h.matrix(), &f(h), p.noise_var))
        .collect();
    rates.iter().sum::<f64>() / rates.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testing::{random_cmat, rng};
    use crate::numerics::C64;
    use proptest::prelude::*;

    fn params(k: usize, m: usize) -> SystemParams {
        SystemParams {
            k_users: k,
            m_antennas: m,
            p_max: 1.0,
            noise_var: 0.1,
        }
    }

    fn chan(c: CMat) -> ChannelMatrix {
        ChannelMatrix::new(c).unwrap()
    }

    /// SINR by explicit scalar loops over `h_kᴴ w_j`.
    fn sinr_oracle(h: &CMat, w: &CMat, noise: f64) -> Vec<f64> {
        let (k_users, m) = h.shape();
        let mut out = vec![];
        for k in 0..k_users {
            let mut powers = vec![];
            for j in 0..k_users {
                let mut s = C64::new(0.0, 0.0);
                for a in 0..m {
                    s += h[(k, a)] * w[(a, j)];
                }
                powers.push(s.re * s.re + s.im * s.im);
            }
            let interf: f64 = (0..k_users).filter(|&j| j != k).map(|j| powers[j]).sum();
            out.push(powers[k] / (interf + noise));
        }
        out
    }

    /// Central differences over every real coordinate of W.
    fn fd_gradient(h: &CMat, w: &CMat, noise: f64, step: f64) -> CMat {
        let mut out = CMat::zeros(w.rows(), w.cols());
        for idx in 0..w.as_slice().len() {
            for imag in [false, true] {
                let bump = |s: f64| {
                    let mut x = w.clone();
                    let z = &mut x.as_mut_slice()[idx];
                    if imag {
                        z.im += s;
                    } else {
                        z.re += s;
                    }
                    rate_unchecked(h, &x, noise)
                };
                let d = (bump(step) - bump(-step)) / (2.0 * step);
                let z = &mut out.as_mut_slice()[idx];
                if imag {
                    z.im = d;
                } else {
                    z.re = d;
                }
            }
        }
        out
    }

    #[test]
    fn sinr_single_user() {
        let p = SystemParams { k_users: 1, m_antennas: 1, p_max: 1.0, noise_var: 1.0 };
        let h = chan(CMat::identity(1));
        let w = BeamformingMatrix(CMat::identity(1));
        assert_eq!(sinr(&h, &w, &p).unwrap(), vec![1.0]);
        assert_eq!(sum_rate(&h, &w, &p).unwrap(), 1.0);
    }

    #[test]
    fn zero_beamformer() {
        let p = params(4, 8);
        let mut r = rng(11);
        let h = chan(random_cmat(&mut r, 4, 8));
        let w = BeamformingMatrix(CMat::zeros(8, 4));
        assert_eq!(sinr(&h, &w, &p).unwrap(), vec![0.0; 4]);
        assert_eq!(sum_rate(&h, &w, &p).unwrap(), 0.0);
    }

    #[test]
    fn sinr_matches_loop_oracle() {
        let p = params(2, 2);
        let mut r = rng(12);
        let h = random_cmat(&mut r, 2, 2);
        let w = random_cmat(&mut r, 2, 2);
        let got = sinr(&chan(h.clone()), &BeamformingMatrix(w.clone()), &p).unwrap();
        for (a, b) in got.iter().zip(sinr_oracle(&h, &w, 0.1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let p = params(4, 8);
        let h = chan(CMat::zeros(4, 8));
        let w = BeamformingMatrix(CMat::zeros(4, 8));
        assert!(matches!(sum_rate(&h, &w, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(13);
        for (k, m) in [(4, 8), (2, 3), (1, 1), (3, 3)] {
            let h = random_cmat(&mut r, k, m);
            let w = random_cmat(&mut r, m, k).scale(0.5);
            let g = RateTerms::new(&h, &w, 0.1).gradient(&h);
            let fd = fd_gradient(&h, &w, 0.1, 1e-6);
            let rel = g.sub(&fd).frobenius_norm() / fd.frobenius_norm();
            assert!(rel < 1e-5, "({k},{m}) rel err {rel}");
        }
    }

    #[test]
    fn gradient_at_zero_is_matched_filter() {
        let p = SystemParams { k_users: 1, m_antennas: 4, p_max: 1.0, noise_var: 0.1 };
        let mut r = rng(14);
        let h = random_cmat(&mut r, 1, 4);
        let w = CMat::zeros(4, 1);
        let g = sum_rate_grad(&chan(h.clone()), &BeamformingMatrix(w.clone()), &p).unwrap();
        // At W = 0 the ascent direction is zero (quadratic start); the first-order
        // behaviour sits in the Hessian, whose image of any v is parallel to h.
        assert!(g.frobenius_norm() < 1e-15);
        let v = random_cmat(&mut r, 4, 1);
        let hv = RateTerms::new(&h, &w, 0.1).hessian_apply(&h, &v);
        let hvec = h.hermitian();
        let cos = (hvec.hermitian().mul(&hv)[(0, 0)]).norm()
            / (hvec.frobenius_norm() * hv.frobenius_norm());
        assert!((cos - 1.0).abs() < 1e-12);
        // And away from zero the gradient lines up with h as well.
        let w_small = hvec.scale(1e-3);
        let g = RateTerms::new(&h, &w_small, 0.1).gradient(&h);
        let fd = fd_gradient(&h, &w_small, 0.1, 1e-7);
        assert!(g.sub(&fd).frobenius_norm() / fd.frobenius_norm() < 1e-5);
        let cos = (hvec.hermitian().mul(&g)[(0, 0)]).norm()
            / (hvec.frobenius_norm() * g.frobenius_norm());
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hessian_apply_matches_gradient_differences() {
        let mut r = rng(15);
        let h = random_cmat(&mut r, 4, 8);
        let w = random_cmat(&mut r, 8, 4).scale(0.3);
        let v = random_cmat(&mut r, 8, 4);
        let eps = 1e-6;
        let plus = RateTerms::new(&h, &w.add_scaled(eps, &v), 0.1).gradient(&h);
        let minus = RateTerms::new(&h, &w.add_scaled(-eps, &v), 0.1).gradient(&h);
        let fd = plus.sub(&minus).scale(0.5 / eps);
        let hv = RateTerms::new(&h, &w, 0.1).hessian_apply(&h, &v);
        assert!(hv.sub(&fd).frobenius_norm() / fd.frobenius_norm() < 1e-6);
        // symmetry of the real Hessian
        let u = random_cmat(&mut r, 8, 4);
        let terms = RateTerms::new(&h, &w, 0.1);
        let a = u.real_inner(&terms.hessian_apply(&h, &v));
        let b = v.real_inner(&terms.hessian_apply(&h, &u));
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn prox_cases() {
        let p = params(4, 8);
        let mut r = rng(16);
        let z = random_cmat(&mut r, 8, 4);
        let inside = z.scale(0.5 / z.frobenius_norm());
        assert_eq!(prox_power(&inside, &p).0, inside);

        let outside = z.scale(2.0 / z.frobenius_norm());
        let projected = prox_power(&outside, &p);
        assert!(projected.0.max_abs_diff(&outside.scale(0.5)) < 1e-15);
        assert!(projected.is_feasible(&p));

        assert_eq!(prox_power(&CMat::zeros(8, 4), &p).0, CMat::zeros(8, 4));
    }

    #[test]
    fn feasibility_predicate_slack() {
        let p = params(1, 1);
        let at = |v: f64| BeamformingMatrix(CMat::from_rows(&[vec![(v.sqrt(), 0.0)]]).unwrap());
        assert!(at(1.0 + 0.5e-9).is_feasible(&p));
        assert!(!at(1.0 + 1e-8).is_feasible(&p));
    }

    proptest! {
        #[test]
        fn prox_is_idempotent_and_feasible(seed in any::<u64>(), log_scale in -6.0f64..12.0, p_max in 0.01f64..10.0) {
            let p = SystemParams { p_max, ..params(4, 8) };
            let mut r = rng(seed);
            let z = random_cmat(&mut r, 8, 4);
            let z = z.scale(10f64.powf(log_scale) / z.frobenius_norm());
            let once = prox_power(&z, &p);
            let twice = prox_power(once.matrix(), &p);
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.power() <= p.p_max + 1e-12);
        }

        #[test]
        fn sinr_invariant_to_column_phase(seed in any::<u64>(), theta in 0.0f64..std::f64::consts::TAU, col in 0usize..4) {
            let p = params(4, 8);
            let mut r = rng(seed);
            let h = chan(random_cmat(&mut r, 4, 8));
            let w = random_cmat(&mut r, 8, 4);
            let mut rotated = w.clone();
            let phase = C64::from_polar(1.0, theta);
            for i in 0..8 {
                rotated[(i, col)] *= phase;
            }
            let a = sinr(&h, &BeamformingMatrix(w), &p).unwrap();
            let b = sinr(&h, &BeamformingMatrix(rotated), &p).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-10 * x.max(1.0));
            }
        }

        #[test]
        fn shrinking_never_raises_signal_power(seed in any::<u64>(), c in 0.01f64..=1.0) {
            let mut r = rng(seed);
            let h = random_cmat(&mut r, 4, 8);
            let w = random_cmat(&mut r, 8, 4);
            let full = RateTerms::new(&h, &w, 0.1);
            let scaled = RateTerms::new(&h, &w.scale(c), 0.1);
            for k in 0..4 {
                prop_assert!(scaled.g[(k, k)].norm_sqr() <= full.g[(k, k)].norm_sqr() * (1.0 + 1e-12));
            }
            prop_assert!(scaled.sum_rate() <= full.sum_rate() + 1e-12);
        }
    }
}
