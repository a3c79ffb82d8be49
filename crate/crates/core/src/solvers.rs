//! Per-channel reference solvers: zero-forcing, projected gradient ascent and WMMSE.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelMatrix;
use crate::error::{Error, Result};
use crate::numerics::{CMat, Cholesky, C64};
use crate::objective::{project, rate_unchecked, BeamformingMatrix, RateTerms, SystemParams};

#[derive(Debug, Clone)]
pub struct SolverReport {
    pub w_final: BeamformingMatrix,
    pub rate_final: f64,
    pub rate_trace: Option<Vec<f64>>,
    pub iterations_run: usize,
}

/// Pseudo-inverse beamformer `Hᴴ(HHᴴ)⁻¹`, projected onto the power ball.
///
/// The unscaled pseudo-inverse is kept whenever it already fits the budget;
/// only over-budget solutions are shrunk.
pub fn zero_forcing(h: &ChannelMatrix, p: &SystemParams) -> Result<BeamformingMatrix> {
    p.check_channel(h)?;
    if p.k_users > p.m_antennas {
        return Err(Error::contract(format!(
            "zero-forcing needs K <= M, got K={} M={}",
            p.k_users, p.m_antennas
        )));
    }
    let hm = h.matrix();
    let gram = hm.mul(&hm.hermitian());
    let n = gram.rows();
    let factor = match Cholesky::factor(&gram) {
        Ok(f) => f,
        Err(_) => {
            let load = 1e-12 * gram.trace().re / n as f64;
            let mut loaded = gram.clone();
            for i in 0..n {
                loaded[(i, i)] += C64::new(load, 0.0);
            }
            Cholesky::factor(&loaded).map_err(|_| Error::DegenerateChannel)?
        }
    };
    let inv = factor.solve(&CMat::identity(n))?;
    let w = hm.hermitian().mul(&inv);
    if !w.is_finite() {
        return Err(Error::DegenerateChannel);
    }
    Ok(BeamformingMatrix(project(&w, p.p_max)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdOptions {
    pub iters: usize,
    pub step: f64,
    pub backtracking: bool,
    pub record_trace: bool,
}

impl Default for PgdOptions {
    fn default() -> Self {
        PgdOptions {
            iters: 200,
            step: 0.05,
            backtracking: true,
            record_trace: false,
        }
    }
}

/// Maximum number of step halvings per backtracking line search.
pub const MAX_HALVINGS: usize = 30;

/// Projected gradient ascent on the sum-rate, started from zero-forcing.
pub fn classical_pgd(h: &ChannelMatrix, p: &SystemParams, opts: &PgdOptions) -> Result<SolverReport> {
    if opts.iters == 0 {
        return Err(Error::contract("classical PGD needs at least one iteration"));
    }
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(Error::contract(format!("step must be positive, got {}", opts.step)));
    }
    let hm = h.matrix();
    let mut w = zero_forcing(h, p)?.into_matrix();
    let mut terms = RateTerms::new(hm, &w, p.noise_var);
    let mut rate = terms.sum_rate();
    let mut trace = opts.record_trace.then(|| Vec::with_capacity(opts.iters));

    for _ in 0..opts.iters {
        let dir = terms.gradient(hm);
        if opts.backtracking {
            let mut eta = opts.step;
            for _ in 0..=MAX_HALVINGS {
                let cand = project(&w.add_scaled(eta, &dir), p.p_max);
                let cand_terms = RateTerms::new(hm, &cand, p.noise_var);
                let cand_rate = cand_terms.sum_rate();
                if cand_rate >= rate {
                    w = cand;
                    terms = cand_terms;
                    rate = cand_rate;
                    break;
                }
                eta *= 0.5;
            }
            // exhausted line search: iterate stays frozen for this step
        } else {
            w = project(&w.add_scaled(opts.step, &dir), p.p_max);
            terms = RateTerms::new(hm, &w, p.noise_var);
            rate = terms.sum_rate();
        }
        if let Some(t) = trace.as_mut() {
            t.push(rate);
        }
    }

    Ok(SolverReport {
        w_final: BeamformingMatrix(w),
        rate_final: rate,
        rate_trace: trace,
        iterations_run: opts.iters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmmseOptions {
    pub iters: usize,
    pub record_trace: bool,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        WmmseOptions {
            iters: 100,
            record_trace: false,
        }
    }
}

const MAX_BISECTIONS: usize = 100;

/// Transmit update `(A + μI)⁻¹B` with the smallest `μ ≥ 0` meeting the power budget.
fn power_constrained_update(a: &CMat, b: &CMat, p_max: f64) -> Result<CMat> {
    let n = a.rows();
    let base_load = (1e-12 * a.trace().re / n as f64).max(f64::MIN_POSITIVE);
    let solve = |mu: f64| -> Result<CMat> {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += C64::new(mu, 0.0);
        }
        Cholesky::factor(&shifted)?.solve(b)
    };

    // A is rank K < M in general, so μ = 0 is replaced by a tiny diagonal load.
    let mut lo = base_load;
    let mut x = loop {
        match solve(lo) {
            Ok(x) => break x,
            Err(Error::Singular { .. }) if lo < 1.0 => lo *= 10.0,
            Err(e) => return Err(e),
        }
    };
    if x.norm_sqr() <= p_max {
        return Ok(x);
    }

    let mut hi = 1.0f64.max(lo);
    let mut x_hi = solve(hi)?;
    let mut doublings = 0;
    while x_hi.norm_sqr() > p_max {
        hi *= 2.0;
        x_hi = solve(hi)?;
        doublings += 1;
        if doublings > 1100 {
            return Err(Error::Numeric("WMMSE multiplier bracket did not close".into()));
        }
    }

    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        x = solve(mid)?;
        let power = x.norm_sqr();
        if power > p_max {
            lo = mid;
        } else {
            hi = mid;
            x_hi = x;
            if p_max - power <= 1e-10 * p_max {
                return Ok(x_hi);
            }
        }
        if hi - lo <= 1e-15 * hi {
            return Ok(x_hi);
        }
    }
    Err(Error::Numeric(format!(
        "WMMSE bisection did not converge after {MAX_BISECTIONS} halvings"
    )))
}

/// MISO WMMSE (receiver scalar, MSE weight, power-constrained transmit update), started from zero-forcing.
pub fn wmmse(h: &ChannelMatrix, p: &SystemParams, opts: &WmmseOptions) -> Result<SolverReport> {
    if opts.iters == 0 {
        return Err(Error::contract("WMMSE needs at least one iteration"));
    }
    let hm = h.matrix();
    let k_users = p.k_users;
    let m = p.m_antennas;
    let mut w = zero_forcing(h, p)?.into_matrix();
    let mut trace = opts.record_trace.then(|| Vec::with_capacity(opts.iters));
    let mut rate = rate_unchecked(hm, &w, p.noise_var);

    for _ in 0..opts.iters {
        let terms = RateTerms::new(hm, &w, p.noise_var);
        // u_k = h_kᴴw_k / T_k, v_k = 1 / (1 − u_k* h_kᴴw_k) = T_k / I_k
        let mut u = Vec::with_capacity(k_users);
        let mut v = Vec::with_capacity(k_users);
        for k in 0..k_users {
            u.push(terms.g[(k, k)] / terms.total[k]);
            v.push(terms.total[k] / terms.interference[k]);
        }
        // A = Σ_k v_k|u_k|² h_k h_kᴴ,  B[:, k] = h_k u_k v_k
        let mut a = CMat::zeros(m, m);
        for k in 0..k_users {
            let c = v[k] * u[k].norm_sqr();
            for i in 0..m {
                let hi = hm[(k, i)].conj();
                for j in 0..m {
                    a[(i, j)] += hi * hm[(k, j)] * c;
                }
            }
        }
        let b = CMat::from_fn(m, k_users, |i, k| hm[(k, i)].conj() * u[k] * v[k]);
        w = power_constrained_update(&a, &b, p.p_max)?;
        rate = rate_unchecked(hm, &w, p.noise_var);
        if let Some(t) = trace.as_mut() {
            t.push(rate);
        }
    }

    Ok(SolverReport {
        w_final: BeamformingMatrix(w),
        rate_final: rate,
        rate_trace: trace,
        iterations_run: opts.iters,
    })
}

/// A per-channel solver selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Solver {
    ZeroForcing,
    ClassicalPgd(PgdOptions),
    Wmmse(WmmseOptions),
}

impl Solver {
    pub fn solve(&self, h: &ChannelMatrix, p: &SystemParams) -> Result<SolverReport> {
        match self {
            Solver::ZeroForcing => {
                let w = zero_forcing(h, p)?;
                let rate = rate_unchecked(h.matrix(), w.matrix(), p.noise_var);
                Ok(SolverReport {
                    w_final: w,
                    rate_final: rate,
                    rate_trace: None,
                    iterations_run: 0,
                })
            }
            Solver::ClassicalPgd(o) => classical_pgd(h, p, o),
            Solver::Wmmse(o) => wmmse(h, p, o),
        }
    }

    /// Solves every channel independently (data-parallel, order preserved).
    pub fn solve_all(&self, channels: &[ChannelMatrix], p: &SystemParams) -> Result<Vec<SolverReport>> {
        channels
            .par_iter()
            .enumerate()
            .map(|(i, h)| self.solve(h, p).map_err(|e| e.context(format!("channel {i}"))))
            .collect()
    }

    /// Mean final sum-rate over a channel set.
    pub fn mean_rate(&self, channels: &[ChannelMatrix], p: &SystemParams) -> Result<f64> {
        let reports = self.solve_all(channels, p)?;
        Ok(reports.iter().map(|r| r.rate_final).sum::<f64>() / reports.len().max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::generate;
    use crate::numerics::testing::{random_cmat, rng};
    use crate::objective::sum_rate;

    fn sys() -> SystemParams {
        SystemParams::default()
    }

    #[test]
    fn zf_identity_channel() {
        let p = SystemParams { k_users: 2, m_antennas: 2, p_max: 2.0, noise_var: 0.1 };
        let h = ChannelMatrix::new(CMat::identity(2)).unwrap();
        let w = zero_forcing(&h, &p).unwrap();
        assert!(w.matrix().max_abs_diff(&CMat::identity(2)) < 1e-15);
        assert!(h.matrix().mul(w.matrix()).max_abs_diff(&CMat::identity(2)) < 1e-15);
    }

    #[test]
    fn zf_nulls_interference() {
        let d = generate(5, 50, 4, 8).unwrap();
        for h in &d.channels {
            let w = zero_forcing(h, &sys()).unwrap();
            assert!(w.is_feasible(&sys()));
            let g = h.matrix().mul(w.matrix());
            for k in 0..4 {
                for j in 0..4 {
                    if k != j {
                        assert!(g[(k, j)].norm() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn zf_shrinks_only_when_over_budget() {
        // 1x1 channel of gain 2: pseudo-inverse 1/2 has power 1/4, already feasible.
        let p = SystemParams { k_users: 1, m_antennas: 1, p_max: 1.0, noise_var: 0.1 };
        let h = ChannelMatrix::new(CMat::identity(1).scale(2.0)).unwrap();
        assert!((zero_forcing(&h, &p).unwrap().power() - 0.25).abs() < 1e-15);
        // gain 1/2: pseudo-inverse 2 has power 4, projected to the unit ball.
        let h = ChannelMatrix::new(CMat::identity(1).scale(0.5)).unwrap();
        assert!((zero_forcing(&h, &p).unwrap().power() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zf_rejects_more_users_than_antennas_and_degenerate() {
        let p = SystemParams { k_users: 3, m_antennas: 2, p_max: 1.0, noise_var: 0.1 };
        let h = ChannelMatrix::new(CMat::zeros(3, 2)).unwrap();
        assert!(matches!(zero_forcing(&h, &p), Err(Error::Contract(_))));
        let p = SystemParams { k_users: 2, m_antennas: 2, p_max: 1.0, noise_var: 0.1 };
        let h = ChannelMatrix::new(CMat::zeros(2, 2)).unwrap();
        assert!(matches!(zero_forcing(&h, &p), Err(Error::DegenerateChannel)));
    }

    #[test]
    fn pgd_trace_starts_at_or_above_zf_and_is_monotone() {
        let d = generate(6, 20, 4, 8).unwrap();
        let opts = PgdOptions { record_trace: true, ..Default::default() };
        for h in &d.channels {
            let zf_rate = sum_rate(h, &zero_forcing(h, &sys()).unwrap(), &sys()).unwrap();
            let rep = classical_pgd(h, &sys(), &opts).unwrap();
            let trace = rep.rate_trace.as_ref().unwrap();
            assert_eq!(trace.len(), rep.iterations_run);
            assert!(trace[0] >= zf_rate - 1e-9);
            assert!(trace.windows(2).all(|w| w[1] >= w[0]));
            assert!(rep.w_final.is_feasible(&sys()));
            assert_eq!(rep.rate_final, sum_rate(h, &rep.w_final, &sys()).unwrap());
            assert!(rep.rate_final >= zf_rate - 1e-9);
        }
    }

    #[test]
    fn pgd_rejects_zero_iterations() {
        let d = generate(6, 1, 4, 8).unwrap();
        let opts = PgdOptions { iters: 0, ..Default::default() };
        assert!(matches!(classical_pgd(&d.channels[0], &sys(), &opts), Err(Error::Contract(_))));
    }

    #[test]
    fn converged_pgd_is_stationary() {
        // Long run: the gradient's component tangent to the power sphere vanishes.
        let d = generate(8, 3, 4, 8).unwrap();
        let opts = PgdOptions { iters: 5000, ..Default::default() };
        for h in &d.channels {
            let rep = classical_pgd(h, &sys(), &opts).unwrap();
            let w = rep.w_final.matrix();
            let g = RateTerms::new(h.matrix(), w, 0.1).gradient(h.matrix());
            let tangent = if rep.w_final.power() >= 1.0 - 1e-9 {
                g.add_scaled(-w.real_inner(&g) / w.norm_sqr(), w)
            } else {
                g
            };
            assert!(tangent.frobenius_norm() < 1e-3, "tangent norm {}", tangent.frobenius_norm());
        }
    }

    #[test]
    fn wmmse_single_user_is_matched_filter() {
        let p = SystemParams { k_users: 1, m_antennas: 4, p_max: 1.0, noise_var: 0.1 };
        let mut r = rng(21);
        for _ in 0..5 {
            let h = ChannelMatrix::new(random_cmat(&mut r, 1, 4)).unwrap();
            let rep = wmmse(&h, &p, &WmmseOptions::default()).unwrap();
            let w = rep.w_final.matrix();
            let hv = h.matrix().hermitian();
            let cos = hv.hermitian().mul(w)[(0, 0)].norm() / (hv.frobenius_norm() * w.frobenius_norm());
            assert!(1.0 - cos < 1e-6, "direction error {}", 1.0 - cos);
            assert!((w.norm_sqr() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn wmmse_trace_monotone_and_feasible() {
        let d = generate(10, 20, 4, 8).unwrap();
        let opts = WmmseOptions { record_trace: true, ..Default::default() };
        for h in &d.channels {
            let zf_rate = sum_rate(h, &zero_forcing(h, &sys()).unwrap(), &sys()).unwrap();
            let rep = wmmse(h, &sys(), &opts).unwrap();
            let trace = rep.rate_trace.unwrap();
            assert!(trace[0] >= zf_rate - 1e-8);
            assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-8));
            assert!(rep.w_final.is_feasible(&sys()));
        }
    }

    #[test]
    fn pgd_and_wmmse_agree_on_average() {
        let d = generate(11, 200, 4, 8).unwrap();
        let pgd = Solver::ClassicalPgd(PgdOptions::default()).mean_rate(&d.channels, &sys()).unwrap();
        let wm = Solver::Wmmse(WmmseOptions::default()).mean_rate(&d.channels, &sys()).unwrap();
        assert!((pgd - wm).abs() < 0.2, "pgd {pgd} wmmse {wm}");
    }
}
