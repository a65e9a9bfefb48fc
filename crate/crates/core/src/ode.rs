//! Deterministic flows: the Riccati equation, state-transition matrices and
//! the exact error statistics of a drift-corrected filter under a true drift.
//!
//! Everything is integrated with classical RK4 at the model step. Stage
//! values of the Riccati solution are recomputed from the stored node values
//! whenever another flow needs the closed-loop generator inside a step, so
//! joint systems see exactly the stages the Riccati solve used.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize, NodeSeries};
use crate::model::{DriftPolicy, TimeGrid, ValidatedModel};

/// Most negative eigenvalue tolerated in a Riccati node value.
pub const POSITIVITY_TOL: f64 = 1e-9;

/// Error covariance `P_k` of the Kalman–Bucy filter at every grid node.
#[derive(Clone, Debug)]
pub struct RiccatiPath {
    grid: TimeGrid,
    values: Vec<DMatrix<f64>>,
}

impl RiccatiPath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        &self.values[k]
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn trace_at(&self, k: usize) -> f64 {
        self.values[k].trace()
    }

    pub fn last(&self) -> &DMatrix<f64> {
        self.values.last().expect("Riccati path has at least one node")
    }

    pub(crate) fn check_grid(&self, model: &ValidatedModel) -> Result<()> {
        if self.values.len() != model.grid().n_nodes() || self.values[0].nrows() != model.n() {
            return Err(Error::GridMismatch(format!(
                "Riccati path has {} nodes, model grid has {}",
                self.values.len(),
                model.grid().n_nodes()
            )));
        }
        Ok(())
    }
}

/// P values at the four RK4 evaluation points of one step, and the step result.
pub(crate) struct RiccatiStep {
    pub stages: [DMatrix<f64>; 4],
    pub next: DMatrix<f64>,
}

fn riccati_rhs(
    p: &DMatrix<f64>,
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    info: &DMatrix<f64>,
) -> DMatrix<f64> {
    let fp = f * p;
    &fp + fp.transpose() - p * info * p + q
}

pub(crate) fn riccati_step(model: &ValidatedModel, k: usize, p: &DMatrix<f64>) -> Result<RiccatiStep> {
    let h = model.dt();
    let f = model.drift_matrix(k);
    let q = model.signal_cov(k);
    let info = model.obs_information(k)?;
    let k1 = riccati_rhs(p, f, q, info);
    let p2 = p + &k1 * (0.5 * h);
    let k2 = riccati_rhs(&p2, f, q, info);
    let p3 = p + &k2 * (0.5 * h);
    let k3 = riccati_rhs(&p3, f, q, info);
    let p4 = p + &k3 * h;
    let k4 = riccati_rhs(&p4, f, q, info);
    let next = symmetrize(&(p + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)));
    Ok(RiccatiStep {
        stages: [p.clone(), p2, p3, p4],
        next,
    })
}

/// Integrates `dP/dt = F P + P Fᵀ − P Gᵀ R⁻¹ G P + Q`, `P(0) = 0`.
pub fn solve_riccati(model: &ValidatedModel) -> Result<RiccatiPath> {
    model.ensure_filterable()?;
    let n = model.n();
    let mut values = Vec::with_capacity(model.grid().n_nodes());
    values.push(DMatrix::zeros(n, n));
    for k in 0..model.n_steps() {
        let step = riccati_step(model, k, &values[k])?;
        let min_eig = min_eigenvalue(&step.next);
        if min_eig < -POSITIVITY_TOL || !min_eig.is_finite() {
            return Err(Error::LostPositivity { node: k + 1, min_eig });
        }
        values.push(step.next);
    }
    Ok(RiccatiPath {
        grid: *model.grid(),
        values,
    })
}

/// Positive root of `2 F P − (G²/R) P² + Q = 0`.
pub fn steady_state_scalar(f: f64, g: f64, q: f64, r: f64) -> Result<f64> {
    if g == 0.0 {
        return Err(Error::DegenerateG);
    }
    if r.is_nan() || r <= 0.0 || q < 0.0 {
        return Err(Error::InvalidArgument(format!("need Q >= 0 and R > 0, got Q={q}, R={r}")));
    }
    Ok(r * (f + (f * f + g * g * q / r).sqrt()) / (g * g))
}

/// Closed-form solution `P(t)` of the time-invariant scalar Riccati equation
/// with `P(0) = 0`.
pub fn scalar_riccati_exact(f: f64, g: f64, q: f64, r: f64, t: f64) -> f64 {
    if g == 0.0 {
        return if f == 0.0 {
            q * t
        } else {
            q * ((2.0 * f * t).exp() - 1.0) / (2.0 * f)
        };
    }
    let a = g * g / r;
    let disc = (f * f + a * q).sqrt();
    let p_plus = (f + disc) / a;
    let p_minus = (f - disc) / a;
    let decay = (-a * (p_plus - p_minus) * t).exp();
    p_plus * p_minus * (1.0 - decay) / (p_minus - p_plus * decay)
}

/// Which generator a transition matrix integrates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Generator {
    /// `F_t`.
    Open,
    /// `F_t − P_t Gᵀ R⁻¹ G`.
    ClosedLoop,
}

/// One-step RK4 propagators of `dΦ/dt = A(t) Φ` with trajectories memoized
/// per starting node.
#[derive(Debug)]
pub struct TransitionTable {
    generator: Generator,
    grid: TimeGrid,
    steps: Vec<DMatrix<f64>>,
    cache: Mutex<HashMap<usize, Arc<Vec<DMatrix<f64>>>>>,
}

fn rk4_propagator(h: f64, gens: [&DMatrix<f64>; 4]) -> DMatrix<f64> {
    let n = gens[0].nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let k1 = gens[0].clone();
    let k2 = gens[1] * (&id + &k1 * (0.5 * h));
    let k3 = gens[2] * (&id + &k2 * (0.5 * h));
    let k4 = gens[3] * (&id + &k3 * h);
    id + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
}

/// Closed-loop generators at the RK4 evaluation points of step `k`.
pub(crate) fn closed_loop_stages(
    model: &ValidatedModel,
    k: usize,
    step: &RiccatiStep,
) -> Result<[DMatrix<f64>; 4]> {
    let f = model.drift_matrix(k);
    let info = model.obs_information(k)?;
    Ok(std::array::from_fn(|i| f - &step.stages[i] * info))
}

impl TransitionTable {
    pub fn new(
        model: &ValidatedModel,
        generator: Generator,
        riccati: Option<&RiccatiPath>,
    ) -> Result<Self> {
        let h = model.dt();
        let steps = match generator {
            Generator::Open => (0..model.n_steps())
                .map(|k| {
                    let f = model.drift_matrix(k);
                    rk4_propagator(h, [f, f, f, f])
                })
                .collect(),
            Generator::ClosedLoop => {
                let p = riccati.ok_or(Error::MissingRiccati)?;
                p.check_grid(model)?;
                let mut steps = Vec::with_capacity(model.n_steps());
                for k in 0..model.n_steps() {
                    let st = riccati_step(model, k, p.at(k))?;
                    let a = closed_loop_stages(model, k, &st)?;
                    steps.push(rk4_propagator(h, [&a[0], &a[1], &a[2], &a[3]]));
                }
                steps
            }
        };
        Ok(TransitionTable {
            generator,
            grid: *model.grid(),
            steps,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn generator(&self) -> Generator {
        self.generator
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `Φ(t_{k+1}, t_k)`.
    pub fn step(&self, k: usize) -> &DMatrix<f64> {
        &self.steps[k]
    }

    /// `Φ(t_{s+j}, t_s)` for `j = 0..=n_steps-s`.
    pub fn trajectory_from(&self, s: usize) -> Arc<Vec<DMatrix<f64>>> {
        if let Some(t) = self.cache.lock().expect("transition cache poisoned").get(&s) {
            return Arc::clone(t);
        }
        let n = self.steps.first().map(|m| m.nrows()).unwrap_or(0);
        let mut traj = Vec::with_capacity(self.steps.len() + 1 - s);
        traj.push(DMatrix::identity(n, n));
        for k in s..self.steps.len() {
            let next = &self.steps[k] * traj.last().unwrap();
            traj.push(next);
        }
        let traj = Arc::new(traj);
        self.cache
            .lock()
            .expect("transition cache poisoned")
            .entry(s)
            .or_insert_with(|| Arc::clone(&traj))
            .clone()
    }

    /// `Φ(t_t, t_s)` for node indices `s ≤ t`.
    pub fn between(&self, s: usize, t: usize) -> Result<DMatrix<f64>> {
        if s > t || t > self.steps.len() {
            return Err(Error::OutOfGrid {
                time: self.grid.time(t.min(self.grid.n_steps())),
            });
        }
        Ok(self.trajectory_from(s)[t - s].clone())
    }

    /// `Φ(t, t_s)` for every `s ≤ t`, by backward accumulation (index `s`).
    pub fn into_node(&self, t: usize) -> Vec<DMatrix<f64>> {
        let n = self.steps.first().map(|m| m.nrows()).unwrap_or(0);
        let mut out = vec![DMatrix::identity(n, n); t + 1];
        for s in (0..t).rev() {
            out[s] = &out[s + 1] * &self.steps[s];
        }
        out
    }
}

/// `Φ(t, s)` for grid times `s ≤ t`.
pub fn transition(
    model: &ValidatedModel,
    s: f64,
    t: f64,
    generator: Generator,
    riccati: Option<&RiccatiPath>,
) -> Result<DMatrix<f64>> {
    let si = model.grid().node_of(s)?;
    let ti = model.grid().node_of(t)?;
    if si > ti {
        return Err(Error::InvalidArgument(format!("transition needs s <= t, got s={s}, t={t}")));
    }
    TransitionTable::new(model, generator, riccati)?.between(si, ti)
}

/// Mean `b = E[x − x̂]` and centered covariance of the estimation error.
#[derive(Clone, Debug)]
pub struct ErrorStats {
    pub grid: TimeGrid,
    pub bias: NodeSeries,
    pub covariance: Vec<DMatrix<f64>>,
    /// `trace(Σ_k) + ‖b_k‖²`.
    pub mse: Vec<f64>,
}

/// Exact error statistics of the drift-corrected filter with parameter
/// `theta_hat` when the signal carries drift `theta_true`:
///
/// ```text
/// db/dt = (F − P Gᵀ R⁻¹ G) b + (θ_true − θ_hat)
/// dΣ/dt = A Σ + Σ Aᵀ + Q + P Gᵀ R⁻¹ G P,   A = F − P Gᵀ R⁻¹ G
/// ```
pub fn solve_error_stats(
    model: &ValidatedModel,
    theta_true: &DriftPolicy,
    theta_hat: &DriftPolicy,
    riccati: &RiccatiPath,
) -> Result<ErrorStats> {
    model.check_policy("theta_true", theta_true)?;
    model.check_policy("theta_hat", theta_hat)?;
    riccati.check_grid(model)?;
    let n = model.n();
    let h = model.dt();
    let mut bias = NodeSeries::zeros(model.grid().n_nodes(), n);
    let mut covariance = Vec::with_capacity(model.grid().n_nodes());
    covariance.push(DMatrix::zeros(n, n));
    let mut b = DVector::zeros(n);
    for k in 0..model.n_steps() {
        let st = riccati_step(model, k, riccati.at(k))?;
        let a = closed_loop_stages(model, k, &st)?;
        let info = model.obs_information(k)?;
        let q = model.signal_cov(k);
        let u = DVector::from_iterator(
            n,
            theta_true.at(k).iter().zip(theta_hat.at(k)).map(|(t, e)| t - e),
        );

        b = bias_step(h, &a, &b, &u);
        bias.row_mut(k + 1).copy_from_slice(b.as_slice());

        let sigma = &covariance[k];
        let forcing: [DMatrix<f64>; 4] =
            std::array::from_fn(|i| q + &st.stages[i] * info * &st.stages[i]);
        let rhs = |i: usize, s: &DMatrix<f64>| {
            let as_ = &a[i] * s;
            &as_ + as_.transpose() + &forcing[i]
        };
        let k1 = rhs(0, sigma);
        let k2 = rhs(1, &(sigma + &k1 * (0.5 * h)));
        let k3 = rhs(2, &(sigma + &k2 * (0.5 * h)));
        let k4 = rhs(3, &(sigma + &k3 * h));
        covariance.push(symmetrize(&(sigma + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))));
    }
    let mse = covariance
        .iter()
        .enumerate()
        .map(|(k, s)| s.trace() + bias.row(k).iter().map(|v| v * v).sum::<f64>())
        .collect();
    Ok(ErrorStats {
        grid: *model.grid(),
        bias,
        covariance,
        mse,
    })
}

fn bias_step(h: f64, a: &[DMatrix<f64>; 4], b: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let k1 = &a[0] * b + u;
    let k2 = &a[1] * (b + &k1 * (0.5 * h)) + u;
    let k3 = &a[2] * (b + &k2 * (0.5 * h)) + u;
    let k4 = &a[3] * (b + &k3 * h) + u;
    b + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
}

/// Cached closed-loop stages for repeated bias solves on one model.
#[derive(Clone, Debug)]
pub struct BiasPropagator {
    dt: f64,
    stages: Vec<[DMatrix<f64>; 4]>,
    n: usize,
}

impl BiasPropagator {
    pub fn new(model: &ValidatedModel, riccati: &RiccatiPath) -> Result<Self> {
        riccati.check_grid(model)?;
        let stages = (0..model.n_steps())
            .map(|k| {
                let st = riccati_step(model, k, riccati.at(k))?;
                closed_loop_stages(model, k, &st)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BiasPropagator {
            dt: model.dt(),
            stages,
            n: model.n(),
        })
    }

    /// `b(t_until)` for the bias ODE driven by `source`; identical to the
    /// bias path of [`solve_error_stats`] with `θ_true − θ_hat = source`.
    pub fn bias_at(&self, source: &DriftPolicy, until: usize) -> DVector<f64> {
        let mut b = DVector::zeros(self.n);
        for k in 0..until {
            let u = DVector::from_column_slice(source.at(k));
            b = bias_step(self.dt, &self.stages[k], &b, &u);
        }
        b
    }

    /// Bias at `until` of a unit source on node interval `k` in component `i`.
    pub fn step_responses(&self, until: usize) -> Vec<DMatrix<f64>> {
        // Γ_k = one-step response to unit sources, then carried to `until`
        // with the homogeneous propagator.
        let n = self.n;
        let zero = DVector::zeros(n);
        let mut out = Vec::with_capacity(until);
        let mut carry = DMatrix::<f64>::identity(n, n);
        let mut rev = Vec::with_capacity(until);
        for k in (0..until).rev() {
            let mut gamma = DMatrix::zeros(n, n);
            for i in 0..n {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                gamma.set_column(i, &bias_step(self.dt, &self.stages[k], &zero, &e));
            }
            rev.push(&carry * gamma);
            let mut prop = DMatrix::zeros(n, n);
            for i in 0..n {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                prop.set_column(i, &bias_step(self.dt, &self.stages[k], &e, &zero));
            }
            carry = &carry * prop;
        }
        out.extend(rev.into_iter().rev());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, ConstantCoefficients};

    fn scalar(f: f64, g: f64, q: f64, r: f64, horizon: f64, n_steps: usize) -> ValidatedModel {
        let grid = TimeGrid::new(horizon, n_steps).unwrap();
        validate_model(ConstantCoefficients::scalar(f, 0.0, g, 0.0, q, r, 0.0).broadcast(n_steps), grid)
            .unwrap()
    }

    #[test]
    fn steady_state_examples() {
        assert!((steady_state_scalar(-1.0, 1.0, 1.0, 1.0).unwrap() - (2f64.sqrt() - 1.0)).abs() < 1e-15);
        assert!((steady_state_scalar(0.0, 1.0, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(steady_state_scalar(-1.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!(matches!(steady_state_scalar(1.0, 0.0, 1.0, 1.0), Err(Error::DegenerateG)));
    }

    #[test]
    fn zero_forcing_keeps_zero() {
        let m = scalar(-1.0, 1.0, 0.0, 1.0, 1.0, 100);
        let p = solve_riccati(&m).unwrap();
        assert!(p.values().iter().all(|v| v[(0, 0)] == 0.0));
    }

    #[test]
    fn pure_diffusion_grows_linearly() {
        let m = scalar(0.0, 0.0, 1.0, 1.0, 2.0, 2000);
        let p = solve_riccati(&m).unwrap();
        for k in (0..=2000).step_by(100) {
            assert!((p.at(k)[(0, 0)] - m.grid().time(k)).abs() < 1e-9);
        }
    }

    #[test]
    fn riccati_reaches_algebraic_root() {
        let m = scalar(-1.0, 1.0, 1.0, 1.0, 20.0, 20_000);
        let p = solve_riccati(&m).unwrap();
        assert!((p.last()[(0, 0)] - 0.414_213_56).abs() < 1e-6);
        assert!((p.last()[(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_frozen_values() {
        // high-accuracy adaptive solve of the same ODE
        assert!((scalar_riccati_exact(-1.0, 1.0, 1.0, 1.0, 1.0) - 0.385_818_596_186_334).abs() < 1e-13);
        assert!((scalar_riccati_exact(-1.0, 1.0, 1.0, 1.0, 0.5) - 0.300_957_694_985_474).abs() < 1e-13);
        assert!((scalar_riccati_exact(0.0, 0.0, 2.0, 1.0, 1.5) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn rk4_refinement_order() {
        let exact = scalar_riccati_exact(-1.0, 1.0, 1.0, 1.0, 2.0);
        let err = |n| (solve_riccati(&scalar(-1.0, 1.0, 1.0, 1.0, 2.0, n)).unwrap().last()[(0, 0)] - exact).abs();
        let (e1, e2) = (err(20), err(40));
        assert!(e1 / e2 >= 8.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn coarse_step_loses_positivity_or_accuracy() {
        // a violently unstable step must not silently clip
        let grid = TimeGrid::new(10.0, 5).unwrap();
        let m = validate_model(
            ConstantCoefficients::scalar(-1.0, 0.0, 10.0, 0.0, 1.0, 0.01, 0.0).broadcast(5),
            grid,
        )
        .unwrap();
        assert!(matches!(solve_riccati(&m), Err(Error::LostPositivity { .. })));
    }

    #[test]
    fn open_loop_identity_and_exponential() {
        let zero = scalar(0.0, 1.0, 1.0, 1.0, 1.0, 100);
        let id = transition(&zero, 0.2, 0.9, Generator::Open, None).unwrap();
        assert_eq!(id[(0, 0)], 1.0);

        for a in [-2.0, -0.5, 0.7, 2.0] {
            let m = scalar(a, 1.0, 1.0, 1.0, 5.0, 5000);
            let phi = transition(&m, 0.0, 5.0, Generator::Open, None).unwrap();
            assert!((phi[(0, 0)] - (a * 5.0_f64).exp()).abs() < 1e-8 * (a * 5.0_f64).exp().max(1.0));
            let phi = transition(&m, 1.5, 3.25, Generator::Open, None).unwrap();
            assert!((phi[(0, 0)] - (a * 1.75_f64).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn closed_loop_requires_riccati() {
        let m = scalar(-1.0, 1.0, 1.0, 1.0, 1.0, 10);
        assert!(matches!(
            transition(&m, 0.0, 1.0, Generator::ClosedLoop, None),
            Err(Error::MissingRiccati)
        ));
        assert!(matches!(
            transition(&m, 0.05, 1.0, Generator::Open, None),
            Err(Error::OutOfGrid { .. })
        ));
    }

    #[test]
    fn matched_drift_covariance_collapses_to_riccati() {
        let m = scalar(-1.0, 1.0, 1.0, 1.0, 2.0, 2000);
        let p = solve_riccati(&m).unwrap();
        let th = DriftPolicy::constant(2000, &[0.3]);
        let stats = solve_error_stats(&m, &th, &th, &p).unwrap();
        assert!(stats.bias.as_slice().iter().all(|&b| b == 0.0));
        for k in 0..=2000 {
            assert!((stats.covariance[k][(0, 0)] - p.at(k)[(0, 0)]).abs() < 1e-8);
        }
        assert_eq!(stats.mse[0], 0.0);
    }

    #[test]
    fn bias_matches_frozen_quadrature() {
        // ∫₀¹ Ψ(1,s) ds for F=-1, G=Q=R=1 from an independent adaptive solve
        let m = scalar(-1.0, 1.0, 1.0, 1.0, 1.0, 1000);
        let p = solve_riccati(&m).unwrap();
        let stats = solve_error_stats(&m, &DriftPolicy::constant(1000, &[1.0]), &DriftPolicy::zeros(1000, 1), &p).unwrap();
        assert!((stats.bias.row(1000)[0] - 0.551_924_530_774_028).abs() < 1e-9);
        assert!((stats.mse[1000] - 0.690_439_283_856_464).abs() < 1e-9);
    }

    #[test]
    fn step_responses_superpose_to_bias() {
        let m = scalar(-1.0, 1.0, 1.0, 1.0, 1.0, 200);
        let p = solve_riccati(&m).unwrap();
        let prop = BiasPropagator::new(&m, &p).unwrap();
        let theta = DriftPolicy::from_nodes((0..200).map(|k| vec![(k as f64 * 0.1).sin()]).collect()).unwrap();
        let direct = prop.bias_at(&theta, 150);
        let w = prop.step_responses(150);
        let sum: f64 = (0..150).map(|k| w[k][(0, 0)] * theta.at(k)[0]).sum();
        assert!((direct[0] - sum).abs() < 1e-13);
    }
}
