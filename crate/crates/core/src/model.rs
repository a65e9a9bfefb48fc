//! Time grid, coefficient schedules, the drift uncertainty box and drift
//! policies, plus validation of user-supplied schedules.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, min_eigenvalue, psd_factor};

/// Eigenvalue floor for positive (semi)definiteness checks.
pub const PD_TOL: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be > 0, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be >= 1".into()));
        }
        Ok(TimeGrid {
            horizon,
            dt: horizon / n_steps as f64,
            n_steps,
        })
    }

    pub fn from_step(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidGrid(format!("dt must be > 0, got {dt}")));
        }
        let grid = TimeGrid::new(dt * n_steps as f64, n_steps)?;
        debug_assert!((grid.n_steps as f64 * grid.dt - grid.horizon).abs() <= 1e-12 * grid.horizon);
        Ok(grid)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    /// Index of the node at time `t`.
    pub fn node_of(&self, t: f64) -> Result<usize> {
        if !t.is_finite() || t < -1e-9 * self.dt {
            return Err(Error::OutOfGrid { time: t });
        }
        let k = (t / self.dt).round();
        if (k * self.dt - t).abs() > 1e-6 * self.dt || k as usize > self.n_steps {
            return Err(Error::OutOfGrid { time: t });
        }
        Ok(k as usize)
    }
}

/// Coefficients of the linear system, one entry per grid interval
/// `[t_k, t_{k+1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSchedule {
    pub n: usize,
    pub m: usize,
    /// F_k, n×n.
    pub drift_matrix: Vec<DMatrix<f64>>,
    /// f_k, n.
    pub drift_offset: Vec<DVector<f64>>,
    /// G_k, m×n.
    pub obs_matrix: Vec<DMatrix<f64>>,
    /// g_k, m.
    pub obs_offset: Vec<DVector<f64>>,
    /// Q_k, n×n signal-noise covariance rate.
    pub signal_cov: Vec<DMatrix<f64>>,
    /// R_k, m×m observation-noise covariance rate.
    pub obs_cov: Vec<DMatrix<f64>>,
    pub x0: DVector<f64>,
}

/// Time-invariant coefficients, used to build a [`ModelSchedule`].
#[derive(Clone, Debug)]
pub struct ConstantCoefficients {
    pub drift_matrix: DMatrix<f64>,
    pub drift_offset: DVector<f64>,
    pub obs_matrix: DMatrix<f64>,
    pub obs_offset: DVector<f64>,
    pub signal_cov: DMatrix<f64>,
    pub obs_cov: DMatrix<f64>,
    pub x0: DVector<f64>,
}

impl ConstantCoefficients {
    /// Scalar system `dx = (F x + f) dt + dw`, `dm = (G x + g) dt + dv`.
    pub fn scalar(f_mat: f64, f_off: f64, g_mat: f64, g_off: f64, q: f64, r: f64, x0: f64) -> Self {
        ConstantCoefficients {
            drift_matrix: DMatrix::from_element(1, 1, f_mat),
            drift_offset: DVector::from_element(1, f_off),
            obs_matrix: DMatrix::from_element(1, 1, g_mat),
            obs_offset: DVector::from_element(1, g_off),
            signal_cov: DMatrix::from_element(1, 1, q),
            obs_cov: DMatrix::from_element(1, 1, r),
            x0: DVector::from_element(1, x0),
        }
    }

    pub fn broadcast(&self, n_steps: usize) -> ModelSchedule {
        ModelSchedule {
            n: self.drift_matrix.nrows(),
            m: self.obs_matrix.nrows(),
            drift_matrix: vec![self.drift_matrix.clone(); n_steps],
            drift_offset: vec![self.drift_offset.clone(); n_steps],
            obs_matrix: vec![self.obs_matrix.clone(); n_steps],
            obs_offset: vec![self.obs_offset.clone(); n_steps],
            signal_cov: vec![self.signal_cov.clone(); n_steps],
            obs_cov: vec![self.obs_cov.clone(); n_steps],
            x0: self.x0.clone(),
        }
    }
}

impl ModelSchedule {
    /// Nodes `0, factor, 2·factor, ...`; the interval length grows by `factor`.
    pub fn coarsen(&self, factor: usize) -> ModelSchedule {
        let pick_m = |v: &Vec<DMatrix<f64>>| v.iter().step_by(factor).cloned().collect();
        let pick_v = |v: &Vec<DVector<f64>>| v.iter().step_by(factor).cloned().collect();
        ModelSchedule {
            n: self.n,
            m: self.m,
            drift_matrix: pick_m(&self.drift_matrix),
            drift_offset: pick_v(&self.drift_offset),
            obs_matrix: pick_m(&self.obs_matrix),
            obs_offset: pick_v(&self.obs_offset),
            signal_cov: pick_m(&self.signal_cov),
            obs_cov: pick_m(&self.obs_cov),
            x0: self.x0.clone(),
        }
    }

    /// Samples the piecewise-constant coefficients of a schedule on `from`
    /// at the interval starts of `to`; times past the end reuse the last
    /// interval.
    pub fn resample(&self, from: &TimeGrid, to: &TimeGrid) -> ModelSchedule {
        let last = self.drift_matrix.len().saturating_sub(1);
        let idx: Vec<usize> = (0..to.n_steps())
            .map(|k| ((to.time(k) / from.dt() + 1e-9).floor() as usize).min(last))
            .collect();
        let pick_m = |v: &Vec<DMatrix<f64>>| idx.iter().map(|&i| v[i].clone()).collect();
        let pick_v = |v: &Vec<DVector<f64>>| idx.iter().map(|&i| v[i].clone()).collect();
        ModelSchedule {
            n: self.n,
            m: self.m,
            drift_matrix: pick_m(&self.drift_matrix),
            drift_offset: pick_v(&self.drift_offset),
            obs_matrix: pick_m(&self.obs_matrix),
            obs_offset: pick_v(&self.obs_offset),
            signal_cov: pick_m(&self.signal_cov),
            obs_cov: pick_m(&self.obs_cov),
            x0: self.x0.clone(),
        }
    }

    pub fn truncate(&self, n_steps: usize) -> ModelSchedule {
        let mut s = self.clone();
        s.drift_matrix.truncate(n_steps);
        s.drift_offset.truncate(n_steps);
        s.obs_matrix.truncate(n_steps);
        s.obs_offset.truncate(n_steps);
        s.signal_cov.truncate(n_steps);
        s.obs_cov.truncate(n_steps);
        s
    }
}

/// Componentwise drift bound μ; the uncertainty set is `{θ : |θ| ≤ μ}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBound {
    mu: Vec<f64>,
}

impl UncertaintyBound {
    pub fn new(mu: Vec<f64>) -> Result<Self> {
        if let Some(bad) = mu.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "drift bound must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(UncertaintyBound { mu })
    }

    pub fn uniform(n: usize, mu: f64) -> Result<Self> {
        UncertaintyBound::new(vec![mu; n])
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.mu.iter().all(|&m| m == 0.0)
    }
}

/// Deterministic drift θ, piecewise constant on the grid intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftPolicy {
    values: Vec<Vec<f64>>,
}

impl DriftPolicy {
    pub fn from_nodes(values: Vec<Vec<f64>>) -> Result<Self> {
        let n = values.first().map(Vec::len).unwrap_or(0);
        if values.is_empty() || values.iter().any(|v| v.len() != n) {
            return Err(Error::DimensionMismatch(
                "drift policy rows must be non-empty and share one dimension".into(),
            ));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "theta", node: 0 });
        }
        Ok(DriftPolicy { values })
    }

    pub fn zeros(n_steps: usize, n: usize) -> Self {
        DriftPolicy {
            values: vec![vec![0.0; n]; n_steps],
        }
    }

    pub fn constant(n_steps: usize, value: &[f64]) -> Self {
        DriftPolicy {
            values: vec![value.to_vec(); n_steps],
        }
    }

    /// `segments.len()` equal-length blocks of nodes; block `j` holds `segments[j]`.
    pub fn piecewise(n_steps: usize, segments: &[Vec<f64>]) -> Self {
        let s = segments.len().max(1);
        let values = (0..n_steps)
            .map(|k| segments[(k * s / n_steps).min(s - 1)].clone())
            .collect();
        DriftPolicy { values }
    }

    pub fn n_steps(&self) -> usize {
        self.values.len()
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k.min(self.values.len() - 1)]
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn within(&self, bound: &UncertaintyBound) -> bool {
        self.values
            .iter()
            .all(|row| row.iter().zip(bound.mu()).all(|(v, mu)| v.abs() <= *mu))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DriftPolicy {
        DriftPolicy {
            values: self
                .values
                .iter()
                .map(|row| row.iter().map(|&v| f(v)).collect())
                .collect(),
        }
    }

    pub fn truncate(&self, n_steps: usize) -> DriftPolicy {
        DriftPolicy {
            values: self.values[..n_steps].to_vec(),
        }
    }

    pub fn coarsen(&self, factor: usize) -> DriftPolicy {
        DriftPolicy {
            values: self.values.iter().step_by(factor).cloned().collect(),
        }
    }
}

/// Projection onto the box `[-μ, μ]`.
pub fn clamp_policy(theta: &DriftPolicy, bound: &UncertaintyBound) -> DriftPolicy {
    DriftPolicy {
        values: theta
            .values
            .iter()
            .map(|row| {
                row.iter()
                    .zip(bound.mu())
                    .map(|(&v, &mu)| v.clamp(-mu, mu))
                    .collect()
            })
            .collect(),
    }
}

/// A schedule that passed validation, with the per-node factorizations the
/// integrators and the simulator need.
#[derive(Clone, Debug)]
pub struct ValidatedModel {
    schedule: ModelSchedule,
    grid: TimeGrid,
    r_min: f64,
    derived: Vec<NodeDerived>,
}

#[derive(Clone, Debug)]
struct NodeDerived {
    /// R⁻¹, absent when R is only semidefinite.
    obs_cov_inv: Option<DMatrix<f64>>,
    /// Gᵀ R⁻¹ G.
    obs_information: Option<DMatrix<f64>>,
    /// PPᵀ = Q.
    signal_factor: DMatrix<f64>,
    /// (chol Q)⁻¹, absent when Q is singular.
    signal_factor_inv: Option<DMatrix<f64>>,
    /// PPᵀ = R.
    obs_factor: DMatrix<f64>,
    obs_factor_inv: Option<DMatrix<f64>>,
}

/// Validates a schedule against the grid, requiring R uniformly positive
/// definite.
pub fn validate_model(schedule: ModelSchedule, grid: TimeGrid) -> Result<ValidatedModel> {
    validate_inner(schedule, grid, true)
}

/// Like [`validate_model`] but accepts a semidefinite (possibly zero) R.
/// The result can drive the simulator, not the filters.
pub fn validate_model_for_simulation(
    schedule: ModelSchedule,
    grid: TimeGrid,
) -> Result<ValidatedModel> {
    validate_inner(schedule, grid, false)
}

fn check_len<T>(what: &str, v: &[T], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "{what}: expected {expected} nodes, got {}",
            v.len()
        )));
    }
    Ok(())
}

fn check_mat(what: &'static str, k: usize, m: &DMatrix<f64>, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::DimensionMismatch(format!(
            "{what} at node {k}: expected {}x{}, got {}x{}",
            shape.0,
            shape.1,
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what, node: k });
    }
    Ok(())
}

fn check_vec(what: &'static str, k: usize, v: &DVector<f64>, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::DimensionMismatch(format!(
            "{what} at node {k}: expected length {len}, got {}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { what, node: k });
    }
    Ok(())
}

fn check_symmetric(what: &'static str, k: usize, m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    if max_asymmetry(m) > SYMMETRY_TOL * scale {
        return Err(Error::DimensionMismatch(format!("{what} at node {k} is not symmetric")));
    }
    Ok(())
}

fn validate_inner(schedule: ModelSchedule, grid: TimeGrid, strict: bool) -> Result<ValidatedModel> {
    let (n, m, steps) = (schedule.n, schedule.m, grid.n_steps());
    if n == 0 || m == 0 {
        return Err(Error::DimensionMismatch("state and observation dimensions must be >= 1".into()));
    }
    check_len("F", &schedule.drift_matrix, steps)?;
    check_len("f", &schedule.drift_offset, steps)?;
    check_len("G", &schedule.obs_matrix, steps)?;
    check_len("g", &schedule.obs_offset, steps)?;
    check_len("Q", &schedule.signal_cov, steps)?;
    check_len("R", &schedule.obs_cov, steps)?;
    check_vec("x0", 0, &schedule.x0, n)?;

    let mut r_min = f64::INFINITY;
    let mut derived = Vec::with_capacity(steps);
    for k in 0..steps {
        check_mat("F", k, &schedule.drift_matrix[k], (n, n))?;
        check_vec("f", k, &schedule.drift_offset[k], n)?;
        check_mat("G", k, &schedule.obs_matrix[k], (m, n))?;
        check_vec("g", k, &schedule.obs_offset[k], m)?;
        let q = &schedule.signal_cov[k];
        let r = &schedule.obs_cov[k];
        check_mat("Q", k, q, (n, n))?;
        check_mat("R", k, r, (m, m))?;
        check_symmetric("Q", k, q)?;
        check_symmetric("R", k, r)?;

        let q_min = min_eigenvalue(q);
        if q_min < -PD_TOL {
            return Err(Error::NotPsd { what: "Q", node: k, min_eig: q_min });
        }
        let r_eig = min_eigenvalue(r);
        r_min = r_min.min(r_eig);
        if strict && r_eig < PD_TOL {
            return Err(Error::NotPositiveDefinite { what: "R", node: k, min_eig: r_eig });
        }
        if !strict && r_eig < -PD_TOL {
            return Err(Error::NotPsd { what: "R", node: k, min_eig: r_eig });
        }

        let g = &schedule.obs_matrix[k];
        let obs_cov_inv = (r_eig >= PD_TOL).then(|| r.clone().try_inverse()).flatten();
        let obs_information = obs_cov_inv.as_ref().map(|ri| g.transpose() * ri * g);
        let signal_factor = psd_factor(q);
        let signal_factor_inv = if q_min >= PD_TOL {
            signal_factor.clone().try_inverse()
        } else {
            None
        };
        let obs_factor = psd_factor(r);
        let obs_factor_inv = if r_eig >= PD_TOL {
            obs_factor.clone().try_inverse()
        } else {
            None
        };
        derived.push(NodeDerived {
            obs_cov_inv,
            obs_information,
            signal_factor,
            signal_factor_inv,
            obs_factor,
            obs_factor_inv,
        });
    }

    Ok(ValidatedModel {
        schedule,
        grid,
        r_min,
        derived,
    })
}

impl ValidatedModel {
    pub fn schedule(&self) -> &ModelSchedule {
        &self.schedule
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.schedule.n
    }

    pub fn m(&self) -> usize {
        self.schedule.m
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    /// Smallest eigenvalue of R over all nodes.
    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.schedule.x0
    }

    // Node `n_steps` reuses the coefficients of the last interval.
    fn idx(&self, k: usize) -> usize {
        k.min(self.grid.n_steps() - 1)
    }

    pub fn drift_matrix(&self, k: usize) -> &DMatrix<f64> {
        &self.schedule.drift_matrix[self.idx(k)]
    }

    pub fn drift_offset(&self, k: usize) -> &DVector<f64> {
        &self.schedule.drift_offset[self.idx(k)]
    }

    pub fn obs_matrix(&self, k: usize) -> &DMatrix<f64> {
        &self.schedule.obs_matrix[self.idx(k)]
    }

    pub fn obs_offset(&self, k: usize) -> &DVector<f64> {
        &self.schedule.obs_offset[self.idx(k)]
    }

    pub fn signal_cov(&self, k: usize) -> &DMatrix<f64> {
        &self.schedule.signal_cov[self.idx(k)]
    }

    pub fn obs_cov(&self, k: usize) -> &DMatrix<f64> {
        &self.schedule.obs_cov[self.idx(k)]
    }

    pub(crate) fn signal_factor(&self, k: usize) -> &DMatrix<f64> {
        &self.derived[self.idx(k)].signal_factor
    }

    pub(crate) fn signal_factor_inv(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.derived[self.idx(k)].signal_factor_inv.as_ref()
    }

    pub(crate) fn obs_factor(&self, k: usize) -> &DMatrix<f64> {
        &self.derived[self.idx(k)].obs_factor
    }

    pub(crate) fn obs_factor_inv(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.derived[self.idx(k)].obs_factor_inv.as_ref()
    }

    pub fn obs_cov_inv(&self, k: usize) -> Result<&DMatrix<f64>> {
        let k = self.idx(k);
        self.derived[k].obs_cov_inv.as_ref().ok_or(Error::NotPositiveDefinite {
            what: "R",
            node: k,
            min_eig: self.r_min,
        })
    }

    /// Gᵀ R⁻¹ G at node `k`.
    pub fn obs_information(&self, k: usize) -> Result<&DMatrix<f64>> {
        let k = self.idx(k);
        self.derived[k].obs_information.as_ref().ok_or(Error::NotPositiveDefinite {
            what: "R",
            node: k,
            min_eig: self.r_min,
        })
    }

    /// Errors unless R is uniformly positive definite.
    pub fn ensure_filterable(&self) -> Result<()> {
        if self.r_min < PD_TOL {
            return Err(Error::NotPositiveDefinite {
                what: "R",
                node: 0,
                min_eig: self.r_min,
            });
        }
        Ok(())
    }

    fn is_strict(&self) -> bool {
        self.r_min >= PD_TOL
    }

    fn revalidate(&self, schedule: ModelSchedule, grid: TimeGrid) -> Result<ValidatedModel> {
        validate_inner(schedule, grid, self.is_strict())
    }

    /// The model restricted to `[0, t_{n_steps}]`.
    pub fn truncate(&self, n_steps: usize) -> Result<ValidatedModel> {
        if n_steps == 0 || n_steps > self.n_steps() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate {} steps to {n_steps}",
                self.n_steps()
            )));
        }
        let grid = TimeGrid::from_step(self.dt(), n_steps)?;
        self.revalidate(self.schedule.truncate(n_steps), grid)
    }

    /// The model on a grid `factor` times coarser, sampling coefficients at
    /// the retained nodes.
    pub fn coarsen(&self, factor: usize) -> Result<ValidatedModel> {
        if factor == 0 || !self.n_steps().is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!(
                "coarsening factor {factor} does not divide {} steps",
                self.n_steps()
            )));
        }
        let grid = TimeGrid::new(self.grid.horizon(), self.n_steps() / factor)?;
        self.revalidate(self.schedule.coarsen(factor), grid)
    }

    /// True when every coefficient is the same at every node.
    pub fn is_time_invariant(&self) -> bool {
        let s = &self.schedule;
        fn same<T: PartialEq>(v: &[T]) -> bool {
            v.windows(2).all(|w| w[0] == w[1])
        }
        same(&s.drift_matrix)
            && same(&s.drift_offset)
            && same(&s.obs_matrix)
            && same(&s.obs_offset)
            && same(&s.signal_cov)
            && same(&s.obs_cov)
    }

    pub(crate) fn check_policy(&self, what: &str, theta: &DriftPolicy) -> Result<()> {
        if theta.n_steps() != self.n_steps() || theta.dim() != self.n() {
            return Err(Error::GridMismatch(format!(
                "{what}: policy is {}x{}, model grid needs {}x{}",
                theta.n_steps(),
                theta.dim(),
                self.n_steps(),
                self.n()
            )));
        }
        Ok(())
    }
}
