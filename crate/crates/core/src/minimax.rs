//! Worst-case mean-square error over the drift box, restricted to
//! deterministic policy classes.
//!
//! For a filter with parameter `θ̂` under true drift `θ`, the error variance
//! does not depend on either policy and the bias is linear in `θ − θ̂`:
//!
//! ```text
//! mse(θ, θ̂) = trace Σ_t + ‖r(θ) − r(θ̂)‖²,    r(θ) = Σ_k W_k θ_k
//! ```
//!
//! where `W_k` is the exact discrete response of the RK4 bias flow at `t` to
//! a unit source on interval `k`. The inner sup is a convex maximization over
//! a box and the outer objective `g(θ̂) = sup_θ mse(θ, θ̂)` is convex.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::FilterEngine;
use crate::linalg::is_diagonal;
use crate::model::{DriftPolicy, TimeGrid, UncertaintyBound, ValidatedModel};
use crate::ode::{solve_error_stats, solve_riccati, BiasPropagator, RiccatiPath};
use crate::simulate::map_paths;
use crate::stats::McEstimate;

/// Exact `E_{P^θ} ‖x_t − x̂_t‖²` for the filter with parameter `theta_hat`.
pub fn mse_exact(
    model: &ValidatedModel,
    theta_true: &DriftPolicy,
    theta_hat: &DriftPolicy,
    t: f64,
) -> Result<f64> {
    let k = model.grid().node_of(t)?;
    let p = solve_riccati(model)?;
    Ok(solve_error_stats(model, theta_true, theta_hat, &p)?.mse[k])
}

/// Sample mean of `‖x_t − x̂_t‖²` over paths simulated under `theta_true`
/// and filtered with `theta_hat`.
pub fn mse_monte_carlo(
    model: &ValidatedModel,
    theta_true: &DriftPolicy,
    theta_hat: &DriftPolicy,
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate> {
    let k = model.grid().node_of(t)?;
    model.check_policy("theta_true", theta_true)?;
    model.check_policy("theta_hat", theta_hat)?;
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
    }
    if k == 0 {
        return Ok(McEstimate::from_samples(&vec![0.0; n_paths]));
    }
    let sub = model.truncate(k)?;
    let th_true = theta_true.truncate(k);
    let th_hat = theta_hat.truncate(k);
    let engine = FilterEngine::new(&sub, Arc::new(solve_riccati(&sub)?))?;
    let samples = map_paths(&sub, &th_true, n_paths, seed, |_, path| {
        let run = engine
            .robust(&th_hat, &path.observation_increments())
            .expect("shapes checked before simulation");
        let (x, xh) = (path.x.row(k), run.estimates.row(k));
        x.iter().zip(xh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    })?;
    Ok(McEstimate::from_samples(&samples))
}

/// A searchable family of deterministic drifts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyClass {
    /// One value per state component for the whole horizon.
    Constant,
    /// `segments` equal-length blocks up to the evaluation time.
    PiecewiseConstant { segments: usize },
    /// `±μ` per node following the sign of the bias kernel.
    BangBang,
}

impl std::fmt::Display for PolicyClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicyClass::Constant => write!(f, "constant"),
            PolicyClass::PiecewiseConstant { segments } => write!(f, "piecewise:{segments}"),
            PolicyClass::BangBang => write!(f, "bang_bang"),
        }
    }
}

impl std::str::FromStr for PolicyClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(PolicyClass::Constant),
            "bang_bang" | "bang-bang" => Ok(PolicyClass::BangBang),
            other => match other.strip_prefix("piecewise:") {
                Some(n) => {
                    let segments: usize = n
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad segment count in {other:?}")))?;
                    if segments == 0 {
                        return Err(Error::InvalidArgument("piecewise class needs >= 1 segment".into()));
                    }
                    Ok(PolicyClass::PiecewiseConstant { segments })
                }
                None => Err(Error::InvalidArgument(format!(
                    "unknown policy class {other:?} (constant | piecewise:N | bang_bang)"
                ))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Grid step as a fraction of μ per component.
    pub resolution: f64,
    /// Golden-section stops when the bracket is shorter than `golden_tol · μ`.
    pub golden_tol: f64,
    /// Coordinate sweeps for classes with more than two parameters.
    pub max_sweeps: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            resolution: 0.01,
            golden_tol: 1e-9,
            max_sweeps: 20,
        }
    }
}

impl SearchOptions {
    fn grid_points(&self, mu: f64) -> Vec<f64> {
        if mu == 0.0 {
            return vec![0.0];
        }
        let intervals = (2.0 / self.resolution).round().max(1.0) as usize;
        // from +μ down to −μ, endpoints exact
        (0..=intervals)
            .map(|j| {
                if j == intervals {
                    -mu
                } else {
                    mu - 2.0 * mu * j as f64 / intervals as f64
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BestResponse {
    pub policy: DriftPolicy,
    pub value: f64,
    /// Class actually searched (differs from the request after a fallback).
    pub class: PolicyClass,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustEstimate {
    pub theta_hat: DriftPolicy,
    /// Class parameters of `theta_hat`.
    pub params: Vec<f64>,
    /// `g(θ̂*) = sup_θ mse(θ, θ̂*)`.
    pub value: f64,
}

/// Evaluation-time data shared by all searches on one model.
#[derive(Clone, Debug)]
pub struct MinimaxProblem<'a> {
    model: &'a ValidatedModel,
    bound: UncertaintyBound,
    riccati: Arc<RiccatiPath>,
    t: f64,
    t_index: usize,
    variance: f64,
    weights: Vec<DMatrix<f64>>,
}

impl<'a> MinimaxProblem<'a> {
    pub fn new(model: &'a ValidatedModel, bound: UncertaintyBound, t: f64) -> Result<Self> {
        if bound.dim() != model.n() {
            return Err(Error::DimensionMismatch(format!(
                "drift bound has {} components, state has {}",
                bound.dim(),
                model.n()
            )));
        }
        let t_index = model.grid().node_of(t)?;
        let riccati = Arc::new(solve_riccati(model)?);
        let zero = DriftPolicy::zeros(model.n_steps(), model.n());
        let stats = solve_error_stats(model, &zero, &zero, &riccati)?;
        let weights = BiasPropagator::new(model, &riccati)?.step_responses(t_index);
        Ok(MinimaxProblem {
            model,
            bound,
            riccati,
            t,
            t_index,
            variance: stats.covariance[t_index].trace(),
            weights,
        })
    }

    pub fn model(&self) -> &ValidatedModel {
        self.model
    }

    pub fn bound(&self) -> &UncertaintyBound {
        &self.bound
    }

    pub fn riccati(&self) -> &Arc<RiccatiPath> {
        &self.riccati
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn t_index(&self) -> usize {
        self.t_index
    }

    /// `trace Σ_t`, the policy-independent part of the MSE.
    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Bias at `t` produced by the source `theta`.
    pub fn response(&self, theta: &DriftPolicy) -> DVector<f64> {
        let mut r = DVector::zeros(self.model.n());
        for (k, w) in self.weights.iter().enumerate() {
            r += w * DVector::from_column_slice(theta.at(k));
        }
        r
    }

    pub fn mse(&self, theta_true: &DriftPolicy, theta_hat: &DriftPolicy) -> f64 {
        self.variance + (self.response(theta_true) - self.response(theta_hat)).norm_squared()
    }

    fn n_params(&self, class: PolicyClass) -> usize {
        match class {
            PolicyClass::PiecewiseConstant { segments } => self.model.n() * segments,
            _ => self.model.n(),
        }
    }

    fn param_bounds(&self, class: PolicyClass) -> Vec<f64> {
        let reps = self.n_params(class) / self.model.n();
        (0..reps).flat_map(|_| self.bound.mu().iter().copied()).collect()
    }

    /// Policy on the model grid for class parameters `params`
    /// (segment-major for the piecewise class).
    pub fn class_policy(&self, class: PolicyClass, params: &[f64]) -> DriftPolicy {
        let n = self.model.n();
        let steps = self.model.n_steps();
        match class {
            PolicyClass::PiecewiseConstant { segments } => {
                let span = self.t_index.max(1);
                let values = (0..steps)
                    .map(|k| {
                        let j = (k.min(span - 1) * segments / span).min(segments - 1);
                        params[j * n..(j + 1) * n].to_vec()
                    })
                    .collect();
                DriftPolicy::from_nodes(values).expect("class parameters are finite")
            }
            _ => DriftPolicy::constant(steps, params),
        }
    }

    /// Response matrix of the class parameters: `r(policy(c)) = B c`.
    fn class_response(&self, class: PolicyClass) -> DMatrix<f64> {
        let n = self.model.n();
        let d = self.n_params(class);
        let mut b = DMatrix::zeros(n, d);
        for (k, w) in self.weights.iter().enumerate() {
            let j = match class {
                PolicyClass::PiecewiseConstant { segments } => {
                    (k * segments / self.t_index.max(1)).min(segments - 1)
                }
                _ => 0,
            };
            let mut block = b.columns_mut(j * n, n);
            block += w;
        }
        b
    }

    /// Worst-case drift in `class` against a filter with parameter `theta_hat`.
    pub fn best_response(
        &self,
        theta_hat: &DriftPolicy,
        class: PolicyClass,
        opts: &SearchOptions,
    ) -> Result<BestResponse> {
        self.model.check_policy("theta_hat", theta_hat)?;
        let target = self.response(theta_hat);
        if class == PolicyClass::BangBang {
            match self.bang_bang(&target) {
                Ok(policy) => {
                    let value = self.variance + (self.response(&policy) - &target).norm_squared();
                    return Ok(BestResponse { policy, value, class, warning: None });
                }
                Err(Error::UnsupportedClass(msg)) => {
                    log::warn!("{msg}; falling back to the constant class");
                    let mut br = self.box_best_response(&target, PolicyClass::Constant, opts);
                    br.warning = Some(format!("{msg}; fell back to constant"));
                    return Ok(br);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(self.box_best_response(&target, class, opts))
    }

    fn box_best_response(&self, target: &DVector<f64>, class: PolicyClass, opts: &SearchOptions) -> BestResponse {
        let b = self.class_response(class);
        let objective = |c: &[f64]| (&b * DVector::from_column_slice(c) - target).norm_squared();
        let (params, excess) = maximize_box(&objective, &self.param_bounds(class), opts);
        BestResponse {
            policy: self.class_policy(class, &params),
            value: self.variance + excess,
            class,
            warning: None,
        }
    }

    /// Bang-bang drift maximizing the bias distance from `target`; requires a
    /// diagonal bias kernel so components decouple.
    fn bang_bang(&self, target: &DVector<f64>) -> Result<DriftPolicy> {
        if let Some(k) = self.weights.iter().position(|w| !is_diagonal(w, 1e-12)) {
            return Err(Error::UnsupportedClass(format!(
                "bang_bang needs a diagonal closed-loop kernel; coupling at node {k}"
            )));
        }
        let n = self.model.n();
        let mu = self.bound.mu();
        let sign = |k: usize, i: usize| -> f64 {
            match self.weights.get(k) {
                Some(w) if w[(i, i)] < 0.0 => -1.0,
                _ => 1.0,
            }
        };
        let mut flip = vec![1.0; n];
        for (i, f) in flip.iter_mut().enumerate() {
            let reach: f64 = self.weights.iter().map(|w| w[(i, i)].abs()).sum::<f64>() * mu[i];
            if (-reach - target[i]).powi(2) > (reach - target[i]).powi(2) {
                *f = -1.0;
            }
        }
        let values = (0..self.model.n_steps())
            .map(|k| (0..n).map(|i| flip[i] * sign(k, i) * mu[i]).collect())
            .collect();
        DriftPolicy::from_nodes(values)
    }

    /// `g(θ̂) = sup_θ mse(θ, θ̂)` for estimator parameters `params`.
    pub fn worst_case(
        &self,
        estimator: PolicyClass,
        params: &[f64],
        adversary: PolicyClass,
        opts: &SearchOptions,
    ) -> Result<BestResponse> {
        self.best_response(&self.class_policy(estimator, params), adversary, opts)
    }

    /// Minimizes `g` over the estimator class by grid and golden-section
    /// coordinate search.
    pub fn robust_theta_hat(
        &self,
        estimator: PolicyClass,
        adversary: PolicyClass,
        opts: &SearchOptions,
    ) -> Result<RobustEstimate> {
        if estimator == PolicyClass::BangBang {
            return Err(Error::UnsupportedClass("bang_bang is an adversary class only".into()));
        }
        let g = |c: &[f64]| -> f64 {
            self.worst_case(estimator, c, adversary, opts)
                .map(|br| br.value)
                .unwrap_or(f64::INFINITY)
        };
        let (params, value) = minimize_box(&g, &self.param_bounds(estimator), opts);
        Ok(RobustEstimate {
            theta_hat: self.class_policy(estimator, &params),
            params,
            value,
        })
    }

    /// `g` along parameter `component` at `points`, others held at `base`.
    pub fn profile(
        &self,
        estimator: PolicyClass,
        adversary: PolicyClass,
        base: &[f64],
        component: usize,
        points: &[f64],
        opts: &SearchOptions,
    ) -> Result<Vec<(f64, f64)>> {
        points
            .iter()
            .map(|&v| {
                let mut c = base.to_vec();
                c[component] = v;
                Ok((v, self.worst_case(estimator, &c, adversary, opts)?.value))
            })
            .collect()
    }

    pub fn saddle_report(
        &self,
        estimator: PolicyClass,
        adversary: PolicyClass,
        opts: &SearchOptions,
    ) -> Result<SaddleReport> {
        let robust = self.robust_theta_hat(estimator, adversary, opts)?;
        let worst = self.best_response(&robust.theta_hat, adversary, opts)?;
        // inner inf over deterministic filters is attained at the matched drift
        let lower = [&worst.policy, &DriftPolicy::zeros(self.model.n_steps(), self.model.n())]
            .iter()
            .map(|th| self.mse(th, th))
            .fold(f64::NEG_INFINITY, f64::max);
        let upper = worst.value;
        Ok(SaddleReport {
            t: self.t,
            estimator_class: estimator,
            adversary_class: worst.class,
            theta_hat_params: robust.params,
            theta_star_segments: policy_segments(&worst.policy, self.model.grid(), self.t_index),
            theta_hat_star: robust.theta_hat,
            theta_star: worst.policy,
            upper_value: upper,
            lower_value: lower,
            duality_gap: upper - lower,
            baseline_p: self.riccati.trace_at(self.t_index),
            warning: worst.warning,
            note: "values are over deterministic drift and estimator classes only; \
                   lower_value takes the inner infimum over all deterministic filter drifts \
                   (attained at the matched drift), so a positive gap reflects the restricted \
                   adversary class rather than a failure of the full adapted-policy saddle"
                .into(),
        })
    }
}

/// A run of equal drift values starting at `t_start`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySegment {
    pub t_start: f64,
    pub value: Vec<f64>,
}

/// Run-length form of `policy` on the intervals before node `until`.
pub fn policy_segments(policy: &DriftPolicy, grid: &TimeGrid, until: usize) -> Vec<PolicySegment> {
    let mut out: Vec<PolicySegment> = Vec::new();
    for k in 0..until.max(1) {
        let v = policy.at(k);
        if out.last().is_none_or(|s| s.value != v) {
            out.push(PolicySegment { t_start: grid.time(k), value: v.to_vec() });
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct SaddleReport {
    pub t: f64,
    pub estimator_class: PolicyClass,
    pub adversary_class: PolicyClass,
    pub theta_hat_params: Vec<f64>,
    /// Robust filter drift on the grid.
    #[serde(skip)]
    pub theta_hat_star: DriftPolicy,
    /// Worst-case drift against `theta_hat_star`.
    #[serde(skip)]
    pub theta_star: DriftPolicy,
    /// `theta_star` before `t`, run-length encoded.
    pub theta_star_segments: Vec<PolicySegment>,
    /// `inf_θ̂ sup_θ mse`.
    pub upper_value: f64,
    /// `sup_θ inf_θ̂ mse`.
    pub lower_value: f64,
    pub duality_gap: f64,
    /// `trace P_t`.
    pub baseline_p: f64,
    pub warning: Option<String>,
    pub note: String,
}

pub fn best_response_theta(
    model: &ValidatedModel,
    bound: &UncertaintyBound,
    theta_hat: &DriftPolicy,
    t: f64,
    class: PolicyClass,
    opts: &SearchOptions,
) -> Result<BestResponse> {
    MinimaxProblem::new(model, bound.clone(), t)?.best_response(theta_hat, class, opts)
}

pub fn robust_theta_hat(
    model: &ValidatedModel,
    bound: &UncertaintyBound,
    t: f64,
    estimator: PolicyClass,
    adversary: PolicyClass,
    opts: &SearchOptions,
) -> Result<RobustEstimate> {
    MinimaxProblem::new(model, bound.clone(), t)?.robust_theta_hat(estimator, adversary, opts)
}

pub fn saddle_report(
    model: &ValidatedModel,
    bound: &UncertaintyBound,
    t: f64,
    estimator: PolicyClass,
    adversary: PolicyClass,
    opts: &SearchOptions,
) -> Result<SaddleReport> {
    MinimaxProblem::new(model, bound.clone(), t)?.saddle_report(estimator, adversary, opts)
}

/// True when `values[i] ≤ (values[i−1] + values[i+1]) / 2 + tol` throughout.
pub fn midpoint_convex(values: &[f64], tol: f64) -> bool {
    values
        .windows(3)
        .all(|w| w[1] <= 0.5 * (w[0] + w[2]) + tol)
}

const INVPHI: f64 = 0.618_033_988_749_894_8;

fn golden<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, tol: f64, maximize: bool) -> (f64, f64) {
    let sgn = if maximize { -1.0 } else { 1.0 };
    let mut obj = |x: f64| sgn * f(x);
    let mut x1 = hi - INVPHI * (hi - lo);
    let mut x2 = lo + INVPHI * (hi - lo);
    let (mut f1, mut f2) = (obj(x1), obj(x2));
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INVPHI * (hi - lo);
            f1 = obj(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INVPHI * (hi - lo);
            f2 = obj(x2);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, sgn * obj(x))
}

/// Grid, vertex and golden-section search for the maximum over `∏[−μ_i, μ_i]`.
fn maximize_box<F: Fn(&[f64]) -> f64>(f: &F, mu: &[f64], opts: &SearchOptions) -> (Vec<f64>, f64) {
    let d = mu.len();
    let grids: Vec<Vec<f64>> = mu.iter().map(|&m| opts.grid_points(m)).collect();
    let mut best = mu.to_vec();
    let mut best_val = f(&best);
    let consider = |c: &[f64], best: &mut Vec<f64>, best_val: &mut f64| {
        let v = f(c);
        if v > *best_val {
            *best_val = v;
            best.copy_from_slice(c);
        }
    };

    if d <= 2 {
        let mut c = vec![0.0; d];
        let mut idx = vec![0usize; d];
        loop {
            for i in 0..d {
                c[i] = grids[i][idx[i]];
            }
            consider(&c, &mut best, &mut best_val);
            let mut i = 0;
            while i < d {
                idx[i] += 1;
                if idx[i] < grids[i].len() {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
            if i == d {
                break;
            }
        }
    } else {
        for _ in 0..opts.max_sweeps {
            let before = best_val;
            for i in 0..d {
                let mut c = best.clone();
                for &v in &grids[i] {
                    c[i] = v;
                    consider(&c, &mut best, &mut best_val);
                }
            }
            if best_val <= before {
                break;
            }
        }
    }

    // convex objectives peak at a vertex
    if d <= 16 {
        let mut c = vec![0.0; d];
        for mask in 0u32..(1u32 << d) {
            for i in 0..d {
                c[i] = if mask & (1 << i) == 0 { mu[i] } else { -mu[i] };
            }
            consider(&c, &mut best, &mut best_val);
        }
    }

    for i in 0..d {
        if mu[i] == 0.0 {
            continue;
        }
        let h = opts.resolution * mu[i];
        let lo = (best[i] - h).max(-mu[i]);
        let hi = (best[i] + h).min(mu[i]);
        let mut c = best.clone();
        let (x, _) = golden(
            |v| {
                c[i] = v;
                f(&c)
            },
            lo,
            hi,
            opts.golden_tol * mu[i],
            true,
        );
        let mut cand = best.clone();
        cand[i] = x;
        consider(&cand, &mut best, &mut best_val);
    }
    (best, best_val)
}

/// Coordinate grid and golden-section search for the minimum over the box.
fn minimize_box<F: Fn(&[f64]) -> f64>(f: &F, mu: &[f64], opts: &SearchOptions) -> (Vec<f64>, f64) {
    let d = mu.len();
    let grids: Vec<Vec<f64>> = mu
        .iter()
        .map(|&m| {
            let mut g = opts.grid_points(m);
            g.reverse();
            g
        })
        .collect();
    let mut best = vec![0.0; d];
    let mut best_val = f(&best);
    for _ in 0..opts.max_sweeps.max(1) {
        let before = best_val;
        for i in 0..d {
            let mut c = best.clone();
            for &v in &grids[i] {
                c[i] = v;
                let val = f(&c);
                if val < best_val {
                    best_val = val;
                    best[i] = v;
                }
            }
            if mu[i] == 0.0 {
                continue;
            }
            let h = opts.resolution * mu[i];
            let lo = (best[i] - h).max(-mu[i]);
            let hi = (best[i] + h).min(mu[i]);
            let mut c = best.clone();
            let (x, v) = golden(
                |v| {
                    c[i] = v;
                    f(&c)
                },
                lo,
                hi,
                opts.golden_tol * mu[i],
                false,
            );
            if v < best_val {
                best_val = v;
                best[i] = x;
            }
        }
        if d == 1 || best_val >= before {
            break;
        }
    }
    (best, best_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, ConstantCoefficients, TimeGrid};

    const P1: f64 = 0.385_818_596_186_334;
    const LAMBDA1: f64 = 0.551_924_530_774_028;

    fn default_model() -> ValidatedModel {
        let grid = TimeGrid::new(2.0, 2000).unwrap();
        validate_model(ConstantCoefficients::scalar(-1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0).broadcast(2000), grid)
            .unwrap()
    }

    #[test]
    fn exact_mse_examples() {
        let m = default_model();
        let z = DriftPolicy::zeros(2000, 1);
        let one = DriftPolicy::constant(2000, &[1.0]);
        assert_eq!(mse_exact(&m, &one, &z, 0.0).unwrap(), 0.0);
        assert!((mse_exact(&m, &one, &one, 1.0).unwrap() - P1).abs() < 1e-10);
        assert!((mse_exact(&m, &one, &z, 1.0).unwrap() - (P1 + LAMBDA1 * LAMBDA1)).abs() < 1e-9);
    }

    #[test]
    fn linear_response_matches_ode() {
        let m = default_model();
        let prob = MinimaxProblem::new(&m, UncertaintyBound::uniform(1, 1.0).unwrap(), 1.0).unwrap();
        let a = DriftPolicy::from_nodes((0..2000).map(|k| vec![(k as f64 / 300.0).sin()]).collect()).unwrap();
        let b = DriftPolicy::constant(2000, &[0.25]);
        assert!((prob.mse(&a, &b) - mse_exact(&m, &a, &b, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let m = default_model();
        let a = DriftPolicy::constant(2000, &[0.7]);
        let b = DriftPolicy::constant(2000, &[-0.1]);
        let base = mse_exact(&m, &a, &b, 1.5).unwrap();
        let shifted = mse_exact(&m, &a.map(|v| v + 3.0), &b.map(|v| v + 3.0), 1.5).unwrap();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box() {
        let m = default_model();
        let prob = MinimaxProblem::new(&m, UncertaintyBound::uniform(1, 0.0).unwrap(), 1.0).unwrap();
        let opts = SearchOptions::default();
        let br = prob.best_response(&DriftPolicy::zeros(2000, 1), PolicyClass::Constant, &opts).unwrap();
        assert!(br.policy.is_zero());
        assert!((br.value - P1).abs() < 1e-9);
        let rep = prob.saddle_report(PolicyClass::Constant, PolicyClass::Constant, &opts).unwrap();
        assert_eq!(rep.duality_gap, 0.0);
        assert!(rep.theta_hat_star.is_zero());
    }

    #[test]
    fn best_response_hits_the_box_boundary() {
        let m = default_model();
        let prob = MinimaxProblem::new(&m, UncertaintyBound::uniform(1, 1.0).unwrap(), 1.0).unwrap();
        let opts = SearchOptions { resolution: 1.0 / 200.0, ..Default::default() };
        let z = DriftPolicy::zeros(2000, 1);
        let c = prob.best_response(&z, PolicyClass::Constant, &opts).unwrap();
        assert_eq!(c.policy.at(0)[0].abs(), 1.0);
        let bb = prob.best_response(&z, PolicyClass::BangBang, &opts).unwrap();
        assert!(bb.policy.nodes().iter().all(|v| v[0] == 1.0));
        assert!((bb.value - c.value).abs() < 1e-12);
        assert!(c.value >= prob.mse(&z, &z));
        // grid sweep never beats the boundary
        for j in 0..=400 {
            let v = -1.0 + j as f64 / 200.0;
            assert!(prob.mse(&DriftPolicy::constant(2000, &[v]), &z) <= c.value + 1e-15);
        }
    }

    #[test]
    fn robust_parameter_is_symmetric_center() {
        let m = default_model();
        let prob = MinimaxProblem::new(&m, UncertaintyBound::uniform(1, 1.0).unwrap(), 1.0).unwrap();
        let opts = SearchOptions::default();
        let r = prob.robust_theta_hat(PolicyClass::Constant, PolicyClass::Constant, &opts).unwrap();
        assert!(r.params[0].abs() <= 0.01);
        assert!((r.value - (P1 + LAMBDA1 * LAMBDA1)).abs() < 1e-8);
        let pts: Vec<f64> = (0..11).map(|j| -1.0 + 0.2 * j as f64).collect();
        let prof = prob.profile(PolicyClass::Constant, PolicyClass::Constant, &[0.0], 0, &pts, &opts).unwrap();
        assert!(midpoint_convex(&prof.iter().map(|p| p.1).collect::<Vec<_>>(), 1e-9));
    }

    #[test]
    fn upper_monotone_in_mu() {
        let m = default_model();
        let opts = SearchOptions { resolution: 0.05, ..Default::default() };
        let mut last = f64::NEG_INFINITY;
        for mu in [0.0, 0.25, 0.5, 1.0, 2.0] {
            let r = saddle_report(&m, &UncertaintyBound::uniform(1, mu).unwrap(), 1.0, PolicyClass::Constant, PolicyClass::Constant, &opts).unwrap();
            assert!(r.upper_value >= last);
            assert!(r.lower_value <= r.upper_value);
            assert!(r.baseline_p <= r.lower_value + 1e-8);
            last = r.upper_value;
        }
    }

    #[test]
    fn mc_single_path_flags_stderr() {
        let m = default_model();
        let z = DriftPolicy::zeros(2000, 1);
        let e = mse_monte_carlo(&m, &z, &z, 0.5, 1, 3).unwrap();
        assert!(e.mean.is_finite());
        assert!(e.stderr.is_nan());
    }

    #[test]
    fn class_parsing() {
        assert_eq!("constant".parse::<PolicyClass>().unwrap(), PolicyClass::Constant);
        assert_eq!("piecewise:3".parse::<PolicyClass>().unwrap(), PolicyClass::PiecewiseConstant { segments: 3 });
        assert!("piecewise:0".parse::<PolicyClass>().is_err());
        assert!("wiggly".parse::<PolicyClass>().is_err());
    }

    #[test]
    fn coupled_bang_bang_falls_back() {
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let c = ConstantCoefficients {
            drift_matrix: DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -1.0]),
            drift_offset: DVector::zeros(2),
            obs_matrix: DMatrix::identity(2, 2),
            obs_offset: DVector::zeros(2),
            signal_cov: DMatrix::identity(2, 2),
            obs_cov: DMatrix::identity(2, 2),
            x0: DVector::zeros(2),
        };
        let m = validate_model(c.broadcast(200), grid).unwrap();
        let prob = MinimaxProblem::new(&m, UncertaintyBound::uniform(2, 1.0).unwrap(), 1.0).unwrap();
        let br = prob
            .best_response(&DriftPolicy::zeros(200, 2), PolicyClass::BangBang, &SearchOptions { resolution: 0.1, ..Default::default() })
            .unwrap();
        assert_eq!(br.class, PolicyClass::Constant);
        assert!(br.warning.is_some());
        assert!(br.policy.within(prob.bound()));
    }
}
