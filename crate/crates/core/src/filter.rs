//! Classical and drift-corrected Kalman–Bucy filters on observation
//! increments, with innovation whiteness diagnostics.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemv_acc, NodeSeries};
use crate::model::{DriftPolicy, ValidatedModel};
use crate::ode::RiccatiPath;

#[derive(Clone, Debug)]
pub struct FilterRun {
    /// x̂_k at every node.
    pub estimates: NodeSeries,
    /// dÎ_k = Δm_k − (G_k x̂_k + g_k) dt, one per interval.
    pub innovations: NodeSeries,
    pub riccati: Arc<RiccatiPath>,
    /// Drift parameter of the filter; zero for the classical filter.
    pub theta_hat: DriftPolicy,
}

/// Gains `P_k G_kᵀ R_k⁻¹` precomputed for repeated runs on one model.
#[derive(Clone, Debug)]
pub struct FilterEngine<'a> {
    model: &'a ValidatedModel,
    riccati: Arc<RiccatiPath>,
    gains: Vec<DMatrix<f64>>,
}

impl<'a> FilterEngine<'a> {
    pub fn new(model: &'a ValidatedModel, riccati: Arc<RiccatiPath>) -> Result<Self> {
        riccati.check_grid(model)?;
        let gains = (0..model.n_steps())
            .map(|k| Ok(riccati.at(k) * model.obs_matrix(k).transpose() * model.obs_cov_inv(k)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(FilterEngine { model, riccati, gains })
    }

    pub fn model(&self) -> &ValidatedModel {
        self.model
    }

    pub fn riccati(&self) -> &Arc<RiccatiPath> {
        &self.riccati
    }

    pub fn gain(&self, k: usize) -> &DMatrix<f64> {
        &self.gains[k]
    }

    pub fn classical(&self, obs_increments: &NodeSeries) -> Result<FilterRun> {
        self.run(None, obs_increments)
    }

    pub fn robust(&self, theta_hat: &DriftPolicy, obs_increments: &NodeSeries) -> Result<FilterRun> {
        self.model.check_policy("theta_hat", theta_hat)?;
        self.run(Some(theta_hat), obs_increments)
    }

    fn run(&self, theta_hat: Option<&DriftPolicy>, obs: &NodeSeries) -> Result<FilterRun> {
        let model = self.model;
        let (n, m, steps) = (model.n(), model.m(), model.n_steps());
        if obs.len() != steps || obs.dim() != m {
            return Err(Error::GridMismatch(format!(
                "observation increments are {}x{}, model needs {}x{}",
                obs.len(),
                obs.dim(),
                steps,
                m
            )));
        }
        let dt = model.dt();
        let mut est = NodeSeries::zeros(steps + 1, n);
        let mut innov = NodeSeries::zeros(steps, m);
        est.row_mut(0).copy_from_slice(model.x0().as_slice());
        let mut xk = vec![0.0; n];
        let mut drift = vec![0.0; n];
        for k in 0..steps {
            xk.copy_from_slice(est.row(k));
            let di = innov.row_mut(k);
            di.copy_from_slice(model.obs_offset(k).as_slice());
            gemv_acc(di, 1.0, model.obs_matrix(k), &xk);
            for (d, dm) in di.iter_mut().zip(obs.row(k)) {
                *d = dm - *d * dt;
            }

            drift.copy_from_slice(model.drift_offset(k).as_slice());
            gemv_acc(&mut drift, 1.0, model.drift_matrix(k), &xk);
            if let Some(th) = theta_hat {
                for (d, t) in drift.iter_mut().zip(th.at(k)) {
                    *d += t;
                }
            }
            let next = est.row_mut(k + 1);
            for i in 0..n {
                next[i] = xk[i] + drift[i] * dt;
            }
            gemv_acc(next, 1.0, &self.gains[k], innov.row(k));
        }
        Ok(FilterRun {
            estimates: est,
            innovations: innov,
            riccati: Arc::clone(&self.riccati),
            theta_hat: theta_hat
                .cloned()
                .unwrap_or_else(|| DriftPolicy::zeros(steps, n)),
        })
    }
}

/// Classical Kalman–Bucy filter (no drift correction).
pub fn run_classical_filter(
    model: &ValidatedModel,
    riccati: &RiccatiPath,
    obs_increments: &NodeSeries,
) -> Result<FilterRun> {
    FilterEngine::new(model, Arc::new(riccati.clone()))?.classical(obs_increments)
}

/// Filter with the deterministic drift correction `θ̂`.
pub fn run_robust_filter(
    model: &ValidatedModel,
    riccati: &RiccatiPath,
    theta_hat: &DriftPolicy,
    obs_increments: &NodeSeries,
) -> Result<FilterRun> {
    FilterEngine::new(model, Arc::new(riccati.clone()))?.robust(theta_hat, obs_increments)
}

/// Innovations mapped to `L_k⁻¹ dÎ_k / √dt` with `L_k L_kᵀ = R_k`; i.i.d.
/// standard normal under correct specification.
pub fn standardized_innovations(model: &ValidatedModel, run: &FilterRun) -> Result<NodeSeries> {
    let m = model.m();
    let scale = 1.0 / model.dt().sqrt();
    let mut out = NodeSeries::zeros(run.innovations.len(), m);
    for k in 0..run.innovations.len() {
        let l_inv = model.obs_factor_inv(k).ok_or(Error::NotPositiveDefinite {
            what: "R",
            node: k,
            min_eig: model.r_min(),
        })?;
        gemv_acc(out.row_mut(k), scale, l_inv, run.innovations.row(k));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WhitenessReport {
    pub n_increments: usize,
    /// `autocorrelation[lag - 1][component]` of the standardized innovations.
    pub autocorrelation: Vec<Vec<f64>>,
    /// Sample mean of the standardized innovations per component.
    pub standardized_mean: Vec<f64>,
    /// Sample covariance of the raw increments dÎ (row-major m×m).
    pub increment_covariance: Vec<f64>,
    /// Average of `R_k dt` over the run (row-major m×m).
    pub expected_covariance: Vec<f64>,
}

impl WhitenessReport {
    /// `3/√n`-style band for the autocorrelations.
    pub fn band(&self, k_sigma: f64) -> f64 {
        k_sigma / (self.n_increments as f64).sqrt()
    }

    pub fn max_abs_autocorrelation(&self) -> f64 {
        self.autocorrelation
            .iter()
            .flatten()
            .fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    /// Largest relative deviation of the increment variances from `R dt`.
    pub fn max_variance_error(&self) -> f64 {
        let m = (self.expected_covariance.len() as f64).sqrt() as usize;
        (0..m)
            .map(|i| {
                let e = self.expected_covariance[i * m + i];
                ((self.increment_covariance[i * m + i] - e) / e).abs()
            })
            .fold(0.0, f64::max)
    }
}

pub fn innovation_diagnostics(
    model: &ValidatedModel,
    run: &FilterRun,
    max_lag: usize,
) -> Result<WhitenessReport> {
    let z = standardized_innovations(model, run)?;
    let (len, m) = (z.len(), z.dim());
    if len < 2 {
        return Err(Error::InvalidArgument("need at least two innovation increments".into()));
    }
    let mean: Vec<f64> = (0..m)
        .map(|j| z.rows().map(|r| r[j]).sum::<f64>() / len as f64)
        .collect();
    let denom: Vec<f64> = (0..m)
        .map(|j| z.rows().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>())
        .collect();
    let autocorrelation = (1..=max_lag.min(len - 1))
        .map(|lag| {
            (0..m)
                .map(|j| {
                    let num: f64 = (0..len - lag)
                        .map(|k| (z.row(k)[j] - mean[j]) * (z.row(k + lag)[j] - mean[j]))
                        .sum();
                    num / denom[j]
                })
                .collect()
        })
        .collect();

    let di = &run.innovations;
    let raw_mean: Vec<f64> = (0..m)
        .map(|j| di.rows().map(|r| r[j]).sum::<f64>() / len as f64)
        .collect();
    let mut increment_covariance = vec![0.0; m * m];
    let mut expected = DMatrix::<f64>::zeros(m, m);
    for k in 0..len {
        let r = di.row(k);
        for a in 0..m {
            for b in 0..m {
                increment_covariance[a * m + b] += (r[a] - raw_mean[a]) * (r[b] - raw_mean[b]);
            }
        }
        expected += model.obs_cov(k);
    }
    increment_covariance.iter_mut().for_each(|v| *v /= (len - 1) as f64);
    expected *= model.dt() / len as f64;
    let expected_covariance = (0..m * m).map(|i| expected[(i / m, i % m)]).collect();

    Ok(WhitenessReport {
        n_increments: len,
        autocorrelation,
        standardized_mean: mean,
        increment_covariance,
        expected_covariance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, validate_model_for_simulation, ConstantCoefficients, TimeGrid};
    use crate::ode::solve_riccati;
    use crate::simulate::{simulate_path, simulate_paths};

    fn model(f: f64, g: f64, q: f64, horizon: f64, n_steps: usize) -> ValidatedModel {
        let grid = TimeGrid::new(horizon, n_steps).unwrap();
        validate_model(ConstantCoefficients::scalar(f, 0.0, g, 0.0, q, 1.0, 0.7).broadcast(n_steps), grid)
            .unwrap()
    }

    #[test]
    fn no_information_keeps_initial_state() {
        let m = model(0.0, 0.0, 1.0, 1.0, 100);
        let p = solve_riccati(&m).unwrap();
        let path = simulate_path(&m, &DriftPolicy::zeros(100, 1), 4, 0).unwrap();
        let run = run_classical_filter(&m, &p, &path.observation_increments()).unwrap();
        assert!(run.estimates.as_slice().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn open_loop_drift_integration() {
        let m = model(0.0, 0.0, 1.0, 1.0, 100);
        let p = solve_riccati(&m).unwrap();
        let path = simulate_path(&m, &DriftPolicy::zeros(100, 1), 4, 0).unwrap();
        let run = run_robust_filter(&m, &p, &DriftPolicy::constant(100, &[0.5]), &path.observation_increments()).unwrap();
        for k in 0..=100 {
            assert!((run.estimates.row(k)[0] - (0.7 + 0.5 * k as f64 * m.dt())).abs() < 1e-13);
        }
    }

    #[test]
    fn noiseless_signal_is_tracked_exactly() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let noiseless = validate_model_for_simulation(
            ConstantCoefficients::scalar(-1.0, 0.2, 1.0, 0.0, 0.0, 0.0, 0.7).broadcast(100),
            grid,
        )
        .unwrap();
        let filt = validate_model(
            ConstantCoefficients::scalar(-1.0, 0.2, 1.0, 0.0, 0.0, 1.0, 0.7).broadcast(100),
            grid,
        )
        .unwrap();
        let p = solve_riccati(&filt).unwrap();
        assert!(p.values().iter().all(|v| v[(0, 0)] == 0.0));
        let path = simulate_path(&noiseless, &DriftPolicy::zeros(100, 1), 1, 0).unwrap();
        let run = run_classical_filter(&filt, &p, &path.observation_increments()).unwrap();
        assert_eq!(run.estimates, path.x);
    }

    #[test]
    fn zero_correction_is_bitwise_classical() {
        let m = model(-1.0, 1.0, 1.0, 1.0, 500);
        let p = solve_riccati(&m).unwrap();
        let e = simulate_paths(&m, &DriftPolicy::constant(500, &[0.4]), 5, 8).unwrap();
        let engine = FilterEngine::new(&m, Arc::new(p)).unwrap();
        for path in &e.paths {
            let obs = path.observation_increments();
            let a = engine.classical(&obs).unwrap();
            let b = engine.robust(&DriftPolicy::zeros(500, 1), &obs).unwrap();
            let bits = |s: &NodeSeries| s.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.estimates), bits(&b.estimates));
            assert_eq!(bits(&a.innovations), bits(&b.innovations));
        }
    }

    #[test]
    fn innovation_identity_holds() {
        let m = model(-1.0, 1.0, 1.0, 1.0, 200);
        let p = solve_riccati(&m).unwrap();
        let path = simulate_path(&m, &DriftPolicy::zeros(200, 1), 2, 3).unwrap();
        let obs = path.observation_increments();
        let run = run_classical_filter(&m, &p, &obs).unwrap();
        for k in 0..200 {
            let expect = obs.row(k)[0] - (run.estimates.row(k)[0]) * m.dt();
            assert_eq!(run.innovations.row(k)[0], expect);
        }
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let m = model(-1.0, 1.0, 1.0, 1.0, 20);
        let p = solve_riccati(&m).unwrap();
        assert!(matches!(
            run_classical_filter(&m, &p, &NodeSeries::zeros(19, 1)),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn superposition_in_theta_hat() {
        let m = model(-1.0, 1.0, 1.0, 1.0, 300);
        let p = solve_riccati(&m).unwrap();
        let engine = FilterEngine::new(&m, Arc::new(p)).unwrap();
        let obs = simulate_path(&m, &DriftPolicy::zeros(300, 1), 5, 0).unwrap().observation_increments();
        let t1 = DriftPolicy::from_nodes((0..300).map(|k| vec![(k as f64 * 0.03).cos()]).collect()).unwrap();
        let t2 = DriftPolicy::constant(300, &[-0.6]);
        let sum = DriftPolicy::from_nodes((0..300).map(|k| vec![t1.at(k)[0] + t2.at(k)[0]]).collect()).unwrap();
        let r12 = engine.robust(&sum, &obs).unwrap();
        let r2 = engine.robust(&t2, &obs).unwrap();
        let r1 = engine.robust(&t1, &obs).unwrap();
        let r0 = engine.classical(&obs).unwrap();
        for k in 0..=300 {
            let lhs = r12.estimates.row(k)[0] - r2.estimates.row(k)[0];
            let rhs = r1.estimates.row(k)[0] - r0.estimates.row(k)[0];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
