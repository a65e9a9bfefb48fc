//! Seeded Euler–Maruyama simulation of signal and observation paths under a
//! tilted measure, and Girsanov density bookkeeping.
//!
//! Path `j` draws its signal noise from ChaCha stream `2j` and its
//! observation noise from stream `2j + 1` of the master seed, so paths are
//! reproducible under any scheduling and observation noise never depends on
//! the drift policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{gemv_acc, NodeSeries};
use crate::model::{DriftPolicy, ValidatedModel};
use crate::stats::McEstimate;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseStream {
    Signal = 0,
    Observation = 1,
}

/// RNG for one (path, stream) pair.
pub fn path_rng(master_seed: u64, path_index: u64, stream: NoiseStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path_index * 2 + stream as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePath {
    /// Signal at every node.
    pub x: NodeSeries,
    /// Observation at every node, `m_0 = 0`.
    pub m: NodeSeries,
    /// Reference-measure Brownian increments `dw_k = dw^θ_k + θ_k dt`.
    pub dw: NodeSeries,
    /// Observation-noise increments.
    pub dv: NodeSeries,
    /// `log f_T^θ` of the policy the path was simulated under; `None` when
    /// the tilt is undefined (θ ≠ 0 where Q is singular).
    pub log_density: Option<f64>,
}

impl SamplePath {
    pub fn observation_increments(&self) -> NodeSeries {
        let steps = self.m.len() - 1;
        let mut out = NodeSeries::zeros(steps, self.m.dim());
        for k in 0..steps {
            let (a, b) = (self.m.row(k), self.m.row(k + 1));
            for (o, (x, y)) in out.row_mut(k).iter_mut().zip(a.iter().zip(b)) {
                *o = y - x;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub paths: Vec<SamplePath>,
    pub master_seed: u64,
    pub policy: DriftPolicy,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }
}

fn check_tilt(model: &ValidatedModel, theta: &DriftPolicy) -> Result<()> {
    for k in 0..model.n_steps() {
        if theta.at(k).iter().any(|&v| v != 0.0) && model.signal_factor_inv(k).is_none() {
            return Err(Error::UnsupportedTilt { node: k });
        }
    }
    Ok(())
}

/// Simulates path `path_index` of the ensemble seeded by `master_seed`.
pub fn simulate_path(
    model: &ValidatedModel,
    theta: &DriftPolicy,
    master_seed: u64,
    path_index: u64,
) -> Result<SamplePath> {
    model.check_policy("theta", theta)?;
    Ok(simulate_unchecked(model, theta, master_seed, path_index))
}

fn simulate_unchecked(
    model: &ValidatedModel,
    theta: &DriftPolicy,
    master_seed: u64,
    path_index: u64,
) -> SamplePath {
    let (n, m, steps) = (model.n(), model.m(), model.n_steps());
    let dt = model.dt();
    let sqdt = dt.sqrt();
    let mut sig_rng = path_rng(master_seed, path_index, NoiseStream::Signal);
    let mut obs_rng = path_rng(master_seed, path_index, NoiseStream::Observation);

    let mut x = NodeSeries::zeros(steps + 1, n);
    let mut obs = NodeSeries::zeros(steps + 1, m);
    let mut dw = NodeSeries::zeros(steps, n);
    let mut dv = NodeSeries::zeros(steps, m);
    x.row_mut(0).copy_from_slice(model.x0().as_slice());

    let mut z_sig = vec![0.0; n];
    let mut z_obs = vec![0.0; m];
    let mut dw_tilt = vec![0.0; n];
    let mut drift = vec![0.0; n];
    let mut obs_drift = vec![0.0; m];
    let mut xk = vec![0.0; n];
    for k in 0..steps {
        for z in z_sig.iter_mut() {
            *z = StandardNormal.sample(&mut sig_rng);
        }
        for z in z_obs.iter_mut() {
            *z = StandardNormal.sample(&mut obs_rng);
        }
        let th = theta.at(k);

        dw_tilt.iter_mut().for_each(|v| *v = 0.0);
        gemv_acc(&mut dw_tilt, sqdt, model.signal_factor(k), &z_sig);
        let dv_k = dv.row_mut(k);
        dv_k.iter_mut().for_each(|v| *v = 0.0);
        gemv_acc(dv_k, sqdt, model.obs_factor(k), &z_obs);

        xk.copy_from_slice(x.row(k));
        for ((d, f), t) in drift.iter_mut().zip(model.drift_offset(k).iter()).zip(th) {
            *d = f + t;
        }
        gemv_acc(&mut drift, 1.0, model.drift_matrix(k), &xk);
        obs_drift.copy_from_slice(model.obs_offset(k).as_slice());
        gemv_acc(&mut obs_drift, 1.0, model.obs_matrix(k), &xk);

        let x_next = x.row_mut(k + 1);
        for i in 0..n {
            x_next[i] = xk[i] + drift[i] * dt + dw_tilt[i];
        }
        for (w, (a, t)) in dw.row_mut(k).iter_mut().zip(dw_tilt.iter().zip(th)) {
            *w = a + t * dt;
        }
        let dv_k = dv.row(k);
        let (head, tail) = obs.as_mut_slice().split_at_mut((k + 1) * m);
        for j in 0..m {
            tail[j] = head[k * m + j] + obs_drift[j] * dt + dv_k[j];
        }
    }
    let log_density = check_tilt(model, theta)
        .ok()
        .map(|_| girsanov_unchecked(model, theta, &dw));
    SamplePath {
        x,
        m: obs,
        dw,
        dv,
        log_density,
    }
}

/// Simulates `n_paths` paths under drift `theta`.
pub fn simulate_paths(
    model: &ValidatedModel,
    theta: &DriftPolicy,
    n_paths: usize,
    master_seed: u64,
) -> Result<PathEnsemble> {
    let paths = map_paths(model, theta, n_paths, master_seed, |_, p| p.clone())?;
    Ok(PathEnsemble {
        paths,
        master_seed,
        policy: theta.clone(),
    })
}

/// Simulates paths one at a time and keeps only `f(index, path)`, in index
/// order. Memory stays proportional to one path per worker.
pub fn map_paths<T, F>(
    model: &ValidatedModel,
    theta: &DriftPolicy,
    n_paths: usize,
    master_seed: u64,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &SamplePath) -> T + Sync,
{
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
    }
    model.check_policy("theta", theta)?;
    Ok((0..n_paths)
        .into_par_iter()
        .map(|j| {
            let path = simulate_unchecked(model, theta, master_seed, j as u64);
            f(j, &path)
        })
        .collect())
}

/// `Σ_k φ_kᵀ dŵ_k − ½ Σ_k ‖φ_k‖² dt` with `dŵ = L⁻¹ dw`, `φ = L⁻¹ θ` and
/// `L Lᵀ = Q`; with `Q = I` this is the printed exponent of `f_T^θ`.
pub fn girsanov_log_density(
    model: &ValidatedModel,
    theta: &DriftPolicy,
    dw: &NodeSeries,
) -> Result<f64> {
    model.check_policy("theta", theta)?;
    if dw.len() != model.n_steps() || dw.dim() != model.n() {
        return Err(Error::GridMismatch(format!(
            "increments are {}x{}, model needs {}x{}",
            dw.len(),
            dw.dim(),
            model.n_steps(),
            model.n()
        )));
    }
    check_tilt(model, theta)?;
    Ok(girsanov_unchecked(model, theta, dw))
}

fn girsanov_unchecked(model: &ValidatedModel, theta: &DriftPolicy, dw: &NodeSeries) -> f64 {
    let dt = model.dt();
    let n = model.n();
    let mut phi = vec![0.0; n];
    let mut dw_std = vec![0.0; n];
    let mut total = 0.0;
    for k in 0..model.n_steps() {
        let th = theta.at(k);
        if th.iter().all(|&v| v == 0.0) {
            continue;
        }
        let l_inv = model
            .signal_factor_inv(k)
            .expect("tilt support checked before integration");
        phi.iter_mut().for_each(|v| *v = 0.0);
        dw_std.iter_mut().for_each(|v| *v = 0.0);
        gemv_acc(&mut phi, 1.0, l_inv, th);
        gemv_acc(&mut dw_std, 1.0, l_inv, dw.row(k));
        let cross: f64 = phi.iter().zip(&dw_std).map(|(a, b)| a * b).sum();
        let sq: f64 = phi.iter().map(|a| a * a).sum();
        total += cross - 0.5 * sq * dt;
    }
    total
}

/// Importance-sampling estimate of `E_{P^θ}[payoff]` from paths simulated
/// under the reference measure.
pub fn reweighted_mean<F>(ensemble: &PathEnsemble, model: &ValidatedModel, theta: &DriftPolicy, payoff: F) -> Result<McEstimate>
where
    F: Fn(&SamplePath) -> f64,
{
    if !ensemble.policy.is_zero() {
        return Err(Error::InvalidArgument(
            "reweighting needs an ensemble simulated under the reference measure".into(),
        ));
    }
    let samples = ensemble
        .paths
        .iter()
        .map(|p| Ok(girsanov_log_density(model, theta, &p.dw)?.exp() * payoff(p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(McEstimate::from_samples(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, validate_model_for_simulation, ConstantCoefficients, TimeGrid};

    fn brownian(horizon: f64, n_steps: usize) -> ValidatedModel {
        let grid = TimeGrid::new(horizon, n_steps).unwrap();
        validate_model(ConstantCoefficients::scalar(0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0).broadcast(n_steps), grid)
            .unwrap()
    }

    #[test]
    fn noiseless_drift_is_exact_euler() {
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let sched = ConstantCoefficients::scalar(0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.25).broadcast(1000);
        let model = validate_model_for_simulation(sched, grid).unwrap();
        let p = simulate_path(&model, &DriftPolicy::zeros(1000, 1), 3, 0).unwrap();
        let dt = model.dt();
        for k in 0..1000 {
            assert_eq!(p.x.row(k + 1)[0], p.x.row(k)[0] + 1.0 * dt);
            assert!((p.x.row(k)[0] - (0.25 + k as f64 * dt)).abs() < 1e-12);
            assert_eq!(p.m.row(k + 1)[0], p.m.row(k)[0] + p.x.row(k)[0] * dt);
        }
        assert_eq!(p.m.row(0)[0], 0.0);
    }

    #[test]
    fn observation_noise_ignores_drift() {
        let model = brownian(1.0, 200);
        let a = simulate_path(&model, &DriftPolicy::zeros(200, 1), 11, 5).unwrap();
        let b = simulate_path(&model, &DriftPolicy::constant(200, &[1.0]), 11, 5).unwrap();
        assert_eq!(a.dv, b.dv);
        // the reference-measure increments are shifted by θ dt
        for k in 0..200 {
            assert!((b.dw.row(k)[0] - a.dw.row(k)[0] - model.dt()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_tilt_has_zero_density() {
        let model = brownian(1.0, 100);
        let p = simulate_path(&model, &DriftPolicy::zeros(100, 1), 1, 0).unwrap();
        assert_eq!(p.log_density, Some(0.0));
        assert_eq!(girsanov_log_density(&model, &DriftPolicy::zeros(100, 1), &p.dw).unwrap(), 0.0);
    }

    #[test]
    fn singular_q_rejects_tilt() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let sched = ConstantCoefficients::scalar(0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0).broadcast(10);
        let model = validate_model(sched, grid).unwrap();
        assert_eq!(simulate_path(&model, &DriftPolicy::zeros(10, 1), 0, 0).unwrap().log_density, Some(0.0));
        let tilted = simulate_path(&model, &DriftPolicy::constant(10, &[0.5]), 0, 0).unwrap();
        assert_eq!(tilted.log_density, None);
        assert!(matches!(
            girsanov_log_density(&model, &DriftPolicy::constant(10, &[0.5]), &tilted.dw),
            Err(Error::UnsupportedTilt { node: 0 })
        ));
    }

    #[test]
    fn grid_mismatch() {
        let model = brownian(1.0, 10);
        assert!(matches!(
            girsanov_log_density(&model, &DriftPolicy::zeros(10, 1), &NodeSeries::zeros(9, 1)),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn ensemble_is_order_independent() {
        let model = brownian(1.0, 50);
        let th = DriftPolicy::constant(50, &[0.3]);
        let e = simulate_paths(&model, &th, 8, 99).unwrap();
        for j in [7usize, 0, 3] {
            assert_eq!(e.paths[j], simulate_path(&model, &th, 99, j as u64).unwrap());
        }
    }
}
