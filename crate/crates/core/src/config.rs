//! Scenario files.
//!
//! A scenario is a JSON object with `grid`, `model`, `uncertainty` and an
//! optional `run` section; the README documents the full schema. Errors carry
//! the JSON path of the offending value, e.g. `model.F[3][0][1]`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::minimax::PolicyClass;
use crate::model::{
    validate_model, validate_model_for_simulation, DriftPolicy, ModelSchedule, TimeGrid, UncertaintyBound,
    ValidatedModel,
};

/// A drift given in a scenario or on the command line.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicySpec {
    /// One value broadcast to every component and node.
    Scalar(f64),
    /// One value per component, constant in time.
    Constant(Vec<f64>),
    /// One row per grid interval.
    PerNode(Vec<Vec<f64>>),
}

impl PolicySpec {
    pub fn resolve(&self, n_steps: usize, n: usize) -> Result<DriftPolicy> {
        match self {
            PolicySpec::Scalar(v) => Ok(DriftPolicy::constant(n_steps, &vec![*v; n])),
            PolicySpec::Constant(v) if v.len() == n => Ok(DriftPolicy::constant(n_steps, v)),
            PolicySpec::Constant(v) => Err(Error::DimensionMismatch(format!(
                "drift has {} components, state has {n}",
                v.len()
            ))),
            PolicySpec::PerNode(rows) => {
                if rows.len() != n_steps || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::GridMismatch(format!(
                        "per-node drift must be {n_steps}x{n}, got {} rows",
                        rows.len()
                    )));
                }
                DriftPolicy::from_nodes(rows.clone())
            }
        }
    }

    /// Parses `"0.5"` or `"0.5,-1"` as given on the command line.
    pub fn parse_inline(s: &str) -> Result<Self> {
        let vals = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::InvalidArgument(format!("cannot parse drift {s:?}")))?;
        match vals.as_slice() {
            [v] => Ok(PolicySpec::Scalar(*v)),
            _ => Ok(PolicySpec::Constant(vals)),
        }
    }
}

/// Optional run parameters; command-line flags override them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSpec {
    /// Evaluation times.
    pub t: Vec<f64>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub theta: Option<PolicySpec>,
    pub theta_hat: Option<PolicySpec>,
    /// Search grid step as a fraction of μ.
    pub grid_resolution: Option<f64>,
    pub estimator_class: Option<PolicyClass>,
    pub adversary_class: Option<PolicyClass>,
    pub out: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub grid: TimeGrid,
    pub schedule: ModelSchedule,
    pub bound: UncertaintyBound,
    pub run: RunSpec,
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::config("$", e.to_string()))?;
        parse_scenario(&root)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_json_str(&text)
    }

    pub fn n(&self) -> usize {
        self.schedule.n
    }

    /// Strict validation, as needed by the filters.
    pub fn model(&self) -> Result<ValidatedModel> {
        validate_model(self.schedule.clone(), self.grid)
    }

    /// Validation that admits a semidefinite observation covariance.
    pub fn simulation_model(&self) -> Result<ValidatedModel> {
        validate_model_for_simulation(self.schedule.clone(), self.grid)
    }
}

fn obj<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| Error::config(path, format!("expected an object, got {}", kind(v))))
}

fn field<'a>(m: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a Value> {
    m.get(key)
        .ok_or_else(|| Error::config(join(path, key), "missing required field"))
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn num(v: &Value, path: &str) -> Result<f64> {
    let x = v
        .as_f64()
        .ok_or_else(|| Error::config(path, format!("expected a number, got {}", kind(v))))?;
    if !x.is_finite() {
        return Err(Error::config(path, "value is not finite"));
    }
    Ok(x)
}

fn count(v: &Value, path: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::config(path, format!("expected a non-negative integer, got {v}")))
}

fn arr<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array()
        .ok_or_else(|| Error::config(path, format!("expected an array, got {}", kind(v))))
}

fn depth(v: &Value) -> usize {
    match v {
        Value::Array(a) => 1 + a.first().map(depth).unwrap_or(0),
        _ => 0,
    }
}

fn num_row(v: &Value, path: &str, len: usize) -> Result<Vec<f64>> {
    let a = arr(v, path)?;
    if a.len() != len {
        return Err(Error::config(path, format!("expected {len} entries, got {}", a.len())));
    }
    a.iter()
        .enumerate()
        .map(|(i, x)| num(x, &format!("{path}[{i}]")))
        .collect()
}

fn matrix(v: &Value, path: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let a = arr(v, path)?;
    if a.len() != rows {
        return Err(Error::config(path, format!("expected {rows} rows, got {}", a.len())));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (i, row) in a.iter().enumerate() {
        for (j, x) in num_row(row, &format!("{path}[{i}]"), cols)?.into_iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    Ok(m)
}

/// Matrix coefficient: a number (`c·I`, square only), a constant `rows×cols`
/// array, a flat row-major array, per-node scalars (1×1 only) or an array of
/// `n_steps` matrices.
fn matrix_coefficient(v: &Value, path: &str, rows: usize, cols: usize, steps: usize) -> Result<Vec<DMatrix<f64>>> {
    let scalar_shape = rows == 1 && cols == 1;
    match depth(v) {
        0 => {
            let c = num(v, path)?;
            if rows != cols {
                return Err(Error::config(
                    path,
                    format!("a number is only allowed for square coefficients; expected a {rows}x{cols} array"),
                ));
            }
            Ok(vec![DMatrix::identity(rows, cols) * c; steps])
        }
        1 => {
            let a = arr(v, path)?;
            if scalar_shape && a.len() == steps {
                return a
                    .iter()
                    .enumerate()
                    .map(|(k, x)| Ok(DMatrix::from_element(1, 1, num(x, &format!("{path}[{k}]"))?)))
                    .collect();
            }
            let flat = num_row(v, path, rows * cols)?;
            Ok(vec![DMatrix::from_row_slice(rows, cols, &flat); steps])
        }
        2 => {
            let a = arr(v, path)?;
            if a.len() == rows && a.iter().all(|r| r.as_array().map(Vec::len) == Some(cols)) {
                return Ok(vec![matrix(v, path, rows, cols)?; steps]);
            }
            if a.len() != steps {
                return Err(Error::config(
                    path,
                    format!("expected a {rows}x{cols} matrix or {steps} per-node matrices, got {} rows", a.len()),
                ));
            }
            a.iter()
                .enumerate()
                .map(|(k, r)| {
                    let p = format!("{path}[{k}]");
                    Ok(DMatrix::from_row_slice(rows, cols, &num_row(r, &p, rows * cols)?))
                })
                .collect()
        }
        3 => {
            let a = arr(v, path)?;
            if a.len() != steps {
                return Err(Error::config(path, format!("expected {steps} per-node matrices, got {}", a.len())));
            }
            a.iter()
                .enumerate()
                .map(|(k, m)| matrix(m, &format!("{path}[{k}]"), rows, cols))
                .collect()
        }
        d => Err(Error::config(path, format!("array nesting depth {d} is not a matrix coefficient"))),
    }
}

/// Vector coefficient: a number (filled), a constant vector, per-node
/// scalars (length one only) or an array of `n_steps` vectors.
fn vector_coefficient(v: &Value, path: &str, len: usize, steps: usize) -> Result<Vec<DVector<f64>>> {
    match depth(v) {
        0 => Ok(vec![DVector::from_element(len, num(v, path)?); steps]),
        1 => {
            let a = arr(v, path)?;
            if len == 1 && a.len() == steps && steps != 1 {
                return a
                    .iter()
                    .enumerate()
                    .map(|(k, x)| Ok(DVector::from_element(1, num(x, &format!("{path}[{k}]"))?)))
                    .collect();
            }
            Ok(vec![DVector::from_vec(num_row(v, path, len)?); steps])
        }
        2 => {
            let a = arr(v, path)?;
            if a.len() != steps {
                return Err(Error::config(path, format!("expected {steps} per-node vectors, got {}", a.len())));
            }
            a.iter()
                .enumerate()
                .map(|(k, r)| Ok(DVector::from_vec(num_row(r, &format!("{path}[{k}]"), len)?)))
                .collect()
        }
        d => Err(Error::config(path, format!("array nesting depth {d} is not a vector coefficient"))),
    }
}

fn constant_vector(v: &Value, path: &str, len: usize) -> Result<Vec<f64>> {
    match v {
        Value::Array(_) => num_row(v, path, len),
        _ => Ok(vec![num(v, path)?; len]),
    }
}

fn policy_spec(v: &Value, path: &str) -> Result<PolicySpec> {
    match depth(v) {
        0 => Ok(PolicySpec::Scalar(num(v, path)?)),
        1 => {
            let a = arr(v, path)?;
            Ok(PolicySpec::Constant(num_row(v, path, a.len())?))
        }
        2 => {
            let a = arr(v, path)?;
            let width = a[0].as_array().map(Vec::len).unwrap_or(0);
            let rows = a
                .iter()
                .enumerate()
                .map(|(k, r)| num_row(r, &format!("{path}[{k}]"), width))
                .collect::<Result<Vec<_>>>()?;
            Ok(PolicySpec::PerNode(rows))
        }
        d => Err(Error::config(path, format!("array nesting depth {d} is not a drift policy"))),
    }
}

fn class(v: &Value, path: &str) -> Result<PolicyClass> {
    let s = v
        .as_str()
        .ok_or_else(|| Error::config(path, format!("expected a class name, got {}", kind(v))))?;
    s.parse().map_err(|e: Error| Error::config(path, e.to_string()))
}

fn parse_grid(v: &Value) -> Result<TimeGrid> {
    let g = obj(v, "grid")?;
    let horizon = num(field(g, "grid", "T")?, "grid.T")?;
    let steps = match (g.get("n_steps"), g.get("dt")) {
        (Some(n), None) => count(n, "grid.n_steps")?,
        (None, Some(dt)) => {
            let dt = num(dt, "grid.dt")?;
            if dt <= 0.0 {
                return Err(Error::config("grid.dt", "must be positive"));
            }
            let n = (horizon / dt).round();
            if ((n * dt) - horizon).abs() > 1e-9 * horizon.max(1.0) {
                return Err(Error::config("grid.dt", format!("{dt} does not divide T = {horizon}")));
            }
            n as usize
        }
        (Some(_), Some(_)) => return Err(Error::config("grid", "give either n_steps or dt, not both")),
        (None, None) => return Err(Error::config("grid.n_steps", "missing required field")),
    };
    TimeGrid::new(horizon, steps).map_err(|e| Error::config("grid", e.to_string()))
}

fn parse_model(v: &Value, steps: usize) -> Result<ModelSchedule> {
    let m = obj(v, "model")?;
    let n = count(field(m, "model", "n")?, "model.n")?;
    let k = count(field(m, "model", "m")?, "model.m")?;
    if n == 0 || k == 0 {
        return Err(Error::config("model", "n and m must be at least 1"));
    }
    let mat = |key: &str, r: usize, c: usize| -> Result<Vec<DMatrix<f64>>> {
        matrix_coefficient(field(m, "model", key)?, &format!("model.{key}"), r, c, steps)
    };
    let vecf = |key: &str, len: usize| -> Result<Vec<DVector<f64>>> {
        match m.get(key) {
            Some(x) => vector_coefficient(x, &format!("model.{key}"), len, steps),
            None => Ok(vec![DVector::zeros(len); steps]),
        }
    };
    let x0 = match m.get("x0") {
        Some(x) => DVector::from_vec(constant_vector(x, "model.x0", n)?),
        None => DVector::zeros(n),
    };
    Ok(ModelSchedule {
        n,
        m: k,
        drift_matrix: mat("F", n, n)?,
        drift_offset: vecf("f", n)?,
        obs_matrix: mat("G", k, n)?,
        obs_offset: vecf("g", k)?,
        signal_cov: mat("Q", n, n)?,
        obs_cov: mat("R", k, k)?,
        x0,
    })
}

fn parse_run(v: Option<&Value>) -> Result<RunSpec> {
    let Some(v) = v else {
        return Ok(RunSpec::default());
    };
    let r = obj(v, "run")?;
    let mut run = RunSpec::default();
    for (key, val) in r {
        let p = format!("run.{key}");
        match key.as_str() {
            "t" => {
                run.t = match val {
                    Value::Array(a) => a
                        .iter()
                        .enumerate()
                        .map(|(i, x)| num(x, &format!("{p}[{i}]")))
                        .collect::<Result<_>>()?,
                    _ => vec![num(val, &p)?],
                }
            }
            "seed" => run.seed = Some(val.as_u64().ok_or_else(|| Error::config(&p, "expected a u64"))?),
            "paths" => run.paths = Some(count(val, &p)?),
            "theta" => run.theta = Some(policy_spec(val, &p)?),
            "theta_hat" => run.theta_hat = Some(policy_spec(val, &p)?),
            "grid_resolution" => {
                let h = num(val, &p)?;
                if h <= 0.0 || h > 2.0 {
                    return Err(Error::config(&p, "must lie in (0, 2]"));
                }
                run.grid_resolution = Some(h);
            }
            "estimator_class" => run.estimator_class = Some(class(val, &p)?),
            "adversary_class" => run.adversary_class = Some(class(val, &p)?),
            "out" => {
                run.out = Some(
                    val.as_str()
                        .ok_or_else(|| Error::config(&p, "expected a string"))?
                        .to_string(),
                )
            }
            _ => return Err(Error::config(&p, "unknown field")),
        }
    }
    Ok(run)
}

fn parse_scenario(root: &Value) -> Result<Scenario> {
    let r = obj(root, "$")?;
    for key in r.keys() {
        if !matches!(key.as_str(), "grid" | "model" | "uncertainty" | "run" | "description") {
            return Err(Error::config(key, "unknown field"));
        }
    }
    let grid = parse_grid(field(r, "", "grid")?)?;
    let schedule = parse_model(field(r, "", "model")?, grid.n_steps())?;
    let u = obj(field(r, "", "uncertainty")?, "uncertainty")?;
    let mu = constant_vector(field(u, "uncertainty", "mu")?, "uncertainty.mu", schedule.n)?;
    let bound = UncertaintyBound::new(mu).map_err(|e| Error::config("uncertainty.mu", e.to_string()))?;
    let run = parse_run(r.get("run"))?;
    Ok(Scenario { grid, schedule, bound, run })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "grid": {"T": 1.0, "n_steps": 4},
        "model": {"n": 1, "m": 1, "F": -1, "f": 0, "G": 1, "g": 0, "Q": 1, "R": 1, "x0": 0},
        "uncertainty": {"mu": 1}
    }"#;

    fn with(path: &[&str], value: Value) -> String {
        let mut v: Value = serde_json::from_str(BASE).unwrap();
        let mut cur = &mut v;
        for p in &path[..path.len() - 1] {
            cur = cur.get_mut(*p).unwrap();
        }
        cur[path[path.len() - 1]] = value;
        v.to_string()
    }

    fn err_path(text: &str) -> String {
        match Scenario::from_json_str(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn scalar_scenario() {
        let s = Scenario::from_json_str(BASE).unwrap();
        assert_eq!(s.grid.n_steps(), 4);
        assert_eq!(s.schedule.drift_matrix[3][(0, 0)], -1.0);
        assert_eq!(s.bound.mu(), &[1.0]);
        s.model().unwrap();
    }

    #[test]
    fn per_node_scalars() {
        let s = Scenario::from_json_str(&with(&["model", "F"], serde_json::json!([-1, -2, -3, -4]))).unwrap();
        assert_eq!(s.schedule.drift_matrix[2][(0, 0)], -3.0);
    }

    #[test]
    fn matrix_forms() {
        let mut v: Value = serde_json::from_str(BASE).unwrap();
        v["model"]["n"] = 2.into();
        v["model"]["F"] = serde_json::json!([[-1, 0.5], [0, -2]]);
        v["model"]["G"] = serde_json::json!([1, 0]);
        v["model"]["Q"] = serde_json::json!([[[1, 0], [0, 1]], [[2, 0], [0, 2]], [[1, 0], [0, 1]], [[1, 0], [0, 1]]]);
        v["model"]["x0"] = serde_json::json!([0.5, -0.5]);
        let s = Scenario::from_json_str(&v.to_string()).unwrap();
        assert_eq!(s.schedule.drift_matrix[0][(0, 1)], 0.5);
        assert_eq!(s.schedule.obs_matrix[0].shape(), (1, 2));
        assert_eq!(s.schedule.signal_cov[1][(1, 1)], 2.0);
        assert_eq!(s.bound.mu(), &[1.0, 1.0]);
        assert_eq!(s.schedule.x0[1], -0.5);

        v["model"]["Q"][3][0][1] = "x".into();
        assert_eq!(err_path(&v.to_string()), "model.Q[3][0][1]");
    }

    #[test]
    fn error_paths() {
        assert_eq!(err_path(&with(&["model", "R"], "one".into())), "model.R");
        assert_eq!(err_path(&with(&["model", "F"], serde_json::json!([-1, -2]))), "model.F");
        assert_eq!(err_path(&with(&["grid", "T"], Value::Null)), "grid.T");
        assert_eq!(err_path(&with(&["uncertainty", "mu"], (-1.0).into())), "uncertainty.mu");
        assert_eq!(err_path("{\"grid\": 1}"), "grid");
        assert_eq!(err_path("not json"), "$");
        let mut v: Value = serde_json::from_str(BASE).unwrap();
        v["model"].as_object_mut().unwrap().remove("G");
        assert_eq!(err_path(&v.to_string()), "model.G");
    }

    #[test]
    fn grid_by_step() {
        let mut v: Value = serde_json::from_str(BASE).unwrap();
        v["grid"] = serde_json::json!({"T": 20, "dt": 0.5});
        assert_eq!(Scenario::from_json_str(&v.to_string()).unwrap().grid.n_steps(), 40);
        v["grid"] = serde_json::json!({"T": 1, "dt": 0.3});
        assert_eq!(err_path(&v.to_string()), "grid.dt");
    }

    #[test]
    fn run_section() {
        let mut v: Value = serde_json::from_str(BASE).unwrap();
        v["run"] = serde_json::json!({
            "t": [0.5, 1], "seed": 7, "paths": 10, "theta": 0.5, "theta_hat": [0.25],
            "grid_resolution": 0.02, "adversary_class": "bang_bang"
        });
        let s = Scenario::from_json_str(&v.to_string()).unwrap();
        assert_eq!(s.run.t, vec![0.5, 1.0]);
        assert_eq!(s.run.theta, Some(PolicySpec::Scalar(0.5)));
        assert_eq!(s.run.adversary_class, Some(PolicyClass::BangBang));
        let th = s.run.theta_hat.unwrap().resolve(4, 1).unwrap();
        assert_eq!(th.at(3), &[0.25]);
        v["run"]["adversary_class"] = "spiky".into();
        assert_eq!(err_path(&v.to_string()), "run.adversary_class");
    }

    #[test]
    fn inline_policies() {
        assert_eq!(PolicySpec::parse_inline("0.5").unwrap(), PolicySpec::Scalar(0.5));
        assert_eq!(PolicySpec::parse_inline("1,-2").unwrap(), PolicySpec::Constant(vec![1.0, -2.0]));
        assert!(PolicySpec::parse_inline("a").is_err());
    }
}
