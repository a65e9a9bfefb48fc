//! CSV output for time series and CSV input for observations and drifts.
//!
//! Every writer takes an optional comment line, emitted first as `# ...`.
//! Columns are `t` followed by row-major matrix or vector entries, so files
//! plot directly with gnuplot-style tools. Floats use the shortest
//! round-trip representation, which keeps output byte-stable.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::decomposition::DecompositionTable;
use crate::error::{Error, Result};
use crate::filter::FilterRun;
use crate::linalg::NodeSeries;
use crate::model::{DriftPolicy, TimeGrid};
use crate::ode::{ErrorStats, RiccatiPath};
use crate::simulate::{PathEnsemble, SamplePath};

fn writer<W: Write>(mut w: W, comment: Option<&str>) -> Result<csv::Writer<W>> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    Ok(csv::Writer::from_writer(w))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn matrix_names(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (0..rows)
        .flat_map(|i| (0..cols).map(move |j| format!("{prefix}_{i}{j}")))
        .collect()
}

fn vector_names(prefix: &str, len: usize) -> Vec<String> {
    (0..len).map(|i| format!("{prefix}_{i}")).collect()
}

fn push_matrix(rec: &mut Vec<String>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            rec.push(fmt(m[(i, j)]));
        }
    }
}

pub fn write_riccati<W: Write>(w: W, comment: Option<&str>, path: &RiccatiPath) -> Result<()> {
    let mut out = writer(w, comment)?;
    let n = path.at(0).nrows();
    let mut header = vec!["t".to_string()];
    header.extend(matrix_names("P", n, n));
    out.write_record(&header)?;
    for (k, p) in path.values().iter().enumerate() {
        let mut rec = vec![fmt(path.grid().time(k))];
        push_matrix(&mut rec, p);
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_error_stats<W: Write>(w: W, comment: Option<&str>, stats: &ErrorStats) -> Result<()> {
    let mut out = writer(w, comment)?;
    let n = stats.bias.dim();
    let mut header = vec!["t".to_string()];
    header.extend(vector_names("b", n));
    header.extend(matrix_names("Sigma", n, n));
    header.push("mse".into());
    out.write_record(&header)?;
    for k in 0..stats.bias.len() {
        let mut rec = vec![fmt(stats.grid.time(k))];
        rec.extend(stats.bias.row(k).iter().map(|&v| fmt(v)));
        push_matrix(&mut rec, &stats.covariance[k]);
        rec.push(fmt(stats.mse[k]));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `t, xhat_*, dI_*, P_*`; the innovation on `[t_k, t_{k+1}]` sits on
/// row `k`, so the last row has `NaN` innovations.
pub fn write_filter<W: Write>(w: W, comment: Option<&str>, run: &FilterRun) -> Result<()> {
    let mut out = writer(w, comment)?;
    let n = run.estimates.dim();
    let m = run.innovations.dim();
    let mut header = vec!["t".to_string()];
    header.extend(vector_names("xhat", n));
    header.extend(vector_names("dI", m));
    header.extend(matrix_names("P", n, n));
    out.write_record(&header)?;
    let grid = run.riccati.grid();
    for k in 0..run.estimates.len() {
        let mut rec = vec![fmt(grid.time(k))];
        rec.extend(run.estimates.row(k).iter().map(|&v| fmt(v)));
        if k < run.innovations.len() {
            rec.extend(run.innovations.row(k).iter().map(|&v| fmt(v)));
        } else {
            rec.extend((0..m).map(|_| fmt(f64::NAN)));
        }
        push_matrix(&mut rec, run.riccati.at(k));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Long format `path_id, t, x_*, m_*, logw`; `logw` is the path's total log
/// density (repeated on each row) or `NaN` where the tilt is undefined.
pub fn write_ensemble<W: Write>(w: W, comment: Option<&str>, ensemble: &PathEnsemble, grid: &TimeGrid) -> Result<()> {
    let Some(first) = ensemble.paths.first() else {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    };
    let mut out = EnsembleWriter::new(w, comment, first.x.dim(), first.m.dim())?;
    for (j, p) in ensemble.paths.iter().enumerate() {
        out.write_path(j, p, grid)?;
    }
    out.finish()
}

/// Incremental form of [`write_ensemble`] for ensembles too large to hold.
pub struct EnsembleWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> EnsembleWriter<W> {
    pub fn new(w: W, comment: Option<&str>, n: usize, m: usize) -> Result<Self> {
        let mut out = writer(w, comment)?;
        let mut header = vec!["path_id".to_string(), "t".to_string()];
        header.extend(vector_names("x", n));
        header.extend(vector_names("m", m));
        header.push("logw".into());
        out.write_record(&header)?;
        Ok(EnsembleWriter { out })
    }

    pub fn write_path(&mut self, path_id: usize, p: &SamplePath, grid: &TimeGrid) -> Result<()> {
        let logw = fmt(p.log_density.unwrap_or(f64::NAN));
        for k in 0..p.x.len() {
            let mut rec = vec![path_id.to_string(), fmt(grid.time(k))];
            rec.extend(p.x.row(k).iter().map(|&v| fmt(v)));
            rec.extend(p.m.row(k).iter().map(|&v| fmt(v)));
            rec.push(logw.clone());
            self.out.write_record(&rec)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Columns `t, classical, correction_ode, correction_printed, direct_robust,
/// gap_ode, gap_printed`, each suffixed `_i` when the state has more than one
/// component.
pub fn write_decomposition<W: Write>(
    w: W,
    comment: Option<&str>,
    table: &DecompositionTable,
    grid: &TimeGrid,
) -> Result<()> {
    use crate::decomposition::Kernel;
    let mut out = writer(w, comment)?;
    let n = table.classical.dim();
    let gap_ode = table.gap(Kernel::Ode);
    let gap_printed = table.gap(Kernel::Printed);
    let columns: [(&str, &NodeSeries); 6] = [
        ("classical", &table.classical),
        ("correction_ode", &table.correction_ode),
        ("correction_printed", &table.correction_printed),
        ("direct_robust", &table.direct_robust),
        ("gap_ode", &gap_ode),
        ("gap_printed", &gap_printed),
    ];
    let mut header = vec!["t".to_string()];
    for (name, _) in &columns {
        if n == 1 {
            header.push(name.to_string());
        } else {
            header.extend(vector_names(name, n));
        }
    }
    out.write_record(&header)?;
    for k in 0..table.classical.len() {
        let mut rec = vec![fmt(grid.time(k))];
        for (_, s) in &columns {
            rec.extend(s.row(k).iter().map(|&v| fmt(v)));
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Numeric table under the header `columns`.
pub fn write_profile<W: Write>(w: W, comment: Option<&str>, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = writer(w, comment)?;
    out.write_record(columns)?;
    for r in rows {
        out.write_record(r.iter().map(|&v| fmt(v)))?;
    }
    out.flush()?;
    Ok(())
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table<R: Read>(r: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r);
    let header = rdr.headers()?.iter().map(str::to_string).collect();
    let rows = rdr
        .records()
        .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok(Table { header, rows })
}

fn columns_with_prefix(header: &[String], prefix: &str) -> Vec<usize> {
    let mut cols: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(c, h)| h.strip_prefix(prefix)?.parse::<usize>().ok().map(|i| (i, c)))
        .collect();
    cols.sort();
    cols.into_iter().map(|(_, c)| c).collect()
}

fn parse_cell(s: &str, row: usize, col: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::InvalidArgument(format!("row {row}, column {col}: cannot parse {s:?}")))
}

/// Reads observation increments for a filter run.
///
/// Accepts either observation levels `m_0, m_1, ...` on `n_steps + 1` nodes
/// (as written by the simulator; `path_id` selects one path when present) or
/// increments `dm_0, ...` on `n_steps` rows. Lines starting with `#` are
/// skipped.
pub fn read_observation_increments<R: Read>(r: R, n_steps: usize, m: usize, path_id: usize) -> Result<NodeSeries> {
    let table = read_table(r)?;
    let id_col = table.header.iter().position(|h| h == "path_id");
    let rows: Vec<&Vec<String>> = table
        .rows
        .iter()
        .filter(|row| id_col.is_none_or(|c| row[c].parse::<usize>().ok() == Some(path_id)))
        .collect();
    let level_cols = columns_with_prefix(&table.header, "m_");
    let inc_cols = columns_with_prefix(&table.header, "dm_");
    let (cols, name, levels) = if !inc_cols.is_empty() {
        (inc_cols, "dm", false)
    } else if !level_cols.is_empty() {
        (level_cols, "m", true)
    } else {
        return Err(Error::InvalidArgument("observation CSV needs m_* or dm_* columns".into()));
    };
    if cols.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "observation CSV has {} {name}_* columns, model has m = {m}",
            cols.len()
        )));
    }
    let expected = if levels { n_steps + 1 } else { n_steps };
    if rows.len() != expected {
        return Err(Error::GridMismatch(format!(
            "observation CSV has {} rows for path {path_id}, grid needs {expected}",
            rows.len()
        )));
    }
    let values = rows
        .iter()
        .enumerate()
        .map(|(k, row)| {
            cols.iter()
                .enumerate()
                .map(|(i, &c)| parse_cell(&row[c], k, &format!("{name}_{i}")))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if levels {
        Ok(NodeSeries::from_rows(
            m,
            values
                .windows(2)
                .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect::<Vec<_>>()),
        ))
    } else {
        Ok(NodeSeries::from_rows(m, values))
    }
}

/// Reads a per-node drift from `theta_*` columns, one row per interval.
pub fn read_policy<R: Read>(r: R, n_steps: usize, n: usize) -> Result<DriftPolicy> {
    let table = read_table(r)?;
    let cols = columns_with_prefix(&table.header, "theta_");
    if cols.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "policy CSV has {} theta_* columns, state has n = {n}",
            cols.len()
        )));
    }
    if table.rows.len() != n_steps {
        return Err(Error::GridMismatch(format!(
            "policy CSV has {} rows, grid has {n_steps} intervals",
            table.rows.len()
        )));
    }
    let values = table
        .rows
        .iter()
        .enumerate()
        .map(|(k, row)| {
            cols.iter()
                .enumerate()
                .map(|(i, &c)| parse_cell(&row[c], k, &format!("theta_{i}")))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    DriftPolicy::from_nodes(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, ConstantCoefficients};
    use crate::ode::solve_riccati;
    use crate::simulate::simulate_paths;

    fn model(steps: usize) -> crate::model::ValidatedModel {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        validate_model(ConstantCoefficients::scalar(-1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0).broadcast(steps), grid).unwrap()
    }

    #[test]
    fn riccati_layout() {
        let p = solve_riccati(&model(4)).unwrap();
        let mut buf = Vec::new();
        write_riccati(&mut buf, Some("config_hash=ab seed=1"), &p).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config_hash=ab seed=1");
        assert_eq!(lines[1], "t,P_00");
        assert_eq!(lines[2], "0,0");
        assert_eq!(lines.len(), 7);
        assert!(lines[6].starts_with("1,"));
    }

    #[test]
    fn ensemble_round_trip() {
        let m = model(10);
        let th = DriftPolicy::zeros(10, 1);
        let ens = simulate_paths(&m, &th, 3, 5).unwrap();
        let mut buf = Vec::new();
        write_ensemble(&mut buf, Some("x"), &ens, m.grid()).unwrap();
        let inc = read_observation_increments(buf.as_slice(), 10, 1, 2).unwrap();
        let expect = ens.paths[2].observation_increments();
        for k in 0..10 {
            assert!((inc.row(k)[0] - expect.row(k)[0]).abs() < 1e-15);
        }
        assert!(read_observation_increments(buf.as_slice(), 9, 1, 0).is_err());
    }

    #[test]
    fn increments_and_policies() {
        let csv = "# note\nt,dm_0\n0,1\n0.5,2\n";
        let inc = read_observation_increments(csv.as_bytes(), 2, 1, 0).unwrap();
        assert_eq!(inc.row(1), &[2.0]);
        let pol = "k,theta_1,theta_0\n0,2,1\n1,4,3\n";
        let p = read_policy(pol.as_bytes(), 2, 2).unwrap();
        assert_eq!(p.at(1), &[3.0, 4.0]);
        assert!(read_policy("theta_0\nx\n".as_bytes(), 1, 1).is_err());
    }
}
