//! Minimal CSV reading and writing with locale-independent, shortest
//! round-trip number formatting.

use std::fmt::Write as _;
use std::path::Path;

use dkf_core::models::Trajectory;
use nalgebra::DMatrix;

use crate::error::{BenchError, Result};

/// Formats a float with the fewest decimal digits that parse back to the
/// same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn parse_f64(field: &str, path: &str, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| BenchError::CsvParse {
        path: path.to_string(),
        line,
        message: format!("expected a number, got {field:?}"),
    })
}

/// Writes header and rows; every emitted file goes through here so the
/// byte layout stays uniform. Missing parent directories are created.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_with_parents(path, &out)
}

fn write_with_parents(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir.display().to_string(), e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| BenchError::io(path.display().to_string(), e))
}

/// Serializes a trajectory as `t,z1..zd,x1..xn` with one-based time.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let d = traj.state_dim();
    let n = traj.obs_dim();
    let mut out = String::from("t");
    for j in 1..=d {
        let _ = write!(out, ",z{j}");
    }
    for j in 1..=n {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    for t in 0..traj.len() {
        let _ = write!(out, "{}", t + 1);
        for j in 0..d {
            let _ = write!(out, ",{}", fmt_f64(traj.states[(t, j)]));
        }
        for j in 0..n {
            let _ = write!(out, ",{}", fmt_f64(traj.observations[(t, j)]));
        }
        out.push('\n');
    }
    out
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_with_parents(path, &trajectory_to_csv(traj))
}

/// Parses a trajectory CSV produced by [`write_trajectory`]. The stored
/// seed is informational only and not recoverable from the file.
pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let name = path.display().to_string();
    let text =
        std::fs::read_to_string(path).map_err(|e| BenchError::io(name.clone(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| BenchError::CsvParse {
        path: name.clone(),
        line: 1,
        message: "file is empty".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"t") {
        return Err(BenchError::CsvParse {
            path: name,
            line: 1,
            message: "header must start with column `t`".into(),
        });
    }
    let d = cols.iter().filter(|c| c.starts_with('z')).count();
    let n = cols.iter().filter(|c| c.starts_with('x')).count();
    if d == 0 || n == 0 || cols.len() != 1 + d + n {
        return Err(BenchError::CsvParse {
            path: name,
            line: 1,
            message: format!("header {header:?} is not of the form t,z1..zd,x1..xn"),
        });
    }
    let mut states = Vec::new();
    let mut observations = Vec::new();
    let mut rows = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(BenchError::CsvParse {
                path: name,
                line: idx + 1,
                message: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        for (j, field) in fields.iter().enumerate().skip(1) {
            let v = parse_f64(field, &name, idx + 1)?;
            if j <= d {
                states.push(v);
            } else {
                observations.push(v);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(BenchError::CsvParse {
            path: name,
            line: 2,
            message: "no data rows".into(),
        });
    }
    Ok(Trajectory {
        states: DMatrix::from_row_iterator(rows, d, states),
        observations: DMatrix::from_row_iterator(rows, n, observations),
        seed: 0,
    })
}

/// Header for a belief CSV at state dimension `d`:
/// `t,mu1..mud,sigma11..sigmadd,fallback` with the covariance flattened
/// row by row.
pub fn belief_header(d: usize) -> Vec<String> {
    let mut header = vec!["t".to_string()];
    for j in 1..=d {
        header.push(format!("mu{j}"));
    }
    for i in 1..=d {
        for j in 1..=d {
            header.push(format!("sigma{i}{j}"));
        }
    }
    header.push("fallback".to_string());
    header
}

#[cfg(test)]
mod tests {
    use super::*;
    use dkf_core::gaussian::LinearStateSpec;
    use dkf_core::models::{simulate, LinearGaussianObs};
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn formatted_floats_parse_back_to_the_same_bits() {
        for &v in &[
            0.1,
            -3.0,
            1.0 / 3.0,
            6.02e23,
            5e-324,
            f64::MAX,
            -0.000_123_456_789,
        ] {
            let text = fmt_f64(v);
            let back: f64 = text.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "value {v} via {text}");
        }
    }

    #[test]
    fn trajectory_csv_round_trips_bit_for_bit() {
        let spec = LinearStateSpec::new(
            DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.0, 0.7]),
            DMatrix::identity(2, 2) * 0.3,
        )
        .unwrap();
        let obs = LinearGaussianObs::new(
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, -0.5, 0.0, 2.0]),
            DVector::zeros(3),
            DMatrix::identity(3, 3) * 0.2,
        )
        .unwrap();
        let traj = simulate(&spec, &obs, 40, 99).unwrap();
        let dir = std::env::temp_dir().join("dkf_bench_csv_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.csv");
        write_trajectory(&path, &traj).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.states, traj.states);
        assert_eq!(back.observations, traj.observations);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let dir = std::env::temp_dir().join("dkf_bench_csv_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "t,z1,x1\n1,0.5,1.25\n2,oops,1.5\n").unwrap();
        let err = read_trajectory(&path).unwrap_err();
        match err {
            BenchError::CsvParse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
        std::fs::remove_file(&path).ok();
    }
}
