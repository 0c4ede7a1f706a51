//! Artifact formats.
//!
//! CSV files carry 17 significant digits with '.' decimals and '\n' line
//! endings, which round-trips every double exactly. Binary files are
//! little-endian f64; matrices and trajectories prefix a u64 shape header.

use crate::analysis::Boundary;
use crate::egop::{EgopBasis, EgopEstimate};
use crate::error::{LabError, Result};
use crate::linalg::Matrix;
use crate::model::{ParamLayout, ParamVector};
use crate::optim::Trajectory;
use serde::Serialize;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Lossless decimal form of a double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| LabError::Parse(format!("not a number: {s:?}")))
}

/// Pretty JSON with a trailing newline.
pub fn save_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_f64_le<W: Write>(mut w: W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Raw little-endian doubles, no header.
pub fn save_f64_bin(values: &[f64], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_f64_le(&mut w, values)?;
    w.flush()?;
    Ok(())
}

pub fn load_f64_bin(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(LabError::Parse(format!(
            "{}: length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    read_f64s(&mut bytes.as_slice(), bytes.len() / 8)
}

/// Writes `<stem>.csv` (one `theta` column), `<stem>.bin` and the layout
/// sidecar `<stem>.layout.json`.
pub fn save_param_vector(pv: &ParamVector, dir: &Path, stem: &str) -> Result<()> {
    let mut w = create(&dir.join(format!("{stem}.csv")))?;
    writeln!(w, "theta")?;
    for v in pv.iter() {
        writeln!(w, "{}", fmt_f64(*v))?;
    }
    w.flush()?;
    save_f64_bin(pv, &dir.join(format!("{stem}.bin")))?;
    save_json(&pv.layout, &dir.join(format!("{stem}.layout.json")))
}

/// Reads a parameter vector back from its CSV and layout sidecar.
pub fn load_param_vector(dir: &Path, stem: &str) -> Result<ParamVector> {
    let layout: ParamLayout =
        serde_json::from_reader(BufReader::new(File::open(dir.join(format!("{stem}.layout.json")))?))?;
    let r = BufReader::new(File::open(dir.join(format!("{stem}.csv")))?);
    let mut lines = r.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some("theta") {
        return Err(LabError::Parse("parameter CSV must start with 'theta'".into()));
    }
    let theta = lines
        .map(|l| parse_f64(&l?))
        .collect::<Result<Vec<_>>>()?;
    if theta.len() != layout.len {
        return Err(LabError::Dimension(format!(
            "layout expects {} parameters, file has {}",
            layout.len,
            theta.len()
        )));
    }
    Ok(ParamVector { theta, layout })
}

/// `t,loss,theta_norm`, one row per snapshot step.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, mut w: W) -> Result<()> {
    writeln!(w, "t,loss,theta_norm")?;
    for (t, theta) in traj.steps.iter().zip(&traj.iterates) {
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        writeln!(w, "{t},{},{}", fmt_f64(traj.losses[*t]), fmt_f64(norm))?;
    }
    Ok(())
}

pub fn save_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_trajectory_csv(traj, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Snapshot dump: `u64 count, u64 p`, then per snapshot `u64 step` and `p`
/// doubles.
pub fn save_iterates_bin(traj: &Trajectory, path: &Path) -> Result<()> {
    let p = traj.iterates.first().map_or(0, Vec::len);
    let mut w = create(path)?;
    w.write_all(&(traj.iterates.len() as u64).to_le_bytes())?;
    w.write_all(&(p as u64).to_le_bytes())?;
    for (t, theta) in traj.steps.iter().zip(&traj.iterates) {
        w.write_all(&(*t as u64).to_le_bytes())?;
        write_f64_le(&mut w, theta)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_iterates_bin(path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let count = read_u64(&mut r)? as usize;
    let p = read_u64(&mut r)? as usize;
    (0..count)
        .map(|_| Ok((read_u64(&mut r)? as usize, read_f64s(&mut r, p)?)))
        .collect()
}

/// Headerless CSV, one matrix row per line.
pub fn save_matrix_csv(m: &Matrix, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| fmt_f64(*v)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_matrix_csv(path: &Path) -> Result<Matrix> {
    let r = BufReader::new(File::open(path)?);
    let rows = r
        .lines()
        .map(|l| l?.split(',').map(parse_f64).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// `u64 rows, u64 cols`, then row-major doubles.
pub fn save_matrix_bin(m: &Matrix, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    write_f64_le(&mut w, m.row_major())?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix_bin(path: &Path) -> Result<Matrix> {
    let mut r = BufReader::new(File::open(path)?);
    let rows = read_u64(&mut r)? as usize;
    let cols = read_u64(&mut r)? as usize;
    Matrix::from_row_major(rows, cols, read_f64s(&mut r, rows * cols)?)
}

/// EGOP matrix, basis and eigenvalues under `dir` with the given stem.
pub fn save_egop(est: &EgopEstimate, basis: &EgopBasis, dir: &Path, stem: &str) -> Result<()> {
    save_matrix_csv(&est.matrix, &dir.join(format!("{stem}_matrix.csv")))?;
    save_matrix_bin(&est.matrix, &dir.join(format!("{stem}_matrix.bin")))?;
    save_matrix_csv(basis.basis.matrix(), &dir.join(format!("{stem}_basis.csv")))?;
    save_matrix_bin(basis.basis.matrix(), &dir.join(format!("{stem}_basis.bin")))?;
    let mut w = create(&dir.join(format!("{stem}_eigenvalues.csv")))?;
    writeln!(w, "index,eigenvalue")?;
    for (i, v) in basis.eigenvalues.iter().enumerate() {
        writeln!(w, "{i},{}", fmt_f64(*v))?;
    }
    w.flush()?;
    Ok(())
}

/// `seg_id,x1,x2`, two rows per segment.
pub fn write_boundary_csv<W: Write>(b: &Boundary, mut w: W) -> Result<()> {
    writeln!(w, "seg_id,x1,x2")?;
    for (i, seg) in b.segments.iter().enumerate() {
        for p in seg {
            writeln!(w, "{i},{},{}", fmt_f64(p[0]), fmt_f64(p[1]))?;
        }
    }
    Ok(())
}

pub fn save_boundary_csv(b: &Boundary, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_boundary_csv(b, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_full_two_layer;
    use crate::optim::{run, FnOracle, OptimizerSpec, RunOptions};

    #[test]
    fn decimal_form_round_trips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 5e-324, f64::MAX, 2.0f64.sqrt()] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn param_vector_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, pv) = make_full_two_layer(2, 5, 3).unwrap();
        save_param_vector(&pv, dir.path(), "theta").unwrap();
        assert_eq!(load_param_vector(dir.path(), "theta").unwrap(), pv);
        assert_eq!(load_f64_bin(&dir.path().join("theta.bin")).unwrap(), pv.theta);
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_rows(&[vec![1.0, -0.1], vec![1e-17, 3.0], vec![7.0, 8.5]]).unwrap();
        save_matrix_csv(&m, &dir.path().join("m.csv")).unwrap();
        save_matrix_bin(&m, &dir.path().join("m.bin")).unwrap();
        assert_eq!(load_matrix_csv(&dir.path().join("m.csv")).unwrap(), m);
        assert_eq!(load_matrix_bin(&dir.path().join("m.bin")).unwrap(), m);
    }

    #[test]
    fn trajectory_files() {
        let dir = tempfile::tempdir().unwrap();
        let oracle = FnOracle::new(2, |th: &[f64]| (0.5 * (th[0] * th[0] + th[1] * th[1]), th.to_vec()));
        let spec = OptimizerSpec::Gd { eta: 0.5, momentum: 0.0 };
        let traj = run(&spec, &oracle, None, &[1.0, 2.0], RunOptions { steps: 4, stride: 2 }).unwrap();
        let path = dir.path().join("t.csv");
        save_trajectory_csv(&traj, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,loss,theta_norm");
        assert_eq!(lines.len(), 1 + traj.steps.len());
        assert!(lines[1].starts_with("0,2.5000000000000000e0,"));
        assert!(!text.contains('\r'));
        let bin = dir.path().join("t.bin");
        save_iterates_bin(&traj, &bin).unwrap();
        let back = load_iterates_bin(&bin).unwrap();
        assert_eq!(back.len(), traj.iterates.len());
        for ((t, th), (t2, th2)) in back.iter().zip(traj.steps.iter().zip(&traj.iterates)) {
            assert_eq!((t, th), (t2, th2));
        }
    }
}
