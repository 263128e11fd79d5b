//! Binary columnar trajectory files and CSV output.
//!
//! Layout (little endian): 8-byte magic, `u32` kind, 32-byte SHA-256 of the
//! canonical parameter text, `f64` dt, `u64` decimation, `u64` seed, `f64`
//! reference frequency, `u64` rows, `u64` columns, then the rows as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::langevin::Trajectory;
use crate::model::SystemParams;
use crate::slowflow::SlowTrajectory;

const MAGIC: [u8; 8] = *b"TWOMBR\x00\x01";
const ROWS_OFFSET: u64 = 8 + 4 + 32 + 8 + 8 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    /// `t, Re/Im alpha1, alpha2, beta1, beta2`
    Langevin = 1,
    /// `t, Re/Im A1, A2`
    Slow = 2,
    /// `t, V`
    Voltage = 3,
}

impl FileKind {
    pub fn columns(self) -> u64 {
        match self {
            FileKind::Langevin => 9,
            FileKind::Slow => 5,
            FileKind::Voltage => 2,
        }
    }

    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(FileKind::Langevin),
            2 => Some(FileKind::Slow),
            3 => Some(FileKind::Voltage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub kind: FileKind,
    pub params_hash: [u8; 32],
    pub dt: f64,
    pub decimation: u64,
    pub seed: u64,
    pub omega_ref: f64,
    pub rows: u64,
    pub cols: u64,
}

impl Header {
    pub fn new(kind: FileKind, p: &SystemParams, dt: f64, decimation: u64, seed: u64, omega_ref: f64) -> Self {
        Self {
            kind,
            params_hash: params_hash(p),
            dt,
            decimation,
            seed,
            omega_ref,
            rows: 0,
            cols: kind.columns(),
        }
    }

    pub fn sample_interval(&self) -> f64 {
        self.dt * self.decimation as f64
    }
}

/// SHA-256 of the canonical configuration text.
pub fn params_hash(p: &SystemParams) -> [u8; 32] {
    Sha256::digest(p.to_config_string().as_bytes()).into()
}

/// Streaming writer; the row count is patched in on [`ColumnarWriter::finish`].
pub struct ColumnarWriter {
    out: BufWriter<File>,
    path: String,
    cols: u64,
    rows: u64,
}

impl ColumnarWriter {
    pub fn create(path: &Path, header: &Header) -> Result<Self> {
        let name = path.display().to_string();
        let file = File::create(path).map_err(|e| Error::io(&name, e))?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        let mut buf = Vec::with_capacity(ROWS_OFFSET as usize + 16);
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&(header.kind as u32).to_le_bytes());
        buf.extend_from_slice(&header.params_hash);
        buf.extend_from_slice(&header.dt.to_le_bytes());
        buf.extend_from_slice(&header.decimation.to_le_bytes());
        buf.extend_from_slice(&header.seed.to_le_bytes());
        buf.extend_from_slice(&header.omega_ref.to_le_bytes());
        buf.extend_from_slice(&0u64.to_le_bytes());
        buf.extend_from_slice(&header.cols.to_le_bytes());
        out.write_all(&buf).map_err(|e| Error::io(&name, e))?;
        Ok(Self { out, path: name, cols: header.cols, rows: 0 })
    }

    pub fn write_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() as u64 != self.cols {
            return Err(Error::invalid(format!("row of {} values, file has {} columns", row.len(), self.cols)));
        }
        for v in row {
            self.out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&self.path, e))?;
        }
        self.rows += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<u64> {
        let path = self.path;
        let mut file = self.out.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        file.seek(SeekFrom::Start(ROWS_OFFSET)).map_err(|e| Error::io(&path, e))?;
        file.write_all(&self.rows.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        file.flush().map_err(|e| Error::io(&path, e))?;
        Ok(self.rows)
    }
}

fn take<const N: usize>(r: &mut impl Read, path: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| Error::Format {
        path: path.into(),
        msg: "truncated header".into(),
    })?;
    Ok(b)
}

/// Reads a whole file as `(header, row-major data)`.
pub fn read_columnar(path: &Path) -> Result<(Header, Vec<f64>)> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&name, e))?;
    let mut r = BufReader::with_capacity(1 << 20, file);
    let bad = |msg: &str| Error::Format { path: name.clone(), msg: msg.into() };
    if take::<8>(&mut r, &name)? != MAGIC {
        return Err(bad("not a trajectory file"));
    }
    let kind = FileKind::from_u32(u32::from_le_bytes(take(&mut r, &name)?)).ok_or_else(|| bad("unknown kind"))?;
    let params_hash = take::<32>(&mut r, &name)?;
    let dt = f64::from_le_bytes(take(&mut r, &name)?);
    let decimation = u64::from_le_bytes(take(&mut r, &name)?);
    let seed = u64::from_le_bytes(take(&mut r, &name)?);
    let omega_ref = f64::from_le_bytes(take(&mut r, &name)?);
    let rows = u64::from_le_bytes(take(&mut r, &name)?);
    let cols = u64::from_le_bytes(take(&mut r, &name)?);
    if cols != kind.columns() {
        return Err(bad("column count does not match file kind"));
    }
    let n = (rows * cols) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(&name, e))?;
    if bytes.len() != n * 8 {
        return Err(bad(&format!("expected {} data bytes, found {}", n * 8, bytes.len())));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        Header { kind, params_hash, dt, decimation, seed, omega_ref, rows, cols },
        data,
    ))
}

fn expect_kind(h: &Header, kind: FileKind, path: &Path) -> Result<()> {
    if h.kind != kind {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: format!("expected a {kind:?} file, found {:?}", h.kind),
        });
    }
    Ok(())
}

pub fn write_trajectory(path: &Path, traj: &Trajectory, p: &SystemParams) -> Result<()> {
    let h = Header::new(FileKind::Langevin, p, traj.dt, traj.decimation as u64, traj.seed, 0.0);
    let mut w = ColumnarWriter::create(path, &h)?;
    for k in 0..traj.len() {
        let (a1, a2, b1, b2) = (traj.alpha1[k], traj.alpha2[k], traj.beta1[k], traj.beta2[k]);
        w.write_row(&[traj.t[k], a1.re, a1.im, a2.re, a2.im, b1.re, b1.im, b2.re, b2.im])?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<(Header, Trajectory)> {
    let (h, d) = read_columnar(path)?;
    expect_kind(&h, FileKind::Langevin, path)?;
    let c = |r: &[f64], k: usize| Complex64::new(r[k], r[k + 1]);
    let mut tr = Trajectory {
        t: Vec::new(),
        alpha1: Vec::new(),
        alpha2: Vec::new(),
        beta1: Vec::new(),
        beta2: Vec::new(),
        seed: h.seed,
        dt: h.dt,
        decimation: h.decimation as usize,
    };
    for r in d.chunks_exact(9) {
        tr.t.push(r[0]);
        tr.alpha1.push(c(r, 1));
        tr.alpha2.push(c(r, 3));
        tr.beta1.push(c(r, 5));
        tr.beta2.push(c(r, 7));
    }
    Ok((h, tr))
}

pub fn write_slow_trajectory(path: &Path, traj: &SlowTrajectory, p: &SystemParams) -> Result<()> {
    let h = Header::new(FileKind::Slow, p, traj.dt, traj.decimation as u64, traj.seed, traj.omega_ref);
    let mut w = ColumnarWriter::create(path, &h)?;
    for k in 0..traj.t.len() {
        let (a1, a2) = (traj.a1[k], traj.a2[k]);
        w.write_row(&[traj.t[k], a1.re, a1.im, a2.re, a2.im])?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_slow_trajectory(path: &Path) -> Result<(Header, SlowTrajectory)> {
    let (h, d) = read_columnar(path)?;
    expect_kind(&h, FileKind::Slow, path)?;
    let mut tr = SlowTrajectory {
        t: Vec::new(),
        a1: Vec::new(),
        a2: Vec::new(),
        omega_ref: h.omega_ref,
        dt: h.dt,
        decimation: h.decimation as usize,
        seed: h.seed,
    };
    for r in d.chunks_exact(5) {
        tr.t.push(r[0]);
        tr.a1.push(Complex64::new(r[1], r[2]));
        tr.a2.push(Complex64::new(r[3], r[4]));
    }
    Ok((h, tr))
}

/// `(header, t, V)` of a voltage file.
pub fn read_voltage(path: &Path) -> Result<(Header, Vec<f64>, Vec<f64>)> {
    let (h, d) = read_columnar(path)?;
    expect_kind(&h, FileKind::Voltage, path)?;
    let t = d.iter().step_by(2).copied().collect();
    let v = d.iter().skip(1).step_by(2).copied().collect();
    Ok((h, t, v))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// CSV with a header row; values printed with round-trip precision.
pub fn csv_string<I>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    write_text(path, &csv_string(header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::reference_params;

    fn sample_traj() -> Trajectory {
        let c = |a: f64| Complex64::new(a, -a / 3.0);
        Trajectory {
            t: vec![0.0, 1e-6, 2e-6],
            alpha1: vec![c(1.0), c(2.0), c(3.0)],
            alpha2: vec![c(0.1), c(0.2), c(0.3)],
            beta1: vec![c(1e3), c(-2e3), c(std::f64::consts::PI)],
            beta2: vec![c(7.0), c(8.0), c(9.0)],
            seed: 42,
            dt: 2e-8,
            decimation: 50,
        }
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let p = reference_params();
        let tr = sample_traj();
        write_trajectory(&path, &tr, &p).unwrap();
        let (h, back) = read_trajectory(&path).unwrap();
        assert_eq!(back, tr);
        assert_eq!(h.params_hash, params_hash(&p));
        assert_eq!(h.rows, 3);
        assert!(read_slow_trajectory(&path).is_err());
    }

    #[test]
    fn slow_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let p = reference_params();
        let tr = SlowTrajectory {
            t: vec![0.0, 0.1],
            a1: vec![Complex64::new(1.0, 2.0), Complex64::new(-3.0, 0.5)],
            a2: vec![Complex64::new(0.0, 0.0), Complex64::new(1e-300, 1e300)],
            omega_ref: 1.45e6,
            dt: 2e-4,
            decimation: 500,
            seed: 9,
        };
        write_slow_trajectory(&path, &tr, &p).unwrap();
        assert_eq!(read_slow_trajectory(&path).unwrap().1, tr);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_trajectory(&path, &sample_traj(), &reference_params()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_trajectory(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(read_trajectory(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_round_trip_precision() {
        let v = 0.1 + 0.2;
        let s = csv_string(&["a", "b"], vec![vec![v, 1e-300]]);
        let line = s.lines().nth(1).unwrap();
        let parsed: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(parsed, vec![v, 1e-300]);
        assert!(s.starts_with("a,b\n"));
    }
}
