//! Self-describing binary container for problem instances.
//!
//! Layout: magic bytes "COVD1"; N, Q, L, M as unsigned 32-bit
//! little-endian; sigma_w_sq as a little-endian 64-bit float; then
//! row-major interleaved (real, imag) 64-bit floats for S, then
//! Sigma_hat, then gamma_true.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Complex;
use thiserror::Error;

use crate::model::{Gain, SampleCovariance, SignatureMatrix, TruthAssignment};
use crate::objective::GammaVector;
use crate::CMatrix;

pub const MAGIC: &[u8; 5] = b"COVD1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes; not a COVD1 container")]
    BadMagic,
    #[error("corrupt container: {0}")]
    Corrupt(String),
}

/// The persisted portion of an instance.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredInstance {
    pub n: usize,
    pub q: usize,
    pub l: usize,
    pub m: usize,
    pub sigma_w_sq: f64,
    pub signatures: SignatureMatrix,
    pub sample_cov: SampleCovariance,
    pub gamma_true: GammaVector,
}

impl StoredInstance {
    pub fn from_instance(inst: &crate::model::Instance) -> Self {
        Self {
            n: inst.config.n,
            q: inst.config.q,
            l: inst.config.l,
            m: inst.config.m,
            sigma_w_sq: inst.config.sigma_w_sq,
            signatures: inst.signatures.clone(),
            sample_cov: inst.sample_cov.clone(),
            gamma_true: inst.truth.gamma_true().clone(),
        }
    }

    /// Flat indices of the transmitted sequences.
    pub fn true_support(&self) -> Vec<usize> {
        self.gamma_true.support_indices()
    }

    /// Rebuilds the ground-truth assignment from gamma_true. Gains of
    /// inactive devices are unknowable from the container; they default
    /// to the mean active gain (or 1) and only affect display.
    pub fn truth(&self) -> TruthAssignment {
        let mut selected = vec![None; self.n];
        let mut gains = vec![0.0; self.n];
        for (idx, g) in self.gamma_true.support() {
            selected[idx / self.q] = Some(idx % self.q);
            gains[idx / self.q] = g;
        }
        let active: Vec<f64> = gains.iter().copied().filter(|g| *g > 0.0).collect();
        let fill = if active.is_empty() {
            1.0
        } else {
            active.iter().sum::<f64>() / active.len() as f64
        };
        for g in gains.iter_mut() {
            if *g == 0.0 {
                *g = fill;
            }
        }
        TruthAssignment::new(selected, &Gain::PerDevice(gains), self.q)
    }

    /// Mean gain of the truly active sequences; 1 when none are active.
    pub fn nominal_gain(&self) -> f64 {
        let vals: Vec<f64> = self.gamma_true.support().map(|(_, g)| g).collect();
        if vals.is_empty() {
            1.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_matrix_row_major<W: Write>(w: &mut W, m: &CMatrix) -> std::io::Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let z = m[(i, j)];
            write_f64(w, z.re)?;
            write_f64(w, z.im)?;
        }
    }
    Ok(())
}

pub fn write_instance<W: Write>(w: &mut W, inst: &StoredInstance) -> Result<(), ContainerError> {
    w.write_all(MAGIC)?;
    write_u32(w, inst.n as u32)?;
    write_u32(w, inst.q as u32)?;
    write_u32(w, inst.l as u32)?;
    write_u32(w, inst.m as u32)?;
    write_f64(w, inst.sigma_w_sq)?;
    write_matrix_row_major(w, inst.signatures.entries())?;
    write_matrix_row_major(w, &inst.sample_cov.sigma_hat)?;
    for v in inst.gamma_true.values().iter() {
        write_f64(w, *v)?;
        write_f64(w, 0.0)?;
    }
    Ok(())
}

pub fn write_instance_file(path: &Path, inst: &StoredInstance) -> Result<(), ContainerError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_instance(&mut f, inst)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ContainerError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, ContainerError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_matrix_row_major<R: Read>(
    r: &mut R,
    rows: usize,
    cols: usize,
) -> Result<CMatrix, ContainerError> {
    let mut m = CMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let re = read_f64(r)?;
            let im = read_f64(r)?;
            m[(i, j)] = Complex::new(re, im);
        }
    }
    Ok(m)
}

pub fn read_instance<R: Read>(r: &mut R) -> Result<StoredInstance, ContainerError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let n = read_u32(r)? as usize;
    let q = read_u32(r)? as usize;
    let l = read_u32(r)? as usize;
    let m = read_u32(r)? as usize;
    let sigma_w_sq = read_f64(r)?;
    if n == 0 || q == 0 || l == 0 || m == 0 {
        return Err(ContainerError::Corrupt("zero dimension in header".into()));
    }
    let s = read_matrix_row_major(r, l, n * q)?;
    let sigma_hat = read_matrix_row_major(r, l, l)?;
    let mut gamma = GammaVector::zeros(n * q);
    for i in 0..n * q {
        let re = read_f64(r)?;
        let im = read_f64(r)?;
        if im != 0.0 {
            return Err(ContainerError::Corrupt(
                "gamma_true must have zero imaginary parts".into(),
            ));
        }
        if re < 0.0 {
            return Err(ContainerError::Corrupt(
                "gamma_true must be nonnegative".into(),
            ));
        }
        if re > 0.0 {
            gamma.set(i, re);
        }
    }
    let signatures = SignatureMatrix::new(s, q)
        .map_err(|e| ContainerError::Corrupt(e.to_string()))?;
    Ok(StoredInstance {
        n,
        q,
        l,
        m,
        sigma_w_sq,
        signatures,
        sample_cov: SampleCovariance { sigma_hat },
        gamma_true: gamma,
    })
}

pub fn read_instance_file(path: &Path) -> Result<StoredInstance, ContainerError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_instance(&mut f)
}

/// Writes gamma_true as `device,sequence,gamma` CSV rows for inspection.
pub fn write_gamma_csv<W: Write>(w: &mut W, gamma: &GammaVector, q: usize) -> std::io::Result<()> {
    writeln!(w, "device,sequence,gamma")?;
    for (idx, v) in gamma.support() {
        writeln!(w, "{},{},{v}", idx / q, idx % q)?;
    }
    Ok(())
}
