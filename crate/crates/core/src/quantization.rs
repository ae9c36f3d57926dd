//! Product quantization of residuals with asymmetric distance computation.
//!
//! A `dim`-dimensional vector is split into `m` contiguous sub-vectors of
//! `dim / m` values; each is replaced by the index of its nearest codeword
//! in that subspace's codebook, so a code is `m` bytes.

use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, KmeansParams};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{sq_dist_slice, Vec32};
use crate::rng::Rng;

pub const MAX_KSUB: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PqParams {
    pub m: usize,
    pub ksub: usize,
}

impl Default for PqParams {
    fn default() -> Self {
        Self { m: 8, ksub: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    m: usize,
    sub_dim: usize,
    ksub: usize,
    /// `m × ksub × sub_dim`, flattened.
    codewords: Vec<f32>,
    /// Mean squared reconstruction error per subspace over the training set.
    train_distortion: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PqCode(pub Vec<u8>);

impl PqCode {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

fn split_check(dim: usize, m: usize) -> Result<usize> {
    if m == 0 || dim % m != 0 {
        return Err(Error::BadSubspaceSplit { dim, m });
    }
    Ok(dim / m)
}

impl PqCodebook {
    /// Builds a codebook from explicit codewords laid out `m × ksub × sub_dim`.
    pub fn from_codewords(m: usize, ksub: usize, sub_dim: usize, codewords: Vec<f32>) -> Result<Self> {
        if m == 0 || sub_dim == 0 || ksub == 0 || ksub > MAX_KSUB {
            return Err(Error::InvalidConfig(format!(
                "invalid codebook shape m={m} ksub={ksub} sub_dim={sub_dim}"
            )));
        }
        check_dim(m * ksub * sub_dim, codewords.len())?;
        if let Some(pos) = codewords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self {
            m,
            sub_dim,
            ksub,
            codewords,
            train_distortion: vec![0.0; m],
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn ksub(&self) -> usize {
        self.ksub
    }

    pub fn dim(&self) -> usize {
        self.m * self.sub_dim
    }

    pub fn codewords(&self) -> &[f32] {
        &self.codewords
    }

    pub fn codeword(&self, subspace: usize, j: usize) -> &[f32] {
        let start = (subspace * self.ksub + j) * self.sub_dim;
        &self.codewords[start..start + self.sub_dim]
    }

    pub fn train_distortion(&self) -> &[f64] {
        &self.train_distortion
    }

    pub(crate) fn set_train_distortion(&mut self, d: Vec<f64>) {
        self.train_distortion = d;
    }

    fn nearest(&self, s: usize, sub: &[f32]) -> (u8, f64) {
        let mut best = (0u8, f64::INFINITY);
        for j in 0..self.ksub {
            let d = sq_dist_slice(sub, self.codeword(s, j));
            if d < best.1 {
                best = (j as u8, d);
            }
        }
        best
    }

    pub fn validate_code(&self, code: &PqCode) -> Result<()> {
        check_dim(self.m, code.0.len())?;
        for (subspace, &c) in code.0.iter().enumerate() {
            if c as usize >= self.ksub {
                return Err(Error::CorruptCode {
                    subspace,
                    code: c,
                    ksub: self.ksub,
                });
            }
        }
        Ok(())
    }
}

/// Trains one k-means codebook per subspace, subspaces in order from the
/// same `rng`.
pub fn pq_train(residuals: &[Vec32], m: usize, ksub: usize, rng: &mut Rng) -> Result<PqCodebook> {
    let dim = residuals.first().ok_or(Error::Empty("residuals"))?.dim();
    let sub_dim = split_check(dim, m)?;
    if ksub == 0 || ksub > MAX_KSUB {
        return Err(Error::InvalidConfig(format!("ksub must be in 1..={MAX_KSUB}, got {ksub}")));
    }
    if residuals.len() < ksub {
        return Err(Error::TooFewPoints {
            needed: ksub,
            got: residuals.len(),
        });
    }
    for r in residuals {
        check_dim(dim, r.dim())?;
    }
    let mut codewords = Vec::with_capacity(m * ksub * sub_dim);
    let mut distortion = Vec::with_capacity(m);
    for s in 0..m {
        let subs: Vec<Vec32> = residuals
            .iter()
            .map(|r| Vec32::new(r[s * sub_dim..(s + 1) * sub_dim].to_vec()))
            .collect::<Result<_>>()?;
        let c = kmeans(&subs, ksub, &KmeansParams::default(), rng)?;
        distortion.push(c.inertia / residuals.len() as f64);
        for center in &c.centers {
            codewords.extend_from_slice(center);
        }
    }
    let mut cb = PqCodebook::from_codewords(m, ksub, sub_dim, codewords)?;
    cb.set_train_distortion(distortion);
    Ok(cb)
}

/// Nearest codeword per subspace; ties go to the lowest index.
pub fn pq_encode(cb: &PqCodebook, r: &Vec32) -> Result<PqCode> {
    check_dim(cb.dim(), r.dim())?;
    Ok(PqCode(
        (0..cb.m)
            .map(|s| cb.nearest(s, &r[s * cb.sub_dim..(s + 1) * cb.sub_dim]).0)
            .collect(),
    ))
}

pub fn pq_reconstruct(cb: &PqCodebook, code: &PqCode) -> Result<Vec32> {
    cb.validate_code(code)?;
    let mut out = Vec::with_capacity(cb.dim());
    for (s, &c) in code.0.iter().enumerate() {
        out.extend_from_slice(cb.codeword(s, c as usize));
    }
    Vec32::new(out)
}

/// Per-subspace squared distances from a query residual to every codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcTable {
    ksub: usize,
    /// `m × ksub`, flattened.
    values: Vec<f64>,
}

impl AdcTable {
    pub fn m(&self) -> usize {
        self.values.len() / self.ksub
    }

    pub fn ksub(&self) -> usize {
        self.ksub
    }

    pub fn get(&self, subspace: usize, j: usize) -> f64 {
        self.values[subspace * self.ksub + j]
    }

    pub fn from_values(m: usize, ksub: usize, values: Vec<f64>) -> Result<Self> {
        if ksub == 0 {
            return Err(Error::InvalidConfig("ksub must be positive".into()));
        }
        check_dim(m * ksub, values.len())?;
        Ok(Self { ksub, values })
    }
}

pub fn adc_table(cb: &PqCodebook, query_residual: &Vec32) -> Result<AdcTable> {
    check_dim(cb.dim(), query_residual.dim())?;
    let mut values = Vec::with_capacity(cb.m * cb.ksub);
    for s in 0..cb.m {
        let sub = &query_residual[s * cb.sub_dim..(s + 1) * cb.sub_dim];
        for j in 0..cb.ksub {
            values.push(sq_dist_slice(sub, cb.codeword(s, j)));
        }
    }
    Ok(AdcTable { ksub: cb.ksub, values })
}

/// `Σ_s table[s][code_s]`.
pub fn adc_distance(table: &AdcTable, code: &PqCode) -> Result<f64> {
    check_dim(table.m(), code.0.len())?;
    let mut acc = 0.0f64;
    for (s, &c) in code.0.iter().enumerate() {
        if c as usize >= table.ksub {
            return Err(Error::CorruptCode {
                subspace: s,
                code: c,
                ksub: table.ksub,
            });
        }
        acc += table.get(s, c as usize);
    }
    Ok(acc)
}

/// ADC over raw code bytes, unchecked beyond debug assertions; used on the
/// index search path where codes were validated at build or load.
pub(crate) fn adc_distance_bytes(table: &AdcTable, code: &[u8]) -> f64 {
    debug_assert_eq!(code.len(), table.m());
    code.iter()
        .enumerate()
        .fold(0.0f64, |acc, (s, &c)| acc + table.values[s * table.ksub + c as usize])
}
