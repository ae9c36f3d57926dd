//! Read-only analyses of a trained model: cross-tower alignment error,
//! covariance anisotropy of each tower, and similarity statistics over
//! ground-truth pairs.

use serde::Serialize;

use crate::encoder::{DualTowerModel, Tower};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot_slice, Vec32};

/// Lower bound applied to the smallest eigenvalue before dividing.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Off-diagonal Frobenius mass at which Jacobi sweeps stop.
pub const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub alignment_error: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnisotropyReport {
    pub cond_q: f64,
    pub cond_i: f64,
    pub cov_fro_gap: f64,
    /// Set when the tower's smallest eigenvalue was raised to the floor.
    pub floor_hit_q: bool,
    pub floor_hit_i: bool,
    /// Ascending eigenvalues of each tower's covariance.
    pub eigenvalues_q: Vec<f64>,
    pub eigenvalues_i: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityStats {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub std: f64,
}

/// Mean of `(S(f_q(Q), f_i(I)) − S(f_i(Q), f_q(I)))²` over the pairs, with
/// `S` the dot product of the (normalized, if enabled) embeddings.
pub fn alignment_error(model: &DualTowerModel, pairs: &[(Vec32, Vec32)]) -> Result<AlignmentReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("pairs"));
    }
    let qs: Vec<Vec32> = pairs.iter().map(|p| p.0.clone()).collect();
    let is: Vec<Vec32> = pairs.iter().map(|p| p.1.clone()).collect();
    let direct_q = model.encode_batch(Tower::Query, &qs)?;
    let direct_i = model.encode_batch(Tower::Item, &is)?;
    let swap_q = model.encode_batch(Tower::Item, &qs)?;
    let swap_i = model.encode_batch(Tower::Query, &is)?;
    let mut acc = 0.0f64;
    for j in 0..pairs.len() {
        let gap = dot_slice(&direct_q[j], &direct_i[j]) - dot_slice(&swap_q[j], &swap_i[j]);
        acc += gap * gap;
    }
    Ok(AlignmentReport {
        alignment_error: acc / pairs.len() as f64,
        n_pairs: pairs.len(),
    })
}

/// Sample covariance (divisor `n − 1`), row-major `d × d`.
pub fn covariance(xs: &[Vec32]) -> Result<Vec<f64>> {
    let d = xs.first().ok_or(Error::Empty("vectors"))?.dim();
    if xs.len() < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: xs.len() });
    }
    let n = xs.len() as f64;
    let mut mean = vec![0.0f64; d];
    for x in xs {
        check_dim(d, x.dim())?;
        for (m, &v) in mean.iter_mut().zip(x.iter()) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![0.0f64; d * d];
    for x in xs {
        let c: Vec<f64> = x.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect();
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] += c[a] * c[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / (n - 1.0);
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok(cov)
}

/// Eigenvalues of a symmetric `d × d` matrix by cyclic Jacobi rotations,
/// sorted ascending.
pub fn symmetric_eigenvalues(matrix: &[f64], d: usize) -> Result<Vec<f64>> {
    check_dim(d * d, matrix.len())?;
    let mut a = matrix.to_vec();
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|p| (0..d).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[p * d + q] * a[p * d + q])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

fn condition(eig: &[f64], epsilon: f64) -> (f64, bool) {
    let max = *eig.last().expect("nonempty");
    let min = eig[0];
    let floor_hit = min < epsilon;
    ((max / min.max(epsilon)).max(1.0), floor_hit)
}

/// Anisotropy of two embedding clouds of the same inputs.
pub fn anisotropy_of_embeddings(eq: &[Vec32], ei: &[Vec32], epsilon: f64) -> Result<AnisotropyReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    let d = eq.first().ok_or(Error::Empty("embeddings"))?.dim();
    if eq.len() <= d || ei.len() <= d {
        return Err(Error::TooFewPoints {
            needed: d + 1,
            got: eq.len().min(ei.len()),
        });
    }
    let cq = covariance(eq)?;
    let ci = covariance(ei)?;
    check_dim(cq.len(), ci.len())?;
    let eigenvalues_q = symmetric_eigenvalues(&cq, d)?;
    let eigenvalues_i = symmetric_eigenvalues(&ci, d)?;
    let (cond_q, floor_hit_q) = condition(&eigenvalues_q, epsilon);
    let (cond_i, floor_hit_i) = condition(&eigenvalues_i, epsilon);
    let fro = |m: &[f64]| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = cq.iter().zip(&ci).map(|(a, b)| a - b).collect();
    let denom = fro(&cq).max(fro(&ci));
    let cov_fro_gap = if denom == 0.0 { 0.0 } else { fro(&diff) / denom };
    Ok(AnisotropyReport {
        cond_q,
        cond_i,
        cov_fro_gap,
        floor_hit_q,
        floor_hit_i,
        eigenvalues_q,
        eigenvalues_i,
    })
}

/// Encodes the pooled inputs through both towers and compares the two
/// covariance structures. Callers pool queries and items in equal counts.
pub fn anisotropy(model: &DualTowerModel, inputs: &[Vec32], epsilon: f64) -> Result<AnisotropyReport> {
    if inputs.len() <= model.output_dim() {
        return Err(Error::TooFewPoints {
            needed: model.output_dim() + 1,
            got: inputs.len(),
        });
    }
    let eq = model.encode_batch(Tower::Query, inputs)?;
    let ei = model.encode_batch(Tower::Item, inputs)?;
    anisotropy_of_embeddings(&eq, &ei, epsilon)
}

/// The first `n` queries followed by the first `n` items, with `n` the
/// smaller of the two counts.
pub fn pooled_inputs(queries: &[(u64, Vec32)], items: &[(u64, Vec32)]) -> Vec<Vec32> {
    let n = queries.len().min(items.len());
    queries[..n].iter().chain(&items[..n]).map(|(_, v)| v.clone()).collect()
}

/// Summary statistics; the median of an even count is the lower middle
/// value and `std` is the population standard deviation.
pub fn similarity_stats(values: &[f64]) -> Result<SimilarityStats> {
    if values.is_empty() {
        return Err(Error::Empty("similarities"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(SimilarityStats {
        mean,
        median: sorted[(sorted.len() - 1) / 2],
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        std: var.sqrt(),
    })
}

pub fn pair_similarity_stats(model: &DualTowerModel, pairs: &[(Vec32, Vec32)]) -> Result<SimilarityStats> {
    if !model.normalize_output() {
        return Err(Error::InvalidConfig("pair similarity needs normalized outputs".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("pairs"));
    }
    let qs: Vec<Vec32> = pairs.iter().map(|p| p.0.clone()).collect();
    let is: Vec<Vec32> = pairs.iter().map(|p| p.1.clone()).collect();
    let eq = model.encode_batch(Tower::Query, &qs)?;
    let ei = model.encode_batch(Tower::Item, &is)?;
    let sims: Vec<f64> = eq.iter().zip(&ei).map(|(a, b)| dot_slice(a, b)).collect();
    similarity_stats(&sims)
}
