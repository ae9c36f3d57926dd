//! Seeded k-means: k-means++ seeding followed by Lloyd iterations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{sq_dist_slice, Vec32};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmeansParams {
    pub max_iters: usize,
    /// Stop once no centroid moves by more than this (L2).
    pub tol: f64,
}

impl Default for KmeansParams {
    fn default() -> Self {
        Self {
            max_iters: 25,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub centers: Vec<Vec32>,
    pub dim: usize,
    /// `Σ_x min_j ‖x − c_j‖²` over the training vectors at termination.
    pub inertia: f64,
    pub iterations_run: usize,
}

impl Centroids {
    pub fn new(centers: Vec<Vec32>, inertia: f64, iterations_run: usize) -> Result<Self> {
        let dim = centers.first().ok_or(Error::Empty("centroid set"))?.dim();
        for c in &centers {
            check_dim(dim, c.dim())?;
        }
        Ok(Self {
            centers,
            dim,
            inertia,
            iterations_run,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    /// Nearest center by squared L2; ties go to the lowest index.
    pub fn assign(&self, x: &Vec32) -> Result<(usize, f64)> {
        check_dim(self.dim, x.dim())?;
        Ok(nearest(&self.centers, x))
    }

    /// Every center's squared distance to `x`, in center order.
    pub fn distances(&self, x: &[f32]) -> Vec<f64> {
        self.centers.iter().map(|c| sq_dist_slice(c, x)).collect()
    }
}

pub fn assign(centroids: &Centroids, x: &Vec32) -> Result<(usize, f64)> {
    centroids.assign(x)
}

fn nearest(centers: &[Vec32], x: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist_slice(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Result of a run with its per-iteration inertia trace (inertia after each
/// assignment step).
#[derive(Debug, Clone)]
pub struct KmeansRun {
    pub centroids: Centroids,
    pub inertia_trace: Vec<f64>,
}

pub fn kmeans(vectors: &[Vec32], k: usize, params: &KmeansParams, rng: &mut Rng) -> Result<Centroids> {
    kmeans_traced(vectors, k, params, rng).map(|r| r.centroids)
}

pub fn kmeans_traced(vectors: &[Vec32], k: usize, params: &KmeansParams, rng: &mut Rng) -> Result<KmeansRun> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if vectors.len() < k {
        return Err(Error::TooFewPoints {
            needed: k,
            got: vectors.len(),
        });
    }
    let dim = vectors[0].dim();
    for v in vectors {
        check_dim(dim, v.dim())?;
    }
    let init = plus_plus_init(vectors, k, rng);
    lloyd(vectors, init, params)
}

/// Greedy k-means++ seeding: first center uniform, then at each step
/// `2 + ⌊ln k⌋` candidates are drawn with probability proportional to squared
/// distance to the nearest chosen center, and the one that most lowers the
/// total potential is kept (first candidate wins ties). Falls back to a
/// uniform draw when every point is already covered.
fn plus_plus_init(vectors: &[Vec32], k: usize, rng: &mut Rng) -> Vec<Vec32> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = Vec::with_capacity(k);
    centers.push(vectors[rng.below(vectors.len())].clone());
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist_slice(v, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut best: Option<(usize, f64, Vec<f64>)> = None;
            for _ in 0..trials {
                let cand = sample_weighted(&d2, total, rng);
                let next: Vec<f64> = vectors
                    .par_iter()
                    .zip(&d2)
                    .map(|(v, &d)| d.min(sq_dist_slice(v, &vectors[cand])))
                    .collect();
                let potential: f64 = next.iter().sum();
                if best.as_ref().is_none_or(|b| potential < b.1) {
                    best = Some((cand, potential, next));
                }
            }
            let (cand, _, next) = best.expect("at least one trial");
            d2 = next;
            cand
        } else {
            let cand = rng.below(vectors.len());
            for (d, v) in d2.iter_mut().zip(vectors) {
                *d = d.min(sq_dist_slice(v, &vectors[cand]));
            }
            cand
        };
        centers.push(vectors[pick].clone());
    }
    centers
}

fn sample_weighted(d2: &[f64], total: f64, rng: &mut Rng) -> usize {
    let target = rng.uniform() * total;
    let mut acc = 0.0;
    for (i, &d) in d2.iter().enumerate() {
        acc += d;
        if d > 0.0 && acc > target {
            return i;
        }
    }
    // rounding can leave `acc` just short of `target`
    d2.iter().rposition(|&d| d > 0.0).expect("positive total")
}

fn assign_all(vectors: &[Vec32], centers: &[Vec32]) -> Vec<(usize, f64)> {
    vectors.par_iter().map(|v| nearest(centers, v)).collect()
}

fn lloyd(vectors: &[Vec32], mut centers: Vec<Vec32>, params: &KmeansParams) -> Result<KmeansRun> {
    let k = centers.len();
    let dim = vectors[0].dim();
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let mut assignment = assign_all(vectors, &centers);
        trace.push(assignment.iter().map(|a| a.1).sum());
        repair_empty(&mut assignment, &mut centers, vectors);

        // ordered per-cluster reduction: points summed in input order
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &(c, _)) in vectors.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, &x) in sums[c].iter_mut().zip(v.iter()) {
                *s += x as f64;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            let n = counts[j] as f64;
            let mean: Vec<f64> = sums[j].iter().map(|s| s / n).collect();
            let next = Vec32::from_f64(&mean)?;
            shift = shift.max(sq_dist_slice(&next, &centers[j]).sqrt());
            centers[j] = next;
        }
        if shift < params.tol {
            break;
        }
    }
    let inertia = assign_all(vectors, &centers).iter().map(|a| a.1).sum();
    Ok(KmeansRun {
        centroids: Centroids::new(centers, inertia, iterations)?,
        inertia_trace: trace,
    })
}

/// Moves each empty cluster's center onto the point farthest from its own
/// center, taken from a cluster that keeps at least one other member.
fn repair_empty(assignment: &mut [(usize, f64)], centers: &mut [Vec32], vectors: &[Vec32]) {
    let k = centers.len();
    let mut counts = vec![0usize; k];
    for a in assignment.iter() {
        counts[a.0] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in assignment.iter().enumerate() {
            if counts[a.0] > 1 && best.is_none_or(|b| a.1 > b.1) {
                best = Some((i, a.1));
            }
        }
        let Some((i, _)) = best else { break };
        counts[assignment[i].0] -= 1;
        counts[j] = 1;
        assignment[i] = (j, 0.0);
        centers[j] = vectors[i].clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f32]) -> Vec32 {
        Vec32::new(xs.to_vec()).unwrap()
    }

    fn random_points(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec32> {
        (0..n)
            .map(|_| Vec32::new((0..d).map(|_| rng.normal() as f32).collect()).unwrap())
            .collect()
    }

    #[test]
    fn single_cluster_is_mean() {
        let mut rng = Rng::new(1);
        let pts = random_points(&mut rng, 50, 3);
        let c = kmeans(&pts, 1, &KmeansParams::default(), &mut rng).unwrap();
        for d in 0..3 {
            let mean = pts.iter().map(|p| p[d] as f64).sum::<f64>() / 50.0;
            assert!((c.centers[0][d] as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn separated_blobs() {
        let mut rng = Rng::new(2);
        let mut pts = Vec::new();
        for center in [[10.0f32, 10.0], [-10.0, -10.0]] {
            for _ in 0..40 {
                pts.push(v(&[center[0] + 0.1 * rng.normal() as f32, center[1] + 0.1 * rng.normal() as f32]));
            }
        }
        let c = kmeans(&pts, 2, &KmeansParams::default(), &mut rng).unwrap();
        for blob in [&pts[..40], &pts[40..]] {
            let mean: Vec<f64> = (0..2)
                .map(|d| blob.iter().map(|p| p[d] as f64).sum::<f64>() / 40.0)
                .collect();
            let (j, _) = c.assign(&blob[0]).unwrap();
            for d in 0..2 {
                assert!((c.centers[j][d] as f64 - mean[d]).abs() < 1e-4);
            }
        }
    }

    /// Plain Lloyd from uniformly drawn initial points, no repair, used as a
    /// reference for the seeded implementation.
    fn naive_lloyd(pts: &[Vec32], k: usize, rng: &mut Rng) -> f64 {
        let d = pts[0].dim();
        let mut centers: Vec<Vec<f32>> = (0..k).map(|_| pts[rng.below(pts.len())].to_vec()).collect();
        for _ in 0..25 {
            let mut sums = vec![vec![0.0f64; d]; k];
            let mut counts = vec![0usize; k];
            for p in pts {
                let j = (0..k)
                    .min_by(|&a, &b| sq_dist_slice(p, &centers[a]).total_cmp(&sq_dist_slice(p, &centers[b])))
                    .unwrap();
                counts[j] += 1;
                for t in 0..d {
                    sums[j][t] += p[t] as f64;
                }
            }
            for j in 0..k {
                if counts[j] > 0 {
                    centers[j] = sums[j].iter().map(|s| (s / counts[j] as f64) as f32).collect();
                }
            }
        }
        pts.iter()
            .map(|p| centers.iter().map(|c| sq_dist_slice(p, c)).fold(f64::INFINITY, f64::min))
            .sum()
    }

    #[test]
    fn beats_best_of_ten_naive_lloyd() {
        // 200 points around 8 random centers; on structureless data a single
        // run carries no guarantee against a best-of-10 baseline
        let mut data_rng = Rng::new(100);
        let centers: Vec<Vec<f64>> = (0..8).map(|_| (0..4).map(|_| 3.0 * data_rng.normal()).collect()).collect();
        let pts: Vec<Vec32> = (0..200)
            .map(|i| Vec32::from_f64(&centers[i % 8].iter().map(|c| c + 0.3 * data_rng.normal()).collect::<Vec<_>>()).unwrap())
            .collect();
        let c = kmeans(&pts, 8, &KmeansParams::default(), &mut Rng::new(3)).unwrap();
        let mut oracle_rng = Rng::new(77);
        let best = (0..10).map(|_| naive_lloyd(&pts, 8, &mut oracle_rng)).fold(f64::INFINITY, f64::min);
        assert!(c.inertia <= best * (1.0 + 1e-6), "{} vs {}", c.inertia, best);
    }

    #[test]
    fn too_few_points() {
        let pts = vec![v(&[1.0]), v(&[2.0])];
        assert!(matches!(
            kmeans(&pts, 3, &KmeansParams::default(), &mut Rng::new(0)),
            Err(Error::TooFewPoints { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn assign_examples() {
        let centers: Vec<Vec32> = (0..8).map(|i| v(&[i as f32, 0.0])).collect();
        let c = Centroids::new(centers, 0.0, 0).unwrap();
        assert_eq!(c.assign(&v(&[5.0, 0.0])).unwrap(), (5, 0.0));
        assert_eq!(c.assign(&v(&[1.5, 0.0])).unwrap().0, 1);
        assert!(c.assign(&v(&[1.0])).is_err());
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let x = v(&[rng.uniform_in(-1.0, 9.0) as f32, rng.normal() as f32]);
            let (j, d) = c.assign(&x).unwrap();
            let scan = c.distances(&x);
            assert_eq!(d, scan[j]);
            assert!(scan.iter().enumerate().all(|(i, &s)| s > d || (s == d && i >= j)));
        }
    }

    #[test]
    fn inertia_trace_non_increasing_and_deterministic() {
        let mut rng = Rng::new(9);
        let pts = random_points(&mut rng, 300, 5);
        let run = kmeans_traced(&pts, 12, &KmeansParams { max_iters: 40, tol: 0.0 }, &mut Rng::new(5)).unwrap();
        for w in run.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{w:?}");
        }
        assert!(run.centroids.inertia <= *run.inertia_trace.last().unwrap() * (1.0 + 1e-12));
        let again = kmeans(&pts, 12, &KmeansParams { max_iters: 40, tol: 0.0 }, &mut Rng::new(5)).unwrap();
        assert_eq!(again, run.centroids);
    }

    #[test]
    fn duplicate_points_keep_k_exact() {
        let mut pts = vec![v(&[0.0, 0.0]); 20];
        pts.push(v(&[1.0, 1.0]));
        let c = kmeans(&pts, 3, &KmeansParams::default(), &mut Rng::new(1)).unwrap();
        assert_eq!(c.k(), 3);
        assert_eq!(c.inertia, 0.0);
    }
}
