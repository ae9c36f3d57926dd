//! Synthetic dual-tower benchmark and file formats.
//!
//! Vector files: `"SCIV"`, version `u32`, dim `u32`, count `u64`, then
//! row-major `f32` values. Ids, when present, live in a sibling file with
//! extension `.ids` holding one `u64` per row. Model files: `"SCIM"`, version
//! `u32`, arch `u8`, normalize `u8`, input/output/hidden dims `u32`, then the
//! query tower's parameters followed by the item tower's, as `f32`. All
//! integers are little-endian.
//!
//! The generator uses only the ChaCha stream, the ziggurat normal sampler,
//! `sqrt`, `sin` and `cos`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{corrupt_file, put_f32s, put_u32, put_u64, Reader};
use crate::encoder::{Arch, DualTowerModel, TowerParams, TowerShape};
use crate::error::{check_dim, Error, Result};
use crate::eval::{Qrels, RunRanking};
use crate::linalg::{l2_normalize, Vec32};
use crate::rng::Rng;
use crate::training::TripletBatch;

const VEC_MAGIC: &[u8; 4] = b"SCIV";
const MODEL_MAGIC: &[u8; 4] = b"SCIM";
const VERSION: u32 = 1;
pub const VECTOR_HEADER_LEN: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_queries: usize,
    pub input_dim: usize,
    pub n_latent_clusters: usize,
    /// Rotation angle in radians applied to item features.
    pub tower_misalignment: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Spread of each item's latent around its cluster prototype.
    pub cluster_spread: f64,
    pub n_triplets: usize,
    pub batch_size: usize,
    /// Number of coordinate planes `(0,1), (2,3), …` the rotation acts in;
    /// 0 means every plane.
    pub rotated_planes: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_items: 2000,
            n_queries: 200,
            input_dim: 16,
            n_latent_clusters: 8,
            tower_misalignment: 0.8,
            noise_sigma: 0.05,
            seed: 0,
            cluster_spread: 0.0,
            n_triplets: 2000,
            batch_size: 32,
            rotated_planes: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_items == 0 || self.n_queries == 0 || self.input_dim == 0 || self.n_latent_clusters == 0 {
            return bad("counts and dimensions must be positive");
        }
        if self.n_items < self.n_latent_clusters {
            return bad("n_items must be at least n_latent_clusters");
        }
        if self.input_dim < 2 {
            return bad("input_dim must be at least 2 for a rotation");
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.tower_misalignment) {
            return bad("misalignment angle must lie in [0, π]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return bad("cluster_spread must be finite and non-negative");
        }
        if self.n_triplets > 0 && self.n_latent_clusters < 2 {
            return bad("triplets need at least two latent clusters");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub items: Vec<(u64, Vec32)>,
    pub queries: Vec<(u64, Vec32)>,
    pub triplets: Vec<TripletBatch>,
    pub qrels: Qrels,
    /// Latent cluster of each item, by position.
    pub item_clusters: Vec<usize>,
}

impl SyntheticData {
    /// `(query feature, relevant item feature)` for every qrel with grade ≥ 1.
    pub fn relevant_pairs(&self) -> Vec<(Vec32, Vec32)> {
        relevant_pairs(&self.queries, &self.items, &self.qrels)
    }
}

pub fn relevant_pairs(queries: &[(u64, Vec32)], items: &[(u64, Vec32)], qrels: &Qrels) -> Vec<(Vec32, Vec32)> {
    let item_by_id: std::collections::HashMap<u64, &Vec32> = items.iter().map(|(id, v)| (*id, v)).collect();
    let mut out = Vec::new();
    for (qid, q) in queries {
        for item in qrels.relevant(*qid) {
            if let Some(v) = item_by_id.get(&item) {
                out.push((q.clone(), (*v).clone()));
            }
        }
    }
    out
}

/// Rotation by `theta` in each coordinate plane `(0,1), (2,3), …`; an odd
/// last coordinate is left fixed.
fn rotate(x: &[f64], theta: f64, planes: usize) -> Vec<f64> {
    let (s, c) = theta.sin_cos();
    let mut out = x.to_vec();
    let n = if planes == 0 { x.len() / 2 } else { planes.min(x.len() / 2) };
    for p in 0..n {
        let (a, b) = (x[2 * p], x[2 * p + 1]);
        out[2 * p] = c * a - s * b;
        out[2 * p + 1] = s * a + c * b;
    }
    out
}

fn gaussian(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.normal()).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

fn noisy(z: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    z.iter().map(|&x| x + sigma * rng.normal()).collect()
}

/// Draws the benchmark.
///
/// Each latent cluster has a prototype on the unit sphere; item `j` belongs
/// to cluster `j mod K` and has latent `z_j`, the normalized sum of its
/// prototype and `cluster_spread`-scaled Gaussian noise (with the default
/// spread of 0, `z_j` is the prototype). Item features are `R(z_j + σ·ε)`
/// with `R` the misalignment rotation. A query picks a cluster `c` and is
/// `p_c + σ·ε`, unrotated; every item of cluster `c` is relevant (grade 1).
/// Training triplets pair a fresh query with a positive drawn from its
/// cluster and a negative from another cluster.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let d = spec.input_dim;
    let k = spec.n_latent_clusters;
    let prototypes: Vec<Vec<f64>> = (0..k).map(|_| unit(gaussian(&mut rng, d))).collect();

    let item_clusters: Vec<usize> = (0..spec.n_items).map(|j| j % k).collect();
    let latents: Vec<Vec<f64>> = item_clusters
        .iter()
        .map(|&c| {
            let e = gaussian(&mut rng, d);
            unit(prototypes[c].iter().zip(&e).map(|(p, x)| p + spec.cluster_spread * x).collect())
        })
        .collect();
    let features = |z: &[f64], rng: &mut Rng| rotate(&noisy(z, spec.noise_sigma, rng), spec.tower_misalignment, spec.rotated_planes);
    let mut items = Vec::with_capacity(spec.n_items);
    for (j, z) in latents.iter().enumerate() {
        items.push((j as u64, Vec32::from_f64(&features(z, &mut rng))?));
    }

    let by_cluster: Vec<Vec<usize>> = (0..k)
        .map(|c| (0..spec.n_items).filter(|&j| item_clusters[j] == c).collect())
        .collect();
    let mut queries = Vec::with_capacity(spec.n_queries);
    let mut qrels = Qrels::new();
    for q in 0..spec.n_queries {
        let c = rng.below(k);
        queries.push((q as u64, Vec32::from_f64(&noisy(&prototypes[c], spec.noise_sigma, &mut rng))?));
        for &j in &by_cluster[c] {
            qrels.insert(q as u64, j as u64, 1);
        }
    }

    let (mut tq, mut tp, mut tn) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..spec.n_triplets {
        let c = rng.below(k);
        let pos = by_cluster[c][rng.below(by_cluster[c].len())];
        let other = (c + 1 + rng.below(k - 1)) % k;
        let neg = by_cluster[other][rng.below(by_cluster[other].len())];
        tq.push(Vec32::from_f64(&noisy(&prototypes[c], spec.noise_sigma, &mut rng))?);
        tp.push(items[pos].1.clone());
        tn.push(items[neg].1.clone());
    }
    let triplets = batch_triplets(tq, tp, tn, spec.batch_size)?;
    Ok(SyntheticData {
        items,
        queries,
        triplets,
        qrels,
        item_clusters,
    })
}

/// Splits parallel triplet columns into batches of `batch_size` (the last
/// may be shorter).
pub fn batch_triplets(q: Vec<Vec32>, p: Vec<Vec32>, n: Vec<Vec32>, batch_size: usize) -> Result<Vec<TripletBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    check_dim(q.len(), p.len())?;
    check_dim(q.len(), n.len())?;
    let mut out = Vec::new();
    let mut start = 0;
    while start < q.len() {
        let end = (start + batch_size).min(q.len());
        out.push(TripletBatch::new(
            q[start..end].to_vec(),
            p[start..end].to_vec(),
            n[start..end].to_vec(),
        )?);
        start = end;
    }
    Ok(out)
}

/// Mean cosine between each query's raw feature and its relevant item's.
pub fn matched_feature_cosine(data: &SyntheticData) -> Result<f64> {
    let pairs = data.relevant_pairs();
    if pairs.is_empty() {
        return Err(Error::Empty("relevant pairs"));
    }
    let mut acc = 0.0;
    for (q, i) in &pairs {
        acc += crate::linalg::dot(&l2_normalize(q)?, &l2_normalize(i)?)?;
    }
    Ok(acc / pairs.len() as f64)
}

pub fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

pub fn vectors_to_bytes(vectors: &[Vec32]) -> Result<Vec<u8>> {
    let dim = vectors.first().ok_or(Error::Empty("vectors"))?.dim();
    let mut out = Vec::with_capacity(20 + vectors.len() * dim * 4);
    out.extend_from_slice(VEC_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, dim as u32);
    put_u64(&mut out, vectors.len() as u64);
    for v in vectors {
        check_dim(dim, v.dim())?;
        put_f32s(&mut out, v);
    }
    Ok(out)
}

pub fn vectors_from_bytes(buf: &[u8]) -> Result<Vec<Vec32>> {
    let mut r = Reader::new(buf, corrupt_file);
    r.magic(VEC_MAGIC)?;
    let at = r.pos();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(at, format!("unsupported version {version}")));
    }
    let at = r.pos();
    let dim = r.u32("dim")? as usize;
    let count = r.u64("count")? as usize;
    if dim == 0 {
        return Err(r.err(at, "dim must be positive"));
    }
    let payload = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| r.err(at, "count overflows"))?;
    if buf.len() - r.pos() < payload {
        return Err(r.err(r.pos(), format!("header declares {count} rows, payload is shorter")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(Vec32::new(r.f32s(dim, "vector payload")?)?);
    }
    r.finish()?;
    Ok(out)
}

/// Writes the vector file and, if given, the sibling id file.
pub fn write_vectors(path: impl AsRef<Path>, vectors: &[Vec32], ids: Option<&[u64]>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, vectors_to_bytes(vectors)?)?;
    if let Some(ids) = ids {
        check_dim(vectors.len(), ids.len())?;
        let mut buf = Vec::with_capacity(ids.len() * 8);
        for &id in ids {
            put_u64(&mut buf, id);
        }
        fs::write(ids_path(path), buf)?;
    }
    Ok(())
}

/// Reads a vector file and its sibling id file if one exists.
pub fn read_vectors(path: impl AsRef<Path>) -> Result<(Vec<Vec32>, Option<Vec<u64>>)> {
    let path = path.as_ref();
    let vectors = vectors_from_bytes(&fs::read(path)?)?;
    let ids_file = ids_path(path);
    let ids = if ids_file.exists() {
        let buf = fs::read(&ids_file)?;
        let mut r = Reader::new(&buf, corrupt_file);
        let ids = r.u64s(vectors.len(), "id column")?;
        r.finish()?;
        Some(ids)
    } else {
        None
    };
    Ok((vectors, ids))
}

/// Vectors paired with their ids; rows without an id file get `0..n`.
pub fn read_vectors_with_ids(path: impl AsRef<Path>) -> Result<Vec<(u64, Vec32)>> {
    let (vs, ids) = read_vectors(path)?;
    let ids = ids.unwrap_or_else(|| (0..vs.len() as u64).collect());
    Ok(ids.into_iter().zip(vs).collect())
}

pub fn model_to_bytes(model: &DualTowerModel) -> Vec<u8> {
    let shape = model.shape();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, VERSION);
    let (arch, hidden) = match shape.arch {
        Arch::Linear => (0u8, 0u32),
        Arch::Mlp1 { hidden_dim } => (1u8, hidden_dim as u32),
    };
    out.push(arch);
    out.push(model.normalize_output() as u8);
    put_u32(&mut out, shape.input_dim as u32);
    put_u32(&mut out, shape.output_dim as u32);
    put_u32(&mut out, hidden);
    put_f32s(&mut out, model.tower(crate::encoder::Tower::Query).as_slice());
    put_f32s(&mut out, model.tower(crate::encoder::Tower::Item).as_slice());
    out
}

pub fn model_from_bytes(buf: &[u8]) -> Result<DualTowerModel> {
    let mut r = Reader::new(buf, corrupt_file);
    r.magic(MODEL_MAGIC)?;
    let at = r.pos();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(at, format!("unsupported version {version}")));
    }
    let at = r.pos();
    let arch_tag = r.u8("arch")?;
    let normalize = match r.u8("normalize flag")? {
        0 => false,
        1 => true,
        t => return Err(r.err(at + 1, format!("bad normalize flag {t}"))),
    };
    let input_dim = r.u32("input dim")? as usize;
    let output_dim = r.u32("output dim")? as usize;
    let hidden = r.u32("hidden dim")? as usize;
    let arch = match arch_tag {
        0 => Arch::Linear,
        1 => Arch::Mlp1 { hidden_dim: hidden },
        t => return Err(r.err(at, format!("unknown arch {t}"))),
    };
    let shape = TowerShape::new(arch, input_dim, output_dim).map_err(|e| r.err(at, e.to_string()))?;
    let n = shape.num_params();
    let q = TowerParams::from_values(shape, r.f32s(n, "query tower")?)?;
    let i = TowerParams::from_values(shape, r.f32s(n, "item tower")?)?;
    r.finish()?;
    DualTowerModel::from_towers(q, i, normalize)
}

pub fn save_model(path: impl AsRef<Path>, model: &DualTowerModel) -> Result<()> {
    fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DualTowerModel> {
    model_from_bytes(&fs::read(path)?)
}

/// Parses `query_id\titem_id\tgrade` rows; blank lines are ignored.
pub fn parse_qrels(text: &str) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<u64> {
            s.trim().parse::<u64>().map_err(|_| Error::Parse {
                line: line_no,
                reason: format!("{what} {s:?} is not a non-negative integer"),
            })
        };
        let q = num(fields[0], "query id")?;
        let i = num(fields[1], "item id")?;
        let g = num(fields[2], "grade")?;
        let g = u32::try_from(g).map_err(|_| Error::Parse {
            line: line_no,
            reason: "grade out of range".into(),
        })?;
        if !qrels.insert(q, i, g) {
            return Err(Error::DuplicateQrel { line: line_no });
        }
    }
    Ok(qrels)
}

pub fn qrels_to_tsv(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (q, i, g) in qrels.iter() {
        out.push_str(&format!("{q}\t{i}\t{g}\n"));
    }
    out
}

pub fn read_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    parse_qrels(&fs::read_to_string(path)?)
}

pub fn write_qrels(path: impl AsRef<Path>, qrels: &Qrels) -> Result<()> {
    fs::write(path, qrels_to_tsv(qrels))?;
    Ok(())
}

pub fn write_run(path: impl AsRef<Path>, run: &RunRanking) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(run.to_tsv().as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Parses `query_id\trank\titem_id\tscore` rows. Rows of a query must
/// appear in rank order starting from 1.
pub fn parse_run(text: &str) -> Result<RunRanking> {
    let mut lists: std::collections::BTreeMap<u64, Vec<(u64, f64)>> = Default::default();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse { line: line_no, reason };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(parse_err(format!("expected 4 tab-separated fields, got {}", f.len())));
        }
        let q: u64 = f[0].parse().map_err(|_| parse_err(format!("bad query id {:?}", f[0])))?;
        let rank: usize = f[1].parse().map_err(|_| parse_err(format!("bad rank {:?}", f[1])))?;
        let item: u64 = f[2].parse().map_err(|_| parse_err(format!("bad item id {:?}", f[2])))?;
        let score: f64 = f[3].parse().map_err(|_| parse_err(format!("bad score {:?}", f[3])))?;
        let list = lists.entry(q).or_default();
        if rank != list.len() + 1 {
            return Err(parse_err(format!("rank {rank} out of order")));
        }
        list.push((item, score));
    }
    let mut run = RunRanking::new();
    for (q, l) in lists {
        run.insert(q, l)?;
    }
    Ok(run)
}

pub fn read_run(path: impl AsRef<Path>) -> Result<RunRanking> {
    parse_run(&fs::read_to_string(path)?)
}

/// Triplets on disk: one vector file whose rows cycle query, positive,
/// negative.
pub fn write_triplets(path: impl AsRef<Path>, batches: &[TripletBatch]) -> Result<()> {
    let mut rows = Vec::new();
    for b in batches {
        for j in 0..b.len() {
            rows.push(b.queries()[j].clone());
            rows.push(b.pos_items()[j].clone());
            rows.push(b.neg_items()[j].clone());
        }
    }
    write_vectors(path, &rows, None)
}

pub fn read_triplets(path: impl AsRef<Path>, batch_size: usize) -> Result<Vec<TripletBatch>> {
    let (rows, _) = read_vectors(path)?;
    if rows.len() % 3 != 0 {
        return Err(Error::CorruptFile {
            offset: VECTOR_HEADER_LEN,
            reason: format!("{} rows is not a whole number of triplets", rows.len()),
        });
    }
    let (mut q, mut p, mut n) = (Vec::new(), Vec::new(), Vec::new());
    for t in rows.chunks_exact(3) {
        q.push(t[0].clone());
        p.push(t[1].clone());
        n.push(t[2].clone());
    }
    batch_triplets(q, p, n, batch_size)
}
