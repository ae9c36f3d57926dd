//! IVF-Flat and IVF-PQ indexes with two build modes.
//!
//! `Standard` clusters and stores item-tower embeddings only. `Ci` clusters
//! query-tower embeddings of the items (the structural vectors), assigns
//! each item by its structural vector, and stores item-tower embeddings (the
//! representation vectors) as the fine payload: raw for Flat, or as PQ codes
//! of the residual `e_I^i − c_k(I)` for Pq.
//!
//! Distances are squared L2 throughout. Ties are broken by ascending item id.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, Centroids, KmeansParams};
use crate::codec::{corrupt_index, put_f32s, put_f64, put_u32, put_u64, Reader};
use crate::encoder::{DualTowerModel, EncodeCounts, Tower};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{sq_dist_slice, Vec32};
use crate::quantization::{adc_distance_bytes, adc_table, pq_encode, pq_reconstruct, pq_train, PqCodebook, PqParams};
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"SCIX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BuildMode {
    Standard,
    Ci,
}

impl BuildMode {
    pub fn name(self) -> &'static str {
        match self {
            BuildMode::Standard => "standard",
            BuildMode::Ci => "ci",
        }
    }
}

/// Which vector the PQ residual is taken from in CI mode. `Representation`
/// is the hybrid residual `e_I^i − c`; `Structural` is the ablation
/// `e_I^q − c`. Standard mode has only one space, so the choice is moot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidualSpace {
    Representation,
    Structural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantKind {
    Flat,
    Pq,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Flat,
    Pq(PqCodebook),
}

impl Variant {
    pub fn kind(&self) -> VariantKind {
        match self {
            Variant::Flat => VariantKind::Flat,
            Variant::Pq(_) => VariantKind::Pq,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildParams {
    pub mode: BuildMode,
    pub variant: VariantKind,
    pub nlist: usize,
    pub pq: PqParams,
    pub residual_space: ResidualSpace,
    pub kmeans: KmeansParams,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            mode: BuildMode::Ci,
            variant: VariantKind::Flat,
            nlist: 16,
            pq: PqParams::default(),
            residual_space: ResidualSpace::Representation,
            kmeans: KmeansParams::default(),
        }
    }
}

/// One inverted list. Payload rows are parallel to `ids`: `dim` floats each
/// for Flat, `m` code bytes each for Pq.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PostingList {
    pub ids: Vec<u64>,
    pub vectors: Vec<f32>,
    pub codes: Vec<u8>,
}

impl PostingList {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    variant: Variant,
    mode: BuildMode,
    residual_space: ResidualSpace,
    centroids: Centroids,
    lists: Vec<PostingList>,
    n_items: usize,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// `(item_id, squared distance)`, ascending.
    pub ranked: Vec<(u64, f64)>,
    pub probed_clusters: Vec<usize>,
}

/// Measurements taken during a build.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildStats {
    pub encodes: EncodeCounts,
    /// Mean `‖r − reconstruct(encode(r))‖²` over the indexed residuals; Pq only.
    pub residual_reconstruction_error: Option<f64>,
    /// Mean `‖r‖²` of the same residuals; Pq only.
    pub residual_energy: Option<f64>,
}

/// `(assign(e_struct), e_repr − c_assigned)`.
pub fn compute_residual(e_struct: &Vec32, e_repr: &Vec32, centroids: &Centroids) -> Result<(usize, Vec32)> {
    check_dim(centroids.dim, e_repr.dim())?;
    let (j, _) = centroids.assign(e_struct)?;
    Ok((j, e_repr.sub(&centroids.centers[j])?))
}

pub fn build(
    model: &DualTowerModel,
    items: &[(u64, Vec32)],
    params: &BuildParams,
    rng: &mut Rng,
) -> Result<IvfIndex> {
    build_with_stats(model, items, params, rng).map(|(index, _)| index)
}

pub fn build_with_stats(
    model: &DualTowerModel,
    items: &[(u64, Vec32)],
    params: &BuildParams,
    rng: &mut Rng,
) -> Result<(IvfIndex, BuildStats)> {
    if items.is_empty() {
        return Err(Error::Empty("items"));
    }
    if params.nlist == 0 {
        return Err(Error::InvalidConfig("nlist must be at least 1".into()));
    }
    if items.len() < params.nlist {
        return Err(Error::TooFewPoints {
            needed: params.nlist,
            got: items.len(),
        });
    }
    let mut seen = HashSet::with_capacity(items.len());
    for (id, _) in items {
        if !seen.insert(*id) {
            return Err(Error::DuplicateItem(*id));
        }
    }
    let dim = model.output_dim();
    if params.variant == VariantKind::Pq && (params.pq.m == 0 || dim % params.pq.m != 0) {
        return Err(Error::BadSubspaceSplit { dim, m: params.pq.m });
    }

    let before = model.encode_counts();
    let features: Vec<Vec32> = items.iter().map(|(_, f)| f.clone()).collect();
    let repr = model.encode_batch(Tower::Item, &features)?;
    let structural = match params.mode {
        BuildMode::Standard => None,
        BuildMode::Ci => Some(model.encode_batch(Tower::Query, &features)?),
    };
    let after = model.encode_counts();
    let encodes = EncodeCounts {
        query: after.query - before.query,
        item: after.item - before.item,
    };
    let structural_ref = structural.as_deref().unwrap_or(&repr);

    let centroids = kmeans(structural_ref, params.nlist, &params.kmeans, rng)?;
    let assignment: Vec<usize> = structural_ref
        .par_iter()
        .map(|s| centroids.assign(s).map(|a| a.0))
        .collect::<Result<_>>()?;

    let mut lists = vec![PostingList::default(); params.nlist];
    let mut stats = BuildStats {
        encodes,
        residual_reconstruction_error: None,
        residual_energy: None,
    };
    let variant = match params.variant {
        VariantKind::Flat => {
            for (i, &c) in assignment.iter().enumerate() {
                lists[c].ids.push(items[i].0);
                lists[c].vectors.extend_from_slice(&repr[i]);
            }
            Variant::Flat
        }
        VariantKind::Pq => {
            let source = match (params.mode, params.residual_space) {
                (BuildMode::Ci, ResidualSpace::Representation) | (BuildMode::Standard, _) => &repr,
                (BuildMode::Ci, ResidualSpace::Structural) => structural_ref,
            };
            let residuals: Vec<Vec32> = source
                .par_iter()
                .zip(&assignment)
                .map(|(v, &c)| v.sub(&centroids.centers[c]))
                .collect::<Result<_>>()?;
            let cb = pq_train(&residuals, params.pq.m, params.pq.ksub, rng)?;
            let codes: Vec<_> = residuals
                .par_iter()
                .map(|r| pq_encode(&cb, r))
                .collect::<Result<_>>()?;
            let mut err = 0.0f64;
            let mut energy = 0.0f64;
            for (r, code) in residuals.iter().zip(&codes) {
                err += sq_dist_slice(r, &pq_reconstruct(&cb, code)?);
                energy += r.iter().map(|&x| x as f64 * x as f64).sum::<f64>();
            }
            stats.residual_reconstruction_error = Some(err / residuals.len() as f64);
            stats.residual_energy = Some(energy / residuals.len() as f64);
            for (i, &c) in assignment.iter().enumerate() {
                lists[c].ids.push(items[i].0);
                lists[c].codes.extend_from_slice(codes[i].as_bytes());
            }
            Variant::Pq(cb)
        }
    };
    let index = IvfIndex {
        variant,
        mode: params.mode,
        residual_space: params.residual_space,
        centroids,
        lists,
        n_items: items.len(),
        dim,
    };
    Ok((index, stats))
}

impl IvfIndex {
    pub fn mode(&self) -> BuildMode {
        self.mode
    }

    pub fn variant(&self) -> &Variant {
        &self.variant
    }

    pub fn residual_space(&self) -> ResidualSpace {
        self.residual_space
    }

    pub fn centroids(&self) -> &Centroids {
        &self.centroids
    }

    pub fn lists(&self) -> &[PostingList] {
        &self.lists
    }

    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sorted item ids across all lists.
    pub fn item_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.lists.iter().flat_map(|l| l.ids.iter().copied()).collect();
        ids.sort_unstable();
        ids
    }

    /// `(item_id, cluster)` for every item, sorted by id.
    pub fn assignments(&self) -> Vec<(u64, usize)> {
        let mut out: Vec<(u64, usize)> = self
            .lists
            .iter()
            .enumerate()
            .flat_map(|(c, l)| l.ids.iter().map(move |&id| (id, c)))
            .collect();
        out.sort_unstable();
        out
    }

    /// Stored Flat payloads as `(item_id, vector)`, in list order.
    pub fn flat_payloads(&self) -> Option<Vec<(u64, Vec32)>> {
        if !matches!(self.variant, Variant::Flat) {
            return None;
        }
        let mut out = Vec::with_capacity(self.n_items);
        for l in &self.lists {
            for (row, &id) in l.ids.iter().enumerate() {
                let v = l.vectors[row * self.dim..(row + 1) * self.dim].to_vec();
                out.push((id, Vec32::new(v).expect("validated payload")));
            }
        }
        Some(out)
    }

    /// Clusters to probe: the `min(nprobe, nlist)` nearest centroids,
    /// nearest first, ties to the lower cluster id.
    pub fn probe_order(&self, e_q: &Vec32, nprobe: usize) -> Result<Vec<usize>> {
        check_dim(self.dim, e_q.dim())?;
        let mut d: Vec<(f64, usize)> = self
            .centroids
            .distances(e_q)
            .into_iter()
            .enumerate()
            .map(|(j, x)| (x, j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(d.into_iter().take(nprobe.min(self.nlist())).map(|x| x.1).collect())
    }

    /// Search with an already-encoded query embedding.
    pub fn search_embedded(&self, e_q: &Vec32, nprobe: usize, k: usize) -> Result<SearchResult> {
        if k == 0 || nprobe == 0 {
            return Err(Error::InvalidConfig("k and nprobe must be at least 1".into()));
        }
        let probed = self.probe_order(e_q, nprobe)?;
        let mut scored: Vec<(u64, f64)> = Vec::new();
        for &c in &probed {
            let list = &self.lists[c];
            match &self.variant {
                Variant::Flat => {
                    for (row, &id) in list.ids.iter().enumerate() {
                        let v = &list.vectors[row * self.dim..(row + 1) * self.dim];
                        scored.push((id, sq_dist_slice(e_q, v)));
                    }
                }
                Variant::Pq(cb) => {
                    let qr = e_q.sub(&self.centroids.centers[c])?;
                    let table = adc_table(cb, &qr)?;
                    let m = cb.m();
                    for (row, &id) in list.ids.iter().enumerate() {
                        scored.push((id, adc_distance_bytes(&table, &list.codes[row * m..(row + 1) * m])));
                    }
                }
            }
        }
        Ok(SearchResult {
            ranked: top_k(scored, k),
            probed_clusters: probed,
        })
    }

    /// Encodes the query feature with the query tower, then searches.
    pub fn search(&self, model: &DualTowerModel, query_feature: &Vec32, nprobe: usize, k: usize) -> Result<SearchResult> {
        let e_q = model.encode(Tower::Query, query_feature)?;
        self.search_embedded(&e_q, nprobe, k)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.push(match self.variant {
            Variant::Flat => 0,
            Variant::Pq(_) => 1,
        });
        out.push(match self.mode {
            BuildMode::Standard => 0,
            BuildMode::Ci => 1,
        });
        put_u32(&mut out, self.dim as u32);
        put_u32(&mut out, self.nlist() as u32);
        put_u64(&mut out, self.n_items as u64);
        // extension block
        let pq_m = match &self.variant {
            Variant::Flat => 0,
            Variant::Pq(cb) => cb.m() as u32,
        };
        put_u32(&mut out, pq_m);
        out.push(match self.residual_space {
            ResidualSpace::Representation => 0,
            ResidualSpace::Structural => 1,
        });
        put_f64(&mut out, self.centroids.inertia);
        put_u32(&mut out, self.centroids.iterations_run as u32);
        for c in &self.centroids.centers {
            put_f32s(&mut out, c);
        }
        for l in &self.lists {
            put_u64(&mut out, l.len() as u64);
            for &id in &l.ids {
                put_u64(&mut out, id);
            }
            match self.variant {
                Variant::Flat => put_f32s(&mut out, &l.vectors),
                Variant::Pq(_) => out.extend_from_slice(&l.codes),
            }
        }
        if let Variant::Pq(cb) = &self.variant {
            put_u32(&mut out, cb.m() as u32);
            put_u32(&mut out, cb.ksub() as u32);
            put_u32(&mut out, cb.sub_dim() as u32);
            put_f32s(&mut out, cb.codewords());
            for &d in cb.train_distortion() {
                put_f64(&mut out, d);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, corrupt_index);
        r.magic(MAGIC)?;
        let at = r.pos();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err(at, format!("unsupported version {version}")));
        }
        let at = r.pos();
        let variant_tag = r.u8("variant")?;
        if variant_tag > 1 {
            return Err(r.err(at, format!("unknown variant {variant_tag}")));
        }
        let at = r.pos();
        let mode = match r.u8("mode")? {
            0 => BuildMode::Standard,
            1 => BuildMode::Ci,
            t => return Err(r.err(at, format!("unknown build mode {t}"))),
        };
        let at = r.pos();
        let dim = r.u32("dim")? as usize;
        let nlist = r.u32("nlist")? as usize;
        let n_items = r.u64("n_items")? as usize;
        if dim == 0 || nlist == 0 {
            return Err(r.err(at, "dim and nlist must be positive"));
        }
        let at = r.pos();
        let pq_m = r.u32("pq_m")? as usize;
        if (variant_tag == 0) != (pq_m == 0) || (pq_m > 0 && dim % pq_m != 0) {
            return Err(r.err(at, format!("pq_m {pq_m} inconsistent with variant/dim")));
        }
        let at = r.pos();
        let residual_space = match r.u8("residual space")? {
            0 => ResidualSpace::Representation,
            1 => ResidualSpace::Structural,
            t => return Err(r.err(at, format!("unknown residual space {t}"))),
        };
        let inertia = r.f64("inertia")?;
        let iterations_run = r.u32("iterations")? as usize;
        let mut centers = Vec::with_capacity(nlist);
        for _ in 0..nlist {
            centers.push(Vec32::new(r.f32s(dim, "centroids")?)?);
        }
        let centroids = Centroids::new(centers, inertia, iterations_run)?;

        let mut lists = Vec::with_capacity(nlist);
        let mut seen = HashSet::new();
        let mut total = 0usize;
        for _ in 0..nlist {
            let at = r.pos();
            let len = r.u64("list length")? as usize;
            if len > n_items - total.min(n_items) {
                return Err(r.err(at, "list lengths exceed n_items"));
            }
            total += len;
            let at = r.pos();
            let ids = r.u64s(len, "item ids")?;
            for (i, &id) in ids.iter().enumerate() {
                if !seen.insert(id) {
                    return Err(r.err(at + 8 * i, format!("item {id} stored twice")));
                }
            }
            let (vectors, codes) = if variant_tag == 0 {
                (r.f32s(len * dim, "flat payload")?, Vec::new())
            } else {
                (Vec::new(), r.take(len * pq_m, "pq codes")?.to_vec())
            };
            lists.push(PostingList { ids, vectors, codes });
        }
        if total != n_items {
            return Err(r.err(r.pos(), format!("lists hold {total} items, header says {n_items}")));
        }
        let variant = if variant_tag == 0 {
            Variant::Flat
        } else {
            let at = r.pos();
            let m = r.u32("codebook m")? as usize;
            let ksub = r.u32("codebook ksub")? as usize;
            let sub_dim = r.u32("codebook sub_dim")? as usize;
            if m != pq_m || m * sub_dim != dim {
                return Err(r.err(at, "codebook shape disagrees with header"));
            }
            let words = r.f32s(m * ksub * sub_dim, "codewords")?;
            let mut distortion = Vec::with_capacity(m);
            for _ in 0..m {
                distortion.push(r.f64("distortion")?);
            }
            let mut cb = PqCodebook::from_codewords(m, ksub, sub_dim, words).map_err(|e| r.err(at, e.to_string()))?;
            cb.set_train_distortion(distortion);
            if lists.iter().any(|l| l.codes.iter().any(|&c| c as usize >= ksub)) {
                return Err(r.err(at, "stored code out of codebook range"));
            }
            Variant::Pq(cb)
        };
        r.finish()?;
        Ok(Self {
            variant,
            mode,
            residual_space,
            centroids,
            lists,
            n_items,
            dim,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Ascending by distance, then by item id; truncated to `k`.
pub(crate) fn top_k(mut scored: Vec<(u64, f64)>, k: usize) -> Vec<(u64, f64)> {
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}
