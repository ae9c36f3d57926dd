//! Exact search oracle, ranking metrics and the nprobe sweep.
//!
//! Metrics average over the queries of a run. A run query missing from the
//! qrels is an error; a query whose qrels hold no grade ≥ 1 is skipped and
//! counted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::encoder::{DualTowerModel, Tower};
use crate::error::{check_dim, Error, Result};
use crate::index::{top_k, IvfIndex, SearchResult};
use crate::linalg::{sq_dist_slice, Vec32};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    map: BTreeMap<u64, BTreeMap<u64, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `false` (and leaves the qrels unchanged) if the pair exists.
    pub fn insert(&mut self, query: u64, item: u64, grade: u32) -> bool {
        let per = self.map.entry(query).or_default();
        if per.contains_key(&item) {
            return false;
        }
        per.insert(item, grade);
        true
    }

    pub fn contains_query(&self, query: u64) -> bool {
        self.map.contains_key(&query)
    }

    pub fn grades(&self, query: u64) -> Option<&BTreeMap<u64, u32>> {
        self.map.get(&query)
    }

    pub fn grade(&self, query: u64, item: u64) -> u32 {
        self.map.get(&query).and_then(|m| m.get(&item)).copied().unwrap_or(0)
    }

    /// Items with grade ≥ 1.
    pub fn relevant(&self, query: u64) -> BTreeSet<u64> {
        self.map
            .get(&query)
            .map(|m| m.iter().filter(|(_, &g)| g >= 1).map(|(&i, _)| i).collect())
            .unwrap_or_default()
    }

    pub fn queries(&self) -> impl Iterator<Item = u64> + '_ {
        self.map.keys().copied()
    }

    /// `(query, item, grade)` in ascending query then item order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, u64, u32)> + '_ {
        self.map
            .iter()
            .flat_map(|(&q, m)| m.iter().map(move |(&i, &g)| (q, i, g)))
    }

    pub fn n_queries(&self) -> usize {
        self.map.len()
    }

    pub fn len(&self) -> usize {
        self.map.values().map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Ranked `(item_id, score)` lists per query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRanking {
    map: BTreeMap<u64, Vec<(u64, f64)>>,
}

impl RunRanking {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces any existing ranking for `query`. Ids must be unique.
    pub fn insert(&mut self, query: u64, ranked: Vec<(u64, f64)>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (id, _) in &ranked {
            if !seen.insert(*id) {
                return Err(Error::DuplicateItem(*id));
            }
        }
        self.map.insert(query, ranked);
        Ok(())
    }

    pub fn from_ids(lists: impl IntoIterator<Item = (u64, Vec<u64>)>) -> Result<Self> {
        let mut run = Self::new();
        for (q, ids) in lists {
            run.insert(q, ids.into_iter().map(|i| (i, 0.0)).collect())?;
        }
        Ok(run)
    }

    pub fn get(&self, query: u64) -> Option<&[(u64, f64)]> {
        self.map.get(&query).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[(u64, f64)])> + '_ {
        self.map.iter().map(|(&q, v)| (q, v.as_slice()))
    }

    pub fn n_queries(&self) -> usize {
        self.map.len()
    }

    /// TSV rows `query_id\trank\titem_id\tscore`, ranks from 1.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (q, ranked) in &self.map {
            for (r, (id, score)) in ranked.iter().enumerate() {
                writeln!(out, "{q}\t{}\t{id}\t{score}", r + 1).unwrap();
            }
        }
        out
    }
}

/// A metric value with the number of queries skipped for having no
/// relevant items.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Recall,
    Precision,
    Mrr,
    Ndcg,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Recall, Metric::Precision, Metric::Mrr, Metric::Ndcg];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Recall => "recall",
            Metric::Precision => "precision",
            Metric::Mrr => "mrr",
            Metric::Ndcg => "ndcg",
        }
    }
}

/// NDCG gain: binary (every relevant item gains 1) or `2^grade − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Gain {
    #[default]
    Binary,
    Exponential,
}

impl Gain {
    fn of(self, grade: u32) -> f64 {
        match self {
            Gain::Binary => (grade >= 1) as u8 as f64,
            Gain::Exponential => 2f64.powi(grade as i32) - 1.0,
        }
    }
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

fn per_query(metric: Metric, gain: Gain, ranked: &[(u64, f64)], grades: &BTreeMap<u64, u32>, n_rel: usize, k: usize) -> f64 {
    let top = &ranked[..ranked.len().min(k)];
    let is_rel = |id: &u64| grades.get(id).is_some_and(|&g| g >= 1);
    match metric {
        Metric::Recall => top.iter().filter(|x| is_rel(&x.0)).count() as f64 / n_rel as f64,
        Metric::Precision => top.iter().filter(|x| is_rel(&x.0)).count() as f64 / k as f64,
        Metric::Mrr => top
            .iter()
            .position(|x| is_rel(&x.0))
            .map_or(0.0, |p| 1.0 / (p + 1) as f64),
        Metric::Ndcg => {
            let dcg: f64 = top
                .iter()
                .enumerate()
                .map(|(r, x)| gain.of(grades.get(&x.0).copied().unwrap_or(0)) * discount(r + 1))
                .sum();
            let mut ideal: Vec<u32> = grades.values().copied().filter(|&g| g >= 1).collect();
            ideal.sort_unstable_by(|a, b| b.cmp(a));
            let idcg: f64 = ideal
                .iter()
                .take(k)
                .enumerate()
                .map(|(r, &g)| gain.of(g) * discount(r + 1))
                .sum();
            dcg / idcg
        }
    }
}

fn metric_with_gain(metric: Metric, gain: Gain, run: &RunRanking, qrels: &Qrels, k: usize) -> Result<MetricValue> {
    if k == 0 {
        return Err(Error::InvalidConfig("cutoff k must be at least 1".into()));
    }
    let queries: Vec<(u64, &[(u64, f64)])> = run.iter().collect();
    let scores: Vec<Result<Option<f64>>> = queries
        .par_iter()
        .map(|&(q, ranked)| {
            let grades = qrels.grades(q).ok_or(Error::MissingQuery(q))?;
            let n_rel = grades.values().filter(|&&g| g >= 1).count();
            if n_rel == 0 {
                return Ok(None);
            }
            Ok(Some(per_query(metric, gain, ranked, grades, n_rel, k)))
        })
        .collect();
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for s in scores {
        match s? {
            Some(v) => {
                sum += v;
                counted += 1;
            }
            None => skipped += 1,
        }
    }
    let value = if counted == 0 { 0.0 } else { sum / counted as f64 };
    Ok(MetricValue { value, skipped })
}

pub fn metric_at_k(metric: Metric, run: &RunRanking, qrels: &Qrels, k: usize) -> Result<MetricValue> {
    metric_with_gain(metric, Gain::Binary, run, qrels, k)
}

pub fn recall_at_k(run: &RunRanking, qrels: &Qrels, k: usize) -> Result<MetricValue> {
    metric_at_k(Metric::Recall, run, qrels, k)
}

pub fn precision_at_k(run: &RunRanking, qrels: &Qrels, k: usize) -> Result<MetricValue> {
    metric_at_k(Metric::Precision, run, qrels, k)
}

pub fn mrr_at_k(run: &RunRanking, qrels: &Qrels, k: usize) -> Result<MetricValue> {
    metric_at_k(Metric::Mrr, run, qrels, k)
}

pub fn ndcg_at_k(run: &RunRanking, qrels: &Qrels, k: usize) -> Result<MetricValue> {
    metric_at_k(Metric::Ndcg, run, qrels, k)
}

pub fn ndcg_at_k_graded(run: &RunRanking, qrels: &Qrels, k: usize, gain: Gain) -> Result<MetricValue> {
    metric_with_gain(Metric::Ndcg, gain, run, qrels, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `"metric@cutoff"` → value.
    pub values: BTreeMap<String, f64>,
    pub n_queries: usize,
    pub skipped: usize,
}

impl EvalReport {
    pub fn get(&self, metric: Metric, cutoff: usize) -> Option<f64> {
        self.values.get(&format!("{}@{cutoff}", metric.name())).copied()
    }
}

pub fn evaluate(run: &RunRanking, qrels: &Qrels, cutoffs: &[usize], gain: Gain) -> Result<EvalReport> {
    let mut values = BTreeMap::new();
    let mut skipped = 0;
    for &k in cutoffs {
        for m in Metric::ALL {
            let g = if m == Metric::Ndcg { gain } else { Gain::Binary };
            let v = metric_with_gain(m, g, run, qrels, k)?;
            skipped = v.skipped;
            values.insert(format!("{}@{k}", m.name()), v.value);
        }
    }
    Ok(EvalReport {
        values,
        n_queries: run.n_queries() - skipped,
        skipped,
    })
}

/// Exact ascending squared-L2 top-k, ties by ascending id.
pub fn brute_force_search(vectors: &[(u64, Vec32)], query: &Vec32, k: usize) -> Result<SearchResult> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut scored = Vec::with_capacity(vectors.len());
    for (id, v) in vectors {
        check_dim(query.dim(), v.dim())?;
        scored.push((*id, sq_dist_slice(query, v)));
    }
    Ok(SearchResult {
        ranked: top_k(scored, k),
        probed_clusters: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub nprobe: usize,
    pub metric: Metric,
    pub cutoff: usize,
    pub value: f64,
}

/// For one metric@cutoff and one Standard nprobe: the smallest CI nprobe
/// whose value reaches Standard's, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatch {
    pub metric: Metric,
    pub cutoff: usize,
    pub standard_nprobe: usize,
    pub standard_value: f64,
    pub ci_nprobe: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub nprobe_list: Vec<usize>,
    pub k_list: Vec<usize>,
    /// Queries skipped for having no relevant items.
    pub skipped: usize,
}

impl SweepTable {
    pub fn value(&self, method: &str, nprobe: usize, metric: Metric, cutoff: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.nprobe == nprobe && r.metric == metric && r.cutoff == cutoff)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,nprobe,metric,cutoff,value\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.method, r.nprobe, r.metric.name(), r.cutoff, r.value).unwrap();
        }
        out
    }

    pub fn cost_matches(&self) -> Vec<CostMatch> {
        let mut out = Vec::new();
        for &cutoff in &self.k_list {
            for metric in Metric::ALL {
                for &p in &self.nprobe_list {
                    let Some(sv) = self.value("standard", p, metric, cutoff) else { continue };
                    let ci_nprobe = self
                        .nprobe_list
                        .iter()
                        .copied()
                        .find(|&c| self.value("ci", c, metric, cutoff).is_some_and(|v| v >= sv));
                    out.push(CostMatch {
                        metric,
                        cutoff,
                        standard_nprobe: p,
                        standard_value: sv,
                        ci_nprobe,
                    });
                }
            }
        }
        out
    }
}

/// Runs both indexes at every nprobe and evaluates every metric at every
/// cutoff. Queries are encoded once with the query tower.
pub fn nprobe_sweep(
    index_std: &IvfIndex,
    index_ci: &IvfIndex,
    model: &DualTowerModel,
    queries: &[(u64, Vec32)],
    qrels: &Qrels,
    nprobe_list: &[usize],
    k_list: &[usize],
) -> Result<SweepTable> {
    if index_std.n_items() != index_ci.n_items() || index_std.item_ids() != index_ci.item_ids() {
        return Err(Error::MismatchedCorpora("item id sets differ".into()));
    }
    if index_std.dim() != index_ci.dim() || index_std.dim() != model.output_dim() {
        return Err(Error::MismatchedCorpora(format!(
            "embedding dims {} / {} / model {}",
            index_std.dim(),
            index_ci.dim(),
            model.output_dim()
        )));
    }
    if nprobe_list.is_empty() || k_list.is_empty() {
        return Err(Error::Empty("nprobe or cutoff list"));
    }
    let kmax = *k_list.iter().max().unwrap();
    let feats: Vec<Vec32> = queries.iter().map(|q| q.1.clone()).collect();
    let emb = model.encode_batch(Tower::Query, &feats)?;
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (name, index) in [("standard", index_std), ("ci", index_ci)] {
        for &nprobe in nprobe_list {
            let results: Vec<Result<SearchResult>> = emb
                .par_iter()
                .map(|e| index.search_embedded(e, nprobe, kmax))
                .collect();
            let mut run = RunRanking::new();
            for ((qid, _), r) in queries.iter().zip(results) {
                run.insert(*qid, r?.ranked)?;
            }
            let report = evaluate(&run, qrels, k_list, Gain::Binary)?;
            skipped = report.skipped;
            for &cutoff in k_list {
                for metric in Metric::ALL {
                    rows.push(SweepRow {
                        method: name.to_string(),
                        nprobe,
                        metric,
                        cutoff,
                        value: report.get(metric, cutoff).expect("evaluated"),
                    });
                }
            }
        }
    }
    Ok(SweepTable {
        rows,
        nprobe_list: nprobe_list.to_vec(),
        k_list: k_list.to_vec(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qrels(rows: &[(u64, u64, u32)]) -> Qrels {
        let mut q = Qrels::new();
        for &(a, b, g) in rows {
            assert!(q.insert(a, b, g));
        }
        q
    }

    fn run(lists: &[(u64, &[u64])]) -> RunRanking {
        RunRanking::from_ids(lists.iter().map(|(q, ids)| (*q, ids.to_vec()))).unwrap()
    }

    const TOL: f64 = 1e-12;

    #[test]
    fn recall_examples() {
        let qr = qrels(&[(1, 10, 1), (1, 11, 1), (2, 20, 1), (2, 21, 1)]);
        assert_eq!(recall_at_k(&run(&[(1, &[10, 11])]), &qr, 2).unwrap().value, 1.0);
        let r = run(&[(1, &[10, 5, 6]), (2, &[21, 20])]);
        assert!((recall_at_k(&r, &qr, 3).unwrap().value - 0.75).abs() < TOL);
        let one = qrels(&[(1, 10, 1)]);
        assert_eq!(recall_at_k(&run(&[(1, &[1, 2, 3, 10])]), &one, 3).unwrap().value, 0.0);
    }

    #[test]
    fn precision_examples() {
        let qr = qrels(&[(1, 10, 1)]);
        let r = run(&[(1, &[10, 1, 2, 3, 4, 5, 6, 7, 8, 9])]);
        assert!((precision_at_k(&r, &qr, 10).unwrap().value - 0.1).abs() < TOL);
        assert_eq!(precision_at_k(&run(&[(1, &[1, 2])]), &qr, 2).unwrap().value, 0.0);
        assert_eq!(precision_at_k(&r, &qr, 1).unwrap().value, 1.0);
    }

    #[test]
    fn mrr_examples() {
        let qr = qrels(&[(1, 10, 1), (2, 20, 1)]);
        let third = run(&[(1, &[1, 2, 10])]);
        assert!((mrr_at_k(&third, &qr, 10).unwrap().value - 1.0 / 3.0).abs() < TOL);
        let ids: Vec<u64> = (100..110).chain([10]).collect();
        let eleventh = RunRanking::from_ids([(1, ids)]).unwrap();
        assert_eq!(mrr_at_k(&eleventh, &qr, 10).unwrap().value, 0.0);
        let two = run(&[(1, &[10]), (2, &[1, 20])]);
        assert!((mrr_at_k(&two, &qr, 10).unwrap().value - 0.75).abs() < TOL);
    }

    #[test]
    fn ndcg_examples() {
        let qr = qrels(&[(1, 10, 1)]);
        assert_eq!(ndcg_at_k(&run(&[(1, &[10, 1])]), &qr, 5).unwrap().value, 1.0);
        let v = ndcg_at_k(&run(&[(1, &[1, 10])]), &qr, 2).unwrap().value;
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-9);
        // two relevant at ranks 2 and 3, k = 3, written out longhand
        let qr2 = qrels(&[(1, 10, 1), (1, 11, 1)]);
        let dcg = 1.0 / 3f64.log2() + 1.0 / 4f64.log2();
        let idcg = 1.0 / 2f64.log2() + 1.0 / 3f64.log2();
        let v = ndcg_at_k(&run(&[(1, &[5, 10, 11])]), &qr2, 3).unwrap().value;
        assert!((v - dcg / idcg).abs() < 1e-12);
    }

    #[test]
    fn graded_gain() {
        let qr = qrels(&[(1, 10, 2), (1, 11, 1)]);
        let r = run(&[(1, &[11, 10])]);
        let v = ndcg_at_k_graded(&r, &qr, 2, Gain::Exponential).unwrap().value;
        let dcg = 1.0 + 3.0 / 3f64.log2();
        let idcg = 3.0 + 1.0 / 3f64.log2();
        assert!((v - dcg / idcg).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&r, &qr, 2).unwrap().value, 1.0);
    }

    #[test]
    fn skips_and_missing() {
        let qr = qrels(&[(1, 10, 1), (2, 20, 0)]);
        let r = run(&[(1, &[10]), (2, &[20])]);
        let v = recall_at_k(&r, &qr, 1).unwrap();
        assert_eq!((v.value, v.skipped), (1.0, 1));
        let missing = run(&[(3, &[10])]);
        assert!(matches!(recall_at_k(&missing, &qr, 1), Err(Error::MissingQuery(3))));
    }

    #[test]
    fn run_rejects_duplicates() {
        assert!(matches!(RunRanking::from_ids([(1, vec![3, 4, 3])]), Err(Error::DuplicateItem(3))));
        let mut q = Qrels::new();
        assert!(q.insert(1, 2, 1));
        assert!(!q.insert(1, 2, 3));
        assert_eq!(q.grade(1, 2), 1);
    }

    fn rand_vectors(seed: u64, n: usize, d: usize) -> Vec<(u64, Vec32)> {
        let mut rng = crate::rng::Rng::new(seed);
        (0..n)
            .map(|i| (i as u64 * 3 + 7, Vec32::new((0..d).map(|_| rng.normal() as f32).collect()).unwrap()))
            .collect()
    }

    #[test]
    fn brute_force_examples() {
        let vs = rand_vectors(1, 1000, 16);
        let q = vs[123].1.clone();
        let res = brute_force_search(&vs, &q, 5).unwrap();
        assert_eq!(res.ranked[0], (vs[123].0, 0.0));
        assert!(res.probed_clusters.is_empty());
        let all = brute_force_search(&vs[..20], &q, 50).unwrap();
        assert_eq!(all.ranked.len(), 20);
        // full-sort oracle
        let probe = rand_vectors(2, 1, 16)[0].1.clone();
        let mut full: Vec<(u64, f64)> = vs
            .iter()
            .map(|(id, v)| (*id, v.iter().zip(probe.iter()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum()))
            .collect();
        full.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let got = brute_force_search(&vs, &probe, 10).unwrap();
        let ids: Vec<u64> = got.ranked.iter().map(|x| x.0).collect();
        let want: Vec<u64> = full[..10].iter().map(|x| x.0).collect();
        assert_eq!(ids, want);
    }

    #[test]
    fn exact_top1_qrels_give_unit_recall() {
        let vs = rand_vectors(3, 200, 8);
        let queries = rand_vectors(4, 30, 8);
        let mut qr = Qrels::new();
        let mut r = RunRanking::new();
        for (qid, q) in &queries {
            let res = brute_force_search(&vs, q, 10).unwrap();
            qr.insert(*qid, res.ranked[0].0, 1);
            r.insert(*qid, res.ranked).unwrap();
        }
        assert_eq!(recall_at_k(&r, &qr, 1).unwrap().value, 1.0);
    }

    #[test]
    fn metrics_bounded_and_monotone_in_k() {
        let mut rng = crate::rng::Rng::new(5);
        let mut qr = Qrels::new();
        let mut lists = Vec::new();
        for q in 0..40u64 {
            for _ in 0..1 + rng.below(4) {
                qr.insert(q, rng.below(30) as u64, 1);
            }
            let mut ids: Vec<u64> = (0..30).collect();
            rng.shuffle(&mut ids);
            lists.push((q, ids));
        }
        let r = RunRanking::from_ids(lists).unwrap();
        let mut prev = (0.0, 0.0);
        for k in 1..=30 {
            let rec = recall_at_k(&r, &qr, k).unwrap().value;
            let nd = ndcg_at_k(&r, &qr, k).unwrap().value;
            for m in Metric::ALL {
                let v = metric_at_k(m, &r, &qr, k).unwrap().value;
                assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            assert!(rec >= prev.0 && nd >= prev.1 - 1e-12);
            prev = (rec, nd);
        }
    }

    #[test]
    fn cost_match_picks_smallest_ci_nprobe() {
        let mk = |method: &str, nprobe, value| SweepRow {
            method: method.into(),
            nprobe,
            metric: Metric::Recall,
            cutoff: 10,
            value,
        };
        let table = SweepTable {
            rows: vec![
                mk("standard", 1, 0.3),
                mk("standard", 2, 0.5),
                mk("standard", 4, 0.8),
                mk("ci", 1, 0.5),
                mk("ci", 2, 0.7),
                mk("ci", 4, 0.9),
            ],
            nprobe_list: vec![1, 2, 4],
            k_list: vec![10],
            skipped: 0,
        };
        let m: Vec<_> = table
            .cost_matches()
            .into_iter()
            .filter(|c| c.metric == Metric::Recall)
            .map(|c| (c.standard_nprobe, c.ci_nprobe))
            .collect();
        assert_eq!(m, vec![(1, Some(1)), (2, Some(1)), (4, Some(4))]);
        assert!(table.to_csv().starts_with("method,nprobe,metric,cutoff,value\nstandard,1,recall,10,0.3\n"));
    }
}
