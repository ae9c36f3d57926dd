//! End-to-end checks across generation, training, indexing and evaluation.

use proptest::prelude::*;

use sci_core::data_io::{self, gen_synthetic, SyntheticSpec};
use sci_core::encoder::{Arch, DualTowerModel, Tower};
use sci_core::eval::{self, nprobe_sweep, Metric, Qrels, RunRanking};
use sci_core::index::{build, BuildMode, BuildParams, IvfIndex, VariantKind};
use sci_core::training::{train, LossConfig, TrainConfig};
use sci_core::Rng;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_items: 400,
        n_queries: 40,
        n_triplets: 400,
        seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn symmetric_training_reduces_total_loss() {
    let data = gen_synthetic(&SyntheticSpec { seed: 4, ..SyntheticSpec::default() }).unwrap();
    let init = DualTowerModel::init(Arch::Linear, 16, 16, &mut Rng::new(4)).unwrap();
    let cfg = TrainConfig { epochs: 200, seed: 4, ..TrainConfig::default() };
    assert_eq!(cfg.loss.lambda, 0.3);
    let out = train(&init, &data.triplets, &cfg).unwrap();
    let first = out.history.first().unwrap().loss_total;
    let last = out.history.last().unwrap().loss_total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn aligned_data_with_identical_towers_builds_identical_indexes() {
    let data = gen_synthetic(&SyntheticSpec { tower_misalignment: 0.0, ..small_spec(1) }).unwrap();
    let m = DualTowerModel::init(Arch::Mlp1 { hidden_dim: 8 }, 16, 8, &mut Rng::new(2)).unwrap();
    let tied = DualTowerModel::from_towers(m.tower(Tower::Query).clone(), m.tower(Tower::Query).clone(), true).unwrap();
    for variant in [VariantKind::Flat, VariantKind::Pq] {
        let params = |mode| BuildParams { mode, variant, nlist: 8, ..BuildParams::default() };
        let std = build(&tied, &data.items, &params(BuildMode::Standard), &mut Rng::new(3)).unwrap();
        let ci = build(&tied, &data.items, &params(BuildMode::Ci), &mut Rng::new(3)).unwrap();
        assert_eq!(std.centroids(), ci.centroids());
        assert_eq!(std.lists(), ci.lists());
        assert_eq!(std.variant(), ci.variant());

        // With coinciding towers the sweep cannot separate the methods.
        let table = nprobe_sweep(&std, &ci, &tied, &data.queries, &data.qrels, &[1], &[1, 10]).unwrap();
        for metric in Metric::ALL {
            for k in [1, 10] {
                assert_eq!(table.value("standard", 1, metric, k), table.value("ci", 1, metric, k));
            }
        }
    }
}

#[test]
fn exhaustive_probe_matches_brute_force_metrics() {
    let data = gen_synthetic(&small_spec(5)).unwrap();
    let model = DualTowerModel::init(Arch::Linear, 16, 16, &mut Rng::new(5)).unwrap();
    let params = |mode| BuildParams { mode, nlist: 8, ..BuildParams::default() };
    let std = build(&model, &data.items, &params(BuildMode::Standard), &mut Rng::new(5)).unwrap();
    let ci = build(&model, &data.items, &params(BuildMode::Ci), &mut Rng::new(5)).unwrap();
    let table = nprobe_sweep(&std, &ci, &model, &data.queries, &data.qrels, &[8], &[1, 10]).unwrap();

    let embedded: Vec<_> = data
        .items
        .iter()
        .map(|(id, x)| (*id, model.encode(Tower::Item, x).unwrap()))
        .collect();
    let mut run = RunRanking::new();
    for (qid, q) in &data.queries {
        let e = model.encode(Tower::Query, q).unwrap();
        run.insert(*qid, eval::brute_force_search(&embedded, &e, 10).unwrap().ranked).unwrap();
    }
    let oracle = eval::evaluate(&run, &data.qrels, &[1, 10], eval::Gain::Binary).unwrap();
    for method in ["standard", "ci"] {
        for metric in Metric::ALL {
            for k in [1, 10] {
                assert_eq!(table.value(method, 8, metric, k), oracle.get(metric, k), "{method} {metric:?}@{k}");
            }
        }
    }
}

#[test]
fn artifacts_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synthetic(&small_spec(6)).unwrap();
    let init = DualTowerModel::init(Arch::Mlp1 { hidden_dim: 12 }, 16, 8, &mut Rng::new(6)).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        loss: LossConfig::default(),
        ..TrainConfig::default()
    };
    let model = train(&init, &data.triplets, &cfg).unwrap().model;

    let model_path = dir.path().join("m.scim");
    data_io::save_model(&model_path, &model).unwrap();
    let loaded = data_io::load_model(&model_path).unwrap();
    assert_eq!(loaded, model);

    let items_path = dir.path().join("items.sciv");
    let (vecs, ids): (Vec<_>, Vec<_>) = data.items.iter().map(|(id, v)| (v.clone(), *id)).unzip();
    data_io::write_vectors(&items_path, &vecs, Some(&ids)).unwrap();
    assert_eq!(data_io::read_vectors_with_ids(&items_path).unwrap(), data.items);

    let params = BuildParams { variant: VariantKind::Pq, nlist: 8, ..BuildParams::default() };
    let index = build(&loaded, &data.items, &params, &mut Rng::new(6)).unwrap();
    let index_path = dir.path().join("i.scix");
    index.save(&index_path).unwrap();
    let reloaded = IvfIndex::load(&index_path).unwrap();

    let mut run = RunRanking::new();
    for (qid, q) in &data.queries {
        let a = index.search(&loaded, q, 3, 10).unwrap();
        let b = reloaded.search(&loaded, q, 3, 10).unwrap();
        assert_eq!(a, b);
        run.insert(*qid, a.ranked).unwrap();
    }
    let run_path = dir.path().join("run.tsv");
    data_io::write_run(&run_path, &run).unwrap();
    let back = data_io::read_run(&run_path).unwrap();
    let ids_of = |r: &RunRanking| -> Vec<(u64, Vec<u64>)> {
        r.iter().map(|(q, list)| (q, list.iter().map(|x| x.0).collect())).collect()
    };
    assert_eq!(ids_of(&back), ids_of(&run));

    let qrels_path = dir.path().join("qrels.tsv");
    data_io::write_qrels(&qrels_path, &data.qrels).unwrap();
    assert_eq!(data_io::read_qrels(&qrels_path).unwrap(), data.qrels);
}

#[test]
fn ndcg_can_drop_with_k_when_ideal_list_grows() {
    let mut qrels = Qrels::new();
    qrels.insert(1, 10, 1);
    qrels.insert(1, 11, 1);
    let run = RunRanking::from_ids([(1, vec![10, 12])]).unwrap();
    assert_eq!(eval::ndcg_at_k(&run, &qrels, 1).unwrap().value, 1.0);
    let at2 = eval::ndcg_at_k(&run, &qrels, 2).unwrap().value;
    assert!((at2 - 1.0 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
}

fn arb_case() -> impl Strategy<Value = (RunRanking, Qrels)> {
    let query = (prop::collection::vec(0u64..30, 1..20), prop::collection::btree_set(0u64..30, 1..6));
    prop::collection::vec(query, 1..6).prop_map(|queries| {
        let mut run = RunRanking::new();
        let mut qrels = Qrels::new();
        for (q, (mut ranked, relevant)) in queries.into_iter().enumerate() {
            let mut seen = std::collections::BTreeSet::new();
            ranked.retain(|id| seen.insert(*id));
            run.insert(q as u64, ranked.into_iter().map(|id| (id, 0.0)).collect()).unwrap();
            for item in relevant {
                qrels.insert(q as u64, item, 1);
            }
        }
        (run, qrels)
    })
}

proptest! {
    #[test]
    fn metric_invariants((run, qrels) in arb_case()) {
        let n = run.n_queries() as f64;
        let single_relevant = qrels.queries().all(|q| qrels.relevant(q).len() == 1);
        let mut prev_recall = 0.0;
        let mut prev_ndcg = 0.0;
        for k in 1..=20 {
            let recall = eval::recall_at_k(&run, &qrels, k).unwrap().value;
            let ndcg = eval::ndcg_at_k(&run, &qrels, k).unwrap().value;
            let precision = eval::precision_at_k(&run, &qrels, k).unwrap().value;
            let mrr = eval::mrr_at_k(&run, &qrels, k).unwrap().value;
            for v in [recall, ndcg, precision, mrr] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            prop_assert!(recall >= prev_recall - 1e-12);
            if single_relevant {
                prop_assert!(ndcg >= prev_ndcg - 1e-12);
            }
            prev_recall = recall;
            prev_ndcg = ndcg;
            // Mean of per-query hit counts / k: n·k·P@k is a whole number.
            let hits = precision * k as f64 * n;
            prop_assert!((hits - hits.round()).abs() < 1e-9);
        }
    }
}
