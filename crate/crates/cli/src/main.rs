//! `sci`: synthetic data, dual-tower training, diagnostics, IVF indexing and
//! evaluation from one executable.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sci_core::clustering::KmeansParams;
use sci_core::data_io::{self, SyntheticSpec};
use sci_core::diagnostics;
use sci_core::encoder::{Arch, DualTowerModel};
use sci_core::eval::{self, Gain, Metric, RunRanking};
use sci_core::index::{self, BuildMode, BuildParams, IvfIndex, ResidualSpace, VariantKind};
use sci_core::quantization::PqParams;
use sci_core::training::{self, CombineMode, LossConfig, TrainConfig};
use sci_core::{Rng, Vec32};

const ITEMS_FILE: &str = "items.sciv";
const QUERIES_FILE: &str = "queries.sciv";
const TRIPLETS_FILE: &str = "triplets.sciv";
const QRELS_FILE: &str = "qrels.tsv";
const SPEC_FILE: &str = "spec.json";

#[derive(Parser)]
#[command(name = "sci", version, about = "Symmetric dual-tower training and consistent IVF indexing")]
#[command(after_help = "Environment: SCI_THREADS caps worker threads (0 or unset = one per core).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the misaligned synthetic benchmark.
    GenData(GenDataArgs),
    /// Train a dual-tower model on triplets.
    Train(TrainArgs),
    /// Alignment, anisotropy and pair-similarity diagnostics as JSON.
    Diagnose(DiagnoseArgs),
    /// Build an IVF index over item vectors.
    BuildIndex(BuildIndexArgs),
    /// Search an index and write a run file.
    Search(SearchArgs),
    /// Score a run file against qrels.
    Eval(EvalArgs),
    /// Compare Standard and CI indexes across nprobe values.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    items: usize,
    #[arg(long, default_value_t = 200)]
    queries: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    /// Rotation angle in radians applied to item features, in [0, π].
    #[arg(long, default_value_t = 0.8)]
    misalign: f64,
    /// Number of coordinate planes the rotation acts in (0 = all).
    #[arg(long, default_value_t = 1)]
    rotated_planes: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Spread of item latents around their cluster prototype.
    #[arg(long, default_value_t = 0.0)]
    spread: f64,
    #[arg(long, default_value_t = 2000)]
    triplets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Linear,
    Mlp1,
}

#[derive(Clone, Copy, ValueEnum)]
enum CombineArg {
    Convex,
    Additive,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ArchArg::Linear)]
    arch: ArchArg,
    /// Hidden width for mlp1.
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// Embedding dimension (default: input dimension).
    #[arg(long)]
    output_dim: Option<usize>,
    /// Swap-loss weight λ.
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
    /// Hinge margin δ.
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    #[arg(long, value_enum, default_value_t = CombineArg::Convex)]
    mode: CombineArg,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    /// Seeds both the initialization and the batch shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV (default: <out>.history.csv).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct CorpusArgs {
    /// Item vectors (default: <data>/items.sciv).
    #[arg(long)]
    items: Option<PathBuf>,
    /// Query vectors (default: <data>/queries.sciv).
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Qrels TSV (default: <data>/qrels.tsv).
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Directory written by gen-data, used for any path not given.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl CorpusArgs {
    fn resolve(&self, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        match (explicit, &self.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(d)) => Ok(d.join(name)),
            (None, None) => bail!("pass --{} or --data", name.split('.').next().unwrap_or(name)),
        }
    }

    fn items(&self) -> Result<PathBuf> {
        self.resolve(&self.items, ITEMS_FILE)
    }

    fn queries(&self) -> Result<PathBuf> {
        self.resolve(&self.queries, QUERIES_FILE)
    }

    fn qrels(&self) -> Result<PathBuf> {
        self.resolve(&self.qrels, QRELS_FILE)
    }
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Eigenvalue floor for condition numbers.
    #[arg(long, default_value_t = diagnostics::EIGEN_FLOOR)]
    epsilon: f64,
    /// Accepted for uniformity; diagnostics are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON output path (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Standard,
    Ci,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Flat,
    Pq,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResidualArg {
    Repr,
    Struct,
}

#[derive(Args)]
struct IndexArgs {
    /// Coarse clusters (large-scale reference value: 4096).
    #[arg(long, default_value_t = 16)]
    nlist: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Flat)]
    variant: VariantArg,
    /// PQ subspaces.
    #[arg(long, default_value_t = 8)]
    pq_m: usize,
    /// Codewords per subspace.
    #[arg(long, default_value_t = 16)]
    ksub: usize,
    /// Space the CI residuals are taken in (ablation).
    #[arg(long, value_enum, default_value_t = ResidualArg::Repr)]
    residual_space: ResidualArg,
    #[arg(long, default_value_t = 25)]
    kmeans_iters: usize,
    /// Seeds k-means initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl IndexArgs {
    fn params(&self, mode: BuildMode) -> BuildParams {
        BuildParams {
            mode,
            variant: match self.variant {
                VariantArg::Flat => VariantKind::Flat,
                VariantArg::Pq => VariantKind::Pq,
            },
            nlist: self.nlist,
            pq: PqParams {
                m: self.pq_m,
                ksub: self.ksub,
            },
            residual_space: match self.residual_space {
                ResidualArg::Repr => ResidualSpace::Representation,
                ResidualArg::Struct => ResidualSpace::Structural,
            },
            kmeans: KmeansParams {
                max_iters: self.kmeans_iters,
                ..KmeansParams::default()
            },
        }
    }
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    items: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Ci)]
    mode: ModeArg,
    #[command(flatten)]
    index: IndexArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Lists probed per query (large-scale reference value: 64).
    #[arg(long, default_value_t = 4)]
    nprobe: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Accepted for uniformity; search is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run TSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GainArg {
    Binary,
    Exponential,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,10")]
    k: Vec<usize>,
    /// NDCG gain; exponential uses 2^grade − 1.
    #[arg(long, value_enum, default_value_t = GainArg::Binary)]
    gain: GainArg,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON output path (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    index: IndexArgs,
    /// Comma-separated nprobe values.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    nprobe: Vec<usize>,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,10")]
    k: Vec<usize>,
    /// Sweep CSV output.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SCI_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("SCI_THREADS must be a non-negative integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Diagnose(a) => diagnose(a),
        Command::BuildIndex(a) => build_index(a),
        Command::Search(a) => search(a),
        Command::Eval(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn split(pairs: &[(u64, Vec32)]) -> (Vec<Vec32>, Vec<u64>) {
    pairs.iter().map(|(id, v)| (v.clone(), *id)).unzip()
}

fn read_corpus(path: &Path) -> Result<Vec<(u64, Vec32)>> {
    data_io::read_vectors_with_ids(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<DualTowerModel> {
    data_io::load_model(path).with_context(|| format!("reading model {}", path.display()))
}

fn write_json(out: &Option<PathBuf>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => {
            ensure_parent(path)?;
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_items: a.items,
        n_queries: a.queries,
        input_dim: a.dim,
        n_latent_clusters: a.clusters,
        tower_misalignment: a.misalign,
        noise_sigma: a.noise,
        seed: a.seed,
        cluster_spread: a.spread,
        n_triplets: a.triplets,
        rotated_planes: a.rotated_planes,
        ..SyntheticSpec::default()
    };
    let data = data_io::gen_synthetic(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (items, item_ids) = split(&data.items);
    let (queries, query_ids) = split(&data.queries);
    data_io::write_vectors(a.out.join(ITEMS_FILE), &items, Some(&item_ids))?;
    data_io::write_vectors(a.out.join(QUERIES_FILE), &queries, Some(&query_ids))?;
    data_io::write_triplets(a.out.join(TRIPLETS_FILE), &data.triplets)?;
    data_io::write_qrels(a.out.join(QRELS_FILE), &data.qrels)?;
    fs::write(a.out.join(SPEC_FILE), serde_json::to_string_pretty(&spec)? + "\n")?;
    let n_triplets: usize = data.triplets.iter().map(|b| b.len()).sum();
    println!(
        "items {} queries {} triplets {} qrels {} -> {}",
        items.len(),
        queries.len(),
        n_triplets,
        data.qrels.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let triplets_path = a.data.join(TRIPLETS_FILE);
    let batches = data_io::read_triplets(&triplets_path, a.batch_size)
        .with_context(|| format!("reading {}", triplets_path.display()))?;
    let first = batches.first().context("no triplets")?;
    let input_dim = first.dim();
    let output_dim = a.output_dim.unwrap_or(input_dim);
    let arch = match a.arch {
        ArchArg::Linear => Arch::Linear,
        ArchArg::Mlp1 => Arch::Mlp1 { hidden_dim: a.hidden },
    };
    let init = DualTowerModel::init(arch, input_dim, output_dim, &mut Rng::new(a.seed))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        seed: a.seed,
        loss: LossConfig {
            margin_delta: a.margin,
            lambda: a.lambda,
            combine_mode: match a.mode {
                CombineArg::Convex => CombineMode::Convex,
                CombineArg::Additive => CombineMode::Additive,
            },
        },
        log_every: a.log_every,
    };
    let start = Instant::now();
    let outcome = training::train_with_progress(&init, &batches, &cfg, |r| {
        eprintln!(
            "epoch {:>4}  original {:.6}  swap {:.6}  total {:.6}",
            r.epoch, r.loss_original, r.loss_swap, r.loss_total
        );
    })?;
    ensure_parent(&a.out)?;
    data_io::save_model(&a.out, &outcome.model)?;
    let history = a.history.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".history.csv");
        PathBuf::from(s)
    });
    ensure_parent(&history)?;
    fs::write(&history, training::history_csv(&outcome.history))?;
    let updates = (batches.len() * cfg.epochs) as u64;
    println!(
        "trained {} epochs x {} batches in {:.3}s; forward passes {} ({:.1} per batch)",
        cfg.epochs,
        batches.len(),
        start.elapsed().as_secs_f64(),
        outcome.forward_passes,
        outcome.forward_passes as f64 / updates as f64
    );
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let items = read_corpus(&a.corpus.items()?)?;
    let queries = read_corpus(&a.corpus.queries()?)?;
    let qrels = data_io::read_qrels(a.corpus.qrels()?)?;
    let pairs = data_io::relevant_pairs(&queries, &items, &qrels);
    let align = diagnostics::alignment_error(&model, &pairs)?;
    let aniso = diagnostics::anisotropy(&model, &diagnostics::pooled_inputs(&queries, &items), a.epsilon)?;
    let stats = diagnostics::pair_similarity_stats(&model, &pairs)?;
    let report = json!({
        "alignment_error": align.alignment_error,
        "n_pairs": align.n_pairs,
        "cond_q": aniso.cond_q,
        "cond_i": aniso.cond_i,
        "cov_fro_gap": aniso.cov_fro_gap,
        "floor_hit_q": aniso.floor_hit_q,
        "floor_hit_i": aniso.floor_hit_i,
        "pair_stats": stats,
    });
    write_json(&a.out, &report)
}

fn build_index(a: BuildIndexArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let items = read_corpus(&a.items)?;
    let mode = match a.mode {
        ModeArg::Standard => BuildMode::Standard,
        ModeArg::Ci => BuildMode::Ci,
    };
    let params = a.index.params(mode);
    let start = Instant::now();
    let (index, stats) = index::build_with_stats(&model, &items, &params, &mut Rng::new(a.index.seed))?;
    let elapsed = start.elapsed();
    ensure_parent(&a.out)?;
    index.save(&a.out)?;
    println!(
        "built {} index: N {} K {} in {:.3}s; encodes query-tower {} item-tower {}",
        mode.name(),
        index.n_items(),
        index.nlist(),
        elapsed.as_secs_f64(),
        stats.encodes.query,
        stats.encodes.item
    );
    if let (Some(err), Some(energy)) = (stats.residual_reconstruction_error, stats.residual_energy) {
        println!("pq residual reconstruction error {err:.6} (residual energy {energy:.6})");
    }
    Ok(())
}

fn search(a: SearchArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let index = IvfIndex::load(&a.index).with_context(|| format!("reading index {}", a.index.display()))?;
    let queries = read_corpus(&a.queries)?;
    model.reset_encode_counts();
    let start = Instant::now();
    let mut run = RunRanking::new();
    let mut probes = 0usize;
    for (qid, q) in &queries {
        let res = index.search(&model, q, a.nprobe, a.k)?;
        probes += res.probed_clusters.len();
        run.insert(*qid, res.ranked)?;
    }
    let elapsed = start.elapsed();
    ensure_parent(&a.out)?;
    data_io::write_run(&a.out, &run)?;
    println!(
        "searched {} queries in {:.3}s; query encodes {}; lists probed {} ({} per query)",
        queries.len(),
        elapsed.as_secs_f64(),
        model.encode_counts().query,
        probes,
        probes.checked_div(queries.len()).unwrap_or(0)
    );
    Ok(())
}

fn gain(g: GainArg) -> Gain {
    match g {
        GainArg::Binary => Gain::Binary,
        GainArg::Exponential => Gain::Exponential,
    }
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let run = data_io::read_run(&a.run).with_context(|| format!("reading {}", a.run.display()))?;
    let qrels = data_io::read_qrels(&a.qrels).with_context(|| format!("reading {}", a.qrels.display()))?;
    let report = eval::evaluate(&run, &qrels, &a.k, gain(a.gain))?;
    if report.skipped > 0 {
        eprintln!("skipped {} queries with no relevant items", report.skipped);
    }
    write_json(
        &a.out,
        &json!({
            "metrics": report.values,
            "n_queries": report.n_queries,
            "skipped": report.skipped,
        }),
    )
}

fn sweep(a: SweepArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let items = read_corpus(&a.corpus.items()?)?;
    let queries = read_corpus(&a.corpus.queries()?)?;
    let qrels = data_io::read_qrels(a.corpus.qrels()?)?;
    let mut indexes = Vec::new();
    for mode in [BuildMode::Standard, BuildMode::Ci] {
        let start = Instant::now();
        let (index, stats) =
            index::build_with_stats(&model, &items, &a.index.params(mode), &mut Rng::new(a.index.seed))?;
        println!(
            "built {}: {:.3}s, encodes query-tower {} item-tower {}",
            mode.name(),
            start.elapsed().as_secs_f64(),
            stats.encodes.query,
            stats.encodes.item
        );
        indexes.push(index);
    }
    let start = Instant::now();
    let table = eval::nprobe_sweep(&indexes[0], &indexes[1], &model, &queries, &qrels, &a.nprobe, &a.k)?;
    println!("swept nprobe {:?} in {:.3}s", a.nprobe, start.elapsed().as_secs_f64());
    if table.skipped > 0 {
        eprintln!("skipped {} queries with no relevant items", table.skipped);
    }
    ensure_parent(&a.out)?;
    fs::write(&a.out, table.to_csv()).with_context(|| format!("writing {}", a.out.display()))?;
    for &k in &a.k {
        let line: Vec<String> = a
            .nprobe
            .iter()
            .map(|&p| {
                let s = table.value("standard", p, Metric::Recall, k).unwrap_or(f64::NAN);
                let c = table.value("ci", p, Metric::Recall, k).unwrap_or(f64::NAN);
                format!("nprobe {p}: {s:.4}/{c:.4}")
            })
            .collect();
        println!("recall@{k} standard/ci  {}", line.join("  "));
    }
    for m in table.cost_matches().iter().filter(|m| m.metric == Metric::Recall) {
        match m.ci_nprobe {
            Some(c) => println!(
                "recall@{}: ci reaches standard's nprobe={} value {:.4} at nprobe={c}",
                m.cutoff, m.standard_nprobe, m.standard_value
            ),
            None => println!(
                "recall@{}: ci never reaches standard's nprobe={} value {:.4}",
                m.cutoff, m.standard_nprobe, m.standard_value
            ),
        }
    }
    Ok(())
}
