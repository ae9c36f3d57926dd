//! Symmetric representation alignment: triplet hinge losses on the direct
//! and the input-swapped views, their exact gradients, and plain SGD.
//!
//! The direct ("original") path scores `S(f_q(Q), f_i(I±))`. The swap path
//! feeds the query through the item tower and the items through the query
//! tower and scores `S(f_i(Q), f_q(I±))`. `S` is the dot product of encoder
//! outputs, which is cosine similarity when the model normalizes outputs.
//!
//! All loss and gradient arithmetic runs in `f64` over the model's `f32`
//! parameters; parameter updates are rounded back to `f32`.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::encoder::{backward, forward, DualTowerModel, Forward, Tower, TowerShape};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{cosine_f64, dot_f64, Mat32, Vec32};
use crate::rng::Rng;

/// Training triples `(Q, I⁺, I⁻)` as raw input features.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    queries: Vec<Vec32>,
    pos_items: Vec<Vec32>,
    neg_items: Vec<Vec32>,
}

impl TripletBatch {
    pub fn new(queries: Vec<Vec32>, pos_items: Vec<Vec32>, neg_items: Vec<Vec32>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::Empty("triplet batch"));
        }
        check_dim(queries.len(), pos_items.len())?;
        check_dim(queries.len(), neg_items.len())?;
        let dim = queries[0].dim();
        for v in queries.iter().chain(&pos_items).chain(&neg_items) {
            check_dim(dim, v.dim())?;
        }
        Ok(Self {
            queries,
            pos_items,
            neg_items,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.queries[0].dim()
    }

    pub fn queries(&self) -> &[Vec32] {
        &self.queries
    }

    pub fn pos_items(&self) -> &[Vec32] {
        &self.pos_items
    }

    pub fn neg_items(&self) -> &[Vec32] {
        &self.neg_items
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombineMode {
    /// `(1 − λ)·L_original + λ·L_swap`
    Convex,
    /// `L_original + λ·L_swap`
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin_delta: f64,
    pub lambda: f64,
    pub combine_mode: CombineMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin_delta: 0.2,
            lambda: 0.3,
            combine_mode: CombineMode::Convex,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_delta > 0.0 && self.margin_delta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "margin must be positive, got {}",
                self.margin_delta
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Weights applied to the original and swap losses.
    pub fn weights(&self) -> (f64, f64) {
        match self.combine_mode {
            CombineMode::Convex => (1.0 - self.lambda, self.lambda),
            CombineMode::Additive => (1.0, self.lambda),
        }
    }

    pub fn swap_enabled(&self) -> bool {
        self.lambda > 0.0
    }

    fn combine(&self, original: f64, swap: Option<f64>) -> f64 {
        let (wo, ws) = self.weights();
        match swap {
            Some(s) => wo * original + ws * s,
            None => wo * original,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.05,
            seed: 0,
            loss: LossConfig::default(),
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig("epochs and log_every must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Gradient with respect to one tower, shaped like its flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    shape: TowerShape,
    values: Vec<f64>,
}

impl ParamGrad {
    fn zeros(shape: TowerShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.num_params()],
        }
    }

    pub fn shape(&self) -> TowerShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Gradient block of a layer's weight matrix, row-major.
    pub fn weight(&self, layer: usize) -> &[f64] {
        let l = self.shape.layers()[layer];
        &self.values[l.weight_offset..l.weight_offset + l.rows * l.cols]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&g| g == 0.0)
    }

    fn axpy(&mut self, a: f64, other: &ParamGrad) {
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub grad_q: ParamGrad,
    pub grad_i: ParamGrad,
    pub loss_value: f64,
    pub loss_original: f64,
    /// `None` when λ = 0: the swap path is not evaluated at all.
    pub loss_swap: Option<f64>,
    /// Encoder forward passes spent on this evaluation.
    pub forward_passes: u64,
}

/// Unweighted gradient contributions of each loss path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGradients {
    pub original_q: ParamGrad,
    pub original_i: ParamGrad,
    pub swap_q: ParamGrad,
    pub swap_i: ParamGrad,
}

struct PathEval {
    loss: f64,
    hinge_args: Vec<f64>,
}

/// Parameters of both towers, borrowed from a model or from a perturbed
/// `f64` copy during finite differencing.
struct Params<'a, P> {
    shape: TowerShape,
    normalize: bool,
    query: &'a [P],
    item: &'a [P],
    /// Forward passes run so far.
    passes: Cell<u64>,
}

impl<'a, P: Copy + Into<f64>> Params<'a, P> {
    fn tower(&self, t: Tower) -> &'a [P] {
        match t {
            Tower::Query => self.query,
            Tower::Item => self.item,
        }
    }

    fn fwd(&self, t: Tower, x: &Vec32) -> Result<Forward> {
        self.passes.set(self.passes.get() + 1);
        forward(&self.shape, self.tower(t), &x.to_f64(), self.normalize)
    }

    /// One hinge path. `query_side` encodes the queries, the other tower
    /// encodes both items. When `grads` is given, accumulates `weight ×` the
    /// gradient of the batch-mean hinge into `(grad_query_tower, grad_item_tower)`.
    fn path(
        &self,
        batch: &TripletBatch,
        delta: f64,
        query_side: Tower,
        mut grads: Option<(f64, &mut ParamGrad, &mut ParamGrad)>,
    ) -> Result<PathEval> {
        check_dim(self.shape.input_dim, batch.dim())?;
        let item_side = query_side.other();
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut hinge_args = Vec::with_capacity(batch.len());
        for t in 0..batch.len() {
            let u = self.fwd(query_side, &batch.queries[t])?;
            let vp = self.fwd(item_side, &batch.pos_items[t])?;
            let vn = self.fwd(item_side, &batch.neg_items[t])?;
            let arg = delta - dot_f64(&u.out, &vp.out) + dot_f64(&u.out, &vn.out);
            hinge_args.push(arg);
            if arg <= 0.0 {
                continue;
            }
            loss += arg;
            if let Some((weight, gq, gi)) = grads.as_mut() {
                let coef = *weight / n;
                if coef == 0.0 {
                    continue;
                }
                let d_u: Vec<f64> = vn.out.iter().zip(&vp.out).map(|(a, b)| coef * (a - b)).collect();
                let d_vp: Vec<f64> = u.out.iter().map(|a| -coef * a).collect();
                let d_vn: Vec<f64> = u.out.iter().map(|a| coef * a).collect();
                let (g_query_side, g_item_side): (&mut ParamGrad, &mut ParamGrad) = match query_side {
                    Tower::Query => (gq, gi),
                    Tower::Item => (gi, gq),
                };
                let qp = self.tower(query_side);
                let ip = self.tower(item_side);
                backward(&self.shape, qp, &u, &d_u, self.normalize, &mut g_query_side.values);
                backward(&self.shape, ip, &vp, &d_vp, self.normalize, &mut g_item_side.values);
                backward(&self.shape, ip, &vn, &d_vn, self.normalize, &mut g_item_side.values);
            }
        }
        Ok(PathEval {
            loss: loss / n,
            hinge_args,
        })
    }

    fn report(&self, batch: &TripletBatch, cfg: &LossConfig) -> Result<(GradReport, Vec<f64>, Vec<f64>)> {
        let (wo, ws) = cfg.weights();
        let mut gq = ParamGrad::zeros(self.shape);
        let mut gi = ParamGrad::zeros(self.shape);
        let before = self.passes.get();
        let orig = self.path(batch, cfg.margin_delta, Tower::Query, Some((wo, &mut gq, &mut gi)))?;
        let swap = if cfg.swap_enabled() {
            Some(self.path(batch, cfg.margin_delta, Tower::Item, Some((ws, &mut gq, &mut gi)))?)
        } else {
            None
        };
        let loss_swap = swap.as_ref().map(|s| s.loss);
        let passes = self.passes.get() - before;
        let report = GradReport {
            grad_q: gq,
            grad_i: gi,
            loss_value: cfg.combine(orig.loss, loss_swap),
            loss_original: orig.loss,
            loss_swap,
            forward_passes: passes,
        };
        Ok((report, orig.hinge_args, swap.map(|s| s.hinge_args).unwrap_or_default()))
    }

    fn total_loss(&self, batch: &TripletBatch, cfg: &LossConfig) -> Result<f64> {
        let orig = self.path(batch, cfg.margin_delta, Tower::Query, None)?.loss;
        let swap = if cfg.swap_enabled() {
            Some(self.path(batch, cfg.margin_delta, Tower::Item, None)?.loss)
        } else {
            None
        };
        Ok(cfg.combine(orig, swap))
    }
}

fn model_params(model: &DualTowerModel) -> Params<'_, f32> {
    Params {
        shape: model.shape(),
        normalize: model.normalize_output(),
        query: model.tower(Tower::Query).as_slice(),
        item: model.tower(Tower::Item).as_slice(),
        passes: Cell::new(0),
    }
}

fn check_delta(delta: f64) -> Result<()> {
    LossConfig {
        margin_delta: delta,
        lambda: 0.0,
        combine_mode: CombineMode::Convex,
    }
    .validate()
}

/// Batch mean of `max(0, δ − S(f_q(Q), f_i(I⁺)) + S(f_q(Q), f_i(I⁻)))`.
pub fn loss_original(model: &DualTowerModel, batch: &TripletBatch, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(model_params(model).path(batch, delta, Tower::Query, None)?.loss)
}

/// Batch mean of `max(0, δ − S(f_i(Q), f_q(I⁺)) + S(f_i(Q), f_q(I⁻)))`.
pub fn loss_swap(model: &DualTowerModel, batch: &TripletBatch, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(model_params(model).path(batch, delta, Tower::Item, None)?.loss)
}

pub fn loss_total(model: &DualTowerModel, batch: &TripletBatch, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    model_params(model).total_loss(batch, cfg)
}

/// Exact gradient of the total loss with respect to both towers. At the
/// hinge kink the subgradient is taken as zero.
pub fn grad(model: &DualTowerModel, batch: &TripletBatch, cfg: &LossConfig) -> Result<GradReport> {
    cfg.validate()?;
    Ok(model_params(model).report(batch, cfg)?.0)
}

/// Gradients of the original and swap losses taken separately, each with
/// unit weight.
pub fn grad_by_path(model: &DualTowerModel, batch: &TripletBatch, delta: f64) -> Result<PathGradients> {
    check_delta(delta)?;
    let p = model_params(model);
    let shape = model.shape();
    let (mut oq, mut oi) = (ParamGrad::zeros(shape), ParamGrad::zeros(shape));
    let (mut sq, mut si) = (ParamGrad::zeros(shape), ParamGrad::zeros(shape));
    p.path(batch, delta, Tower::Query, Some((1.0, &mut oq, &mut oi)))?;
    p.path(batch, delta, Tower::Item, Some((1.0, &mut sq, &mut si)))?;
    Ok(PathGradients {
        original_q: oq,
        original_i: oi,
        swap_q: sq,
        swap_i: si,
    })
}

/// Compares the analytic gradient to central finite differences over every
/// parameter of both towers and returns the largest relative error
/// `|a − n| / max(1e-8, |a| + |n|)`.
///
/// Refuses batches where any contributing hinge argument is within `10·h`
/// of zero, since the loss is not differentiable there.
pub fn grad_check(model: &DualTowerModel, batch: &TripletBatch, cfg: &LossConfig, h: f64) -> Result<f64> {
    cfg.validate()?;
    if !(h > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let shape = model.shape();
    let q64: Vec<f64> = model.tower(Tower::Query).as_slice().iter().map(|&v| v as f64).collect();
    let i64: Vec<f64> = model.tower(Tower::Item).as_slice().iter().map(|&v| v as f64).collect();
    let base = Params {
        shape,
        normalize: model.normalize_output(),
        query: &q64[..],
        item: &i64[..],
        passes: Cell::new(0),
    };
    let (report, orig_args, swap_args) = base.report(batch, cfg)?;
    let (wo, ws) = cfg.weights();
    let margin = 10.0 * h;
    let guarded = [(wo, &orig_args), (ws, &swap_args)];
    for (w, args) in guarded {
        if w == 0.0 {
            continue;
        }
        if let Some((triplet, &value)) = args.iter().enumerate().find(|(_, a)| a.abs() < margin) {
            return Err(Error::KinkTooClose { triplet, value, margin });
        }
    }

    let mut worst = 0.0f64;
    let n_q = q64.len();
    let mut flat: Vec<f64> = q64.iter().chain(&i64).copied().collect();
    let analytic: Vec<f64> = report
        .grad_q
        .values
        .iter()
        .chain(&report.grad_i.values)
        .copied()
        .collect();
    for j in 0..flat.len() {
        let orig = flat[j];
        let eval = |flat: &[f64]| -> Result<f64> {
            let (q, i) = flat.split_at(n_q);
            Params {
                shape,
                normalize: model.normalize_output(),
                query: q,
                item: i,
                passes: Cell::new(0),
            }
            .total_loss(batch, cfg)
        };
        flat[j] = orig + h;
        let plus = eval(&flat)?;
        flat[j] = orig - h;
        let minus = eval(&flat)?;
        flat[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[j];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_original: f64,
    pub loss_swap: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DualTowerModel,
    pub history: Vec<EpochRecord>,
    /// Encoder forward passes spent computing gradients, over all epochs.
    pub forward_passes: u64,
}

/// Plain SGD on the total loss, one update per batch, with the batch order
/// reshuffled every epoch from `cfg.seed`.
pub fn train(model: &DualTowerModel, dataset: &[TripletBatch], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(model, dataset, cfg, |_| {})
}

/// As [`train`], calling `on_log` every `cfg.log_every` epochs and after the
/// final epoch.
pub fn train_with_progress(
    model: &DualTowerModel,
    dataset: &[TripletBatch],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let mut model = model.clone();
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut forward_passes = 0u64;
    let lr = cfg.learning_rate;

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let (mut sum_o, mut sum_s, mut sum_t) = (0.0, 0.0, 0.0);
        for &b in &order {
            let batch = &dataset[b];
            let report = grad(&model, batch, &cfg.loss)?;
            forward_passes += report.forward_passes;
            let swap = match report.loss_swap {
                Some(s) => s,
                None => loss_swap(&model, batch, cfg.loss.margin_delta)?,
            };
            if !(report.loss_value.is_finite() && swap.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            sum_o += report.loss_original;
            sum_s += swap;
            sum_t += report.loss_value;
            if lr != 0.0 {
                for (tower, g) in [(Tower::Query, &report.grad_q), (Tower::Item, &report.grad_i)] {
                    for (w, &gv) in model.tower_mut(tower).as_mut_slice().iter_mut().zip(&g.values) {
                        let next = (*w as f64 - lr * gv) as f32;
                        if !next.is_finite() {
                            return Err(Error::Diverged { epoch });
                        }
                        *w = next;
                    }
                }
            }
        }
        let n = dataset.len() as f64;
        let record = EpochRecord {
            epoch,
            loss_original: sum_o / n,
            loss_swap: sum_s / n,
            loss_total: sum_t / n,
        };
        history.push(record);
        if epoch % cfg.log_every == 0 || epoch == cfg.epochs {
            on_log(&record);
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        forward_passes,
    })
}

/// `epoch,loss_original,loss_swap,loss_total` with 6 significant digits.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss_original,loss_swap,loss_total\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch,
            sig6(r.loss_original),
            sig6(r.loss_swap),
            sig6(r.loss_total)
        ));
    }
    out
}

/// Formats with 6 significant digits, trailing zeros trimmed.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

// ---- linear-model closed forms ------------------------------------------

fn outer(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect()
}

/// `½(q Δiᵀ + Δi qᵀ)`.
pub fn symmetrization_operator(q: &Vec32, delta_i: &Vec32) -> Result<Mat32> {
    check_dim(q.dim(), delta_i.dim())?;
    let (q, d) = (q.to_f64(), delta_i.to_f64());
    let n = q.len();
    let a = outer(&q, &d);
    let b = outer(&d, &q);
    let m: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
    Mat32::from_f64(n, n, &m)
}

fn delta_items(i_pos: &Vec32, i_neg: &Vec32) -> Result<Vec<f64>> {
    check_dim(i_pos.dim(), i_neg.dim())?;
    Ok(i_neg
        .iter()
        .zip(i_pos.iter())
        .map(|(&n, &p)| n as f64 - p as f64)
        .collect())
}

fn check_linear_shapes(w_q: &Mat32, w_i: &Mat32, q: &Vec32, i_pos: &Vec32, i_neg: &Vec32) -> Result<()> {
    check_dim(w_i.rows(), w_q.rows())?;
    check_dim(w_i.cols(), w_q.cols())?;
    check_dim(w_i.cols(), q.dim())?;
    check_dim(q.dim(), i_pos.dim())?;
    check_dim(q.dim(), i_neg.dim())
}

/// `W_i (Δi qᵀ + λ q Δiᵀ)` in `f64`, row-major `rows(W_i) × dim(q)`.
///
/// This is `∂L_total/∂W_q` for a single triplet of a linear model under raw
/// dot-product similarity, additive combination and both hinges active.
pub fn linear_grad_closed_form_f64(
    w_q: &Mat32,
    w_i: &Mat32,
    q: &Vec32,
    i_pos: &Vec32,
    i_neg: &Vec32,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_linear_shapes(w_q, w_i, q, i_pos, i_neg)?;
    let d = delta_items(i_pos, i_neg)?;
    let qf = q.to_f64();
    let n = qf.len();
    let a = outer(&d, &qf);
    let b = outer(&qf, &d);
    let inner: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + lambda * y).collect();
    let wi = w_i.to_f64();
    let mut out = vec![0.0f64; w_i.rows() * n];
    for r in 0..w_i.rows() {
        for c in 0..n {
            out[r * n + c] = (0..n).map(|k| wi[r * n + k] * inner[k * n + c]).sum();
        }
    }
    Ok(out)
}

pub fn linear_grad_closed_form(
    w_q: &Mat32,
    w_i: &Mat32,
    q: &Vec32,
    i_pos: &Vec32,
    i_neg: &Vec32,
    lambda: f64,
) -> Result<Mat32> {
    let g = linear_grad_closed_form_f64(w_q, w_i, q, i_pos, i_neg, lambda)?;
    Mat32::from_f64(w_i.rows(), q.dim(), &g)
}

/// Cosine between the flattened original-path term `W_i Δi qᵀ` and the
/// swap-path term `W_i q Δiᵀ`.
pub fn gradient_path_cosine(w_i: &Mat32, q: &Vec32, delta_i: &Vec32) -> Result<f64> {
    check_dim(w_i.cols(), q.dim())?;
    check_dim(q.dim(), delta_i.dim())?;
    let (qf, df) = (q.to_f64(), delta_i.to_f64());
    let u = w_i.matvec(&df)?;
    let v = w_i.matvec(&qf)?;
    Ok(cosine_f64(&outer(&u, &qf), &outer(&v, &df)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum CollapseKind {
    /// The swap gradient adds an independent direction.
    Independent,
    /// λ = 0: no swap term at all.
    CollapseLambdaZero,
    /// `q ∥ Δi`; carries `cos(q, Δi)`.
    CollapseParallel(f64),
    /// `(W_i q)·(W_i Δi) = 0`.
    CollapseOrthogonal,
}

pub fn collapse_probe(
    w_q: &Mat32,
    w_i: &Mat32,
    q: &Vec32,
    i_pos: &Vec32,
    i_neg: &Vec32,
    lambda: f64,
) -> Result<CollapseKind> {
    check_linear_shapes(w_q, w_i, q, i_pos, i_neg)?;
    let d = delta_items(i_pos, i_neg)?;
    if d.iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateTriplet);
    }
    if lambda == 0.0 {
        return Ok(CollapseKind::CollapseLambdaZero);
    }
    let qf = q.to_f64();
    let cos = cosine_f64(&qf, &d);
    if cos.abs() > 1.0 - 1e-6 {
        return Ok(CollapseKind::CollapseParallel(cos));
    }
    let u = w_i.matvec(&qf)?;
    let v = w_i.matvec(&d)?;
    let nu = dot_f64(&u, &u).sqrt();
    let nv = dot_f64(&v, &v).sqrt();
    if dot_f64(&u, &v).abs() <= 1e-6 * nu * nv {
        return Ok(CollapseKind::CollapseOrthogonal);
    }
    let delta = Vec32::from_f64(&d)?;
    let path_cos = gradient_path_cosine(w_i, q, &delta)?;
    debug_assert!(path_cos.abs() < 1.0 - 1e-9, "paths collinear: {path_cos}");
    Ok(CollapseKind::Independent)
}

/// Sum of two gradients with weights, for combining [`PathGradients`].
pub fn combine_grads(a: &ParamGrad, wa: f64, b: &ParamGrad, wb: f64) -> ParamGrad {
    let mut out = ParamGrad::zeros(a.shape);
    out.axpy(wa, a);
    out.axpy(wb, b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Arch, TowerParams};

    fn v(xs: &[f32]) -> Vec32 {
        Vec32::new(xs.to_vec()).unwrap()
    }

    fn rand_vec(rng: &mut Rng, d: usize) -> Vec32 {
        Vec32::new((0..d).map(|_| rng.normal() as f32).collect()).unwrap()
    }

    pub(super) fn rand_batch(rng: &mut Rng, n: usize, d: usize) -> TripletBatch {
        TripletBatch::new(
            (0..n).map(|_| rand_vec(rng, d)).collect(),
            (0..n).map(|_| rand_vec(rng, d)).collect(),
            (0..n).map(|_| rand_vec(rng, d)).collect(),
        )
        .unwrap()
    }

    /// Identity towers over 2-d inputs, so S is the plain dot product of
    /// normalized inputs and hand values are easy to set.
    fn identity_model() -> DualTowerModel {
        let t = TowerParams::linear(&Mat32::identity(2)).unwrap();
        DualTowerModel::from_towers(t.clone(), t, true).unwrap()
    }

    fn unit(angle: f64) -> Vec32 {
        v(&[angle.cos() as f32, angle.sin() as f32])
    }

    #[test]
    fn hinge_arithmetic() {
        let m = identity_model();
        // S⁺ = cos(a), S⁻ = cos(b)
        let (a, b) = (0.9f64.acos(), 0.1f64.acos());
        let batch = TripletBatch::new(vec![unit(0.0)], vec![unit(a)], vec![unit(b)]).unwrap();
        let l = loss_original(&m, &batch, 1.0).unwrap();
        assert!((l - 0.2).abs() < 1e-6, "{l}");
        assert_eq!(loss_original(&m, &batch, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn batch_mean_matches_per_triplet_oracle() {
        let mut rng = Rng::new(21);
        let m = DualTowerModel::init(Arch::Linear, 5, 4, &mut rng).unwrap();
        let batch = rand_batch(&mut rng, 3, 5);
        let delta = 0.4;
        let mut sum = 0.0;
        for t in 0..3 {
            let u = m.encode(Tower::Query, &batch.queries()[t]).unwrap();
            let p = m.encode(Tower::Item, &batch.pos_items()[t]).unwrap();
            let n = m.encode(Tower::Item, &batch.neg_items()[t]).unwrap();
            let s = |a: &Vec32, b: &Vec32| crate::linalg::dot(a, b).unwrap();
            sum += (delta - s(&u, &p) + s(&u, &n)).max(0.0);
        }
        let got = loss_original(&m, &batch, delta).unwrap();
        assert!((got - sum / 3.0).abs() < 1e-6);
    }

    #[test]
    fn swap_routes_query_through_item_tower() {
        let mut rng = Rng::new(8);
        let m = DualTowerModel::init(Arch::Mlp1 { hidden_dim: 4 }, 3, 3, &mut rng).unwrap();
        let batch = rand_batch(&mut rng, 4, 3);
        let delta = 0.5;
        let mut sum = 0.0;
        for t in 0..4 {
            let u = m.encode(Tower::Item, &batch.queries()[t]).unwrap();
            let p = m.encode(Tower::Query, &batch.pos_items()[t]).unwrap();
            let n = m.encode(Tower::Query, &batch.neg_items()[t]).unwrap();
            let s = |a: &Vec32, b: &Vec32| crate::linalg::dot(a, b).unwrap();
            sum += (delta - s(&u, &p) + s(&u, &n)).max(0.0);
        }
        assert!((loss_swap(&m, &batch, delta).unwrap() - sum / 4.0).abs() < 1e-6);
    }

    #[test]
    fn symmetric_towers_give_equal_losses() {
        let mut rng = Rng::new(2);
        let m = DualTowerModel::init(Arch::Linear, 4, 4, &mut rng).unwrap();
        let sym = DualTowerModel::from_towers(m.tower(Tower::Query).clone(), m.tower(Tower::Query).clone(), true)
            .unwrap();
        let batch = rand_batch(&mut rng, 6, 4);
        assert_eq!(
            loss_original(&sym, &batch, 0.3).unwrap(),
            loss_swap(&sym, &batch, 0.3).unwrap()
        );
    }

    #[test]
    fn swapping_towers_swaps_losses() {
        let mut rng = Rng::new(4);
        let m = DualTowerModel::init(Arch::Mlp1 { hidden_dim: 5 }, 4, 3, &mut rng).unwrap();
        let s = m.swapped();
        let batch = rand_batch(&mut rng, 5, 4);
        assert_eq!(loss_original(&m, &batch, 0.2).unwrap(), loss_swap(&s, &batch, 0.2).unwrap());
        assert_eq!(loss_swap(&m, &batch, 0.2).unwrap(), loss_original(&s, &batch, 0.2).unwrap());
    }

    #[test]
    fn total_combination_modes() {
        let m = identity_model();
        // L_o = 0.2 with δ = 1.0 from the hinge example; L_s equals it for identical towers.
        let (a, b) = (0.9f64.acos(), 0.1f64.acos());
        let batch = TripletBatch::new(vec![unit(0.0)], vec![unit(a)], vec![unit(b)]).unwrap();
        let lo = loss_original(&m, &batch, 1.0).unwrap();
        for mode in [CombineMode::Convex, CombineMode::Additive] {
            let cfg = LossConfig { margin_delta: 1.0, lambda: 0.0, combine_mode: mode };
            assert_eq!(loss_total(&m, &batch, &cfg).unwrap(), lo);
        }
        let convex = LossConfig { margin_delta: 1.0, lambda: 0.3, combine_mode: CombineMode::Convex };
        let additive = LossConfig { combine_mode: CombineMode::Additive, ..convex };
        assert_eq!(convex.combine(0.2, Some(0.4)), 0.7 * 0.2 + 0.3 * 0.4);
        assert!((convex.combine(0.2, Some(0.4)) - 0.26).abs() < 1e-12);
        assert!((additive.combine(0.2, Some(0.4)) - 0.32).abs() < 1e-12);
        assert!((loss_total(&m, &batch, &additive).unwrap() - 1.3 * lo).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad_lambda = LossConfig { lambda: 1.5, ..LossConfig::default() };
        assert!(bad_lambda.validate().is_err());
        let bad_margin = LossConfig { margin_delta: 0.0, ..LossConfig::default() };
        assert!(bad_margin.validate().is_err());
    }

    #[test]
    fn inactive_hinges_give_zero_gradient() {
        let m = identity_model();
        let batch = TripletBatch::new(vec![unit(0.0)], vec![unit(0.0)], vec![unit(3.0)]).unwrap();
        let cfg = LossConfig { margin_delta: 0.1, ..LossConfig::default() };
        let g = grad(&m, &batch, &cfg).unwrap();
        assert_eq!(g.loss_value, 0.0);
        assert!(g.grad_q.is_zero() && g.grad_i.is_zero());
    }

    #[test]
    fn lambda_zero_skips_swap_path() {
        let mut rng = Rng::new(17);
        let m = DualTowerModel::init(Arch::Linear, 4, 4, &mut rng).unwrap();
        let batch = rand_batch(&mut rng, 5, 4);
        let cfg = LossConfig { margin_delta: 2.0, lambda: 0.0, combine_mode: CombineMode::Additive };
        let g = grad(&m, &batch, &cfg).unwrap();
        let paths = grad_by_path(&m, &batch, 2.0).unwrap();
        assert_eq!(g.grad_q, paths.original_q);
        assert_eq!(g.grad_i, paths.original_i);
        assert_eq!(g.loss_swap, None);
        assert_eq!(g.forward_passes, 15);
        let on = grad(&m, &batch, &LossConfig { lambda: 0.3, ..cfg }).unwrap();
        assert_eq!(on.forward_passes, 30);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = Rng::new(30);
        for arch in [Arch::Linear, Arch::Mlp1 { hidden_dim: 6 }] {
            for mode in [CombineMode::Convex, CombineMode::Additive] {
                let m = DualTowerModel::init(arch, 4, 4, &mut rng).unwrap();
                let batch = rand_batch(&mut rng, 8, 4);
                let cfg = LossConfig { margin_delta: 3.0, lambda: 0.3, combine_mode: mode };
                let err = grad_check(&m, &batch, &cfg, 1e-5).unwrap();
                let tol = if arch == Arch::Linear { 1e-4 } else { 1e-3 };
                assert!(err < tol, "{arch:?} {mode:?}: {err}");
            }
        }
    }

    #[test]
    fn grad_check_refuses_kinks() {
        let m = identity_model();
        // S⁺ − S⁻ = δ exactly: hinge argument 0.
        let batch = TripletBatch::new(vec![unit(0.0)], vec![unit(0.0)], vec![unit(std::f64::consts::FRAC_PI_2)])
            .unwrap();
        let cfg = LossConfig { margin_delta: 1.0, ..LossConfig::default() };
        assert!(matches!(grad_check(&m, &batch, &cfg, 1e-4), Err(Error::KinkTooClose { .. })));
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let mut rng = Rng::new(5);
        let m = DualTowerModel::init(Arch::Linear, 4, 4, &mut rng).unwrap();
        let data = vec![rand_batch(&mut rng, 4, 4), rand_batch(&mut rng, 4, 4)];
        let cfg = TrainConfig { epochs: 3, learning_rate: 0.0, ..TrainConfig::default() };
        let out = train(&m, &data, &cfg).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = Rng::new(6);
        let m = DualTowerModel::init(Arch::Mlp1 { hidden_dim: 4 }, 4, 4, &mut rng).unwrap();
        let data: Vec<_> = (0..4).map(|_| rand_batch(&mut rng, 4, 4)).collect();
        let cfg = TrainConfig { epochs: 5, learning_rate: 0.1, seed: 9, ..TrainConfig::default() };
        let a = train(&m, &data, &cfg).unwrap();
        let b = train(&m, &data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_ne!(a.model, m);
    }

    #[test]
    fn empty_dataset_rejected() {
        let m = identity_model();
        assert!(train(&m, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn history_csv_format() {
        let h = vec![EpochRecord { epoch: 1, loss_original: 0.123456789, loss_swap: 0.0, loss_total: 12.5 }];
        assert_eq!(history_csv(&h), "epoch,loss_original,loss_swap,loss_total\n1,0.123457,0,12.5\n");
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(0.000012345678), "0.0000123457");
    }

    #[test]
    fn symmetrization_examples() {
        let m = symmetrization_operator(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap();
        assert_eq!(m.as_slice(), &[0.0, 0.5, 0.5, 0.0]);
        let p = symmetrization_operator(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        let z = symmetrization_operator(&v(&[0.3, 0.7]), &v(&[0.0, 0.0])).unwrap();
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
        assert!(m.is_symmetric());
    }

    #[test]
    fn closed_form_examples() {
        let id = Mat32::identity(2);
        let g = linear_grad_closed_form(&id, &id, &v(&[1.0, 0.0]), &v(&[0.0, 0.0]), &v(&[0.0, 1.0]), 0.5).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.5, 1.0, 0.0]);
        let g0 = linear_grad_closed_form(&id, &id, &v(&[1.0, 0.0]), &v(&[0.0, 0.0]), &v(&[0.0, 1.0]), 0.0).unwrap();
        assert_eq!(g0.as_slice(), &[0.0, 0.0, 1.0, 0.0]);
        let gp = linear_grad_closed_form(&id, &id, &v(&[1.0, 0.0]), &v(&[0.0, 0.0]), &v(&[1.0, 0.0]), 0.3).unwrap();
        assert!((gp.get(0, 0) - 1.3).abs() < 1e-6);
        assert_eq!(&gp.as_slice()[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn closed_form_matches_raw_additive_gradient() {
        let mut rng = Rng::new(40);
        for (din, dout) in [(3, 3), (4, 2)] {
            let m = DualTowerModel::init(Arch::Linear, din, dout, &mut rng)
                .unwrap()
                .with_normalize(false);
            let (q, p, n) = (rand_vec(&mut rng, din), rand_vec(&mut rng, din), rand_vec(&mut rng, din));
            let batch = TripletBatch::new(vec![q.clone()], vec![p.clone()], vec![n.clone()]).unwrap();
            let cfg = LossConfig { margin_delta: 100.0, lambda: 0.4, combine_mode: CombineMode::Additive };
            let g = grad(&m, &batch, &cfg).unwrap();
            let wq = m.tower(Tower::Query).weight(0);
            let wi = m.tower(Tower::Item).weight(0);
            let cf = linear_grad_closed_form_f64(&wq, &wi, &q, &p, &n, 0.4).unwrap();
            for (a, b) in g.grad_q.weight(0).iter().zip(&cf) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn collapse_examples() {
        let id = Mat32::identity(2);
        let z = v(&[0.0, 0.0]);
        assert_eq!(
            collapse_probe(&id, &id, &v(&[1.0, 0.3]), &z, &v(&[0.2, 1.0]), 0.0).unwrap(),
            CollapseKind::CollapseLambdaZero
        );
        assert_eq!(
            collapse_probe(&id, &id, &v(&[2.0, 0.0]), &z, &v(&[1.0, 0.0]), 0.3).unwrap(),
            CollapseKind::CollapseParallel(1.0)
        );
        assert_eq!(
            collapse_probe(&id, &id, &v(&[1.0, 0.0]), &z, &v(&[0.0, 1.0]), 0.3).unwrap(),
            CollapseKind::CollapseOrthogonal
        );
        assert_eq!(
            collapse_probe(&id, &id, &v(&[1.0, 0.5]), &z, &v(&[0.2, 1.0]), 0.3).unwrap(),
            CollapseKind::Independent
        );
        assert!(matches!(
            collapse_probe(&id, &id, &v(&[1.0, 0.0]), &v(&[0.5, 0.5]), &v(&[0.5, 0.5]), 0.3),
            Err(Error::DegenerateTriplet)
        ));
    }
}
