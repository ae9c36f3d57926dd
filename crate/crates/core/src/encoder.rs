//! Dual-tower encoders over a shared input feature space.
//!
//! Both towers have identical shapes so that either one can encode either
//! kind of input; input swapping depends on this. Parameters are stored as
//! flat `f32` buffers in declared order (per layer: weight row-major, then
//! bias), which is also the on-disk order.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{Mat32, Vec32};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// `y = W x`
    Linear,
    /// `y = W₂ tanh(W₁ x + b₁) + b₂`
    Mlp1 { hidden_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tower {
    Query,
    Item,
}

impl Tower {
    pub fn other(self) -> Tower {
        match self {
            Tower::Query => Tower::Item,
            Tower::Item => Tower::Query,
        }
    }
}

/// Location of one dense layer inside a flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub weight_offset: usize,
    pub bias_offset: Option<usize>,
}

impl LayerShape {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.rows * self.cols
    }

    fn bias_range(&self) -> Option<std::ops::Range<usize>> {
        self.bias_offset.map(|o| o..o + self.rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerShape {
    pub arch: Arch,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl TowerShape {
    pub fn new(arch: Arch, input_dim: usize, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidConfig("tower dimensions must be positive".into()));
        }
        if let Arch::Mlp1 { hidden_dim: 0 } = arch {
            return Err(Error::InvalidConfig("hidden_dim must be positive".into()));
        }
        Ok(Self {
            arch,
            input_dim,
            output_dim,
        })
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        match self.arch {
            Arch::Linear => vec![LayerShape {
                rows: self.output_dim,
                cols: self.input_dim,
                weight_offset: 0,
                bias_offset: None,
            }],
            Arch::Mlp1 { hidden_dim } => {
                let w1 = hidden_dim * self.input_dim;
                let w2_off = w1 + hidden_dim;
                vec![
                    LayerShape {
                        rows: hidden_dim,
                        cols: self.input_dim,
                        weight_offset: 0,
                        bias_offset: Some(w1),
                    },
                    LayerShape {
                        rows: self.output_dim,
                        cols: hidden_dim,
                        weight_offset: w2_off,
                        bias_offset: Some(w2_off + self.output_dim * hidden_dim),
                    },
                ]
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.rows * l.cols + if l.bias_offset.is_some() { l.rows } else { 0 })
            .sum()
    }
}

/// Parameters of one tower.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    shape: TowerShape,
    values: Vec<f32>,
}

impl TowerParams {
    pub fn from_values(shape: TowerShape, values: Vec<f32>) -> Result<Self> {
        check_dim(shape.num_params(), values.len())?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { shape, values })
    }

    /// Builds a linear tower from its weight matrix (`output_dim × input_dim`).
    pub fn linear(weight: &Mat32) -> Result<Self> {
        let shape = TowerShape::new(Arch::Linear, weight.cols(), weight.rows())?;
        Self::from_values(shape, weight.as_slice().to_vec())
    }

    fn random(shape: TowerShape, rng: &mut Rng) -> Self {
        let mut values = vec![0.0f32; shape.num_params()];
        for layer in shape.layers() {
            let bound = 1.0 / (layer.cols as f64).sqrt();
            for w in &mut values[layer.weight_range()] {
                *w = rng.uniform_in(-bound, bound) as f32;
            }
        }
        Self { shape, values }
    }

    pub fn shape(&self) -> TowerShape {
        self.shape
    }

    pub fn num_layers(&self) -> usize {
        self.shape.layers().len()
    }

    pub fn weight(&self, layer: usize) -> Mat32 {
        let l = self.shape.layers()[layer];
        Mat32::new(l.rows, l.cols, self.values[l.weight_range()].to_vec())
            .expect("stored weights are finite")
    }

    pub fn bias(&self, layer: usize) -> Option<Vec<f32>> {
        let l = self.shape.layers()[layer];
        l.bias_range().map(|r| self.values[r].to_vec())
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    /// Mutable access to the flat buffer. Callers must keep values finite.
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.values
    }
}

/// Number of forward passes performed through each tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EncodeCounts {
    pub query: u64,
    pub item: u64,
}

#[derive(Debug, Default)]
struct Counters {
    query: AtomicU64,
    item: AtomicU64,
}

impl Counters {
    fn bump(&self, tower: Tower) {
        match tower {
            Tower::Query => self.query.fetch_add(1, Ordering::Relaxed),
            Tower::Item => self.item.fetch_add(1, Ordering::Relaxed),
        };
    }
}

#[derive(Debug)]
pub struct DualTowerModel {
    shape: TowerShape,
    normalize_output: bool,
    query: TowerParams,
    item: TowerParams,
    counters: Counters,
}

impl Clone for DualTowerModel {
    fn clone(&self) -> Self {
        Self {
            shape: self.shape,
            normalize_output: self.normalize_output,
            query: self.query.clone(),
            item: self.item.clone(),
            counters: Counters::default(),
        }
    }
}

impl PartialEq for DualTowerModel {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.normalize_output == other.normalize_output
            && self.query == other.query
            && self.item == other.item
    }
}

impl DualTowerModel {
    /// Random init: weights uniform in `[-1/√fan_in, 1/√fan_in]`, biases zero.
    /// The query tower is drawn first, then the item tower, from the same
    /// stream, so the two start out independent.
    pub fn init(arch: Arch, input_dim: usize, output_dim: usize, rng: &mut Rng) -> Result<Self> {
        let shape = TowerShape::new(arch, input_dim, output_dim)?;
        let query = TowerParams::random(shape, rng);
        let item = TowerParams::random(shape, rng);
        Ok(Self {
            shape,
            normalize_output: true,
            query,
            item,
            counters: Counters::default(),
        })
    }

    pub fn from_towers(query: TowerParams, item: TowerParams, normalize_output: bool) -> Result<Self> {
        if query.shape != item.shape {
            return Err(Error::InvalidConfig(
                "query and item towers must have identical shapes".into(),
            ));
        }
        Ok(Self {
            shape: query.shape,
            normalize_output,
            query,
            item,
            counters: Counters::default(),
        })
    }

    pub fn with_normalize(mut self, normalize_output: bool) -> Self {
        self.normalize_output = normalize_output;
        self
    }

    pub fn shape(&self) -> TowerShape {
        self.shape
    }

    pub fn arch(&self) -> Arch {
        self.shape.arch
    }

    pub fn input_dim(&self) -> usize {
        self.shape.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.shape.output_dim
    }

    pub fn normalize_output(&self) -> bool {
        self.normalize_output
    }

    pub fn tower(&self, tower: Tower) -> &TowerParams {
        match tower {
            Tower::Query => &self.query,
            Tower::Item => &self.item,
        }
    }

    pub fn tower_mut(&mut self, tower: Tower) -> &mut TowerParams {
        match tower {
            Tower::Query => &mut self.query,
            Tower::Item => &mut self.item,
        }
    }

    /// Copy of the model with the two towers exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            shape: self.shape,
            normalize_output: self.normalize_output,
            query: self.item.clone(),
            item: self.query.clone(),
            counters: Counters::default(),
        }
    }

    pub fn encode(&self, tower: Tower, x: &Vec32) -> Result<Vec32> {
        check_dim(self.shape.input_dim, x.dim())?;
        self.counters.bump(tower);
        let fw = forward(
            &self.shape,
            self.tower(tower).as_slice(),
            &x.to_f64(),
            self.normalize_output,
        )?;
        Vec32::from_f64(&fw.out)
    }

    /// Encodes every input; order is preserved. Errors carry the index of
    /// the first offending input.
    pub fn encode_batch(&self, tower: Tower, xs: &[Vec32]) -> Result<Vec<Vec32>> {
        if let Some(index) = xs.iter().position(|x| x.dim() != self.shape.input_dim) {
            return Err(Error::BatchItem {
                index,
                source: Box::new(Error::dims(self.shape.input_dim, xs[index].dim())),
            });
        }
        let out: Vec<Result<Vec32>> = xs.par_iter().map(|x| self.encode(tower, x)).collect();
        out.into_iter()
            .enumerate()
            .map(|(index, r)| {
                r.map_err(|e| Error::BatchItem {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    pub fn encode_counts(&self) -> EncodeCounts {
        EncodeCounts {
            query: self.counters.query.load(Ordering::Relaxed),
            item: self.counters.item.load(Ordering::Relaxed),
        }
    }

    pub fn reset_encode_counts(&self) {
        self.counters.query.store(0, Ordering::Relaxed);
        self.counters.item.store(0, Ordering::Relaxed);
    }
}

/// Intermediate values of a single forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    pub x: Vec<f64>,
    /// `tanh` activations of the hidden layer; empty for linear towers.
    pub hidden: Vec<f64>,
    /// Norm of the pre-normalization output.
    pub norm: f64,
    pub out: Vec<f64>,
}

fn affine<P: Copy + Into<f64>>(params: &[P], layer: &LayerShape, x: &[f64]) -> Vec<f64> {
    let w = &params[layer.weight_range()];
    let mut y: Vec<f64> = (0..layer.rows)
        .map(|r| {
            w[r * layer.cols..(r + 1) * layer.cols]
                .iter()
                .zip(x)
                .fold(0.0f64, |acc, (&wi, &xi)| acc + wi.into() * xi)
        })
        .collect();
    if let Some(br) = layer.bias_range() {
        for (yi, &b) in y.iter_mut().zip(&params[br]) {
            *yi += b.into();
        }
    }
    y
}

pub(crate) fn forward<P: Copy + Into<f64>>(
    shape: &TowerShape,
    params: &[P],
    x: &[f64],
    normalize: bool,
) -> Result<Forward> {
    debug_assert_eq!(params.len(), shape.num_params());
    check_dim(shape.input_dim, x.len())?;
    let layers = shape.layers();
    let (hidden, raw) = match shape.arch {
        Arch::Linear => (Vec::new(), affine(params, &layers[0], x)),
        Arch::Mlp1 { .. } => {
            let h: Vec<f64> = affine(params, &layers[0], x)
                .into_iter()
                .map(f64::tanh)
                .collect();
            let y = affine(params, &layers[1], &h);
            (h, y)
        }
    };
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let out = if normalize {
        if norm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        raw.iter().map(|v| v / norm).collect()
    } else {
        raw
    };
    Ok(Forward {
        x: x.to_vec(),
        hidden,
        norm,
        out,
    })
}

fn affine_backward<P: Copy + Into<f64>>(
    params: &[P],
    layer: &LayerShape,
    input: &[f64],
    d_out: &[f64],
    grad: &mut [f64],
    want_input_grad: bool,
) -> Vec<f64> {
    let wr = layer.weight_range();
    {
        let gw = &mut grad[wr.clone()];
        for (r, &dy) in d_out.iter().enumerate() {
            if dy == 0.0 {
                continue;
            }
            for (g, &xi) in gw[r * layer.cols..(r + 1) * layer.cols].iter_mut().zip(input) {
                *g += dy * xi;
            }
        }
    }
    if let Some(br) = layer.bias_range() {
        for (g, &dy) in grad[br].iter_mut().zip(d_out) {
            *g += dy;
        }
    }
    if !want_input_grad {
        return Vec::new();
    }
    let w = &params[wr];
    let mut dx = vec![0.0f64; layer.cols];
    for (r, &dy) in d_out.iter().enumerate() {
        for (d, &wi) in dx.iter_mut().zip(&w[r * layer.cols..(r + 1) * layer.cols]) {
            *d += dy * wi.into();
        }
    }
    dx
}

/// Accumulates `∂(d_out · out)/∂θ` into `grad`.
pub(crate) fn backward<P: Copy + Into<f64>>(
    shape: &TowerShape,
    params: &[P],
    fw: &Forward,
    d_out: &[f64],
    normalize: bool,
    grad: &mut [f64],
) {
    let d_raw: Vec<f64> = if normalize {
        let proj: f64 = fw.out.iter().zip(d_out).map(|(z, d)| z * d).sum();
        fw.out
            .iter()
            .zip(d_out)
            .map(|(z, d)| (d - z * proj) / fw.norm)
            .collect()
    } else {
        d_out.to_vec()
    };
    let layers = shape.layers();
    match shape.arch {
        Arch::Linear => {
            affine_backward(params, &layers[0], &fw.x, &d_raw, grad, false);
        }
        Arch::Mlp1 { .. } => {
            let dh = affine_backward(params, &layers[1], &fw.hidden, &d_raw, grad, true);
            let da: Vec<f64> = dh
                .iter()
                .zip(&fw.hidden)
                .map(|(d, h)| d * (1.0 - h * h))
                .collect();
            affine_backward(params, &layers[0], &fw.x, &da, grad, false);
        }
    }
}
