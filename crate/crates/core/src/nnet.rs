//! Parametric CNN built from a search point: same-padded convolutions with
//! ReLU, 2x2/2 max-pooling, two fully connected layers, softmax head.
//! Training is from-scratch mini-batch SGD with Nesterov momentum and
//! per-step learning-rate decay, all in f64.

use crate::datagen::{SliceDataset, Split};
use crate::imaging::Image;
use crate::seeds;
use crate::space::{dim_names, ParamPoint, ParamSpace, RawValue};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::io;
use std::path::Path;
use thiserror::Error;

/// Probabilities are clamped here before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;
/// Parameter budget for the desk preset.
pub const DESK_PARAM_CAP: u64 = 2_000_000;
/// Gradient reduction always partitions a batch into this many ordered
/// chunks, so results do not depend on the rayon thread count.
const GRAD_CHUNKS: usize = 4;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("spatial collapse: input side {input_side} shrinks below 1x1 after {blocks} pooling stages")]
    SpatialCollapse { input_side: usize, blocks: usize },
    #[error("parameter cap exceeded: {params} parameters > cap {cap}")]
    ParamCap { params: u64, cap: u64 },
    #[error("point has no dimension named {0}")]
    MissingDim(String),
    #[error("dimension {dim} carries unusable value {value}")]
    BadValue { dim: String, value: String },
    #[error("bad spec: {0}")]
    BadSpec(String),
    #[error("bad training parameters: {0}")]
    BadTrainParams(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weights file: {0}")]
    WeightsFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    FullScale,
}

impl Preset {
    pub fn input_side(self) -> usize {
        match self {
            Preset::Desk => 16,
            Preset::FullScale => 64,
        }
    }

    pub fn fc_widths(self) -> (usize, usize) {
        match self {
            Preset::Desk => (128, 64),
            Preset::FullScale => (4096, 1024),
        }
    }

    /// The full-scale preset exists for shape-level checks only and is uncapped.
    pub fn param_cap(self) -> Option<u64> {
        match self {
            Preset::Desk => Some(DESK_PARAM_CAP),
            Preset::FullScale => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub input_side: usize,
    pub blocks: usize,
    pub convs_per_block: usize,
    pub filters: usize,
    pub filter_size: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Conv { out_ch: usize, in_ch: usize, k: usize },
    Dense { out: usize, inp: usize },
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        match *self {
            LayerShape::Conv { out_ch, in_ch, k } => out_ch * in_ch * k * k,
            LayerShape::Dense { out, inp } => out * inp,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerShape::Conv { out_ch, .. } => out_ch,
            LayerShape::Dense { out, .. } => out,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerShape::Conv { in_ch, k, .. } => in_ch * k * k,
            LayerShape::Dense { inp, .. } => inp,
        }
    }
}

impl NetSpec {
    pub fn validate(&self) -> Result<(), NnetError> {
        if self.blocks == 0
            || self.convs_per_block == 0
            || self.filters == 0
            || self.fc1 == 0
            || self.fc2 == 0
            || self.num_classes < 2
            || self.input_side == 0
        {
            return Err(NnetError::BadSpec("all sizes must be positive".into()));
        }
        if self.filter_size % 2 == 0 {
            return Err(NnetError::BadSpec(format!(
                "filter size {} must be odd for same padding",
                self.filter_size
            )));
        }
        let divisor = 1usize
            .checked_shl(self.blocks as u32)
            .ok_or_else(|| NnetError::BadSpec("too many blocks".into()))?;
        if self.input_side / divisor == 0 {
            return Err(NnetError::SpatialCollapse {
                input_side: self.input_side,
                blocks: self.blocks,
            });
        }
        if self.input_side % divisor != 0 {
            return Err(NnetError::BadSpec(format!(
                "input side {} is not divisible by 2^{}",
                self.input_side, self.blocks
            )));
        }
        Ok(())
    }

    /// Spatial side of the maps entering block `i` (0-based).
    fn side_before_block(&self, i: usize) -> usize {
        self.input_side >> i
    }

    pub fn flat_dim(&self) -> usize {
        let final_side = self.input_side >> self.blocks;
        self.filters * final_side * final_side
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::with_capacity(self.blocks * self.convs_per_block + 3);
        let mut in_ch = 1;
        for _ in 0..self.blocks {
            for _ in 0..self.convs_per_block {
                shapes.push(LayerShape::Conv {
                    out_ch: self.filters,
                    in_ch,
                    k: self.filter_size,
                });
                in_ch = self.filters;
            }
        }
        shapes.push(LayerShape::Dense {
            out: self.fc1,
            inp: self.flat_dim(),
        });
        shapes.push(LayerShape::Dense {
            out: self.fc2,
            inp: self.fc1,
        });
        shapes.push(LayerShape::Dense {
            out: self.num_classes,
            inp: self.fc2,
        });
        shapes
    }

    /// Closed-form parameter count: the first conv sees 1 input channel, the
    /// remaining b*c-1 convs see `filters`, then three dense layers.
    pub fn param_count(&self) -> u64 {
        let f = self.filters as u64;
        let k2 = (self.filter_size * self.filter_size) as u64;
        let nconv = (self.blocks * self.convs_per_block) as u64;
        let conv = (k2 + 1) * f + (nconv - 1) * (k2 * f + 1) * f;
        let flat = self.flat_dim() as u64;
        let fc1 = self.fc1 as u64;
        let fc2 = self.fc2 as u64;
        let kcls = self.num_classes as u64;
        conv + (flat + 1) * fc1 + (fc1 + 1) * fc2 + (fc2 + 1) * kcls
    }
}

fn int_dim(point: &ParamPoint, space: &ParamSpace, name: &str) -> Result<i64, NnetError> {
    let (idx, _) = space
        .dim_named(name)
        .ok_or_else(|| NnetError::MissingDim(name.to_string()))?;
    let value = point
        .values
        .get(idx)
        .ok_or_else(|| NnetError::MissingDim(name.to_string()))?;
    value.as_int().ok_or_else(|| NnetError::BadValue {
        dim: name.to_string(),
        value: format!("{value}"),
    })
}

pub fn build(point: &ParamPoint, space: &ParamSpace, preset: Preset) -> Result<NetSpec, NnetError> {
    build_capped(point, space, preset, preset.param_cap())
}

/// Spatial collapse is checked before the parameter cap, so the two failure
/// modes stay distinguishable even when both apply.
pub fn build_capped(
    point: &ParamPoint,
    space: &ParamSpace,
    preset: Preset,
    cap: Option<u64>,
) -> Result<NetSpec, NnetError> {
    let (fc1, fc2) = preset.fc_widths();
    build_with(point, space, preset.input_side(), fc1, fc2, cap)
}

/// Decodes a point into a spec with explicit input geometry. Five-block
/// configurations need a side of at least 32, which the desk preset does not
/// reach; callers evaluating such points upscale their data and build here.
pub fn build_with(
    point: &ParamPoint,
    space: &ParamSpace,
    input_side: usize,
    fc1: usize,
    fc2: usize,
    cap: Option<u64>,
) -> Result<NetSpec, NnetError> {
    let blocks = int_dim(point, space, dim_names::BLOCKS)? as usize;
    let convs = int_dim(point, space, dim_names::CONVS_PER_BLOCK)? as usize;
    let fexp = int_dim(point, space, dim_names::FILTERS_EXP)?;
    let ksize = int_dim(point, space, dim_names::FILTER_SIZE)? as usize;
    if !(1..=30).contains(&fexp) {
        return Err(NnetError::BadValue {
            dim: dim_names::FILTERS_EXP.to_string(),
            value: format!("{fexp}"),
        });
    }
    let spec = NetSpec {
        input_side,
        blocks,
        convs_per_block: convs,
        filters: 1usize << fexp,
        filter_size: ksize,
        fc1,
        fc2,
        num_classes: crate::datagen::NUM_CLASSES,
    };
    spec.validate()?;
    if let Some(cap) = cap {
        let params = spec.param_count();
        if params > cap {
            return Err(NnetError::ParamCap { params, cap });
        }
    }
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub decay: f64,
    pub augment: bool,
    pub seed: u64,
}

impl TrainParams {
    pub fn from_point(
        point: &ParamPoint,
        space: &ParamSpace,
        seed: u64,
    ) -> Result<Self, NnetError> {
        let lr_exp = int_dim(point, space, dim_names::LR_EXP)?;
        let batch_exp = int_dim(point, space, dim_names::BATCH_EXP)?;
        let epochs_factor = int_dim(point, space, dim_names::EPOCHS_FACTOR)?;
        let (aidx, _) = space
            .dim_named(dim_names::AUGMENT)
            .ok_or_else(|| NnetError::MissingDim(dim_names::AUGMENT.to_string()))?;
        let augment = match point.values.get(aidx) {
            Some(RawValue::Name(s)) if s == "Yes" => true,
            Some(RawValue::Name(s)) if s == "No" => false,
            other => {
                return Err(NnetError::BadValue {
                    dim: dim_names::AUGMENT.to_string(),
                    value: other.map(|v| format!("{v}")).unwrap_or_default(),
                })
            }
        };
        if !(0..=30).contains(&batch_exp) || epochs_factor < 1 {
            return Err(NnetError::BadTrainParams(format!(
                "batch exponent {batch_exp} / epochs factor {epochs_factor} out of range"
            )));
        }
        let tp = TrainParams {
            learning_rate: 10f64.powi(lr_exp as i32),
            batch_size: 1usize << batch_exp,
            epochs: 10 * epochs_factor as usize,
            momentum: 0.9,
            decay: 1e-6,
            augment,
            seed,
        };
        tp.validate()?;
        Ok(tp)
    }

    pub fn validate(&self) -> Result<(), NnetError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(NnetError::BadTrainParams("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(NnetError::BadTrainParams("batch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(NnetError::BadTrainParams("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnetError::BadTrainParams("momentum must lie in [0,1)".into()));
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            return Err(NnetError::BadTrainParams("decay must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    shape: LayerShape,
    w_off: usize,
    b_off: usize,
}

fn layout(spec: &NetSpec) -> (Vec<Slot>, usize) {
    let mut slots = Vec::new();
    let mut off = 0usize;
    for shape in spec.layer_shapes() {
        let w_off = off;
        let b_off = off + shape.weight_len();
        off = b_off + shape.bias_len();
        slots.push(Slot { shape, w_off, b_off });
    }
    (slots, off)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    slots: Vec<Slot>,
    data: Vec<f64>,
}

impl Weights {
    pub fn zeros(spec: &NetSpec) -> Weights {
        let (slots, total) = layout(spec);
        Weights {
            slots,
            data: vec![0.0; total],
        }
    }

    /// Fan-in-scaled uniform weights. One draw per weight in storage order,
    /// so a given rng state fixes the net bit for bit. Biases start at a
    /// small positive constant, which keeps freshly initialized ReLU units
    /// off the exact kink (a zero bias puts a unit with all-dead inputs
    /// precisely at it).
    pub fn init(spec: &NetSpec, rng: &mut ChaCha8Rng) -> Weights {
        let mut w = Weights::zeros(spec);
        for si in 0..w.slots.len() {
            let slot = w.slots[si];
            let limit = (6.0 / slot.shape.fan_in() as f64).sqrt();
            for j in slot.w_off..slot.b_off {
                w.data[j] = (2.0 * rng.gen::<f64>() - 1.0) * limit;
            }
            for j in slot.b_off..slot.b_off + slot.shape.bias_len() {
                w.data[j] = 0.01;
            }
        }
        w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.slots.iter().map(|s| s.shape).collect()
    }

    fn w(&self, li: usize) -> &[f64] {
        let s = self.slots[li];
        &self.data[s.w_off..s.b_off]
    }

    fn b(&self, li: usize) -> &[f64] {
        let s = self.slots[li];
        &self.data[s.b_off..s.b_off + s.shape.bias_len()]
    }

    /// Zeroes the classifier layer; softmax of an all-zero logit vector is
    /// exactly uniform.
    pub fn zero_head(&mut self) {
        let s = *self.slots.last().expect("at least one layer");
        for v in &mut self.data[s.w_off..s.b_off + s.shape.bias_len()] {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    /// Mean step loss over the last epoch that ran (non-finite if training
    /// diverged before completing a step).
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_error: f64,
    pub diverged: bool,
    pub steps: u64,
    pub step_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNet {
    pub spec: NetSpec,
    pub weights: Weights,
    pub metrics: TrainMetrics,
}

impl TrainedNet {
    pub fn predict_proba(&self, image: &Image) -> Result<Vec<f64>, NnetError> {
        predict_proba(&self.spec, &self.weights, image)
    }
}

struct FeatureMap {
    ch: usize,
    side: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    fn zeros(ch: usize, side: usize) -> FeatureMap {
        FeatureMap {
            ch,
            side,
            data: vec![0.0; ch * side * side],
        }
    }

    fn from_input(side: usize, pixels: &[f64]) -> FeatureMap {
        FeatureMap {
            ch: 1,
            side,
            data: pixels.to_vec(),
        }
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.side * self.side;
        &self.data[c * n..(c + 1) * n]
    }

    fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.side * self.side;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// dst[y][x] += a * src[y+dy][x+dx] over the region where both sides are in
/// bounds; everything outside contributes zero (same padding).
fn shifted_axpy(dst: &mut [f64], src: &[f64], a: f64, dy: isize, dx: isize, s: usize) {
    let si = s as isize;
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (si - dy).clamp(0, si) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (si - dx).clamp(0, si) as usize;
    if x_lo >= x_hi {
        return;
    }
    let w = x_hi - x_lo;
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let sx = (x_lo as isize + dx) as usize;
        let srow = &src[sy * s + sx..sy * s + sx + w];
        let drow = &mut dst[y * s + x_lo..y * s + x_hi];
        for (d, v) in drow.iter_mut().zip(srow) {
            *d += a * *v;
        }
    }
}

/// sum over the valid region of a[y][x] * b[y+dy][x+dx].
fn shifted_dot(a: &[f64], b: &[f64], dy: isize, dx: isize, s: usize) -> f64 {
    let si = s as isize;
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (si - dy).clamp(0, si) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (si - dx).clamp(0, si) as usize;
    if x_lo >= x_hi {
        return 0.0;
    }
    let w = x_hi - x_lo;
    let mut acc = 0.0;
    for y in y_lo..y_hi {
        let by = (y as isize + dy) as usize;
        let bx = (x_lo as isize + dx) as usize;
        let arow = &a[y * s + x_lo..y * s + x_hi];
        let brow = &b[by * s + bx..by * s + bx + w];
        acc += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
    }
    acc
}

fn conv_forward(input: &FeatureMap, w: &[f64], bias: &[f64], out_ch: usize, k: usize) -> FeatureMap {
    let s = input.side;
    let pad = (k / 2) as isize;
    let mut out = FeatureMap::zeros(out_ch, s);
    for oc in 0..out_ch {
        out.plane_mut(oc).fill(bias[oc]);
        for ic in 0..input.ch {
            let wbase = (oc * input.ch + ic) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[wbase + ky * k + kx];
                    shifted_axpy(
                        out.plane_mut(oc),
                        input.plane(ic),
                        wv,
                        ky as isize - pad,
                        kx as isize - pad,
                        s,
                    );
                }
            }
        }
    }
    out
}

fn conv_backward(
    input: &FeatureMap,
    dout: &FeatureMap,
    w: &[f64],
    k: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    want_dinput: bool,
) -> Option<FeatureMap> {
    let s = input.side;
    let pad = (k / 2) as isize;
    for oc in 0..dout.ch {
        gb[oc] += dout.plane(oc).iter().sum::<f64>();
    }
    let mut dinput = if want_dinput {
        Some(FeatureMap::zeros(input.ch, s))
    } else {
        None
    };
    for oc in 0..dout.ch {
        for ic in 0..input.ch {
            let wbase = (oc * input.ch + ic) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    gw[wbase + ky * k + kx] +=
                        shifted_dot(dout.plane(oc), input.plane(ic), dy, dx, s);
                    if let Some(di) = dinput.as_mut() {
                        let wv = w[wbase + ky * k + kx];
                        shifted_axpy(di.plane_mut(ic), dout.plane(oc), wv, -dy, -dx, s);
                    }
                }
            }
        }
    }
    dinput
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// ReLU backward: activations are stored post-ReLU, so the pass-through mask
/// is act > 0.
fn relu_mask(d: &mut [f64], act: &[f64]) {
    for (g, a) in d.iter_mut().zip(act) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 stride-2 max-pool. Returns the pooled map and, per output cell, the
/// flat index of the winning input cell (first in row-major window order on
/// ties).
fn maxpool(input: &FeatureMap) -> (FeatureMap, Vec<u32>) {
    let s = input.side;
    let h = s / 2;
    let mut out = FeatureMap::zeros(input.ch, h);
    let mut arg = vec![0u32; input.ch * h * h];
    for c in 0..input.ch {
        let base = c * s * s;
        let obase = c * h * h;
        for oy in 0..h {
            for ox in 0..h {
                let mut best_idx = base + (2 * oy) * s + 2 * ox;
                let mut best = input.data[best_idx];
                for (wy, wx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + wy) * s + (2 * ox + wx);
                    if input.data[idx] > best {
                        best = input.data[idx];
                        best_idx = idx;
                    }
                }
                out.data[obase + oy * h + ox] = best;
                arg[obase + oy * h + ox] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

fn pool_backward(dout: &FeatureMap, arg: &[u32], in_ch: usize, in_side: usize) -> FeatureMap {
    let mut din = FeatureMap::zeros(in_ch, in_side);
    for (i, &a) in arg.iter().enumerate() {
        din.data[a as usize] += dout.data[i];
    }
    din
}

fn dense_forward(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let inp = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| {
            bo + w[o * inp..(o + 1) * inp]
                .iter()
                .zip(x)
                .map(|(wi, xi)| wi * xi)
                .sum::<f64>()
        })
        .collect()
}

fn dense_backward(
    x: &[f64],
    dy: &[f64],
    w: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let inp = x.len();
    let mut dx = if want_dx { Some(vec![0.0; inp]) } else { None };
    for (o, &d) in dy.iter().enumerate() {
        gb[o] += d;
        let row = &mut gw[o * inp..(o + 1) * inp];
        for (g, xi) in row.iter_mut().zip(x) {
            *g += d * xi;
        }
        if let Some(dx) = dx.as_mut() {
            let wrow = &w[o * inp..(o + 1) * inp];
            for (dxi, wi) in dx.iter_mut().zip(wrow) {
                *dxi += d * wi;
            }
        }
    }
    dx
}

/// Numerically stable softmax: the max logit is subtracted before
/// exponentiation, so magnitudes up to 1e4 stay finite.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

struct Trace {
    conv_act: Vec<FeatureMap>,
    pool_out: Vec<FeatureMap>,
    pool_arg: Vec<Vec<u32>>,
    fc_act: [Vec<f64>; 2],
    probs: Vec<f64>,
}

fn forward_trace(spec: &NetSpec, weights: &Weights, input: &[f64]) -> Trace {
    let nconv = spec.blocks * spec.convs_per_block;
    let mut conv_act: Vec<FeatureMap> = Vec::with_capacity(nconv);
    let mut pool_out: Vec<FeatureMap> = Vec::with_capacity(spec.blocks);
    let mut pool_arg = Vec::with_capacity(spec.blocks);
    let input_map = FeatureMap::from_input(spec.input_side, input);
    let mut li = 0;
    for bi in 0..spec.blocks {
        for ci in 0..spec.convs_per_block {
            let inp: &FeatureMap = if ci > 0 {
                conv_act.last().unwrap()
            } else if bi > 0 {
                pool_out.last().unwrap()
            } else {
                &input_map
            };
            let mut out = conv_forward(
                inp,
                weights.w(li),
                weights.b(li),
                spec.filters,
                spec.filter_size,
            );
            relu_inplace(&mut out.data);
            conv_act.push(out);
            li += 1;
        }
        let (pooled, arg) = maxpool(conv_act.last().unwrap());
        pool_arg.push(arg);
        pool_out.push(pooled);
    }
    let mut fc1 = dense_forward(&pool_out.last().unwrap().data, weights.w(li), weights.b(li));
    relu_inplace(&mut fc1);
    li += 1;
    let mut fc2 = dense_forward(&fc1, weights.w(li), weights.b(li));
    relu_inplace(&mut fc2);
    li += 1;
    let logits = dense_forward(&fc2, weights.w(li), weights.b(li));
    let probs = softmax(&logits);
    Trace {
        conv_act,
        pool_out,
        pool_arg,
        fc_act: [fc1, fc2],
        probs,
    }
}

fn forward_probs(spec: &NetSpec, weights: &Weights, input: &[f64]) -> Vec<f64> {
    forward_trace(spec, weights, input).probs
}

pub fn predict_proba(
    spec: &NetSpec,
    weights: &Weights,
    image: &Image,
) -> Result<Vec<f64>, NnetError> {
    if image.side() != spec.input_side {
        return Err(NnetError::ShapeMismatch(format!(
            "image side {} does not match spec input side {}",
            image.side(),
            spec.input_side
        )));
    }
    let x: Vec<f64> = image.pixels().iter().map(|&p| p as f64).collect();
    Ok(forward_probs(spec, weights, &x))
}

/// Backward pass for one example. Accumulates unscaled gradients (no 1/B)
/// into `grad` and returns this example's loss term w_y * (-log p_y).
/// Per-layer views into a gradient buffer that shares the weights layout.
fn grad_views(grad: &mut [f64], slot: Slot) -> (&mut [f64], &mut [f64]) {
    let (_, rest) = grad.split_at_mut(slot.w_off);
    let (gw, rest) = rest.split_at_mut(slot.shape.weight_len());
    (gw, &mut rest[..slot.shape.bias_len()])
}

fn example_backward(
    spec: &NetSpec,
    weights: &Weights,
    input: &[f64],
    label: usize,
    class_w: f64,
    grad: &mut [f64],
) -> f64 {
    let trace = forward_trace(spec, weights, input);
    let loss = class_w * -(trace.probs[label].max(LOG_CLAMP)).ln();

    // The log clamp only binds when p_y < 1e-12; the analytic gradient below
    // is for the unclamped loss, which is identical wherever the clamp is
    // inactive.
    let mut dlogits = trace.probs.clone();
    dlogits[label] -= 1.0;
    for d in &mut dlogits {
        *d *= class_w;
    }

    let nconv = spec.blocks * spec.convs_per_block;
    let head_li = nconv + 2;
    let fc2_li = nconv + 1;
    let fc1_li = nconv;

    let slot = weights.slots[head_li];
    let (gw, gb) = grad_views(grad, slot);
    let mut dfc2 = dense_backward(&trace.fc_act[1], &dlogits, weights.w(head_li), gw, gb, true)
        .expect("dx requested");
    relu_mask(&mut dfc2, &trace.fc_act[1]);

    let slot = weights.slots[fc2_li];
    let (gw, gb) = grad_views(grad, slot);
    let mut dfc1 = dense_backward(&trace.fc_act[0], &dfc2, weights.w(fc2_li), gw, gb, true)
        .expect("dx requested");
    relu_mask(&mut dfc1, &trace.fc_act[0]);

    let flat = &trace.pool_out[spec.blocks - 1];
    let slot = weights.slots[fc1_li];
    let (gw, gb) = grad_views(grad, slot);
    let dflat = dense_backward(&flat.data, &dfc1, weights.w(fc1_li), gw, gb, true)
        .expect("dx requested");

    let mut dcur = FeatureMap {
        ch: flat.ch,
        side: flat.side,
        data: dflat,
    };
    let input_map = FeatureMap::from_input(spec.input_side, input);
    for bi in (0..spec.blocks).rev() {
        let pre_side = spec.side_before_block(bi);
        let mut d = pool_backward(&dcur, &trace.pool_arg[bi], spec.filters, pre_side);
        for ci in (0..spec.convs_per_block).rev() {
            let li = bi * spec.convs_per_block + ci;
            relu_mask(&mut d.data, &trace.conv_act[li].data);
            let input_act: &FeatureMap = if ci > 0 {
                &trace.conv_act[li - 1]
            } else if bi > 0 {
                &trace.pool_out[bi - 1]
            } else {
                &input_map
            };
            let slot = weights.slots[li];
            let (gw, gb) = grad_views(grad, slot);
            let dnext = conv_backward(
                input_act,
                &d,
                weights.w(li),
                spec.filter_size,
                gw,
                gb,
                li > 0,
            );
            if li == 0 {
                break;
            }
            let dnext = dnext.expect("dinput requested");
            if ci > 0 {
                d = dnext;
            } else {
                dcur = dnext;
            }
        }
    }
    loss
}

fn check_batch(
    spec: &NetSpec,
    batch: &[(&[f64], usize)],
    class_weights: &[f64],
) -> Result<(), NnetError> {
    if batch.is_empty() {
        return Err(NnetError::EmptyBatch);
    }
    let want = spec.input_side * spec.input_side;
    if class_weights.len() != spec.num_classes {
        return Err(NnetError::ShapeMismatch(format!(
            "{} class weights for {} classes",
            class_weights.len(),
            spec.num_classes
        )));
    }
    for (x, y) in batch {
        if x.len() != want {
            return Err(NnetError::ShapeMismatch(format!(
                "example of {} pixels, expected {}",
                x.len(),
                want
            )));
        }
        if *y >= spec.num_classes {
            return Err(NnetError::ShapeMismatch(format!(
                "label {} out of range for {} classes",
                y, spec.num_classes
            )));
        }
    }
    Ok(())
}

fn batch_gradient_ref(
    spec: &NetSpec,
    weights: &Weights,
    batch: &[(&[f64], usize)],
    class_weights: &[f64],
) -> Result<(f64, Vec<f64>), NnetError> {
    check_batch(spec, batch, class_weights)?;
    let n = batch.len();
    let chunk_len = n.div_ceil(GRAD_CHUNKS);
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(chunk_len)
        .map(|chunk| {
            let mut grad = vec![0.0; weights.len()];
            let mut loss = 0.0;
            for (x, y) in chunk {
                loss += example_backward(spec, weights, x, *y, class_weights[*y], &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    for (l, g) in parts {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let scale = 1.0 / n as f64;
    loss *= scale;
    for g in &mut grad {
        *g *= scale;
    }
    Ok((loss, grad))
}

/// Mean weighted cross-entropy over the batch and its gradient with respect
/// to every parameter, reduced over a fixed four-chunk partition so the
/// result is independent of thread count.
pub fn batch_gradient(
    spec: &NetSpec,
    weights: &Weights,
    batch: &[(Vec<f64>, usize)],
    class_weights: &[f64],
) -> Result<(f64, Vec<f64>), NnetError> {
    let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    batch_gradient_ref(spec, weights, &refs, class_weights)
}

/// Mean weighted cross-entropy loss and plain (unweighted) error rate.
pub fn evaluate(
    spec: &NetSpec,
    weights: &Weights,
    examples: &[(Vec<f64>, usize)],
    class_weights: &[f64],
) -> Result<(f64, f64), NnetError> {
    let refs: Vec<(&[f64], usize)> = examples.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    check_batch(spec, &refs, class_weights)?;
    let mut loss = 0.0;
    let mut wrong = 0usize;
    for (x, y) in &refs {
        let probs = forward_probs(spec, weights, x);
        loss += class_weights[*y] * -(probs[*y].max(LOG_CLAMP)).ln();
        let pred = argmax(&probs);
        if pred != *y {
            wrong += 1;
        }
    }
    Ok((loss / refs.len() as f64, wrong as f64 / refs.len() as f64))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean over examples of w_label * (-log p_label), with p clamped at 1e-12.
pub fn weighted_cross_entropy(
    probs: &[Vec<f64>],
    labels: &[usize],
    class_weights: &[f64],
) -> Result<f64, NnetError> {
    if probs.is_empty() {
        return Err(NnetError::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(NnetError::ShapeMismatch(format!(
            "{} probability vectors, {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= class_weights.len() || y >= p.len() {
            return Err(NnetError::ShapeMismatch(format!(
                "label {y} out of range"
            )));
        }
        if class_weights[y] <= 0.0 {
            return Err(NnetError::BadTrainParams(
                "class weights must be positive".into(),
            ));
        }
        total += class_weights[y] * -(p[y].max(LOG_CLAMP)).ln();
    }
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<f64>,
    steps: u64,
}

impl SgdState {
    pub fn new(weights: &Weights) -> SgdState {
        SgdState {
            velocity: vec![0.0; weights.len()],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Nesterov update: v <- m*v - lr_t*g, w <- w + m*v - lr_t*g, with the
/// per-step decayed rate lr_t = lr / (1 + decay*t) for t completed steps.
pub fn sgd_step(weights: &mut Weights, grad: &[f64], state: &mut SgdState, tp: &TrainParams) {
    let lr = tp.learning_rate / (1.0 + tp.decay * state.steps as f64);
    let m = tp.momentum;
    for ((w, v), &g) in weights
        .data
        .iter_mut()
        .zip(&mut state.velocity)
        .zip(grad)
    {
        *v = m * *v - lr * g;
        *w += m * *v - lr * g;
    }
    state.steps += 1;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Pixel offsets (dx, dy), each at most 10% of the side.
    pub translate: (f64, f64),
    /// Radians, at most 15 degrees either way.
    pub rotation: f64,
    pub shear: f64,
    pub zoom: f64,
    pub noise_sigma: f64,
}

impl AugmentParams {
    pub fn neutral() -> AugmentParams {
        AugmentParams {
            translate: (0.0, 0.0),
            rotation: 0.0,
            shear: 0.0,
            zoom: 1.0,
            noise_sigma: 0.0,
        }
    }

    /// Draw order is fixed: dx, dy, rotation, shear, zoom, sigma.
    pub fn draw<R: Rng>(rng: &mut R, side: usize) -> AugmentParams {
        let u = |rng: &mut R| 2.0 * rng.gen::<f64>() - 1.0;
        let max_t = 0.10 * side as f64;
        let dx = u(rng) * max_t;
        let dy = u(rng) * max_t;
        let rotation = u(rng) * 15f64.to_radians();
        let shear = u(rng) * 0.1;
        let zoom = 0.9 + rng.gen::<f64>() * 0.2;
        let noise_sigma = rng.gen::<f64>() * 0.05;
        AugmentParams {
            translate: (dx, dy),
            rotation,
            shear,
            zoom,
            noise_sigma,
        }
    }
}

/// Applies translate/rotate/shear/zoom about the image center, then additive
/// Gaussian pixel noise, then clamps to [0,1]. Noise draws one standard
/// normal per pixel whenever sigma > 0.
pub fn augment_with(image: &Image, params: &AugmentParams, rng: &mut ChaCha8Rng) -> Image {
    let side = image.side();
    let c = (side as f64 - 1.0) / 2.0;
    let (dx, dy) = params.translate;
    let (sin, cos) = params.rotation.sin_cos();
    let h = params.shear;
    let iz = 1.0 / params.zoom;
    // Inverse map: input = (1/z) * Shear(-h) * Rot(-theta) * (output - c - t) + c
    let a00 = iz * (cos + h * sin);
    let a01 = iz * (sin - h * cos);
    let a10 = iz * -sin;
    let a11 = iz * cos;
    let ox = c - (a00 * (c + dx) + a01 * (c + dy));
    let oy = c - (a10 * (c + dx) + a11 * (c + dy));
    let m = [[a00, a01, ox], [a10, a11, oy]];
    let mut out = image.warp_affine(&m);
    if params.noise_sigma > 0.0 {
        for p in out.pixels_mut() {
            *p = (*p as f64 + params.noise_sigma * seeds::standard_normal(rng)) as f32;
        }
    }
    out.clamp_unit();
    out
}

pub fn augment(image: &Image, rng: &mut ChaCha8Rng) -> Image {
    let params = AugmentParams::draw(rng, image.side());
    augment_with(image, &params, rng)
}

fn image_to_f64(image: &Image) -> Vec<f64> {
    image.pixels().iter().map(|&p| p as f64).collect()
}

/// Class weights w_c = N / (K * N_c) over the given labeled set; classes
/// absent from it get weight 0 and must not appear as labels later.
fn class_weights_for(labels: impl Iterator<Item = usize>, k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    let mut n = 0usize;
    for y in labels {
        if y < k {
            counts[y] += 1;
        }
        n += 1;
    }
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                n as f64 / (k as f64 * c as f64)
            }
        })
        .collect()
}

pub fn train(spec: &NetSpec, data: &SliceDataset, tp: &TrainParams) -> Result<TrainedNet, NnetError> {
    spec.validate()?;
    tp.validate()?;
    if data.side != spec.input_side {
        return Err(NnetError::ShapeMismatch(format!(
            "dataset side {} does not match spec input side {}",
            data.side, spec.input_side
        )));
    }
    let train_imgs: Vec<(&Image, usize)> = data.slices_in(Split::Train);
    let val_imgs: Vec<(&Image, usize)> = data.slices_in(Split::Validation);
    if train_imgs.is_empty() || val_imgs.is_empty() {
        return Err(NnetError::EmptyBatch);
    }
    for (_, y) in train_imgs.iter().chain(&val_imgs) {
        if *y >= spec.num_classes {
            return Err(NnetError::ShapeMismatch(format!(
                "class {} out of range for {} classes",
                y, spec.num_classes
            )));
        }
    }
    let class_w = class_weights_for(train_imgs.iter().map(|&(_, y)| y), spec.num_classes);
    let val_x: Vec<(Vec<f64>, usize)> = val_imgs
        .iter()
        .map(|&(img, y)| (image_to_f64(img), y))
        .collect();
    let plain_x: Vec<(Vec<f64>, usize)> = train_imgs
        .iter()
        .map(|&(img, y)| (image_to_f64(img), y))
        .collect();

    let mut rng = seeds::rng(tp.seed, seeds::stream::TRAIN, 0);
    let mut weights = Weights::init(spec, &mut rng);
    let mut state = SgdState::new(&weights);
    let mut step_losses: Vec<f64> = Vec::new();
    let mut last_epoch_start = 0usize;
    let mut diverged = false;

    'epochs: for _ in 0..tp.epochs {
        last_epoch_start = step_losses.len();
        let epoch_x: Vec<(Vec<f64>, usize)> = if tp.augment {
            let mut out = Vec::with_capacity(4 * train_imgs.len());
            for _ in 0..4 {
                for &(img, y) in &train_imgs {
                    out.push((image_to_f64(&augment(img, &mut rng)), y));
                }
            }
            out
        } else {
            plain_x.clone()
        };
        let mut order: Vec<usize> = (0..epoch_x.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(tp.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (epoch_x[i].0.as_slice(), epoch_x[i].1))
                .collect();
            let (loss, grad) = batch_gradient_ref(spec, &weights, &batch, &class_w)?;
            step_losses.push(loss);
            if !loss.is_finite() {
                diverged = true;
                break 'epochs;
            }
            sgd_step(&mut weights, &grad, &mut state, tp);
        }
    }

    let (val_loss, val_error) = evaluate(spec, &weights, &val_x, &class_w)?;
    // A net no better than 10x the uniform predictor has not trained.
    let uniform_baseline = val_x
        .iter()
        .map(|(_, y)| class_w[*y] * (spec.num_classes as f64).ln())
        .sum::<f64>()
        / val_x.len() as f64;
    if !val_loss.is_finite() || val_loss > 10.0 * uniform_baseline {
        diverged = true;
    }
    let last_epoch = &step_losses[last_epoch_start..];
    let train_loss = if last_epoch.is_empty() {
        f64::NAN
    } else {
        last_epoch.iter().sum::<f64>() / last_epoch.len() as f64
    };
    Ok(TrainedNet {
        spec: spec.clone(),
        weights,
        metrics: TrainMetrics {
            train_loss,
            val_loss,
            val_error,
            diverged,
            steps: state.steps,
            step_losses,
        },
    })
}

/// Rough multiply-accumulate estimate for one full training run: forward
/// MACs per example, tripled for the backward pass, times examples per epoch
/// (4x under augmentation) times epochs.
pub fn train_work_estimate(spec: &NetSpec, train_slices: usize, tp: &TrainParams) -> u128 {
    let fwd = forward_macs(spec);
    let per_epoch = train_slices as u128 * if tp.augment { 4 } else { 1 };
    3 * fwd * per_epoch * tp.epochs as u128
}

pub fn forward_macs(spec: &NetSpec) -> u128 {
    let mut total: u128 = 0;
    let k2 = (spec.filter_size * spec.filter_size) as u128;
    let mut in_ch: u128 = 1;
    for bi in 0..spec.blocks {
        let side = spec.side_before_block(bi) as u128;
        for _ in 0..spec.convs_per_block {
            total += side * side * k2 * in_ch * spec.filters as u128;
            in_ch = spec.filters as u128;
        }
    }
    total += (spec.flat_dim() * spec.fc1) as u128;
    total += (spec.fc1 * spec.fc2) as u128;
    total += (spec.fc2 * spec.num_classes) as u128;
    total
}

fn weights_header(spec: &NetSpec) -> String {
    let mut h = String::from("stnet v1\n");
    h.push_str(&format!(
        "spec {} {} {} {} {} {} {} {}\n",
        spec.input_side,
        spec.blocks,
        spec.convs_per_block,
        spec.filters,
        spec.filter_size,
        spec.fc1,
        spec.fc2,
        spec.num_classes
    ));
    let shapes = spec.layer_shapes();
    h.push_str(&format!("layers {}\n", shapes.len()));
    for s in &shapes {
        match *s {
            LayerShape::Conv { out_ch, in_ch, k } => {
                h.push_str(&format!("conv {out_ch} {in_ch} {k}\n"))
            }
            LayerShape::Dense { out, inp } => h.push_str(&format!("dense {out} {inp}\n")),
        }
    }
    h.push_str(&format!("params {}\n", spec.param_count()));
    h
}

/// Hex digest identifying an architecture; the weight-file header embeds it
/// and the model cache keys filenames with it.
pub fn spec_hash(spec: &NetSpec) -> String {
    let mut hasher = Sha256::new();
    hasher.update(weights_header(spec).as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Layout: the text header (architecture line, layer shapes, parameter
/// count), a hash line carrying sha-256 of that header, then the weights as
/// little-endian f32 in storage order.
pub fn save_weights(spec: &NetSpec, weights: &Weights, path: &Path) -> Result<(), NnetError> {
    let expected = {
        let (_, total) = layout(spec);
        total
    };
    if weights.len() != expected {
        return Err(NnetError::ShapeMismatch(format!(
            "{} weights for a spec needing {}",
            weights.len(),
            expected
        )));
    }
    let header = weights_header(spec);
    let mut buf = Vec::with_capacity(header.len() + 80 + 4 * weights.len());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(format!("hash {}\n", spec_hash(spec)).as_bytes());
    for &w in weights.data() {
        buf.extend_from_slice(&(w as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(NetSpec, Weights), NnetError> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| NnetError::WeightsFile(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let line = |bytes: &[u8], pos: &mut usize| -> Result<String, NnetError> {
        let rest = &bytes[*pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        let s = std::str::from_utf8(&rest[..nl])
            .map_err(|_| bad("non-utf8 header"))?
            .to_string();
        *pos += nl + 1;
        Ok(s)
    };
    if line(&bytes, &mut pos)? != "stnet v1" {
        return Err(bad("bad magic"));
    }
    let spec_line = line(&bytes, &mut pos)?;
    let fields: Vec<usize> = spec_line
        .strip_prefix("spec ")
        .ok_or_else(|| bad("missing spec line"))?
        .split(' ')
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("unparsable spec line"))?;
    if fields.len() != 8 {
        return Err(bad("spec line needs 8 fields"));
    }
    let spec = NetSpec {
        input_side: fields[0],
        blocks: fields[1],
        convs_per_block: fields[2],
        filters: fields[3],
        filter_size: fields[4],
        fc1: fields[5],
        fc2: fields[6],
        num_classes: fields[7],
    };
    spec.validate()
        .map_err(|e| bad(&format!("invalid architecture: {e}")))?;
    let nlayers: usize = line(&bytes, &mut pos)?
        .strip_prefix("layers ")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("missing layer count"))?;
    let shapes = spec.layer_shapes();
    if nlayers != shapes.len() {
        return Err(bad("layer count does not match architecture"));
    }
    for expect in &shapes {
        let got = line(&bytes, &mut pos)?;
        let want = match *expect {
            LayerShape::Conv { out_ch, in_ch, k } => format!("conv {out_ch} {in_ch} {k}"),
            LayerShape::Dense { out, inp } => format!("dense {out} {inp}"),
        };
        if got != want {
            return Err(bad(&format!("layer line {got:?} does not match {want:?}")));
        }
    }
    let params: usize = line(&bytes, &mut pos)?
        .strip_prefix("params ")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("missing parameter count"))?;
    if params as u64 != spec.param_count() {
        return Err(bad("parameter count does not match architecture"));
    }
    let header_end = pos;
    let hash_line = line(&bytes, &mut pos)?;
    let stored = hash_line
        .strip_prefix("hash ")
        .ok_or_else(|| bad("missing hash line"))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes[..header_end]);
    let computed: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    if stored != computed {
        return Err(bad("header hash mismatch"));
    }
    let body = &bytes[pos..];
    if body.len() != 4 * params {
        return Err(bad(&format!(
            "body holds {} bytes, expected {}",
            body.len(),
            4 * params
        )));
    }
    let mut weights = Weights::zeros(&spec);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        weights.data[i] = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
    }
    Ok((spec, weights))
}
