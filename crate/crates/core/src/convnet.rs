//! Convolution-only QRS segmenter.
//!
//! `depth` blocks of same-padded 1-D convolution, batch normalization and
//! ReLU, followed by a 1x1 scoring convolution and a sigmoid. Nothing
//! subsamples, so every input sample gets its own probability. The first
//! block maps the single ECG channel to `channels` feature maps, the rest
//! keep `channels` wide.
//!
//! Activations of a batch live in one flat buffer laid out as
//! `[batch][channel][time]`.

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{aggregate_or, prepare_segments, Segment, WindowBits, WindowConfig};
use crate::train::{assign_folds, derive_seed, Adam, EpochRecord, Plateau, Progress, TrainConfig};
use crate::wfdb::EcgRecord;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;
/// Depths of the baseline network and its deeper variants.
pub const DEPTHS: [usize; 6] = [2, 4, 8, 16, 32, 64];

const INFER_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Zero,
    /// Wrap-around padding. Only useful for checking shift covariance.
    Circular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvNetConfig {
    pub depth: usize,
    pub channels: usize,
    pub kernel: usize,
    pub threshold: f64,
    pub padding: Padding,
}

impl Default for ConvNetConfig {
    fn default() -> Self {
        Self { depth: 2, channels: 24, kernel: 5, threshold: 0.5, padding: Padding::Zero }
    }
}

impl ConvNetConfig {
    pub fn with_depth(depth: usize) -> Self {
        Self { depth, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::arg(format!("depth {} < 2", self.depth)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::arg(format!("kernel {} must be odd", self.kernel)));
        }
        if self.channels == 0 {
            return Err(Error::arg("channels must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::arg(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `[out_ch][in_ch][kernel]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl ConvLayer {
    fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: vec![0.0; out_ch * in_ch * kernel],
            bias: vec![0.0; out_ch],
            gamma: vec![1.0; out_ch],
            beta: vec![0.0; out_ch],
            running_mean: vec![0.0; out_ch],
            running_var: vec![1.0; out_ch],
        }
    }

    fn w(&self, o: usize, i: usize, k: usize) -> f64 {
        self.weight[(o * self.in_ch + i) * self.kernel + k]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ConvNetConfig,
    pub layers: Vec<ConvLayer>,
    /// 1x1 scoring convolution, `[channels]`.
    pub score_weight: Vec<f64>,
    /// Single scoring bias.
    pub score_bias: Vec<f64>,
}

impl ModelParams {
    /// All weights and biases zero, BN at identity (gamma 1, beta 0, running
    /// mean 0, running variance 1).
    pub fn zeros(config: &ConvNetConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let layers =
            (0..config.depth).map(|l| ConvLayer::zeros(if l == 0 { 1 } else { c }, c, config.kernel)).collect();
        Ok(Self { config: config.clone(), layers, score_weight: vec![0.0; c], score_bias: vec![0.0] })
    }

    /// Uniform `±sqrt(1 / (in_ch * kernel))` for every convolution.
    pub fn init(config: &ConvNetConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut p.layers {
            let bound = (1.0 / (layer.in_ch * layer.kernel) as f64).sqrt();
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *v = rng.random_range(-bound..bound);
            }
        }
        let bound = (1.0 / config.channels as f64).sqrt();
        for v in p.score_weight.iter_mut().chain(p.score_bias.iter_mut()) {
            *v = rng.random_range(-bound..bound);
        }
        Ok(p)
    }

    fn trainable_parts(&self) -> Vec<&[f64]> {
        let mut parts: Vec<&[f64]> = Vec::with_capacity(self.layers.len() * 4 + 2);
        for l in &self.layers {
            parts.extend([&l.weight[..], &l.bias[..], &l.gamma[..], &l.beta[..]]);
        }
        parts.push(&self.score_weight);
        parts.push(&self.score_bias);
        parts
    }

    fn trainable_parts_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut parts: Vec<&mut Vec<f64>> = Vec::with_capacity(self.layers.len() * 4 + 2);
        for l in &mut self.layers {
            parts.push(&mut l.weight);
            parts.push(&mut l.bias);
            parts.push(&mut l.gamma);
            parts.push(&mut l.beta);
        }
        parts.push(&mut self.score_weight);
        parts.push(&mut self.score_bias);
        parts
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable_parts().iter().map(|p| p.len()).sum()
    }

    /// Trainable values flattened layer by layer (weight, bias, gamma, beta),
    /// then the scoring layer. Gradients use the same order.
    pub fn trainable(&self) -> Vec<f64> {
        self.trainable_parts().concat()
    }

    pub fn set_trainable(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for part in self.trainable_parts_mut() {
            let n = part.len();
            part.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        debug_assert_eq!(offset, flat.len());
    }

    /// Every stored value in a fixed order, running statistics included.
    pub fn all_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for part in [&l.weight, &l.bias, &l.gamma, &l.beta, &l.running_mean, &l.running_var] {
                out.extend_from_slice(part);
            }
        }
        out.extend_from_slice(&self.score_weight);
        out.extend_from_slice(&self.score_bias);
        out
    }

    pub fn set_all_values(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.all_values().len();
        if values.len() != expected {
            return Err(Error::arg(format!("expected {expected} parameter values, got {}", values.len())));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for part in [&mut l.weight, &mut l.bias, &mut l.gamma, &mut l.beta, &mut l.running_mean, &mut l.running_var]
            {
                part.iter_mut().for_each(|v| *v = it.next().unwrap_or_default());
            }
        }
        self.score_weight.iter_mut().for_each(|v| *v = it.next().unwrap_or_default());
        self.score_bias.iter_mut().for_each(|v| *v = it.next().unwrap_or_default());
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let shape_err = |what: &str| Err(Error::arg(format!("parameter shape mismatch: {what}")));
        if self.layers.len() != cfg.depth {
            return shape_err("layer count != depth");
        }
        for (i, l) in self.layers.iter().enumerate() {
            let in_ch = if i == 0 { 1 } else { cfg.channels };
            if l.in_ch != in_ch || l.out_ch != cfg.channels || l.kernel != cfg.kernel {
                return shape_err(&format!("layer {i} dimensions"));
            }
            if l.weight.len() != l.out_ch * l.in_ch * l.kernel
                || [&l.bias, &l.gamma, &l.beta, &l.running_mean, &l.running_var].iter().any(|v| v.len() != l.out_ch)
            {
                return shape_err(&format!("layer {i} buffers"));
            }
            if l.running_var.iter().any(|&v| v < 0.0) {
                return Err(Error::arg(format!("layer {i} has negative running variance")));
            }
        }
        if self.score_weight.len() != cfg.channels || self.score_bias.len() != 1 {
            return shape_err("scoring layer");
        }
        if self.all_values().iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite parameter"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN.
    Train,
    /// Running statistics in BN.
    Infer,
}

/// `out[t] += w * src[t + shift]`, with zero or wrap-around padding.
fn shifted_axpy(out: &mut [f64], w: f64, src: &[f64], shift: isize, circular: bool) {
    let n = out.len() as isize;
    let lo = (-shift).clamp(0, n);
    let hi = (n - shift).clamp(lo, n);
    let (lo_u, hi_u) = (lo as usize, hi as usize);
    if lo < hi {
        let s0 = (lo + shift) as usize;
        for (o, s) in out[lo_u..hi_u].iter_mut().zip(&src[s0..s0 + (hi_u - lo_u)]) {
            *o += w * s;
        }
    }
    if circular {
        for t in (0..lo).chain(hi..n) {
            out[t as usize] += w * src[(t + shift).rem_euclid(n) as usize];
        }
    }
}

/// `sum_t a[t] * src[t + shift]` under the same padding rules.
fn shifted_dot(a: &[f64], src: &[f64], shift: isize, circular: bool) -> f64 {
    let n = a.len() as isize;
    let lo = (-shift).clamp(0, n);
    let hi = (n - shift).clamp(lo, n);
    let mut acc = 0.0;
    if lo < hi {
        let s0 = (lo + shift) as usize;
        let len = (hi - lo) as usize;
        acc = a[lo as usize..hi as usize].iter().zip(&src[s0..s0 + len]).map(|(x, y)| x * y).sum();
    }
    if circular {
        for t in (0..lo).chain(hi..n) {
            acc += a[t as usize] * src[(t + shift).rem_euclid(n) as usize];
        }
    }
    acc
}

fn conv_forward(layer: &ConvLayer, input: &[f64], batch: usize, t_len: usize, circular: bool) -> Vec<f64> {
    let pad = (layer.kernel / 2) as isize;
    let mut out = vec![0.0; batch * layer.out_ch * t_len];
    for b in 0..batch {
        let x = &input[b * layer.in_ch * t_len..(b + 1) * layer.in_ch * t_len];
        for o in 0..layer.out_ch {
            let z = &mut out[(b * layer.out_ch + o) * t_len..(b * layer.out_ch + o + 1) * t_len];
            z.fill(layer.bias[o]);
            for i in 0..layer.in_ch {
                let xi = &x[i * t_len..(i + 1) * t_len];
                for k in 0..layer.kernel {
                    shifted_axpy(z, layer.w(o, i, k), xi, k as isize - pad, circular);
                }
            }
        }
    }
    out
}

/// Channel statistics used by one BN pass.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over batch and time.
    pub var: Vec<f64>,
    pub count: usize,
}

fn channel_stats(z: &[f64], batch: usize, ch: usize, t_len: usize) -> BnStats {
    let count = batch * t_len;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for b in 0..batch {
            s += z[(b * ch + c) * t_len..(b * ch + c + 1) * t_len].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for b in 0..batch {
            v += z[(b * ch + c) * t_len..(b * ch + c + 1) * t_len].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / count as f64;
    }
    BnStats { mean, var, count }
}

struct LayerCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    out: Vec<f64>,
    inv_std: Vec<f64>,
}

struct Forward {
    batch: usize,
    t_len: usize,
    layers: Vec<LayerCache>,
    stats: Vec<BnStats>,
    logits: Vec<f64>,
}

fn run(params: &ModelParams, inputs: &[&[f64]], mode: Mode, keep: bool) -> Result<Forward> {
    params.validate()?;
    let batch = inputs.len();
    let t_len = inputs.first().map_or(0, |x| x.len());
    if inputs.iter().any(|x| x.len() != t_len) {
        return Err(Error::arg("inputs in a batch must share one length"));
    }
    let circular = params.config.padding == Padding::Circular;
    let mut act: Vec<f64> = inputs.concat();
    if act.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite input sample"));
    }
    let mut caches = Vec::new();
    let mut all_stats = Vec::new();
    for layer in &params.layers {
        let ch = layer.out_ch;
        let z = conv_forward(layer, &act, batch, t_len, circular);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite activation in forward pass"));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let s = channel_stats(&z, batch, ch, t_len);
                let mv = (s.mean.clone(), s.var.clone());
                all_stats.push(s);
                mv
            }
            Mode::Infer => (layer.running_mean.clone(), layer.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = z;
        let mut out = vec![0.0; xhat.len()];
        for b in 0..batch {
            for c in 0..ch {
                let r = (b * ch + c) * t_len..(b * ch + c + 1) * t_len;
                for (xh, o) in xhat[r.clone()].iter_mut().zip(&mut out[r]) {
                    *xh = (*xh - mean[c]) * inv_std[c];
                    *o = (layer.gamma[c] * *xh + layer.beta[c]).max(0.0);
                }
            }
        }
        let input = std::mem::replace(&mut act, out);
        if keep {
            caches.push(LayerCache { input, xhat, out: act.clone(), inv_std });
        }
    }
    let ch = params.config.channels;
    let mut logits = vec![params.score_bias[0]; batch * t_len];
    for b in 0..batch {
        let lb = &mut logits[b * t_len..(b + 1) * t_len];
        for c in 0..ch {
            shifted_axpy(lb, params.score_weight[c], &act[(b * ch + c) * t_len..(b * ch + c + 1) * t_len], 0, false);
        }
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite activation in forward pass"));
    }
    Ok(Forward { batch, t_len, layers: caches, stats: all_stats, logits })
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pre-sigmoid scores for a batch of equal-length inputs.
pub fn forward_logits(params: &ModelParams, inputs: &[&[f64]], mode: Mode) -> Result<Vec<Vec<f64>>> {
    let f = run(params, inputs, mode, false)?;
    Ok(f.logits.chunks(f.t_len.max(1)).take(f.batch).map(|c| c.to_vec()).collect())
}

pub fn forward_batch(params: &ModelParams, inputs: &[&[f64]], mode: Mode) -> Result<Vec<Vec<f64>>> {
    let mut out = forward_logits(params, inputs, mode)?;
    out.iter_mut().flatten().for_each(|v| *v = sigmoid(*v));
    Ok(out)
}

/// Per-sample QRS probabilities for one normalized segment. In train mode
/// the segment is its own BN batch.
pub fn forward(params: &ModelParams, segment: &[f64], mode: Mode) -> Result<Vec<f64>> {
    Ok(forward_batch(params, &[segment], mode)?.pop().unwrap_or_default())
}

/// Mean binary cross-entropy over unmasked samples; 0 when everything is masked.
pub fn bce_loss(probs: &[f64], labels: &[bool], mask: &[bool]) -> f64 {
    let (sum, n) = bce_sum(probs, labels, mask);
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn bce_sum(probs: &[f64], labels: &[bool], mask: &[bool]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for ((&p, &y), &m) in probs.iter().zip(labels).zip(mask) {
        if m {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            sum -= if y { p.ln() } else { (1.0 - p).ln() };
            n += 1;
        }
    }
    (sum, n)
}

/// One training example: normalized values, labels, and how many leading
/// samples are real.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub values: &'a [f64],
    pub labels: &'a [bool],
    pub valid_len: usize,
}

impl<'a> From<&'a Segment> for Example<'a> {
    fn from(s: &'a Segment) -> Self {
        Self { values: &s.values, labels: &s.labels, valid_len: s.valid_len }
    }
}

fn batch_mask(batch: &[Example]) -> Vec<bool> {
    batch.iter().flat_map(|e| (0..e.values.len()).map(move |t| t < e.valid_len)).collect()
}

/// Train-mode loss of a batch (BN on batch statistics).
pub fn batch_loss(params: &ModelParams, batch: &[Example]) -> Result<f64> {
    let inputs: Vec<&[f64]> = batch.iter().map(|e| e.values).collect();
    let f = run(params, &inputs, Mode::Train, false)?;
    let probs: Vec<f64> = f.logits.iter().map(|&v| sigmoid(v)).collect();
    let labels: Vec<bool> = batch.iter().flat_map(|e| e.labels.iter().copied()).collect();
    Ok(bce_loss(&probs, &labels, &batch_mask(batch)))
}

/// Output of one backward pass.
pub struct Gradient {
    pub loss: f64,
    /// Same order as [`ModelParams::trainable`].
    pub grad: Vec<f64>,
    /// Batch statistics, for updating the running averages.
    pub stats: Vec<BnStats>,
}

/// Loss and exact reverse-mode gradient of the train-mode batch loss.
pub fn backward(params: &ModelParams, batch: &[Example]) -> Result<Gradient> {
    let inputs: Vec<&[f64]> = batch.iter().map(|e| e.values).collect();
    let fwd = run(params, &inputs, Mode::Train, true)?;
    let (bsz, t_len) = (fwd.batch, fwd.t_len);
    let ch = params.config.channels;
    let circular = params.config.padding == Padding::Circular;
    let labels: Vec<bool> = batch.iter().flat_map(|e| e.labels.iter().copied()).collect();
    if labels.len() != bsz * t_len {
        return Err(Error::arg("labels must match inputs in length"));
    }
    let mask = batch_mask(batch);
    let probs: Vec<f64> = fwd.logits.iter().map(|&v| sigmoid(v)).collect();
    let (loss_sum, n_valid) = bce_sum(&probs, &labels, &mask);
    let loss = if n_valid == 0 { 0.0 } else { loss_sum / n_valid as f64 };

    let mut grads = ModelParams::zeros(&params.config)?;
    let scale = if n_valid == 0 { 0.0 } else { 1.0 / n_valid as f64 };
    let dlogit: Vec<f64> = probs
        .iter()
        .zip(&labels)
        .zip(&mask)
        .map(|((&p, &y), &m)| {
            // the clamp flattens the loss outside (PROB_CLAMP, 1 - PROB_CLAMP)
            if !m || !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                0.0
            } else {
                (p - if y { 1.0 } else { 0.0 }) * scale
            }
        })
        .collect();

    grads.score_bias[0] = dlogit.iter().sum();
    let top = &fwd.layers.last().expect("depth >= 2").out;
    let mut dact = vec![0.0; bsz * ch * t_len];
    for b in 0..bsz {
        let dl = &dlogit[b * t_len..(b + 1) * t_len];
        for c in 0..ch {
            let r = (b * ch + c) * t_len..(b * ch + c + 1) * t_len;
            grads.score_weight[c] += shifted_dot(dl, &top[r.clone()], 0, false);
            shifted_axpy(&mut dact[r], params.score_weight[c], dl, 0, false);
        }
    }

    for (li, (layer, cache)) in params.layers.iter().zip(&fwd.layers).enumerate().rev() {
        let g = &mut grads.layers[li];
        let count = (bsz * t_len) as f64;
        // ReLU, then BN affine
        let mut dz = dact;
        for (d, &o) in dz.iter_mut().zip(&cache.out) {
            if o <= 0.0 {
                *d = 0.0;
            }
        }
        for c in 0..ch {
            let (mut dg, mut db) = (0.0, 0.0);
            for b in 0..bsz {
                let r = (b * ch + c) * t_len..(b * ch + c + 1) * t_len;
                dg += shifted_dot(&dz[r.clone()], &cache.xhat[r.clone()], 0, false);
                db += dz[r].iter().sum::<f64>();
            }
            g.gamma[c] = dg;
            g.beta[c] = db;
            // dz = inv_std/M * (M*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)), dxhat = gamma*dy
            let k = layer.gamma[c] * cache.inv_std[c] / count;
            for b in 0..bsz {
                let r = (b * ch + c) * t_len..(b * ch + c + 1) * t_len;
                for (d, &xh) in dz[r.clone()].iter_mut().zip(&cache.xhat[r]) {
                    *d = k * (count * *d - db - xh * dg);
                }
            }
        }
        // convolution
        let pad = (layer.kernel / 2) as isize;
        let in_ch = layer.in_ch;
        let need_input_grad = li > 0;
        let mut dinput = vec![0.0; if need_input_grad { bsz * in_ch * t_len } else { 0 }];
        for b in 0..bsz {
            let x = &cache.input[b * in_ch * t_len..(b + 1) * in_ch * t_len];
            for o in 0..ch {
                let dzo = &dz[(b * ch + o) * t_len..(b * ch + o + 1) * t_len];
                g.bias[o] += dzo.iter().sum::<f64>();
                for i in 0..in_ch {
                    let xi = &x[i * t_len..(i + 1) * t_len];
                    for k in 0..layer.kernel {
                        let shift = k as isize - pad;
                        g.weight[(o * in_ch + i) * layer.kernel + k] += shifted_dot(dzo, xi, shift, circular);
                        if need_input_grad {
                            let di = &mut dinput[(b * in_ch + i) * t_len..(b * in_ch + i + 1) * t_len];
                            shifted_axpy(di, layer.w(o, i, k), dzo, -shift, circular);
                        }
                    }
                }
            }
        }
        dact = dinput;
    }

    let grad = grads.trainable();
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite gradient"));
    }
    Ok(Gradient { loss, grad, stats: fwd.stats })
}

impl ModelParams {
    /// Folds batch statistics into the running averages (unbiased variance).
    pub fn update_running_stats(&mut self, stats: &[BnStats]) {
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            for c in 0..layer.out_ch {
                layer.running_mean[c] = (1.0 - BN_MOMENTUM) * layer.running_mean[c] + BN_MOMENTUM * s.mean[c];
                layer.running_var[c] = (1.0 - BN_MOMENTUM) * layer.running_var[c] + BN_MOMENTUM * s.var[c] * unbias;
            }
        }
    }
}

/// `p > threshold`, strictly.
pub fn predict_binary(probs: &[f64], threshold: f64) -> Vec<bool> {
    probs.iter().map(|&p| p > threshold).collect()
}

/// Infer-mode loss pooled over every unmasked sample of `examples`.
pub fn evaluation_loss(params: &ModelParams, examples: &[Example]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in examples.chunks(INFER_BATCH) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|e| e.values).collect();
        let probs = forward_batch(params, &inputs, Mode::Infer)?;
        for (p, e) in probs.iter().zip(chunk) {
            let mask: Vec<bool> = (0..p.len()).map(|t| t < e.valid_len).collect();
            let (s, k) = bce_sum(p, e.labels, &mask);
            sum += s;
            n += k;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// A subject's prepared windows. Folds never split a subject.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone)]
pub struct FoldModel {
    pub fold: usize,
    pub held_out: Vec<String>,
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Trains one model on `train`, early-stopping on `val`. Returns the
/// parameters from the epoch with the lowest validation loss.
pub fn train_model(
    train: &[Example],
    val: &[Example],
    net_cfg: &ConvNetConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<EpochRecord>, usize)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::arg("no training segments"));
    }
    let mut params = ModelParams::init(net_cfg, derive_seed(seed, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut opt = Adam::new(params.n_trainable(), cfg.lr0);
    let mut plateau = Plateau::new(cfg);
    let mut lr = cfg.lr0;
    let mut best = (params.clone(), 0);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut flat = params.trainable();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = idx.iter().map(|&i| train[i]).collect();
            let g = backward(&params, &batch)?;
            let n: usize = batch.iter().map(|e| e.valid_len).sum();
            loss_sum += g.loss * n as f64;
            seen += n;
            opt.lr = lr;
            opt.step(&mut flat, &g.grad);
            params.set_trainable(&flat);
            params.update_running_stats(&g.stats);
        }
        let train_loss = if seen == 0 { 0.0 } else { loss_sum / seen as f64 };
        let val_loss = evaluation_loss(&params, val)?;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::numeric(format!("loss diverged at epoch {epoch}")));
        }
        history.push(EpochRecord { epoch, train_loss, val_loss, lr });
        match plateau.observe(val_loss, &mut lr) {
            Progress::Improved => best = (params.clone(), epoch),
            Progress::Stalled => {}
            Progress::Stop => break,
        }
    }
    Ok((best.0, history, best.1))
}

/// Subject-wise k-fold training: one model per fold, each validated on the
/// subjects it never trained on.
pub fn train(subjects: &[Subject], cfg: &TrainConfig, net_cfg: &ConvNetConfig) -> Result<Vec<FoldModel>> {
    cfg.validate()?;
    net_cfg.validate()?;
    let assignment = assign_folds(subjects.len(), cfg.folds, cfg.seed)?;
    (0..cfg.folds)
        .map(|fold| {
            let mut train_ex = Vec::new();
            let mut val_ex = Vec::new();
            let mut held_out = Vec::new();
            for (s, &f) in subjects.iter().zip(&assignment) {
                if f == fold {
                    held_out.push(s.id.clone());
                    val_ex.extend(s.segments.iter().map(Example::from));
                } else {
                    train_ex.extend(s.segments.iter().map(Example::from));
                }
            }
            let (params, history, best_epoch) =
                train_model(&train_ex, &val_ex, net_cfg, cfg, derive_seed(cfg.seed, 100 + fold as u64))?;
            info!(
                "fold {fold}: {} epochs, best {best_epoch} (val {:.5})",
                history.len(),
                history.get(best_epoch.saturating_sub(1)).map_or(f64::NAN, |h| h.val_loss)
            );
            Ok(FoldModel { fold, held_out, params, history, best_epoch })
        })
        .collect()
}

/// Thresholded per-window decisions for a whole record.
pub fn predict_windows(params: &ModelParams, record: &EcgRecord, window: &WindowConfig) -> Result<Vec<WindowBits>> {
    let segments = prepare_segments(record, 0, window)?;
    let mut out = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(INFER_BATCH) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|s| s.values.as_slice()).collect();
        let probs = forward_batch(params, &inputs, Mode::Infer)?;
        for (p, s) in probs.iter().zip(chunk) {
            out.push(WindowBits {
                start: s.start,
                bits: predict_binary(p, params.config.threshold),
                valid_len: s.valid_len,
            });
        }
    }
    Ok(out)
}

/// Record-timeline prediction stream: windows OR-ed together.
pub fn predict_record(params: &ModelParams, record: &EcgRecord, window: &WindowConfig) -> Result<Vec<bool>> {
    aggregate_or(&predict_windows(params, record, window)?, record.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(seed: u64, n: usize, t: usize) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = (0..n).map(|_| (0..t).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ys = (0..n).map(|_| (0..t).map(|_| rng.random_bool(0.3)).collect()).collect();
        (xs, ys)
    }

    fn examples<'a>(xs: &'a [Vec<f64>], ys: &'a [Vec<bool>]) -> Vec<Example<'a>> {
        xs.iter().zip(ys).map(|(x, y)| Example { values: x, labels: y, valid_len: x.len() }).collect()
    }

    #[test]
    fn zero_network_outputs_half() {
        let p = ModelParams::zeros(&ConvNetConfig::default()).unwrap();
        let out = forward(&p, &[0.3; 300], Mode::Infer).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
        let out = forward(&p, &[0.3; 300], Mode::Train).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_bias() {
        let mut p = ModelParams::zeros(&ConvNetConfig::default()).unwrap();
        p.score_bias[0] = 10.0;
        let out = forward(&p, &[1.0; 300], Mode::Infer).unwrap();
        assert!(out.iter().all(|&v| (v - 0.99995).abs() < 1e-5));
    }

    #[test]
    fn output_length_matches_input() {
        for depth in [2, 3, 8] {
            let p = ModelParams::init(&ConvNetConfig::with_depth(depth), 1).unwrap();
            for len in [1, 4, 300] {
                assert_eq!(forward(&p, &vec![0.5; len], Mode::Infer).unwrap().len(), len);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = ModelParams::init(&ConvNetConfig::default(), 1).unwrap();
        p.layers[1].weight.pop();
        assert!(matches!(forward(&p, &[0.0; 300], Mode::Infer), Err(Error::Argument(_))));
        let p = ModelParams::init(&ConvNetConfig::default(), 1).unwrap();
        assert!(matches!(forward_batch(&p, &[&[0.0; 3], &[0.0; 4]], Mode::Infer), Err(Error::Argument(_))));
    }

    #[test]
    fn non_finite_is_numerical_error() {
        let p = ModelParams::init(&ConvNetConfig::default(), 1).unwrap();
        assert!(matches!(forward(&p, &[f64::NAN; 10], Mode::Infer), Err(Error::Numerical(_))));
    }

    #[test]
    fn loss_examples() {
        let labels = [true, false, true, false];
        let mask = [true; 4];
        let perfect = [1.0, 0.0, 1.0, 0.0];
        assert!(bce_loss(&perfect, &labels, &mask) < 1e-5);
        assert!((bce_loss(&[0.5; 4], &labels, &mask) - std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(bce_loss(&[0.2; 4], &labels, &[false; 4]), 0.0);
    }

    #[test]
    fn scoring_bias_gradient_on_zero_batch() {
        let p = ModelParams::zeros(&ConvNetConfig::default()).unwrap();
        let xs = vec![vec![0.0; 300]; 2];
        let ys = vec![vec![false; 300]; 2];
        let g = backward(&p, &examples(&xs, &ys)).unwrap();
        assert!((g.grad.last().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let p = ModelParams::init(&ConvNetConfig::default(), 3).unwrap();
        let (xs, ys) = random_batch(5, 2, 50);
        let single = backward(&p, &examples(&xs, &ys)).unwrap();
        let xs2 = [xs.clone(), xs].concat();
        let ys2 = [ys.clone(), ys].concat();
        let double = backward(&p, &examples(&xs2, &ys2)).unwrap();
        for (a, b) in single.grad.iter().zip(&double.grad) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn finite_difference_spot_check() {
        let mut p = ModelParams::init(&ConvNetConfig::default(), 9).unwrap();
        let (xs, ys) = random_batch(11, 4, 40);
        let ex = examples(&xs, &ys);
        let g = backward(&p, &ex).unwrap().grad;
        let mut flat = p.trainable();
        let h = 1e-4;
        for idx in (0..flat.len()).step_by(37) {
            let orig = flat[idx];
            flat[idx] = orig + h;
            p.set_trainable(&flat);
            let up = batch_loss(&p, &ex).unwrap();
            flat[idx] = orig - h;
            p.set_trainable(&flat);
            let down = batch_loss(&p, &ex).unwrap();
            flat[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[idx]).abs() / g[idx].abs().max(1.0) < 1e-3, "param {idx}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn masked_samples_do_not_contribute() {
        let p = ModelParams::init(&ConvNetConfig::default(), 2).unwrap();
        let (xs, mut ys) = random_batch(1, 1, 30);
        let ex = vec![Example { values: &xs[0], labels: &ys[0], valid_len: 20 }];
        let a = backward(&p, &ex).unwrap();
        for y in ys[0][20..].iter_mut() {
            *y = !*y;
        }
        let ex = vec![Example { values: &xs[0], labels: &ys[0], valid_len: 20 }];
        let b = backward(&p, &ex).unwrap();
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn thresholding_is_strict() {
        assert_eq!(predict_binary(&[0.4, 0.5, 0.6], 0.5), vec![false, false, true]);
        assert_eq!(predict_binary(&[0.5; 3], 0.5), vec![false; 3]);
        assert_eq!(predict_binary(&[0.1, 0.7], 0.0), vec![true; 2]);
    }

    #[test]
    fn infer_mode_is_pure() {
        let p = ModelParams::init(&ConvNetConfig::with_depth(4), 4).unwrap();
        let x: Vec<f64> = (0..300).map(|i| (i as f64 * 0.1).sin()).collect();
        assert_eq!(forward(&p, &x, Mode::Infer).unwrap(), forward(&p, &x, Mode::Infer).unwrap());
    }

    #[test]
    fn shift_covariance_with_circular_padding() {
        let cfg = ConvNetConfig { padding: Padding::Circular, depth: 3, ..Default::default() };
        let mut p = ModelParams::init(&cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in &mut p.layers {
            l.running_mean.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            l.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
        let x: Vec<f64> = (0..120).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = &forward_logits(&p, &[&x], Mode::Infer).unwrap()[0];
        for k in [1usize, 7, 50] {
            let shifted: Vec<f64> = (0..x.len()).map(|t| x[(t + x.len() - k) % x.len()]).collect();
            let out = &forward_logits(&p, &[&shifted], Mode::Infer).unwrap()[0];
            for t in 0..x.len() {
                assert!((out[(t + k) % x.len()] - base[t]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn parameter_value_roundtrip() {
        let p = ModelParams::init(&ConvNetConfig::default(), 6).unwrap();
        let mut q = ModelParams::zeros(&ConvNetConfig::default()).unwrap();
        q.set_all_values(&p.all_values()).unwrap();
        assert_eq!(p, q);
        assert!(q.set_all_values(&[1.0]).is_err());
    }

    #[test]
    fn one_epoch_history() {
        let (xs, ys) = random_batch(2, 6, 60);
        let ex = examples(&xs, &ys);
        let cfg = TrainConfig { max_epochs: 1, ..TrainConfig::cnn() };
        let (_, history, best) = train_model(&ex[..4], &ex[4..], &ConvNetConfig::default(), &cfg, 1).unwrap();
        assert_eq!(history.len(), 1);
        assert_eq!(history[0].lr, 0.01);
        assert_eq!(best, 1);
    }

    #[test]
    fn too_few_subjects() {
        let subjects = vec![Subject { id: "a".into(), segments: vec![] }; 3];
        assert!(matches!(train(&subjects, &TrainConfig::cnn(), &ConvNetConfig::default()), Err(Error::Argument(_))));
    }
}
