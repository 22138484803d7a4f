//! Stacked GRU that learns to repair binary prediction streams.
//!
//! The stream is cut into consecutive windows of `seq_len` samples (the last
//! one may be shorter) and each window is processed from a zero hidden
//! state. At every step the top hidden state goes through a linear head and
//! a sigmoid, giving the probability that the sample is inside a QRS region.
//!
//! Cell, per layer:
//!
//! ```text
//! z  = σ(Wz x + Uz h + bz)
//! r  = σ(Wr x + Ur h + br)
//! h~ = tanh(Wh x + Uh (r ⊙ h) + bh)
//! h' = (1 − z) ⊙ h + z ⊙ h~
//! ```

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convnet::{bce_loss, predict_record, sigmoid, ModelParams, PROB_CLAMP};
use crate::error::{Error, Result};
use crate::preprocess::{make_label_stream, WindowConfig};
use crate::synth::{corrupt, CorruptionSpec};
use crate::train::{derive_seed, Adam, EpochRecord, Plateau, Progress, TrainConfig};
use crate::wfdb::{EcgRecord, PIPELINE_HZ};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GruConfig {
    pub hidden_layers: usize,
    /// Window length in seconds at the pipeline rate.
    pub seq_len_s: usize,
    pub hidden_size: usize,
    pub threshold: f64,
}

impl Default for GruConfig {
    fn default() -> Self {
        Self { hidden_layers: 1, seq_len_s: 1, hidden_size: 32, threshold: 0.5 }
    }
}

impl GruConfig {
    pub fn seq_len(&self) -> usize {
        self.seq_len_s * PIPELINE_HZ as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_size == 0 || self.seq_len_s == 0 {
            return Err(Error::arg("GRU layers, hidden size and sequence length must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::arg(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruLayer {
    pub input_size: usize,
    pub hidden_size: usize,
    /// Input weights, `[hidden][input]`.
    pub w_z: Vec<f64>,
    pub w_r: Vec<f64>,
    pub w_h: Vec<f64>,
    /// Recurrent weights, `[hidden][hidden]`.
    pub u_z: Vec<f64>,
    pub u_r: Vec<f64>,
    pub u_h: Vec<f64>,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
}

impl GruLayer {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let (wi, wh) = (hidden_size * input_size, hidden_size * hidden_size);
        Self {
            input_size,
            hidden_size,
            w_z: vec![0.0; wi],
            w_r: vec![0.0; wi],
            w_h: vec![0.0; wi],
            u_z: vec![0.0; wh],
            u_r: vec![0.0; wh],
            u_h: vec![0.0; wh],
            b_z: vec![0.0; hidden_size],
            b_r: vec![0.0; hidden_size],
            b_h: vec![0.0; hidden_size],
        }
    }

    fn parts(&self) -> [&Vec<f64>; 9] {
        [&self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h, &self.u_h, &self.b_h]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }

    fn check(&self) -> Result<()> {
        let (wi, wh, h) = (self.hidden_size * self.input_size, self.hidden_size * self.hidden_size, self.hidden_size);
        let expected = [wi, wh, h, wi, wh, h, wi, wh, h];
        if self.parts().iter().zip(expected).any(|(p, n)| p.len() != n) {
            return Err(Error::arg("GRU layer buffers do not match its dimensions"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub config: GruConfig,
    pub layers: Vec<GruLayer>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl GruParams {
    pub fn zeros(config: &GruConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let layers = (0..config.hidden_layers).map(|l| GruLayer::zeros(if l == 0 { 1 } else { h }, h)).collect();
        Ok(Self { config: config.clone(), layers, head_w: vec![0.0; h], head_b: vec![0.0] })
    }

    /// Uniform `±1/sqrt(hidden_size)` everywhere.
    pub fn init(config: &GruConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let bound = 1.0 / (config.hidden_size as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = p.flat();
        flat.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        p.set_flat(&flat)?;
        Ok(p)
    }

    /// Layer by layer (`w_z u_z b_z w_r u_r b_r w_h u_h b_h`), then the head.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for p in l.parts() {
                out.extend_from_slice(p);
            }
        }
        out.extend_from_slice(&self.head_w);
        out.extend_from_slice(&self.head_b);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::arg(format!("expected {} GRU parameters, got {}", self.n_params(), flat.len())));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for p in l.parts_mut() {
                let n = p.len();
                p.copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        let h = self.head_w.len();
        self.head_w.copy_from_slice(&flat[offset..offset + h]);
        self.head_b.copy_from_slice(&flat[offset + h..]);
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().flat_map(|l| l.parts().map(|p| p.len())).sum::<usize>() + self.head_w.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let h = self.config.hidden_size;
        if self.layers.len() != self.config.hidden_layers {
            return Err(Error::arg("GRU layer count does not match config"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.hidden_size != h || l.input_size != if i == 0 { 1 } else { h } {
                return Err(Error::arg(format!("GRU layer {i} has wrong dimensions")));
            }
            l.check()?;
        }
        if self.head_w.len() != h || self.head_b.len() != 1 {
            return Err(Error::arg("GRU head has wrong dimensions"));
        }
        if self.flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite GRU parameter"));
        }
        Ok(())
    }
}

/// `out = M v` for row-major `M` of shape `[out.len()][v.len()]`, accumulated.
fn matvec_add(out: &mut [f64], m: &[f64], v: &[f64]) {
    let cols = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Mᵀ g`.
fn matvec_t_add(out: &mut [f64], m: &[f64], g: &[f64]) {
    let cols = out.len();
    for (gj, row) in g.iter().zip(m.chunks_exact(cols)) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += gj * a;
        }
    }
}

/// `M += g vᵀ`.
fn outer_add(m: &mut [f64], g: &[f64], v: &[f64]) {
    let cols = v.len();
    for (gj, row) in g.iter().zip(m.chunks_exact_mut(cols)) {
        for (a, vi) in row.iter_mut().zip(v) {
            *a += gj * vi;
        }
    }
}

struct Step {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    rh: Vec<f64>,
}

fn cell_forward(layer: &GruLayer, x: Vec<f64>, h_prev: Vec<f64>) -> (Vec<f64>, Step) {
    let n = layer.hidden_size;
    let mut z = layer.b_z.clone();
    matvec_add(&mut z, &layer.w_z, &x);
    matvec_add(&mut z, &layer.u_z, &h_prev);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut r = layer.b_r.clone();
    matvec_add(&mut r, &layer.w_r, &x);
    matvec_add(&mut r, &layer.u_r, &h_prev);
    r.iter_mut().for_each(|v| *v = sigmoid(*v));
    let rh: Vec<f64> = r.iter().zip(&h_prev).map(|(a, b)| a * b).collect();
    let mut cand = layer.b_h.clone();
    matvec_add(&mut cand, &layer.w_h, &x);
    matvec_add(&mut cand, &layer.u_h, &rh);
    cand.iter_mut().for_each(|v| *v = v.tanh());
    let h: Vec<f64> = (0..n).map(|j| (1.0 - z[j]) * h_prev[j] + z[j] * cand[j]).collect();
    (h, Step { x, h_prev, z, r, cand, rh })
}

/// Accumulates parameter gradients into `grad`; returns `(dx, dh_prev)`.
fn cell_backward(layer: &GruLayer, s: &Step, dh: &[f64], grad: &mut GruLayer) -> (Vec<f64>, Vec<f64>) {
    let n = layer.hidden_size;
    let mut da_z = vec![0.0; n];
    let mut da_h = vec![0.0; n];
    let mut dh_prev = vec![0.0; n];
    for j in 0..n {
        da_z[j] = dh[j] * (s.cand[j] - s.h_prev[j]) * s.z[j] * (1.0 - s.z[j]);
        da_h[j] = dh[j] * s.z[j] * (1.0 - s.cand[j] * s.cand[j]);
        dh_prev[j] = dh[j] * (1.0 - s.z[j]);
    }
    let mut drh = vec![0.0; n];
    matvec_t_add(&mut drh, &layer.u_h, &da_h);
    let da_r: Vec<f64> = (0..n).map(|j| drh[j] * s.h_prev[j] * s.r[j] * (1.0 - s.r[j])).collect();
    for j in 0..n {
        dh_prev[j] += drh[j] * s.r[j];
    }
    matvec_t_add(&mut dh_prev, &layer.u_z, &da_z);
    matvec_t_add(&mut dh_prev, &layer.u_r, &da_r);

    let mut dx = vec![0.0; layer.input_size];
    matvec_t_add(&mut dx, &layer.w_z, &da_z);
    matvec_t_add(&mut dx, &layer.w_r, &da_r);
    matvec_t_add(&mut dx, &layer.w_h, &da_h);

    outer_add(&mut grad.w_z, &da_z, &s.x);
    outer_add(&mut grad.w_r, &da_r, &s.x);
    outer_add(&mut grad.w_h, &da_h, &s.x);
    outer_add(&mut grad.u_z, &da_z, &s.h_prev);
    outer_add(&mut grad.u_r, &da_r, &s.h_prev);
    outer_add(&mut grad.u_h, &da_h, &s.rh);
    for j in 0..n {
        grad.b_z[j] += da_z[j];
        grad.b_r[j] += da_r[j];
        grad.b_h[j] += da_h[j];
    }
    (dx, dh_prev)
}

/// One step of one layer.
pub fn gru_cell(x: &[f64], h_prev: &[f64], layer: &GruLayer) -> Result<Vec<f64>> {
    layer.check()?;
    if x.len() != layer.input_size || h_prev.len() != layer.hidden_size {
        return Err(Error::arg("GRU cell input or state has the wrong length"));
    }
    let (h, _) = cell_forward(layer, x.to_vec(), h_prev.to_vec());
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite GRU state"));
    }
    Ok(h)
}

struct WindowPass {
    steps: Vec<Vec<Step>>,
    tops: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn window_forward(params: &GruParams, input: &[f64], keep: bool) -> WindowPass {
    let h_size = params.config.hidden_size;
    let mut state: Vec<Vec<f64>> = vec![vec![0.0; h_size]; params.layers.len()];
    let mut steps = Vec::with_capacity(if keep { input.len() } else { 0 });
    let mut tops = Vec::with_capacity(if keep { input.len() } else { 0 });
    let mut logits = Vec::with_capacity(input.len());
    for &v in input {
        let mut x = vec![v];
        let mut step_caches = Vec::with_capacity(params.layers.len());
        for (layer, h) in params.layers.iter().zip(state.iter_mut()) {
            let (h_new, cache) = cell_forward(layer, x, std::mem::take(h));
            *h = h_new.clone();
            x = h_new;
            if keep {
                step_caches.push(cache);
            }
        }
        logits.push(params.head_b[0] + params.head_w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>());
        if keep {
            steps.push(step_caches);
            tops.push(x);
        }
    }
    WindowPass { steps, tops, logits }
}

fn as_input(bits: &[bool]) -> Vec<f64> {
    bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Per-sample probabilities for a whole stream, window by window.
pub fn forward_stream(params: &GruParams, bits: &[bool]) -> Result<Vec<f64>> {
    params.validate()?;
    let mut out = Vec::with_capacity(bits.len());
    for window in bits.chunks(params.config.seq_len()) {
        let pass = window_forward(params, &as_input(window), false);
        out.extend(pass.logits.iter().map(|&l| sigmoid(l)));
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite GRU output"));
    }
    Ok(out)
}

/// Forward pass thresholded strictly above `config.threshold`.
pub fn repair_stream(params: &GruParams, bits: &[bool]) -> Result<Vec<bool>> {
    let th = params.config.threshold;
    Ok(forward_stream(params, bits)?.into_iter().map(|p| p > th).collect())
}

/// An input window and its target, both the same length.
#[derive(Debug, Clone, Copy)]
pub struct SeqExample<'a> {
    pub input: &'a [bool],
    pub target: &'a [bool],
}

/// Mean per-step cross-entropy over a batch of windows.
pub fn batch_loss(params: &GruParams, batch: &[SeqExample]) -> Result<f64> {
    params.validate()?;
    let (mut probs, mut labels) = (Vec::new(), Vec::new());
    for ex in batch {
        let pass = window_forward(params, &as_input(ex.input), false);
        probs.extend(pass.logits.iter().map(|&l| sigmoid(l)));
        labels.extend_from_slice(ex.target);
    }
    let mask = vec![true; probs.len()];
    Ok(bce_loss(&probs, &labels, &mask))
}

/// Loss and its gradient in [`GruParams::flat`] order (backpropagation
/// through time within each window).
pub fn backward(params: &GruParams, batch: &[SeqExample]) -> Result<(f64, Vec<f64>)> {
    params.validate()?;
    if batch.iter().any(|e| e.input.len() != e.target.len()) {
        return Err(Error::arg("GRU input and target windows differ in length"));
    }
    let total: usize = batch.iter().map(|e| e.input.len()).sum();
    let scale = if total == 0 { 0.0 } else { 1.0 / total as f64 };
    let mut grads = GruParams::zeros(&params.config)?;
    let n_layers = params.layers.len();
    let h_size = params.config.hidden_size;
    let mut loss = 0.0;

    for ex in batch {
        let pass = window_forward(params, &as_input(ex.input), true);
        let mut dh_next: Vec<Vec<f64>> = vec![vec![0.0; h_size]; n_layers];
        for t in (0..ex.input.len()).rev() {
            let p = sigmoid(pass.logits[t]);
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let y = ex.target[t];
            loss -= if y { pc.ln() } else { (1.0 - pc).ln() };
            let dlogit = if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                0.0
            } else {
                (p - if y { 1.0 } else { 0.0 }) * scale
            };
            grads.head_b[0] += dlogit;
            for (g, h) in grads.head_w.iter_mut().zip(&pass.tops[t]) {
                *g += dlogit * h;
            }
            let mut from_above: Vec<f64> = params.head_w.iter().map(|w| w * dlogit).collect();
            for l in (0..n_layers).rev() {
                let dh: Vec<f64> = from_above.iter().zip(&dh_next[l]).map(|(a, b)| a + b).collect();
                let (dx, dh_prev) = cell_backward(&params.layers[l], &pass.steps[t][l], &dh, &mut grads.layers[l]);
                dh_next[l] = dh_prev;
                from_above = dx;
            }
        }
    }
    let grad = grads.flat();
    if grad.iter().any(|v| !v.is_finite()) || !loss.is_finite() {
        return Err(Error::numeric("non-finite GRU gradient"));
    }
    Ok((loss * scale, grad))
}

/// A CNN prediction stream paired with the label stream it should become.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPair {
    pub input: Vec<bool>,
    pub target: Vec<bool>,
}

/// Training pairs for the repair network: each record's CNN stream with
/// synthetic corruption on top, against its label stream. Record `k` is
/// corrupted with seed `derive_seed(corruption.seed, k)`.
pub fn repair_corpus(
    cnn: &ModelParams,
    records: &[EcgRecord],
    window: &WindowConfig,
    half_width: usize,
    corruption: &CorruptionSpec,
) -> Result<Vec<StreamPair>> {
    records
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let bits = predict_record(cnn, r, window)?;
            let spec = CorruptionSpec { seed: derive_seed(corruption.seed, k as u64), ..corruption.clone() };
            Ok(StreamPair { input: corrupt(&bits, &spec)?, target: make_label_stream(r, half_width) })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GruModel {
    pub params: GruParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Cuts aligned streams into `seq_len` windows and trains on them. One
/// seeded fold of windows (`1 / train.folds`) is held out for validation.
pub fn train_gru(streams: &[StreamPair], config: &GruConfig, train: &TrainConfig) -> Result<GruModel> {
    config.validate()?;
    train.validate()?;
    if let Some(s) = streams.iter().find(|s| s.input.len() != s.target.len()) {
        return Err(Error::arg(format!("stream lengths differ: input {} vs target {}", s.input.len(), s.target.len())));
    }
    let seq = config.seq_len();
    let mut windows: Vec<SeqExample> = streams
        .iter()
        .flat_map(|s| s.input.chunks(seq).zip(s.target.chunks(seq)))
        .map(|(input, target)| SeqExample { input, target })
        .collect();
    if windows.len() < 2 {
        return Err(Error::arg("need at least two windows to train and validate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, 7));
    windows.shuffle(&mut rng);
    let n_val = (windows.len() / train.folds).max(1);
    let (val, train_windows) = windows.split_at(n_val);
    let mut train_windows = train_windows.to_vec();

    let mut params = GruParams::init(config, derive_seed(train.seed, 8))?;
    let mut flat = params.flat();
    let mut opt = Adam::new(flat.len(), train.lr0);
    let mut plateau = Plateau::new(train);
    let mut lr = train.lr0;
    let mut best = (params.clone(), 0);
    let mut history = Vec::new();

    for epoch in 1..=train.max_epochs {
        train_windows.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in train_windows.chunks(train.batch_size) {
            let (loss, grad) = backward(&params, batch)?;
            let n: usize = batch.iter().map(|e| e.input.len()).sum();
            loss_sum += loss * n as f64;
            seen += n;
            opt.lr = lr;
            opt.step(&mut flat, &grad);
            params.set_flat(&flat)?;
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let val_loss = batch_loss(&params, val)?;
        if !val_loss.is_finite() {
            return Err(Error::numeric(format!("GRU loss diverged at epoch {epoch}")));
        }
        history.push(EpochRecord { epoch, train_loss, val_loss, lr });
        match plateau.observe(val_loss, &mut lr) {
            Progress::Improved => best = (params.clone(), epoch),
            Progress::Stalled => {}
            Progress::Stop => break,
        }
    }
    Ok(GruModel { params: best.0, history, best_epoch: best.1 })
}
