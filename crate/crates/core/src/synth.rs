//! Seeded synthetic ECG and prediction-stream corruption.
//!
//! Beats are Gaussian bumps (a narrow QRS with smaller P and T waves) at
//! jittered R-R intervals, over white noise and a slow sinusoidal wander.
//! Every R-peak sits exactly on a sample so annotations are exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::group_ones;
use crate::train::derive_seed;
use crate::wfdb::{Annotation, EcgRecord, Provenance, PIPELINE_HZ};

/// Shortest R-R interval the generator produces (250 ms).
const MIN_RR_SAMPLES: f64 = 25.0;
const WANDER_HZ: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub duration_s: f64,
    pub mean_hr_bpm: f64,
    /// Relative standard deviation of R-R intervals.
    pub hr_jitter: f64,
    /// QRS height in mV.
    pub qrs_amp: f64,
    /// Full QRS width (±3σ of the bump).
    pub qrs_width_ms: f64,
    /// T-wave height in mV; the P wave is half of it.
    pub p_t_amp: f64,
    pub noise_sigma: f64,
    pub baseline_wander_amp: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            duration_s: 60.0,
            mean_hr_bpm: 72.0,
            hr_jitter: 0.05,
            qrs_amp: 1.0,
            qrs_width_ms: 90.0,
            p_t_amp: 0.25,
            noise_sigma: 0.05,
            baseline_wander_amp: 0.15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    // Negated comparisons so NaN fails validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::arg("duration must be positive"));
        }
        if !(30.0..=220.0).contains(&self.mean_hr_bpm) {
            return Err(Error::arg(format!("heart rate {} outside 30..=220 bpm", self.mean_hr_bpm)));
        }
        if !(self.qrs_width_ms > 0.0) {
            return Err(Error::arg("QRS width must be positive"));
        }
        if self.hr_jitter < 0.0 || self.noise_sigma < 0.0 || self.baseline_wander_amp < 0.0 {
            return Err(Error::arg("jitter, noise and wander must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthRecord {
    /// Noisy signal with annotations at the true R-peaks.
    pub record: EcgRecord,
    /// The beats alone, without noise or wander.
    pub clean: Vec<f64>,
}

fn add_bump(signal: &mut [f64], center: f64, amp: f64, sigma: f64) {
    let reach = (4.0 * sigma).ceil() as isize;
    let c = center.round() as isize;
    for i in (c - reach).max(0)..(c + reach + 1).min(signal.len() as isize) {
        let x = i as f64 - center;
        signal[i as usize] += amp * (-(x * x) / (2.0 * sigma * sigma)).exp();
    }
}

pub fn gen_ecg(name: &str, spec: &SynthSpec) -> Result<SynthRecord> {
    spec.validate()?;
    let fs = PIPELINE_HZ;
    let n = (spec.duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rr_mean = 60.0 * fs / spec.mean_hr_bpm;

    let mut peaks = Vec::new();
    let mut t = rng.random::<f64>() * rr_mean;
    while (t.round() as usize) < n {
        peaks.push(t.round() as usize);
        let z: f64 = StandardNormal.sample(&mut rng);
        t += (rr_mean * (1.0 + spec.hr_jitter * z)).max(MIN_RR_SAMPLES).max(0.5 * rr_mean);
    }

    let mut clean = vec![0.0; n];
    let qrs_sigma = spec.qrs_width_ms / 1000.0 * fs / 6.0;
    for &p in &peaks {
        let c = p as f64;
        add_bump(&mut clean, c, spec.qrs_amp, qrs_sigma);
        add_bump(&mut clean, c - 0.16 * fs, 0.5 * spec.p_t_amp, 0.025 * fs);
        add_bump(&mut clean, c + 0.28 * fs, spec.p_t_amp, 0.05 * fs);
    }

    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let signal = clean
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let wander = spec.baseline_wander_amp * (std::f64::consts::TAU * WANDER_HZ * i as f64 / fs + phase).sin();
            v + wander + spec.noise_sigma * noise
        })
        .collect();

    Ok(SynthRecord {
        record: EcgRecord {
            name: name.to_string(),
            fs,
            signal,
            annotations: peaks.iter().map(|&p| Annotation::new(p, 'N')).collect(),
            source: Provenance::synthetic(n),
        },
        clean,
    })
}

/// `n` subjects with individually drawn heart rate and morphology around
/// `base`. Names are `<prefix>NNN`.
pub fn gen_corpus(prefix: &str, n: usize, base: &SynthSpec) -> Result<Vec<SynthRecord>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base.seed, i as u64));
            let spec = SynthSpec {
                mean_hr_bpm: rng.random_range(55.0..100.0),
                qrs_amp: base.qrs_amp * rng.random_range(0.7..1.4),
                qrs_width_ms: base.qrs_width_ms * rng.random_range(0.8..1.2),
                p_t_amp: base.p_t_amp * rng.random_range(0.5..1.4),
                seed: rng.random(),
                ..base.clone()
            };
            gen_ecg(&format!("{prefix}{i:03}"), &spec)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    /// Per-sample probability of inverting a bit.
    pub flip_prob: f64,
    /// Per-run probability of punching a 1-3 sample hole into a run of ones.
    pub dropout_prob: f64,
    /// Per-sample probability of starting a spurious 1-5 sample run.
    pub spur_prob: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self { flip_prob: 0.002, dropout_prob: 0.1, spur_prob: 0.003, seed: 0 }
    }
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self { flip_prob: 0.0, dropout_prob: 0.0, spur_prob: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip", self.flip_prob), ("dropout", self.dropout_prob), ("spur", self.spur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::arg(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorruptionStats {
    pub holes: usize,
    pub spurs: usize,
    pub flips: usize,
}

/// Holes first (on the original runs), then spurs, then flips.
pub fn corrupt_with_stats(bits: &[bool], spec: &CorruptionSpec) -> Result<(Vec<bool>, CorruptionStats)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = bits.to_vec();
    let mut stats = CorruptionStats::default();

    if spec.dropout_prob > 0.0 {
        for node in group_ones(bits) {
            if node.confidence >= 3 && rng.random_bool(spec.dropout_prob) {
                let hole = rng.random_range(1..=(node.confidence - 2).min(3));
                let at = rng.random_range(node.start_loc + 1..=node.end() - 1 - hole);
                out[at..at + hole].fill(false);
                stats.holes += 1;
            }
        }
    }
    if spec.spur_prob > 0.0 {
        for i in 0..out.len() {
            if rng.random_bool(spec.spur_prob) {
                let len = rng.random_range(1..=5usize);
                let end = (i + len).min(out.len());
                out[i..end].fill(true);
                stats.spurs += 1;
            }
        }
    }
    if spec.flip_prob > 0.0 {
        for b in out.iter_mut() {
            if rng.random_bool(spec.flip_prob) {
                *b = !*b;
                stats.flips += 1;
            }
        }
    }
    Ok((out, stats))
}

pub fn corrupt(bits: &[bool], spec: &CorruptionSpec) -> Result<Vec<bool>> {
    Ok(corrupt_with_stats(bits, spec)?.0)
}
