//! Optimizer and epoch bookkeeping shared by the CNN and GRU trainers.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Validation loss must drop by at least this much to count as progress.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub scheduler_patience: usize,
    pub scheduler_factor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub folds: usize,
}

impl TrainConfig {
    /// Convolutional segmenter schedule.
    pub fn cnn() -> Self {
        Self {
            lr0: 0.01,
            scheduler_patience: 5,
            scheduler_factor: 0.1,
            early_stop_patience: 7,
            max_epochs: 100,
            batch_size: 64,
            seed: 0,
            folds: 5,
        }
    }

    /// Recurrent post-processor schedule: smaller step, longer budget.
    pub fn gru() -> Self {
        Self { lr0: 0.001, max_epochs: 200, batch_size: 32, ..Self::cnn() }
    }

    // Negated comparisons so NaN fails validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return Err(Error::arg(format!("scheduler factor {} not in (0, 1)", self.scheduler_factor)));
        }
        if self.early_stop_patience <= self.scheduler_patience {
            return Err(Error::arg("early-stop patience must exceed scheduler patience"));
        }
        if !(self.lr0 > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.folds < 2 {
            return Err(Error::arg("lr0, batch_size and max_epochs must be positive, folds >= 2"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::cnn()
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Reduce-on-plateau plus early stopping, both driven by validation loss.
/// Counters reset whenever the loss improves.
#[derive(Debug, Clone)]
pub struct Plateau {
    best: f64,
    stalled: usize,
    since_reduction: usize,
    scheduler_patience: usize,
    factor: f64,
    early_stop_patience: usize,
}

impl Plateau {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            best: f64::INFINITY,
            stalled: 0,
            since_reduction: 0,
            scheduler_patience: cfg.scheduler_patience,
            factor: cfg.scheduler_factor,
            early_stop_patience: cfg.early_stop_patience,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64, lr: &mut f64) -> Progress {
        if val_loss < self.best - MIN_IMPROVEMENT {
            self.best = val_loss;
            self.stalled = 0;
            self.since_reduction = 0;
            return Progress::Improved;
        }
        self.stalled += 1;
        self.since_reduction += 1;
        if self.since_reduction >= self.scheduler_patience {
            *lr *= self.factor;
            self.since_reduction = 0;
        }
        if self.stalled >= self.early_stop_patience {
            Progress::Stop
        } else {
            Progress::Stalled
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{:.9},{:.9},{:e}", r.epoch, r.train_loss, r.val_loss, r.lr);
    }
    out
}

/// Seeded subject-to-fold assignment: shuffle, then deal round-robin so
/// fold sizes differ by at most one.
pub fn assign_folds(n_subjects: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds == 0 || n_subjects < folds {
        return Err(Error::arg(format!("{n_subjects} subject(s) cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n_subjects];
    for (pos, subject) in order.into_iter().enumerate() {
        assignment[subject] = pos % folds;
    }
    Ok(assignment)
}

/// Derives an independent stream seed for a sub-task.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_reduces_then_stops() {
        let cfg = TrainConfig::cnn();
        let mut p = Plateau::new(&cfg);
        let mut lr = cfg.lr0;
        assert_eq!(p.observe(1.0, &mut lr), Progress::Improved);
        let mut verdicts = Vec::new();
        for _ in 0..7 {
            verdicts.push(p.observe(1.0, &mut lr));
        }
        assert_eq!(verdicts[..6], [Progress::Stalled; 6]);
        assert_eq!(verdicts[6], Progress::Stop);
        assert!((lr - 0.001).abs() < 1e-15);
    }

    #[test]
    fn improvement_resets_counters() {
        let cfg = TrainConfig::cnn();
        let mut p = Plateau::new(&cfg);
        let mut lr = cfg.lr0;
        p.observe(1.0, &mut lr);
        for _ in 0..4 {
            p.observe(1.0, &mut lr);
        }
        // below the improvement threshold
        assert_eq!(p.observe(1.0 - 1e-7, &mut lr), Progress::Stalled);
        assert!((lr - 0.001).abs() < 1e-15);
        assert_eq!(p.observe(0.5, &mut lr), Progress::Improved);
        for _ in 0..6 {
            assert_eq!(p.observe(0.5, &mut lr), Progress::Stalled);
        }
        assert_eq!(p.observe(0.5, &mut lr), Progress::Stop);
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let a = assign_folds(10, 5, 42).unwrap();
        assert_eq!(a, assign_folds(10, 5, 42).unwrap());
        for f in 0..5 {
            assert_eq!(a.iter().filter(|&&x| x == f).count(), 2);
        }
        assert!(assign_folds(3, 5, 0).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::cnn().validate().is_ok());
        assert!(TrainConfig { scheduler_factor: 1.0, ..TrainConfig::cnn() }.validate().is_err());
        assert!(TrainConfig { early_stop_patience: 5, ..TrainConfig::cnn() }.validate().is_err());
    }
}
