//! Rule-based clean-up of a binary prediction stream.
//!
//! Runs of ones become [`QrsNode`]s. Three escalating levels then act on
//! the node list:
//!
//! * salt-and-pepper: merge runs separated by at most [`MERGE_GAP`] zeros;
//! * moderate: additionally drop nodes shorter than [`MIN_CONFIDENCE`];
//! * advanced: additionally drop a node closer than [`MIN_RR`] samples to its
//!   predecessor unless the signal's first difference backs it up.
//!
//! All thresholds are in samples at 100 Hz.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest zero gap bridged by the salt-and-pepper filter.
pub const MERGE_GAP: usize = 3;
/// Shortest node kept by the moderate level (64 ms).
pub const MIN_CONFIDENCE: usize = 6;
/// Minimum R-R distance between candidate peaks (200 ms).
pub const MIN_RR: usize = 20;
/// A derivative sample supports a node when it exceeds this fraction of the
/// local maximum magnitude.
pub const SUPPORT_FACTOR: f64 = 0.25;
/// Half-width of the derivative context around a node's peak (1 s total).
pub const SUPPORT_CONTEXT: usize = 50;

/// A run of ones: where it starts, how long it is, and its midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrsNode {
    pub start_loc: usize,
    pub confidence: usize,
    pub q_loc: usize,
}

impl QrsNode {
    pub fn new(start_loc: usize, confidence: usize) -> Self {
        Self { start_loc, confidence, q_loc: start_loc + confidence / 2 }
    }

    /// One past the last sample.
    pub fn end(&self) -> usize {
        self.start_loc + self.confidence
    }
}

pub fn group_ones(bits: &[bool]) -> Vec<QrsNode> {
    let mut nodes = Vec::new();
    let mut start = None;
    for (i, &b) in bits.iter().enumerate() {
        match (b, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                nodes.push(QrsNode::new(s, i - s));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        nodes.push(QrsNode::new(s, bits.len() - s));
    }
    nodes
}

/// Paints nodes back onto a zero stream of length `len`.
pub fn paint(nodes: &[QrsNode], len: usize) -> Vec<bool> {
    let mut bits = vec![false; len];
    for n in nodes {
        for b in bits.iter_mut().take(n.end()).skip(n.start_loc) {
            *b = true;
        }
    }
    bits
}

fn check_sorted(nodes: &[QrsNode]) -> Result<()> {
    if let Some(w) = nodes.windows(2).find(|w| w[1].start_loc < w[0].end()) {
        return Err(Error::arg(format!(
            "nodes must be sorted and disjoint: [{}, {}) then [{}, {})",
            w[0].start_loc,
            w[0].end(),
            w[1].start_loc,
            w[1].end()
        )));
    }
    if nodes.iter().any(|n| n.confidence == 0) {
        return Err(Error::arg("node with zero confidence"));
    }
    Ok(())
}

/// Merges neighbours separated by at most [`MERGE_GAP`] zeros. The merged
/// node spans both runs and the gap, and is itself compared with the next.
pub fn salt_pepper(nodes: &[QrsNode]) -> Result<Vec<QrsNode>> {
    check_sorted(nodes)?;
    let mut out: Vec<QrsNode> = Vec::with_capacity(nodes.len());
    for &node in nodes {
        match out.last_mut() {
            Some(cur) if node.start_loc - cur.end() <= MERGE_GAP => {
                *cur = QrsNode::new(cur.start_loc, node.end() - cur.start_loc);
            }
            _ => out.push(node),
        }
    }
    Ok(out)
}

/// Drops nodes shorter than [`MIN_CONFIDENCE`].
pub fn moderate(nodes: &[QrsNode]) -> Vec<QrsNode> {
    nodes.iter().copied().filter(|n| n.confidence >= MIN_CONFIDENCE).collect()
}

/// First difference `d[i] = x[i + 1] - x[i]`.
pub fn derivative(signal: &[f64]) -> Vec<f64> {
    signal.windows(2).map(|w| w[1] - w[0]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvancedConfig {
    pub min_rr: usize,
    pub support_factor: f64,
    pub context_half_width: usize,
    /// Require support from every node, not only from the right node of a
    /// too-close pair.
    pub strict: bool,
}

impl Default for AdvancedConfig {
    fn default() -> Self {
        Self { min_rr: MIN_RR, support_factor: SUPPORT_FACTOR, context_half_width: SUPPORT_CONTEXT, strict: false }
    }
}

/// Number of samples under the node whose derivative magnitude exceeds
/// `support_factor` times the largest magnitude within the context window
/// `[q_loc - half, q_loc + half)`.
pub fn support_score(node: &QrsNode, derivative: &[f64], cfg: &AdvancedConfig) -> usize {
    let n = derivative.len();
    if n == 0 {
        return 0;
    }
    let lo = node.q_loc.saturating_sub(cfg.context_half_width).min(n);
    let hi = (node.q_loc + cfg.context_half_width).min(n);
    let peak = derivative[lo..hi].iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let threshold = cfg.support_factor * peak;
    derivative[node.start_loc.min(n)..node.end().min(n)].iter().filter(|d| d.abs() > threshold).count()
}

/// R-R filter. Scanning left to right, a node closer than `min_rr` to the
/// current node survives only with a support score of at least one; a
/// survivor becomes the current node, a dropped node does not.
pub fn advanced(nodes: &[QrsNode], derivative: &[f64], cfg: &AdvancedConfig) -> Vec<QrsNode> {
    let supported = |n: &QrsNode| support_score(n, derivative, cfg) >= 1;
    let mut out: Vec<QrsNode> = Vec::with_capacity(nodes.len());
    for node in nodes {
        if cfg.strict && !supported(node) {
            continue;
        }
        match out.last() {
            Some(cur) if node.q_loc - cur.q_loc < cfg.min_rr && !supported(node) => {}
            _ => out.push(*node),
        }
    }
    out
}

/// Candidate R-peak of every node.
pub fn localize(nodes: &[QrsNode]) -> Vec<usize> {
    nodes.iter().map(|n| n.q_loc).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Salt,
    Moderate,
    Advanced,
}

/// Runs the chain up to `level` on a record-timeline stream.
pub fn postprocess(bits: &[bool], signal: &[f64], level: Level, cfg: &AdvancedConfig) -> Result<Vec<QrsNode>> {
    let nodes = salt_pepper(&group_ones(bits))?;
    Ok(match level {
        Level::Salt => nodes,
        Level::Moderate => moderate(&nodes),
        Level::Advanced => advanced(&moderate(&nodes), &derivative(signal), cfg),
    })
}

/// `start_loc,confidence,q_loc,support_score` per node.
pub fn nodes_csv(nodes: &[QrsNode], derivative: &[f64], cfg: &AdvancedConfig) -> String {
    let mut out = String::from("start_loc,confidence,q_loc,support_score\n");
    for n in nodes {
        let _ = writeln!(out, "{},{},{},{}", n.start_loc, n.confidence, n.q_loc, support_score(n, derivative, cfg));
    }
    out
}

/// One index per line.
pub fn peaks_text(peaks: &[usize]) -> String {
    peaks.iter().map(|p| format!("{p}\n")).collect()
}
