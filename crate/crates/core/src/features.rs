//! Per-node feature vectors for the selection policy.
//!
//! Every node is summarized by the same 19 values regardless of problem
//! size, so whole trees batch into one matrix. Raw features are clamped to
//! `[-10, 10]` (infinities included) and only then standardized with frozen
//! empirical statistics; the clamp-then-standardize order is part of the
//! contract.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnb::{compute_gap, BnbNode, BnbTree, Budget, NodeSelector};
use crate::lp::{LinearProgram, INTEGRALITY_TOL};

/// Width of the feature vector.
pub const FEATURE_DIM: usize = 19;

/// Index layout of the raw feature vector:
/// `[cuts, separation_rounds, gap, lp_iters, mean_int_gap, pct_integral,
///   hist0..hist9, depth, lowerbound, estimate]`.
const IDX_GAP: usize = 2;
const IDX_HIST: usize = 6;
const IDX_DEPTH: usize = 16;

/// Standardized 19-dimensional feature vector of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures(pub [f64; FEATURE_DIM]);

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("insufficient data: need at least 2 rows, got {0}")]
    InsufficientData(usize),
}

/// Frozen standardization statistics, fitted once on warm-up data and then
/// applied identically at training and inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Pass-through statistics (zero mean, unit variance).
    pub fn identity() -> Self {
        FeatureStats {
            mean: vec![0.0; FEATURE_DIM],
            std: vec![1.0; FEATURE_DIM],
        }
    }

    pub fn standardize(&self, raw: [f64; FEATURE_DIM]) -> NodeFeatures {
        let mut out = [0.0; FEATURE_DIM];
        for i in 0..FEATURE_DIM {
            out[i] = (raw[i] - self.mean[i]) / self.std[i];
        }
        NodeFeatures(out)
    }
}

/// Histogram of the fractional parts of integer-flagged variables over ten
/// even buckets, normalized to sum to one (all zero without integer vars).
pub fn fractional_histogram(solution: &[f64], is_integer: &[bool]) -> [f64; 10] {
    let mut hist = [0.0; 10];
    let mut count = 0usize;
    for (x, &flag) in solution.iter().zip(is_integer) {
        if !flag {
            continue;
        }
        let frac = x - x.floor();
        let bucket = ((frac * 10.0).floor() as usize).min(9);
        hist[bucket] += 1.0;
        count += 1;
    }
    if count > 0 {
        for h in &mut hist {
            *h /= count as f64;
        }
    }
    hist
}

/// Mean distance to integrality and the fraction of integer variables that
/// already sit on an integer, over the integer-flagged variables.
pub fn integrality_stats(solution: &[f64], is_integer: &[bool]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut integral = 0usize;
    let mut count = 0usize;
    for (x, &flag) in solution.iter().zip(is_integer) {
        if !flag {
            continue;
        }
        let frac = x - x.floor();
        let dist = frac.min(1.0 - frac);
        sum += dist;
        if dist <= INTEGRALITY_TOL {
            integral += 1;
        }
        count += 1;
    }
    if count == 0 {
        (0.0, 0.0)
    } else {
        (sum / count as f64, integral as f64 / count as f64)
    }
}

/// Node estimate: LP bound plus the objective-weighted cost of rounding
/// every fractional integer variable to its nearest integer.
pub fn estimate_from_solution(
    lp_bound: f64,
    solution: &[f64],
    is_integer: &[bool],
    objective: &[f64],
) -> f64 {
    let mut est = lp_bound;
    for (j, &flag) in is_integer.iter().enumerate() {
        if !flag {
            continue;
        }
        let frac = solution[j] - solution[j].floor();
        let dist = frac.min(1.0 - frac);
        if dist > INTEGRALITY_TOL {
            est += dist * objective[j].abs();
        }
    }
    est
}

/// The per-node inputs of [`extract_raw`]; static once a node is processed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatureSource {
    pub lp_iterations: usize,
    pub frac_hist: [f64; 10],
    pub mean_integrality_gap: f64,
    pub pct_integral: f64,
    pub depth: usize,
    pub lp_bound: f64,
    pub estimate: f64,
}

impl NodeFeatureSource {
    pub fn from_node(node: &BnbNode) -> Self {
        NodeFeatureSource {
            lp_iterations: node.lp_iterations,
            frac_hist: node.stats.frac_hist,
            mean_integrality_gap: node.stats.mean_integrality_gap,
            pct_integral: node.stats.pct_integral,
            depth: node.depth,
            lp_bound: node.lp_bound,
            estimate: node.estimate,
        }
    }
}

/// Tree-level inputs shared by every node at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeGlobals {
    pub primal_bound: f64,
    pub dual_bound: f64,
    /// Total nodes created so far (not just open ones).
    pub total_nodes: usize,
    /// `num_vars + num_rows` of the instance.
    pub problem_size: usize,
}

impl TreeGlobals {
    pub fn from_tree(tree: &BnbTree) -> Self {
        TreeGlobals {
            primal_bound: tree.primal_bound,
            dual_bound: tree.dual_bound,
            total_nodes: tree.nodes.len(),
            problem_size: tree.instance.num_vars + tree.instance.num_rows(),
        }
    }
}

fn clamp10(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-10.0, 10.0)
    }
}

/// Raw (clamped, unstandardized) feature vector of one node.
pub fn extract_raw(src: &NodeFeatureSource, g: &TreeGlobals) -> [f64; FEATURE_DIM] {
    // The bound normalizer is min(primal, dual); zero and infinite values
    // fall back to a guard so ratios stay well-defined.
    let denom = {
        let d = g.primal_bound.min(g.dual_bound);
        if !d.is_finite() {
            1.0
        } else if d.abs() < 1e-9 {
            if d < 0.0 {
                -1e-9
            } else {
                1e-9
            }
        } else {
            d
        }
    };
    let mut raw = [0.0; FEATURE_DIM];
    raw[0] = 0.0; // cuts applied: engine runs no separation
    raw[1] = 0.0; // separation rounds
    raw[IDX_GAP] = compute_gap(g.primal_bound, g.dual_bound);
    raw[3] = src.lp_iterations as f64 / g.problem_size.max(1) as f64;
    raw[4] = src.mean_integrality_gap;
    raw[5] = src.pct_integral;
    raw[IDX_HIST..IDX_HIST + 10].copy_from_slice(&src.frac_hist);
    raw[IDX_DEPTH] = src.depth as f64 / g.total_nodes.max(1) as f64;
    raw[17] = src.lp_bound / denom;
    raw[18] = src.estimate / denom;
    for v in &mut raw {
        *v = clamp10(*v);
    }
    raw
}

/// Clamped and standardized features of one live tree node.
pub fn extract(node: &BnbNode, tree: &BnbTree, stats: &FeatureStats) -> NodeFeatures {
    let raw = extract_raw(&NodeFeatureSource::from_node(node), &TreeGlobals::from_tree(tree));
    stats.standardize(raw)
}

/// Per-dimension empirical mean and standard deviation (population form,
/// floored at 1e-6). Needs at least two rows.
pub fn fit_stats(rows: &[[f64; FEATURE_DIM]]) -> Result<FeatureStats, FeatureError> {
    if rows.len() < 2 {
        return Err(FeatureError::InsufficientData(rows.len()));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; FEATURE_DIM];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; FEATURE_DIM];
    for row in rows {
        for i in 0..FEATURE_DIM {
            let d = row[i] - mean[i];
            var[i] += d * d;
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(1e-6)).collect();
    Ok(FeatureStats { mean, std })
}

/// Fits standardization statistics from warm-up solves of a training pool.
///
/// Each instance is run with the best-first selector under `budget`; every
/// `stride` selections the raw features of all current nodes are collected.
/// The resulting statistics are meant to be frozen for the rest of training.
pub fn fit_stats_warmup(
    pool: &[LinearProgram],
    budget: Budget,
    stride: usize,
) -> Result<FeatureStats, FeatureError> {
    let stride = stride.max(1);
    let mut rows: Vec<[f64; FEATURE_DIM]> = Vec::new();
    for instance in pool {
        let mut tree = BnbTree::new(instance.clone());
        let mut selector = crate::bnb::BestFirst;
        let mut selections = 0usize;
        loop {
            if tree.open_leaves.is_empty() {
                break;
            }
            if let Some(max) = budget.max_nodes {
                if tree.nodes_processed >= max {
                    break;
                }
            }
            let id = selector.select(&tree);
            tree.process_node(id);
            if selections % stride == 0 {
                let globals = TreeGlobals::from_tree(&tree);
                for node in &tree.nodes {
                    rows.push(extract_raw(&NodeFeatureSource::from_node(node), &globals));
                }
            }
            selections += 1;
        }
    }
    fit_stats(&rows)
}
