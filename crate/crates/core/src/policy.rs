//! The tree-structured selection policy.
//!
//! Node features are embedded independently, refined by K steps of
//! children-to-parent message passing over the live branch-and-bound tree,
//! and reduced to one scalar head value per node. A candidate leaf's logit
//! is the mean head value along its root path; the softmax over candidates
//! is the selection distribution. A second, gradient-detached head yields
//! per-candidate Q values and the state value.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnb::{BnbTree, NodeId, NodeStatus};
use crate::features::{extract_raw, FeatureStats, NodeFeatureSource, TreeGlobals, FEATURE_DIM};
use crate::nn::{Matrix, ParameterSet, Tape, TreeIndex, ValueId};

const LEAKY_SLOPE: f64 = 0.01;
/// Weight-head weights start at most this far from zero so the initial
/// selection distribution is uniform over any candidate set.
pub const HEAD_INIT_SCALE: f64 = 1e-4;

/// How per-node value-head outputs aggregate into candidate Q values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueAggregation {
    /// Mean along the root path, mirroring the path-weight logits.
    PathMean,
    /// Bottom-up subtree sum divided by the path length.
    SubtreeSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub k_steps: usize,
    pub temperature: f64,
    pub value_aggregation: ValueAggregation,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            d_model: 128,
            k_steps: 3,
            temperature: 1.0,
            value_aggregation: ValueAggregation::PathMean,
        }
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("node {0} is not a candidate")]
    NotACandidate(NodeId),
}

/// Creates the full trainable parameter set for a policy of the given size.
///
/// Embedder and GNN weights use uniform Xavier ranges; every bias starts at
/// zero. ReZero scalars start at exactly zero so each message-passing layer
/// is the identity, and both heads start near zero (the weight head's bias
/// exactly zero) so the initial policy is uniform over any tree.
pub fn init_params(cfg: &PolicyConfig, rng: &mut ChaCha8Rng) -> ParameterSet {
    let d = cfg.d_model;
    let mut params = ParameterSet::new();
    let xavier = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * s)
    };
    params.insert("embed.w0", xavier(rng, FEATURE_DIM, d), true, true);
    params.insert("embed.b0", Matrix::zeros(1, d), true, false);
    for layer in 0..2 {
        params.insert(&format!("embed.res{layer}.w"), xavier(rng, d, d), true, true);
        params.insert(&format!("embed.res{layer}.b"), Matrix::zeros(1, d), true, false);
    }
    for t in 0..cfg.k_steps {
        params.insert(&format!("gnn.{t}.w"), xavier(rng, d, d), true, true);
        params.insert(&format!("gnn.{t}.b"), Matrix::zeros(1, d), true, false);
        params.insert(&format!("gnn.{t}.alpha"), Matrix::scalar(0.0), true, false);
    }
    let small = |rng: &mut ChaCha8Rng, rows: usize| {
        Matrix::from_fn(rows, 1, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * HEAD_INIT_SCALE)
    };
    params.insert("weight_head.w", small(rng, d), true, true);
    params.insert("weight_head.b", Matrix::scalar(0.0), true, false);
    params.insert("value_head.w", small(rng, d), true, true);
    params.insert("value_head.b", Matrix::scalar(0.0), true, false);
    params
}

/// A tree ready for batched evaluation: wiring plus the standardized
/// feature matrix, with matrix rows aligned to node ids.
#[derive(Debug, Clone)]
pub struct TreeView {
    pub index: Rc<TreeIndex>,
    pub features: Matrix,
}

impl TreeView {
    pub fn new(index: TreeIndex, features: Matrix) -> Self {
        assert_eq!(index.len(), features.rows);
        assert_eq!(features.cols, FEATURE_DIM);
        TreeView {
            index: Rc::new(index),
            features,
        }
    }

    /// Snapshot of a live tree: structure plus standardized features.
    pub fn from_tree(tree: &BnbTree, stats: &FeatureStats) -> Self {
        let n = tree.nodes.len();
        let globals = TreeGlobals::from_tree(tree);
        let mut features = Matrix::zeros(n, FEATURE_DIM);
        let mut index = TreeIndex {
            parent: Vec::with_capacity(n),
            left: Vec::with_capacity(n),
            right: Vec::with_capacity(n),
            depth: Vec::with_capacity(n),
        };
        for node in &tree.nodes {
            let raw = extract_raw(&NodeFeatureSource::from_node(node), &globals);
            let std = stats.standardize(raw);
            features.data[node.id * FEATURE_DIM..(node.id + 1) * FEATURE_DIM]
                .copy_from_slice(&std.0);
            index.parent.push(node.parent);
            index.left.push(tree.children[node.id].0);
            index.right.push(tree.children[node.id].1);
            index.depth.push(node.depth);
        }
        TreeView::new(index, features)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Tape ids of one policy forward pass.
pub struct PolicyForward {
    /// n x d embeddings after K message-passing steps.
    pub h_k: ValueId,
    /// n x 1 path-mean weights W' for every node.
    pub path_w: ValueId,
    /// k x 1 temperature-scaled candidate logits.
    pub cand_logits: ValueId,
    /// k x 1 log selection probabilities over the candidate set.
    pub log_probs: ValueId,
    /// k x 1 per-candidate Q values (gradient-detached from the embedder).
    pub q_values: ValueId,
    /// 1 x 1 state value V = max over candidate Q.
    pub state_value: ValueId,
}

/// Embedder: linear 19 -> d with LeakyReLU, two residual d -> d LeakyReLU
/// layers, then parameter-free layer normalization.
fn embed_on_tape(tape: &mut Tape, features: ValueId, params: &ParameterSet) -> ValueId {
    let w0 = tape.param("embed.w0", params);
    let b0 = tape.param("embed.b0", params);
    let mut h = tape.matmul(features, w0);
    h = tape.add_row(h, b0);
    h = tape.leaky_relu(h, LEAKY_SLOPE);
    for layer in 0..2 {
        let w = tape.param(&format!("embed.res{layer}.w"), params);
        let b = tape.param(&format!("embed.res{layer}.b"), params);
        let z = tape.matmul(h, w);
        let z = tape.add_row(z, b);
        let z = tape.leaky_relu(z, LEAKY_SLOPE);
        h = tape.add(h, z);
    }
    tape.layernorm_rows(h)
}

/// K steps of children-to-parent message passing with ReZero residuals:
/// `h <- h + alpha_t * leaky(W_t * (h_left + h_right) / 2 + b_t)`, missing
/// children contributing the zero vector.
fn message_pass_on_tape(
    tape: &mut Tape,
    h0: ValueId,
    index: &Rc<TreeIndex>,
    params: &ParameterSet,
    k_steps: usize,
) -> ValueId {
    let mut h = h0;
    for t in 0..k_steps {
        let w = tape.param(&format!("gnn.{t}.w"), params);
        let b = tape.param(&format!("gnn.{t}.b"), params);
        let alpha = tape.param(&format!("gnn.{t}.alpha"), params);
        let m = tape.child_mean(h, index.clone());
        let z = tape.matmul(m, w);
        let z = tape.add_row(z, b);
        let z = tape.leaky_relu(z, LEAKY_SLOPE);
        let z = tape.scale_by(z, alpha);
        h = tape.add(h, z);
    }
    h
}

/// Full forward pass on an existing tape. Candidate ids double as row
/// indices; the candidate set must be nonempty.
pub fn forward_into(
    tape: &mut Tape,
    view: &TreeView,
    candidates: &[NodeId],
    params: &ParameterSet,
    cfg: &PolicyConfig,
) -> Result<PolicyForward, PolicyError> {
    if candidates.is_empty() {
        return Err(PolicyError::EmptyCandidates);
    }
    assert!(cfg.temperature > 0.0, "temperature must be positive");
    let features = tape.input(view.features.clone());
    let h0 = embed_on_tape(tape, features, params);
    let h_k = message_pass_on_tape(tape, h0, &view.index, params, cfg.k_steps);

    let w_head = tape.param("weight_head.w", params);
    let w_bias = tape.param("weight_head.b", params);
    let node_w = tape.matmul(h_k, w_head);
    let node_w = tape.add_row(node_w, w_bias);
    let path_w = tape.path_mean(node_w, view.index.clone());
    let cand_rows = Rc::new(candidates.to_vec());
    let gathered = tape.gather_rows(path_w, cand_rows.clone());
    let cand_logits = tape.scale(gathered, 1.0 / cfg.temperature);
    let log_probs = tape.log_softmax(cand_logits);

    // The value head reads the embeddings but sends no gradients back.
    let frozen = tape.stop_grad(h_k);
    let v_head = tape.param("value_head.w", params);
    let v_bias = tape.param("value_head.b", params);
    let node_q = tape.matmul(frozen, v_head);
    let node_q = tape.add_row(node_q, v_bias);
    let q_all = match cfg.value_aggregation {
        ValueAggregation::PathMean => tape.path_mean(node_q, view.index.clone()),
        ValueAggregation::SubtreeSum => tape.subtree_mean(node_q, view.index.clone()),
    };
    let q_values = tape.gather_rows(q_all, cand_rows);
    let state_value = tape.max(q_values);
    Ok(PolicyForward {
        h_k,
        path_w,
        cand_logits,
        log_probs,
        q_values,
        state_value,
    })
}

/// Plain-value results of one forward pass, for inference-time use.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    pub candidates: Vec<NodeId>,
    /// Selection probabilities aligned with `candidates`.
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Path weights W' aligned with `candidates`.
    pub path_weights: Vec<f64>,
    pub q_values: Vec<f64>,
    pub state_value: f64,
}

impl PolicyEvaluation {
    pub fn log_prob(&self, node: NodeId) -> Result<f64, PolicyError> {
        self.candidates
            .iter()
            .position(|&c| c == node)
            .map(|i| self.log_probs[i])
            .ok_or(PolicyError::NotACandidate(node))
    }

    /// Samples a candidate by inverse transform over the probabilities.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> NodeId {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.candidates[i];
            }
        }
        *self.candidates.last().unwrap()
    }
}

/// Runs the policy on a tree snapshot and extracts plain values.
pub fn evaluate(
    view: &TreeView,
    candidates: &[NodeId],
    params: &ParameterSet,
    cfg: &PolicyConfig,
) -> Result<PolicyEvaluation, PolicyError> {
    let mut tape = Tape::new();
    let fwd = forward_into(&mut tape, view, candidates, params, cfg)?;
    let log_probs = tape.value(fwd.log_probs).data.clone();
    let probs: Vec<f64> = log_probs.iter().map(|&l| l.exp()).collect();
    let gathered = tape.value(fwd.path_w);
    let path_weights = candidates.iter().map(|&c| gathered.data[c]).collect();
    Ok(PolicyEvaluation {
        candidates: candidates.to_vec(),
        probs,
        log_probs,
        path_weights,
        q_values: tape.value(fwd.q_values).data.clone(),
        state_value: tape.value(fwd.state_value).item(),
    })
}

/// Embedding rows h_0 for every node (no message passing).
pub fn embed_nodes(view: &TreeView, params: &ParameterSet) -> Matrix {
    let mut tape = Tape::new();
    let features = tape.input(view.features.clone());
    let h0 = embed_on_tape(&mut tape, features, params);
    tape.value(h0).clone()
}

/// Embedding rows after K message-passing steps, starting from `h0`.
pub fn message_pass(
    h0: &Matrix,
    view: &TreeView,
    params: &ParameterSet,
    k_steps: usize,
) -> Matrix {
    let mut tape = Tape::new();
    let h = tape.input(h0.clone());
    let h_k = message_pass_on_tape(&mut tape, h, &view.index, params, k_steps);
    tape.value(h_k).clone()
}

/// Path weights W' for each candidate, computed from given embeddings.
pub fn path_weights(
    h_k: &Matrix,
    view: &TreeView,
    params: &ParameterSet,
    candidates: &[NodeId],
) -> Result<BTreeMap<NodeId, f64>, PolicyError> {
    if candidates.is_empty() {
        return Err(PolicyError::EmptyCandidates);
    }
    let mut tape = Tape::new();
    let h = tape.input(h_k.clone());
    let w_head = tape.param("weight_head.w", params);
    let w_bias = tape.param("weight_head.b", params);
    let node_w = tape.matmul(h, w_head);
    let node_w = tape.add_row(node_w, w_bias);
    let pw = tape.path_mean(node_w, view.index.clone());
    let values = tape.value(pw);
    Ok(candidates.iter().map(|&c| (c, values.data[c])).collect())
}

/// Softmax with temperature over a candidate->weight map.
pub fn policy_distribution(weights: &BTreeMap<NodeId, f64>, temperature: f64) -> BTreeMap<NodeId, f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let max = weights.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<(NodeId, f64)> = weights
        .iter()
        .map(|(&n, &w)| (n, ((w - max) / temperature).exp()))
        .collect();
    let z: f64 = exps.iter().map(|(_, e)| e).sum();
    exps.into_iter().map(|(n, e)| (n, e / z)).collect()
}

/// State value and per-candidate Q from given embeddings.
pub fn state_value(
    h_k: &Matrix,
    view: &TreeView,
    params: &ParameterSet,
    candidates: &[NodeId],
    aggregation: ValueAggregation,
) -> Result<(f64, BTreeMap<NodeId, f64>), PolicyError> {
    if candidates.is_empty() {
        return Err(PolicyError::EmptyCandidates);
    }
    let mut tape = Tape::new();
    let h = tape.input(h_k.clone());
    let frozen = tape.stop_grad(h);
    let v_head = tape.param("value_head.w", params);
    let v_bias = tape.param("value_head.b", params);
    let node_q = tape.matmul(frozen, v_head);
    let node_q = tape.add_row(node_q, v_bias);
    let q_all = match aggregation {
        ValueAggregation::PathMean => tape.path_mean(node_q, view.index.clone()),
        ValueAggregation::SubtreeSum => tape.subtree_mean(node_q, view.index.clone()),
    };
    let values = tape.value(q_all);
    let q: BTreeMap<NodeId, f64> = candidates.iter().map(|&c| (c, values.data[c])).collect();
    let v = q.values().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((v, q))
}

/// Open leaves of a tree in ascending id order (the candidate set).
pub fn candidate_ids(tree: &BnbTree) -> Vec<NodeId> {
    debug_assert!(tree
        .open_leaves
        .iter()
        .all(|&id| tree.nodes[id].status == NodeStatus::Open));
    tree.open_leaves.iter().copied().collect()
}
