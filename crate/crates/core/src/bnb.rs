//! Branch-and-bound over LP relaxations with pluggable node selection.
//!
//! The engine keeps the whole search tree alive: every subproblem ever
//! created stays addressable so that tree-structured selectors can run
//! message passing over it. Nodes are processed lazily — a child's LP is
//! solved only when a selector picks it, and until then the child carries
//! its parent's bound, estimate, and solution statistics.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::features::{estimate_from_solution, fractional_histogram, integrality_stats};
use crate::lp::{
    solve_lp, with_bound, BoundSide, LinearProgram, LpStatus, FEASIBILITY_TOL, INTEGRALITY_TOL,
};

pub type NodeId = usize;

/// Relative pruning slack against the incumbent objective.
const PRUNE_REL_TOL: f64 = 1e-9;

/// Lifecycle of a branch-and-bound node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeStatus {
    Open,
    Branched,
    PrunedByBound,
    Infeasible,
    Integral,
    /// Dropped after a numerical failure or an unbounded relaxation.
    Discarded,
}

/// Solution-derived statistics kept per node so LP solutions can be freed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLpStats {
    pub frac_hist: [f64; 10],
    pub mean_integrality_gap: f64,
    pub pct_integral: f64,
}

impl Default for NodeLpStats {
    fn default() -> Self {
        NodeLpStats {
            frac_hist: [0.0; 10],
            mean_integrality_gap: 0.0,
            pct_integral: 0.0,
        }
    }
}

/// One subproblem in the search tree.
///
/// `lp_bound`, `estimate`, `lp_iterations`, and `stats` describe this node's
/// solved relaxation once processed; for still-open nodes they are inherited
/// from the parent (the root starts at `-inf` until its LP is solved).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnbNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub depth: usize,
    /// Bound changes relative to the parent: (variable, side, value).
    pub local_bounds: Vec<(usize, BoundSide, f64)>,
    pub lp_bound: f64,
    pub lp_iterations: usize,
    pub estimate: f64,
    pub status: NodeStatus,
    pub stats: NodeLpStats,
    /// Variable and LP value this node was split on, once branched.
    pub branched_on: Option<(usize, f64)>,
    /// Selection index at which this node was processed (0-based), if ever.
    pub processed_at: Option<usize>,
}

/// The live search tree plus incumbent and bound bookkeeping.
#[derive(Debug, Clone)]
pub struct BnbTree {
    pub instance: LinearProgram,
    relaxed: LinearProgram,
    pub nodes: Vec<BnbNode>,
    pub children: Vec<(Option<NodeId>, Option<NodeId>)>,
    pub open_leaves: BTreeSet<NodeId>,
    pub incumbent: Option<(Vec<f64>, f64)>,
    pub primal_bound: f64,
    pub dual_bound: f64,
    pub last_processed: Option<NodeId>,
    pub nodes_processed: usize,
    pub numerical_failures: usize,
}

/// Drops every integrality flag, keeping the rest of the program intact.
pub fn relax(p: &LinearProgram) -> LinearProgram {
    let mut out = p.clone();
    out.integer.iter_mut().for_each(|f| *f = false);
    out
}

/// Most-fractional branching rule with lowest-index tie-break.
///
/// Returns `None` when every integer-flagged variable is within the
/// integrality tolerance.
pub fn select_branch_variable(solution: &[f64], is_integer: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &flag) in is_integer.iter().enumerate() {
        if !flag {
            continue;
        }
        let frac = solution[j] - solution[j].floor();
        let dist_int = frac.min(1.0 - frac);
        if dist_int <= INTEGRALITY_TOL {
            continue;
        }
        let score = (frac - 0.5).abs();
        if best.map(|(_, s)| score < s).unwrap_or(true) {
            best = Some((j, score));
        }
    }
    best.map(|(j, _)| j)
}

/// Normalized optimality gap between a primal (upper) and dual (lower) bound.
///
/// Zero when the bounds agree (including two infinite bounds of the same
/// sign), infinite when exactly one is infinite, and otherwise
/// `(primal - dual) / max(|primal|, |dual|, 1e-9)`.
pub fn compute_gap(primal: f64, dual: f64) -> f64 {
    if primal == dual {
        return 0.0;
    }
    if !primal.is_finite() || !dual.is_finite() {
        return f64::INFINITY;
    }
    (primal - dual) / primal.abs().max(dual.abs()).max(1e-9)
}

impl BnbTree {
    pub fn new(instance: LinearProgram) -> Self {
        let relaxed = relax(&instance);
        let root = BnbNode {
            id: 0,
            parent: None,
            depth: 0,
            local_bounds: Vec::new(),
            lp_bound: f64::NEG_INFINITY,
            lp_iterations: 0,
            estimate: f64::NEG_INFINITY,
            status: NodeStatus::Open,
            stats: NodeLpStats::default(),
            branched_on: None,
            processed_at: None,
        };
        BnbTree {
            instance,
            relaxed,
            nodes: vec![root],
            children: vec![(None, None)],
            open_leaves: BTreeSet::from([0]),
            incumbent: None,
            primal_bound: f64::INFINITY,
            dual_bound: f64::NEG_INFINITY,
            last_processed: None,
            nodes_processed: 0,
            numerical_failures: 0,
        }
    }

    /// The relaxation this node stands for: root relaxation plus every bound
    /// change on the path down to the node.
    pub fn lp_for(&self, id: NodeId) -> LinearProgram {
        let mut chain = Vec::new();
        let mut cur = Some(id);
        while let Some(n) = cur {
            chain.push(n);
            cur = self.nodes[n].parent;
        }
        let mut lp = self.relaxed.clone();
        for &n in chain.iter().rev() {
            for &(var, side, value) in &self.nodes[n].local_bounds {
                lp = with_bound(&lp, var, side, value);
            }
        }
        lp
    }

    /// Current optimality gap of the tree.
    pub fn gap(&self) -> f64 {
        compute_gap(self.primal_bound, self.dual_bound)
    }

    fn recompute_dual(&mut self) {
        self.dual_bound = if self.open_leaves.is_empty() {
            self.primal_bound
        } else {
            self.open_leaves
                .iter()
                .map(|&id| self.nodes[id].lp_bound)
                .fold(f64::INFINITY, f64::min)
        };
    }

    /// Splits an open node on `var` at fractional `value`: the left child
    /// rounds down (upper bound `floor(value)`), the right child rounds up
    /// (lower bound `ceil(value)`). Children inherit the parent's bound data
    /// and enter the candidate set.
    pub fn branch(&mut self, node: NodeId, var: usize, value: f64) -> (NodeId, NodeId) {
        debug_assert_eq!(self.nodes[node].status, NodeStatus::Open);
        let parent = &self.nodes[node];
        let depth = parent.depth + 1;
        let template = BnbNode {
            id: 0,
            parent: Some(node),
            depth,
            local_bounds: Vec::new(),
            lp_bound: parent.lp_bound,
            lp_iterations: parent.lp_iterations,
            estimate: parent.estimate,
            status: NodeStatus::Open,
            stats: parent.stats.clone(),
            branched_on: None,
            processed_at: None,
        };
        let left_id = self.nodes.len();
        let mut left = template.clone();
        left.id = left_id;
        left.local_bounds = vec![(var, BoundSide::Upper, value.floor())];
        let right_id = left_id + 1;
        let mut right = template;
        right.id = right_id;
        right.local_bounds = vec![(var, BoundSide::Lower, value.ceil())];
        self.nodes.push(left);
        self.nodes.push(right);
        self.children.push((None, None));
        self.children.push((None, None));
        self.children[node] = (Some(left_id), Some(right_id));
        self.nodes[node].branched_on = Some((var, value));
        self.open_leaves.insert(left_id);
        self.open_leaves.insert(right_id);
        (left_id, right_id)
    }

    fn prune_threshold(&self) -> f64 {
        self.primal_bound - PRUNE_REL_TOL * self.primal_bound.abs().max(1.0)
    }

    /// Removes every open leaf whose bound cannot beat the incumbent.
    fn reprune_open(&mut self) {
        if !self.primal_bound.is_finite() {
            return;
        }
        let threshold = self.prune_threshold();
        let doomed: Vec<NodeId> = self
            .open_leaves
            .iter()
            .copied()
            .filter(|&id| self.nodes[id].lp_bound >= threshold)
            .collect();
        for id in doomed {
            self.open_leaves.remove(&id);
            self.nodes[id].status = NodeStatus::PrunedByBound;
        }
    }

    /// Solves one open node: bound, prune, accept as incumbent, or branch.
    pub fn process_node(&mut self, id: NodeId) -> NodeStatus {
        assert_eq!(self.nodes[id].status, NodeStatus::Open, "node not open");
        self.open_leaves.remove(&id);
        self.nodes[id].processed_at = Some(self.nodes_processed);
        self.nodes_processed += 1;
        self.last_processed = Some(id);
        let lp = self.lp_for(id);
        let status = match solve_lp(&lp, None) {
            Err(_) => {
                self.numerical_failures += 1;
                NodeStatus::Discarded
            }
            Ok(outcome) => match outcome.status {
                LpStatus::Infeasible => {
                    self.nodes[id].lp_iterations = outcome.iterations;
                    NodeStatus::Infeasible
                }
                // The generated instance families are all bounded; an
                // unbounded relaxation means the node proves nothing and is
                // dropped like a failed solve.
                LpStatus::Unbounded => {
                    self.numerical_failures += 1;
                    NodeStatus::Discarded
                }
                LpStatus::Optimal => {
                    let solution = outcome.solution.unwrap();
                    let bound = outcome.objective_value.unwrap();
                    let (mean_gap, pct_int) = integrality_stats(&solution, &self.instance.integer);
                    let node = &mut self.nodes[id];
                    node.lp_bound = bound;
                    node.lp_iterations = outcome.iterations;
                    node.estimate = estimate_from_solution(
                        bound,
                        &solution,
                        &self.instance.integer,
                        &self.instance.objective,
                    );
                    node.stats = NodeLpStats {
                        frac_hist: fractional_histogram(&solution, &self.instance.integer),
                        mean_integrality_gap: mean_gap,
                        pct_integral: pct_int,
                    };
                    if self.primal_bound.is_finite() && bound >= self.prune_threshold() {
                        NodeStatus::PrunedByBound
                    } else if let Some(var) =
                        select_branch_variable(&solution, &self.instance.integer)
                    {
                        self.try_rounding(&solution);
                        self.branch(id, var, solution[var]);
                        NodeStatus::Branched
                    } else {
                        self.accept_incumbent(solution);
                        NodeStatus::Integral
                    }
                }
            },
        };
        self.nodes[id].status = status;
        self.recompute_dual();
        status
    }

    /// LP rounding: rounds every integer variable of a fractional relaxation
    /// solution to its nearest integer and adopts the point if it happens to
    /// be feasible and better than the incumbent. This is the engine's only
    /// primal heuristic.
    fn try_rounding(&mut self, solution: &[f64]) {
        let mut rounded = solution.to_vec();
        for (j, &flag) in self.instance.integer.iter().enumerate() {
            if flag {
                rounded[j] = rounded[j].round();
            }
        }
        let objective = self.instance.objective_at(&rounded);
        if objective < self.primal_bound - PRUNE_REL_TOL * self.primal_bound.abs().max(1.0)
            && self.instance.is_feasible(&rounded, FEASIBILITY_TOL)
        {
            self.primal_bound = objective;
            self.incumbent = Some((rounded, objective));
            self.reprune_open();
        }
    }

    /// Snaps integer variables and adopts the point when it improves the
    /// primal bound, repruning the candidate set on improvement.
    fn accept_incumbent(&mut self, mut solution: Vec<f64>) {
        for (j, &flag) in self.instance.integer.iter().enumerate() {
            if flag {
                solution[j] = solution[j].round();
            }
        }
        let objective = self.instance.objective_at(&solution);
        if objective < self.primal_bound {
            debug_assert!(
                self.instance.is_feasible(&solution, FEASIBILITY_TOL * 100.0),
                "incumbent fails feasibility recheck"
            );
            self.primal_bound = objective;
            self.incumbent = Some((solution, objective));
            self.reprune_open();
        }
    }
}

/// Node and wall-clock limits for one solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_nodes: Option<usize>,
    pub max_seconds: Option<f64>,
}

impl Budget {
    pub fn nodes(max_nodes: usize) -> Self {
        Budget {
            max_nodes: Some(max_nodes),
            max_seconds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Optimal,
    NodeBudget,
    TimeBudget,
}

/// One row of the per-selection trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub selected: NodeId,
    pub candidates: usize,
    pub gap_after: f64,
}

/// Outcome of a budgeted branch-and-bound run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub final_gap: f64,
    pub nodes_processed: usize,
    pub incumbent: Option<(Vec<f64>, f64)>,
    pub trace: Vec<TraceRecord>,
    pub terminated_by: Termination,
    pub numerical_failures: usize,
    pub primal_bound: f64,
    pub dual_bound: f64,
}

/// Chooses the next open leaf to process.
///
/// Implementations must be pure functions of the tree plus their own private
/// state so that concurrent solves of distinct trees stay independent.
pub trait NodeSelector {
    fn name(&self) -> &'static str;
    /// Called with a nonempty candidate set; returns one of its members.
    fn select(&mut self, tree: &BnbTree) -> NodeId;
}

/// Lowest LP bound first; ties go to the deepest node, then the lowest id.
pub struct BestFirst;

impl NodeSelector for BestFirst {
    fn name(&self) -> &'static str {
        "bestfirst"
    }

    fn select(&mut self, tree: &BnbTree) -> NodeId {
        best_by(tree, |n| n.lp_bound)
    }
}

/// Most recently created open node (stack order).
pub struct DepthFirst;

impl NodeSelector for DepthFirst {
    fn name(&self) -> &'static str {
        "dfs"
    }

    fn select(&mut self, tree: &BnbTree) -> NodeId {
        *tree.open_leaves.iter().next_back().expect("no candidates")
    }
}

/// Lowest estimate first; ties go to the deepest node, then the lowest id.
pub struct BestEstimate;

impl NodeSelector for BestEstimate {
    fn name(&self) -> &'static str {
        "estimate"
    }

    fn select(&mut self, tree: &BnbTree) -> NodeId {
        best_by(tree, |n| n.estimate)
    }
}

/// Plunges into a child of the last processed node while one is open,
/// otherwise falls back to the best-estimate rule.
pub struct HybridPlunge;

impl NodeSelector for HybridPlunge {
    fn name(&self) -> &'static str {
        "hybrid"
    }

    fn select(&mut self, tree: &BnbTree) -> NodeId {
        if let Some(last) = tree.last_processed {
            // Dive towards the child that rounds the branching value to its
            // nearest integer; fixing likely assignments first reaches
            // integral leaves (and thus incumbents) much sooner. When the
            // dive dead-ends, continue at the sibling before giving up.
            if let Some(child) = plunge_candidate(tree, last) {
                return child;
            }
            if let Some(parent) = tree.nodes[last].parent {
                if let Some(sibling) = plunge_candidate(tree, parent) {
                    return sibling;
                }
            }
        }
        best_by(tree, |n| n.estimate)
    }
}

fn plunge_candidate(tree: &BnbTree, node: NodeId) -> Option<NodeId> {
    let (l, r) = tree.children[node];
    let frac = tree.nodes[node]
        .branched_on
        .map(|(_, v)| v - v.floor())
        .unwrap_or(0.0);
    let order = if frac >= 0.5 { [r, l] } else { [l, r] };
    order
        .into_iter()
        .flatten()
        .find(|c| tree.open_leaves.contains(c))
}

fn best_by(tree: &BnbTree, key: impl Fn(&BnbNode) -> f64) -> NodeId {
    let mut best: Option<(f64, usize, NodeId)> = None;
    for &id in &tree.open_leaves {
        let node = &tree.nodes[id];
        let k = key(node);
        let better = match best {
            None => true,
            Some((bk, bd, _)) => k < bk || (k == bk && node.depth > bd),
        };
        if better {
            best = Some((k, node.depth, id));
        }
    }
    best.expect("no candidates").2
}

/// When the learned policy is consulted: densely for the first
/// `dense_limit` selections, then every `sparse_stride`-th selection until
/// `sparse_limit`, and never afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub dense_limit: usize,
    pub sparse_limit: usize,
    pub sparse_stride: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            dense_limit: 250,
            sparse_limit: 1000,
            sparse_stride: 10,
        }
    }
}

impl ScheduleConfig {
    /// Longer-budget variant that keeps the policy active for 650 dense
    /// selections before handing over to classical selectors.
    pub fn long_run() -> Self {
        ScheduleConfig {
            dense_limit: 650,
            ..Self::default()
        }
    }
}

/// True when the learned policy should pick the next node.
pub fn policy_schedule(selections_so_far: usize, cfg: ScheduleConfig) -> bool {
    if selections_so_far < cfg.dense_limit {
        true
    } else if selections_so_far < cfg.sparse_limit {
        (selections_so_far - cfg.dense_limit) % cfg.sparse_stride == 0
    } else {
        false
    }
}

/// Runs branch-and-bound to completion or budget exhaustion.
pub fn solve(p: &LinearProgram, selector: &mut dyn NodeSelector, budget: Budget) -> SolveResult {
    solve_with_tree(p, selector, budget).0
}

/// Like [`solve`] but hands back the final search tree as well.
pub fn solve_with_tree(
    p: &LinearProgram,
    selector: &mut dyn NodeSelector,
    budget: Budget,
) -> (SolveResult, BnbTree) {
    let mut tree = BnbTree::new(p.clone());
    let start = Instant::now();
    let mut trace = Vec::new();
    let terminated_by = loop {
        if tree.open_leaves.is_empty() {
            break Termination::Optimal;
        }
        if let Some(max) = budget.max_nodes {
            if tree.nodes_processed >= max {
                break Termination::NodeBudget;
            }
        }
        if let Some(max_s) = budget.max_seconds {
            if start.elapsed().as_secs_f64() >= max_s {
                break Termination::TimeBudget;
            }
        }
        let candidates = tree.open_leaves.len();
        let id = selector.select(&tree);
        debug_assert!(tree.open_leaves.contains(&id), "selector returned non-candidate");
        tree.process_node(id);
        trace.push(TraceRecord {
            selected: id,
            candidates,
            gap_after: tree.gap(),
        });
    };
    let result = SolveResult {
        final_gap: tree.gap(),
        nodes_processed: tree.nodes_processed,
        incumbent: tree.incumbent.clone(),
        trace,
        terminated_by,
        numerical_failures: tree.numerical_failures,
        primal_bound: tree.primal_bound,
        dual_bound: tree.dual_bound,
    };
    (result, tree)
}
