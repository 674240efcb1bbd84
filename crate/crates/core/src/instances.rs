//! Instance generators and training-pool curation.
//!
//! TSP instances are Euclidean (random matrices trend too easy) and are
//! varied by multiplicative log-normal mutation of the distance matrix.
//! Facility-location instances follow the uniform-opening-cost, few-cheap-
//! connections recipe that produces large duality gaps. Curation solves
//! every candidate with the hybrid-plunge baseline and keeps the median-gap
//! survivor of each mutation batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnb::{solve, Budget, HybridPlunge, SolveResult};
use crate::lp::{LinearProgram, Relation, Row};

/// Symmetric travelling-salesman instance with zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TspInstance {
    pub n: usize,
    /// Row-major n x n distance matrix.
    pub dist: Vec<f64>,
}

impl TspInstance {
    pub fn d(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    /// Total length of a closed tour visiting `tour[0], tour[1], ...`.
    pub fn tour_cost(&self, tour: &[usize]) -> f64 {
        let mut cost = 0.0;
        for k in 0..tour.len() {
            cost += self.d(tour[k], tour[(k + 1) % tour.len()]);
        }
        cost
    }
}

/// Samples `n >= 4` cities uniformly in the unit square and takes Euclidean
/// distances. Coincident points are resampled so off-diagonal distances stay
/// strictly positive.
pub fn gen_tsp(n: usize, rng: &mut ChaCha8Rng) -> TspInstance {
    assert!(n >= 4, "gen_tsp needs at least 4 cities");
    loop {
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
        let mut dist = vec![0.0; n * n];
        let mut ok = true;
        'outer: for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dx = pts[i].0 - pts[j].0;
                let dy = pts[i].1 - pts[j].1;
                let d = (dx * dx + dy * dy).sqrt();
                if d < 1e-9 {
                    ok = false;
                    break 'outer;
                }
                dist[i * n + j] = d;
            }
        }
        if ok {
            return TspInstance { n, dist };
        }
    }
}

/// Standard normal via Box-Muller; keeps the dependency surface small and
/// the stream reproducible.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Multiplies every off-diagonal entry by `exp(sigma * g)` with standard
/// normal `g`, then re-symmetrizes by averaging. The diagonal stays zero and
/// positivity is preserved.
pub fn mutate(inst: &TspInstance, sigma: f64, rng: &mut ChaCha8Rng) -> TspInstance {
    assert!(sigma > 0.0, "mutation strength must be positive");
    let n = inst.n;
    let mut dist = inst.dist.clone();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                dist[i * n + j] *= (sigma * standard_normal(rng)).exp();
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (dist[i * n + j] + dist[j * n + i]);
            dist[i * n + j] = avg;
            dist[j * n + i] = avg;
        }
    }
    TspInstance { n, dist }
}

/// Column index of the edge variable x_ij in the MTZ encoding.
///
/// Edge variables come first in row-major order with the diagonal skipped;
/// the order variables u_2..u_n follow.
pub fn mtz_edge_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i != j && i < n && j < n);
    i * (n - 1) + if j < i { j } else { j - 1 }
}

/// Column index of the order variable u_i (2 <= i <= n, zero-based city id).
pub fn mtz_order_index(n: usize, i: usize) -> usize {
    debug_assert!((1..n).contains(&i));
    n * (n - 1) + (i - 1)
}

/// Miller–Tucker–Zemlin encoding of a TSP instance.
///
/// Variables: n(n-1) binary edge indicators, then n-1 integer order
/// variables with bounds [2, n]. Constraints: per-city out-degree and
/// in-degree equalities, then the (n-1)(n-2) subtour-elimination rows
/// `u_i - u_j + (n-1) x_ij <= n-2` over 2 <= i != j <= n.
pub fn encode_mtz(inst: &TspInstance) -> LinearProgram {
    let n = inst.n;
    assert!(n >= 3, "MTZ needs at least 3 cities");
    let num_edges = n * (n - 1);
    let num_vars = num_edges + (n - 1);
    let mut objective = vec![0.0; num_vars];
    let mut lower = vec![0.0; num_vars];
    let mut upper = vec![1.0; num_vars];
    let mut integer = vec![true; num_vars];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                objective[mtz_edge_index(n, i, j)] = inst.d(i, j);
            }
        }
    }
    for i in 1..n {
        let col = mtz_order_index(n, i);
        lower[col] = 2.0;
        upper[col] = n as f64;
        integer[col] = true;
    }
    let mut rows = Vec::with_capacity(2 * n + (n - 1) * (n - 2));
    for i in 0..n {
        let coeffs = (0..n)
            .filter(|&j| j != i)
            .map(|j| (mtz_edge_index(n, i, j), 1.0))
            .collect();
        rows.push(Row {
            coeffs,
            rel: Relation::Eq,
            rhs: 1.0,
        });
    }
    for j in 0..n {
        let coeffs = (0..n)
            .filter(|&i| i != j)
            .map(|i| (mtz_edge_index(n, i, j), 1.0))
            .collect();
        rows.push(Row {
            coeffs,
            rel: Relation::Eq,
            rhs: 1.0,
        });
    }
    for i in 1..n {
        for j in 1..n {
            if i == j {
                continue;
            }
            rows.push(Row {
                coeffs: vec![
                    (mtz_order_index(n, i), 1.0),
                    (mtz_order_index(n, j), -1.0),
                    (mtz_edge_index(n, i, j), (n - 1) as f64),
                ],
                rel: Relation::Le,
                rhs: (n - 2) as f64,
            });
        }
    }
    LinearProgram {
        num_vars,
        objective,
        rows,
        lower,
        upper,
        integer,
    }
}

/// Reads a closed tour out of an integral MTZ solution, starting at city 0.
/// Returns `None` when the edge variables do not form one Hamiltonian cycle.
pub fn decode_tour(n: usize, solution: &[f64]) -> Option<Vec<usize>> {
    let mut succ = vec![usize::MAX; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && solution[mtz_edge_index(n, i, j)] > 0.5 {
                if succ[i] != usize::MAX {
                    return None;
                }
                succ[i] = j;
            }
        }
    }
    if succ.iter().any(|&s| s == usize::MAX) {
        return None;
    }
    let mut tour = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    let mut cur = 0;
    for _ in 0..n {
        if seen[cur] {
            return None;
        }
        seen[cur] = true;
        tour.push(cur);
        cur = succ[cur];
    }
    (cur == 0).then_some(tour)
}

/// Uncapacitated facility location in the style of the hard-instance
/// generator: uniform opening cost 3000, ten cheap connections per client
/// drawn from {0..4}, cost 3000 elsewhere, big-M linking with M = m.
///
/// Variables: assignment z_ij at `i * m_clients + j`, then openings x_i.
pub fn gen_uflp_kochetov(
    n_facilities: usize,
    m_clients: usize,
    rng: &mut ChaCha8Rng,
) -> LinearProgram {
    assert!(n_facilities >= 1 && m_clients >= 1);
    const OPEN_COST: f64 = 3000.0;
    const EXPENSIVE: f64 = 3000.0;
    let n = n_facilities;
    let m = m_clients;
    let num_vars = n * m + n;
    let mut objective = vec![0.0; num_vars];
    let cheap_per_client = 10.min(n);
    for j in 0..m {
        // Partial Fisher-Yates draw of distinct cheap facilities.
        let mut ids: Vec<usize> = (0..n).collect();
        for k in 0..cheap_per_client {
            let pick = rng.gen_range(k..n);
            ids.swap(k, pick);
        }
        let mut costs = vec![EXPENSIVE; n];
        for &i in &ids[..cheap_per_client] {
            costs[i] = rng.gen_range(0..5u32) as f64;
        }
        for (i, &c) in costs.iter().enumerate() {
            objective[i * m + j] = c;
        }
    }
    for i in 0..n {
        objective[n * m + i] = OPEN_COST;
    }
    let mut rows = Vec::with_capacity(m + n);
    for j in 0..m {
        rows.push(Row {
            coeffs: (0..n).map(|i| (i * m + j, 1.0)).collect(),
            rel: Relation::Eq,
            rhs: 1.0,
        });
    }
    for i in 0..n {
        let mut coeffs: Vec<(usize, f64)> = (0..m).map(|j| (i * m + j, 1.0)).collect();
        coeffs.push((n * m + i, -(m as f64)));
        rows.push(Row {
            coeffs,
            rel: Relation::Le,
            rhs: 0.0,
        });
    }
    LinearProgram {
        num_vars,
        objective,
        rows,
        lower: vec![0.0; num_vars],
        upper: vec![1.0; num_vars],
        integer: vec![true; num_vars],
    }
}

/// Why a candidate was rejected during curation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    TooFewNodes,
    ZeroGap,
    GapAboveOne,
}

/// Baseline measurement of one curation candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub batch: usize,
    pub index_in_batch: usize,
    pub gap: f64,
    pub nodes: usize,
    pub accepted: bool,
    pub rejection: Option<RejectReason>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CurationReport {
    pub candidates: Vec<CandidateReport>,
}

impl CurationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch,index,gap,nodes,accepted,rejection,selected\n");
        for c in &self.candidates {
            let reason = match c.rejection {
                None => "",
                Some(RejectReason::TooFewNodes) => "too_few_nodes",
                Some(RejectReason::ZeroGap) => "zero_gap",
                Some(RejectReason::GapAboveOne) => "gap_above_one",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.batch, c.index_in_batch, c.gap, c.nodes, c.accepted, reason, c.selected
            ));
        }
        out
    }
}

/// A pool member together with its curation-time baseline measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedInstance {
    pub id: String,
    pub lp: LinearProgram,
    pub baseline_gap: f64,
    pub baseline_nodes: usize,
}

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("pool exhausted: {collected} of {target} instances curated")]
    PoolExhausted { collected: usize, target: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct CurationConfig {
    pub budget: Budget,
    pub min_nodes: usize,
    pub target_count: usize,
}

fn baseline_run(lp: &LinearProgram, budget: Budget) -> SolveResult {
    solve(lp, &mut HybridPlunge, budget)
}

/// Index of the median-gap survivor; an even count resolves to the
/// lower-gap middle member, equal gaps to the earlier candidate.
fn median_by_gap(survivors: &[(usize, f64)]) -> usize {
    debug_assert!(!survivors.is_empty());
    let mut order: Vec<usize> = (0..survivors.len()).collect();
    order.sort_by(|&a, &b| {
        survivors[a]
            .1
            .partial_cmp(&survivors[b].1)
            .unwrap()
            .then(survivors[a].0.cmp(&survivors[b].0))
    });
    survivors[order[(order.len() - 1) / 2]].0
}

/// Filters candidate batches by baseline behaviour and keeps each batch's
/// median-gap survivor until `target_count` instances are collected.
///
/// A candidate survives when the hybrid-plunge baseline under the curation
/// budget used at least `min_nodes` nodes and left a gap in (0, 1].
pub fn curate(
    batches: &[Vec<LinearProgram>],
    cfg: &CurationConfig,
) -> Result<(Vec<CuratedInstance>, CurationReport), CurateError> {
    use rayon::prelude::*;
    let mut pool = Vec::new();
    let mut report = CurationReport::default();
    for (bi, batch) in batches.iter().enumerate() {
        if pool.len() >= cfg.target_count {
            break;
        }
        let runs: Vec<SolveResult> = batch
            .par_iter()
            .map(|lp| baseline_run(lp, cfg.budget))
            .collect();
        let mut survivors: Vec<(usize, f64)> = Vec::new();
        let first_row = report.candidates.len();
        for (ci, run) in runs.iter().enumerate() {
            let gap = run.final_gap;
            let rejection = if run.nodes_processed < cfg.min_nodes {
                Some(RejectReason::TooFewNodes)
            } else if gap == 0.0 {
                Some(RejectReason::ZeroGap)
            } else if gap > 1.0 {
                Some(RejectReason::GapAboveOne)
            } else {
                None
            };
            if rejection.is_none() {
                survivors.push((ci, gap));
            }
            report.candidates.push(CandidateReport {
                batch: bi,
                index_in_batch: ci,
                gap,
                nodes: run.nodes_processed,
                accepted: rejection.is_none(),
                rejection,
                selected: false,
            });
        }
        if let Some(&(ci, gap)) = survivors
            .iter()
            .find(|&&(c, _)| c == median_by_gap(&survivors))
            .or(None)
            .filter(|_| !survivors.is_empty())
        {
            report.candidates[first_row + ci].selected = true;
            pool.push(CuratedInstance {
                id: format!("tsp_b{bi:03}_c{ci:02}"),
                lp: batch[ci].clone(),
                baseline_gap: gap,
                baseline_nodes: runs[ci].nodes_processed,
            });
        }
    }
    if pool.len() < cfg.target_count {
        return Err(CurateError::PoolExhausted {
            collected: pool.len(),
            target: cfg.target_count,
        });
    }
    Ok((pool, report))
}

/// Parses an instance file: the shared MILP JSON, or a TSP `{n, dist}`
/// document which is then MTZ-encoded.
pub fn parse_instance_json(text: &str) -> Result<LinearProgram, String> {
    if let Ok(lp) = serde_json::from_str::<LinearProgram>(text) {
        return Ok(lp);
    }
    match serde_json::from_str::<TspInstance>(text) {
        Ok(tsp) if tsp.dist.len() == tsp.n * tsp.n && tsp.n >= 3 => Ok(encode_mtz(&tsp)),
        Ok(_) => Err("TSP instance has a malformed distance matrix".into()),
        Err(e) => Err(format!("neither a MILP nor a TSP instance: {e}")),
    }
}

/// Builds mutation batches of MTZ-encoded TSP instances for curation: each
/// batch is one fresh Euclidean instance plus `batch_size - 1` mutants.
pub fn gen_tsp_batches(
    num_batches: usize,
    batch_size: usize,
    n_min: usize,
    n_max: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<LinearProgram>> {
    assert!(batch_size >= 1 && n_min >= 4 && n_max >= n_min);
    (0..num_batches)
        .map(|_| {
            let n = rng.gen_range(n_min..=n_max);
            let base = gen_tsp(n, rng);
            let mut batch = vec![encode_mtz(&base)];
            for _ in 1..batch_size {
                batch.push(encode_mtz(&mutate(&base, sigma, rng)));
            }
            batch
        })
        .collect()
}
