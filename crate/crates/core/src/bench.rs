//! Policy-versus-baseline benchmarking, aggregate metrics, and model files.
//!
//! Every instance is solved twice under the same node budget — once with the
//! hybrid-plunge baseline, once with the policy selector on its schedule —
//! and scored by reward, utility, and per-node utility. Aggregation filters
//! out rows whose baseline explored fewer than five nodes, where node
//! selection cannot matter.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnb::{solve, Budget, HybridPlunge};
use crate::features::{FeatureStats, FEATURE_DIM};
use crate::lp::LinearProgram;
use crate::nn::{Matrix, ParameterSet};
use crate::policy::{PolicyConfig, ValueAggregation};
use crate::ppo::{compute_reward, PolicySelector, TrainConfig};

/// One benchmark comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub instance: String,
    pub gap_policy: f64,
    pub gap_baseline: f64,
    pub nodes_policy: usize,
    pub nodes_baseline: usize,
    pub reward: f64,
    pub utility: f64,
    pub utility_per_node: f64,
}

/// Gap improvement normalized by the larger gap, in [-1, 1].
/// Two zero (or two infinite) gaps score 0; a single infinite gap clips
/// to the corresponding endpoint.
pub fn utility(gap_selector: f64, gap_baseline: f64) -> f64 {
    normalized_difference(gap_selector, gap_baseline)
}

/// Like [`utility`] but on gap x nodes scores, crediting selectors that
/// reach their gap with fewer nodes.
pub fn utility_per_node(
    gap_selector: f64,
    nodes_selector: usize,
    gap_baseline: f64,
    nodes_baseline: usize,
) -> f64 {
    let score_selector = gap_selector * nodes_selector as f64;
    let score_baseline = gap_baseline * nodes_baseline as f64;
    normalized_difference(score_selector, score_baseline)
}

fn normalized_difference(selector: f64, baseline: f64) -> f64 {
    if selector == 0.0 && baseline == 0.0 {
        return 0.0;
    }
    match (selector.is_finite(), baseline.is_finite()) {
        (false, false) => 0.0,
        (false, true) => -1.0,
        (true, false) => 1.0,
        (true, true) => (baseline - selector) / selector.max(baseline),
    }
}

/// Shifted geometric mean `exp(mean(ln(x + shift))) - shift`; tolerates
/// zeros for any positive shift.
pub fn shifted_geo_mean(values: &[f64], shift: f64) -> f64 {
    assert!(!values.is_empty(), "geometric mean of nothing");
    let mean_log = values.iter().map(|&v| (v + shift).ln()).sum::<f64>() / values.len() as f64;
    mean_log.exp() - shift
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no rows left after the baseline-node filter")]
    EmptyAfterFilter,
}

/// Aggregation knobs: the geometric-mean shifts and the baseline-node
/// filter threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateConfig {
    pub gap_shift: f64,
    /// Shift for runtime columns where present (kept for callers that
    /// aggregate wall-clock data with [`shifted_geo_mean`]).
    pub time_shift: f64,
    pub min_baseline_nodes: usize,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig {
            gap_shift: 1.0,
            time_shift: 10.0,
            min_baseline_nodes: 5,
        }
    }
}

/// Aggregate metrics over a filtered row set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_reward: f64,
    pub mean_utility: f64,
    pub mean_utility_per_node: f64,
    /// Fraction of rows with reward >= 0 (ties count as wins).
    pub win_rate: f64,
    pub geo_mean_policy: f64,
    pub geo_mean_baseline: f64,
    pub rows_used: usize,
    pub rows_filtered_out: usize,
}

/// Means, win rate, and shifted geometric gap means over the rows whose
/// baseline explored at least the configured node count.
pub fn aggregate(rows: &[BenchRow], cfg: &AggregateConfig) -> Result<Summary, BenchError> {
    let kept: Vec<&BenchRow> = rows
        .iter()
        .filter(|r| r.nodes_baseline >= cfg.min_baseline_nodes)
        .collect();
    if kept.is_empty() {
        return Err(BenchError::EmptyAfterFilter);
    }
    let n = kept.len() as f64;
    let gaps_policy: Vec<f64> = kept.iter().map(|r| r.gap_policy).collect();
    let gaps_baseline: Vec<f64> = kept.iter().map(|r| r.gap_baseline).collect();
    Ok(Summary {
        mean_reward: kept.iter().map(|r| r.reward).sum::<f64>() / n,
        mean_utility: kept.iter().map(|r| r.utility).sum::<f64>() / n,
        mean_utility_per_node: kept.iter().map(|r| r.utility_per_node).sum::<f64>() / n,
        win_rate: kept.iter().filter(|r| r.reward >= 0.0).count() as f64 / n,
        geo_mean_policy: shifted_geo_mean(&gaps_policy, cfg.gap_shift),
        geo_mean_baseline: shifted_geo_mean(&gaps_baseline, cfg.gap_shift),
        rows_used: kept.len(),
        rows_filtered_out: rows.len() - kept.len(),
    })
}

/// Serializes rows under the stable benchmark CSV schema.
pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "instance,gap_policy,gap_baseline,nodes_policy,nodes_baseline,reward,utility,utility_per_node\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.instance,
            r.gap_policy,
            r.gap_baseline,
            r.nodes_policy,
            r.nodes_baseline,
            r.reward,
            r.utility,
            r.utility_per_node
        ));
    }
    out
}

/// A named instance queued for benchmarking.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedInstance {
    pub name: String,
    pub lp: LinearProgram,
}

/// Output of [`run_bench`]: completed rows in input order, instances that
/// had to be skipped, and the aggregate summary.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutput {
    pub rows: Vec<BenchRow>,
    pub skipped: Vec<(String, String)>,
    pub summary: Result<Summary, String>,
}

/// Benchmarks a model against the baseline on each instance under one node
/// budget. Invalid instances are recorded as skipped, never aborting the
/// batch; results are deterministic for a fixed seed.
pub fn run_bench(
    instances: &[NamedInstance],
    model: &LoadedModel,
    budget: Budget,
    seed: u64,
) -> BenchOutput {
    let outcomes: Vec<Result<BenchRow, (String, String)>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            if let Err(e) = inst.lp.validate() {
                return Err((inst.name.clone(), e.to_string()));
            }
            let baseline = solve(&inst.lp, &mut HybridPlunge, budget);
            let mut selector = PolicySelector::new(
                &model.params,
                &model.stats,
                model.policy,
                crate::bnb::ScheduleConfig::default(),
                seed.wrapping_add(i as u64),
            );
            let policy = solve(&inst.lp, &mut selector, budget);
            Ok(BenchRow {
                instance: inst.name.clone(),
                gap_policy: policy.final_gap,
                gap_baseline: baseline.final_gap,
                nodes_policy: policy.nodes_processed,
                nodes_baseline: baseline.nodes_processed,
                reward: compute_reward(policy.final_gap, baseline.final_gap),
                utility: utility(policy.final_gap, baseline.final_gap),
                utility_per_node: utility_per_node(
                    policy.final_gap,
                    policy.nodes_processed,
                    baseline.final_gap,
                    baseline.nodes_processed,
                ),
            })
        })
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(row) => rows.push(row),
            Err(skip) => skipped.push(skip),
        }
    }
    let summary = aggregate(&rows, &AggregateConfig::default()).map_err(|e| e.to_string());
    BenchOutput {
        rows,
        skipped,
        summary,
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    trainable: bool,
    decay: bool,
}

/// On-disk model: network shape, frozen feature statistics, and every
/// parameter array. JSON with full f64 round-tripping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub d_model: usize,
    pub k_steps: usize,
    pub feature_dim: usize,
    pub temperature: f64,
    pub value_aggregation: ValueAggregation,
    pub stats: FeatureStats,
    params: Vec<NamedArray>,
    /// Echo of the training configuration, when the model was trained.
    pub train_config: Option<TrainConfig>,
    /// Seed provenance of training.
    pub seed: u64,
}

/// A model ready for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    pub params: ParameterSet,
    pub stats: FeatureStats,
    pub policy: PolicyConfig,
    pub train_config: Option<TrainConfig>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt model file: {0}")]
    CorruptModel(String),
    #[error("model format version {found} is not supported (expected {MODEL_FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
}

/// Writes parameters, statistics, and configuration to a versioned file.
pub fn save_model(
    path: &Path,
    params: &ParameterSet,
    stats: &FeatureStats,
    policy: &PolicyConfig,
    train_config: Option<&TrainConfig>,
    seed: u64,
) -> Result<(), ModelError> {
    let arrays: Vec<NamedArray> = params
        .iter()
        .map(|(name, p)| NamedArray {
            name: name.clone(),
            rows: p.value.rows,
            cols: p.value.cols,
            data: p.value.data.clone(),
            trainable: p.trainable,
            decay: p.decay,
        })
        .collect();
    for a in &arrays {
        if a.data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::CorruptModel(format!(
                "parameter {} contains non-finite values",
                a.name
            )));
        }
    }
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        d_model: policy.d_model,
        k_steps: policy.k_steps,
        feature_dim: FEATURE_DIM,
        temperature: policy.temperature,
        value_aggregation: policy.value_aggregation,
        stats: stats.clone(),
        params: arrays,
        train_config: train_config.cloned(),
        seed,
    };
    let text = serde_json::to_string(&file)
        .map_err(|e| ModelError::CorruptModel(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

/// Reads a model file back, rejecting unknown versions and malformed data.
pub fn load_model(path: &Path) -> Result<LoadedModel, ModelError> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| ModelError::CorruptModel(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ModelError::CorruptModel("missing format_version".into()))?
        as u32;
    if found != MODEL_FORMAT_VERSION {
        return Err(ModelError::VersionMismatch { found });
    }
    let file: ModelFile =
        serde_json::from_value(value).map_err(|e| ModelError::CorruptModel(e.to_string()))?;
    if file.feature_dim != FEATURE_DIM {
        return Err(ModelError::CorruptModel(format!(
            "feature dimension {} does not match {}",
            file.feature_dim, FEATURE_DIM
        )));
    }
    let mut params = ParameterSet::new();
    for a in &file.params {
        if a.data.len() != a.rows * a.cols {
            return Err(ModelError::CorruptModel(format!(
                "array {} has {} values for shape {}x{}",
                a.name,
                a.data.len(),
                a.rows,
                a.cols
            )));
        }
        params.insert(
            &a.name,
            Matrix::from_vec(a.rows, a.cols, a.data.clone()),
            a.trainable,
            a.decay,
        );
    }
    Ok(LoadedModel {
        params,
        stats: file.stats,
        policy: PolicyConfig {
            d_model: file.d_model,
            k_steps: file.k_steps,
            temperature: file.temperature,
            value_aggregation: file.value_aggregation,
        },
        train_config: file.train_config,
        seed: file.seed,
    })
}

/// A zero-weight-head model (uniform policy) for baselines and smoke runs.
pub fn uniform_model(policy: PolicyConfig, seed: u64) -> LoadedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = crate::policy::init_params(&policy, &mut rng);
    *params.get_mut("weight_head.w") = Matrix::zeros(policy.d_model, 1);
    LoadedModel {
        params,
        stats: FeatureStats::identity(),
        policy,
        train_config: None,
        seed,
    }
}
