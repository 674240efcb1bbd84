//! Command-line front end: instance generation, pool curation, training,
//! solving, benchmarking, and gradient checking.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use nodesel::bench::{
    aggregate, load_model, rows_to_csv, run_bench, save_model, uniform_model, AggregateConfig,
    LoadedModel, NamedInstance,
};
use nodesel::bnb::{
    solve, BestEstimate, BestFirst, Budget, DepthFirst, HybridPlunge, ScheduleConfig,
};
use nodesel::features::FEATURE_DIM;
use nodesel::instances::{
    curate, gen_tsp, gen_tsp_batches, gen_uflp_kochetov, parse_instance_json, CurationConfig,
};
use nodesel::nn::{grad_check, Matrix, Tape};
use nodesel::policy::{PolicyConfig, ValueAggregation};
use nodesel::ppo::{step_loss_into, PolicySelector, PpoLossConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "nodesel", about = "Branch-and-bound with a learned node selector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectorKind {
    Policy,
    Bestfirst,
    Dfs,
    Estimate,
    Hybrid,
}

#[derive(Subcommand)]
enum Command {
    /// Generate Euclidean TSP instances as {n, dist} JSON files.
    GenTsp {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate hard facility-location instances in the shared MILP JSON.
    GenUflp {
        #[arg(long, default_value_t = 100)]
        facilities: usize,
        #[arg(long, default_value_t = 100)]
        clients: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curate a training pool of intermediary-difficult TSP instances.
    Curate {
        #[arg(long, default_value_t = 8)]
        n_min: usize,
        #[arg(long, default_value_t = 10)]
        n_max: usize,
        #[arg(long, default_value_t = 60)]
        batches: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.15)]
        sigma: f64,
        #[arg(long, default_value_t = 20)]
        target: usize,
        #[arg(long, default_value_t = 300)]
        node_budget: usize,
        #[arg(long, default_value_t = 30)]
        min_nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pool directory (instances, manifest, curation report).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the selection policy on a curated pool.
    Train {
        /// Pool directory written by `curate`.
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value_t = 8)]
        rollouts: usize,
        #[arg(long, default_value_t = 128)]
        d_model: usize,
        #[arg(long, default_value_t = 3)]
        k_steps: usize,
        #[arg(long, default_value_t = 400)]
        node_budget: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 3e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        #[arg(long, default_value_t = 0.95)]
        gae_lambda: f64,
        #[arg(long, default_value_t = 0.01)]
        entropy_bonus: f64,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        minibatch: usize,
        /// Cap on minibatches replayed per epoch.
        #[arg(long)]
        minibatches_per_epoch: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model output path.
        #[arg(long)]
        model: PathBuf,
        /// Learning-curve CSV output path.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Solve one instance with a chosen selector.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = SelectorKind::Bestfirst)]
        selector: SelectorKind,
        /// Model file (required for the policy selector).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        node_budget: Option<usize>,
        /// Wall-clock budget in seconds.
        #[arg(long)]
        time_budget: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Result JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark a model against the classical baseline on a directory of
    /// instances.
    Bench {
        #[arg(long)]
        instances: PathBuf,
        /// Model file; a zero-initialized (uniform) policy when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 400)]
        node_budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        d_model: usize,
        #[arg(long, default_value_t = 3)]
        k_steps: usize,
        /// Rows CSV output path.
        #[arg(long)]
        out: PathBuf,
        /// Summary JSON output path.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Compare analytic policy-loss gradients with finite differences.
    GradCheck {
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        k_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenTsp { n, count, seed, out } => {
            fs::create_dir_all(&out)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..count {
                let inst = gen_tsp(n, &mut rng);
                let path = out.join(format!("tsp_n{n}_{i:03}.json"));
                fs::write(&path, serde_json::to_string(&inst)?)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GenUflp {
            facilities,
            clients,
            count,
            seed,
            out,
        } => {
            fs::create_dir_all(&out)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..count {
                let lp = gen_uflp_kochetov(facilities, clients, &mut rng);
                let path = out.join(format!("uflp_{facilities}x{clients}_{i:03}.json"));
                fs::write(&path, serde_json::to_string(&lp)?)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Curate {
            n_min,
            n_max,
            batches,
            batch_size,
            sigma,
            target,
            node_budget,
            min_nodes,
            seed,
            out,
        } => {
            fs::create_dir_all(&out)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let candidate_batches =
                gen_tsp_batches(batches, batch_size, n_min, n_max, sigma, &mut rng);
            let cfg = CurationConfig {
                budget: Budget::nodes(node_budget),
                min_nodes,
                target_count: target,
            };
            let (pool, report) = curate(&candidate_batches, &cfg)
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            let mut manifest = Vec::new();
            for inst in &pool {
                let file = format!("{}.json", inst.id);
                fs::write(out.join(&file), serde_json::to_string(&inst.lp)?)?;
                manifest.push(json!({
                    "id": inst.id,
                    "file": file,
                    "baseline_gap": inst.baseline_gap,
                    "baseline_nodes": inst.baseline_nodes,
                    "budget": node_budget,
                }));
            }
            fs::write(
                out.join("pool.json"),
                serde_json::to_string_pretty(&json!({ "instances": manifest }))?,
            )?;
            fs::write(out.join("report.csv"), report.to_csv())?;
            println!("curated {} instances into {}", pool.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            pool,
            iterations,
            rollouts,
            d_model,
            k_steps,
            node_budget,
            temperature,
            lr,
            gamma,
            gae_lambda,
            entropy_bonus,
            epochs,
            minibatch,
            minibatches_per_epoch,
            seed,
            model,
            curve,
        } => {
            let instances = load_pool(&pool)?;
            let mut config = TrainConfig {
                iterations,
                rollouts_per_iteration: rollouts,
                node_budget,
                epochs_per_batch: epochs,
                minibatch_size: minibatch,
                minibatches_per_epoch,
                gamma,
                gae_lambda,
                entropy_bonus,
                seed,
                policy: PolicyConfig {
                    d_model,
                    k_steps,
                    temperature,
                    value_aggregation: ValueAggregation::PathMean,
                },
                ..Default::default()
            };
            config.adam.lr = lr;
            let out = nodesel::train(&instances, &config);
            save_model(
                &model,
                &out.best_params,
                &out.stats,
                &config.policy,
                Some(&config),
                seed,
            )
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            if let Some(curve_path) = curve {
                fs::write(&curve_path, nodesel::ppo::curve_to_csv(&out.curve))?;
            }
            let last = out.curve.last().map(|r| r.mean_reward).unwrap_or(0.0);
            println!(
                "trained {} iterations; best mean reward {:.3} at iteration {}; final {:.3}",
                out.curve.len(),
                out.curve
                    .iter()
                    .map(|r| r.mean_reward)
                    .fold(f64::NEG_INFINITY, f64::max),
                out.best_iteration,
                last
            );
            println!("model written to {}", model.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Solve {
            instance,
            selector,
            model,
            node_budget,
            time_budget,
            seed,
            out,
        } => {
            let text = fs::read_to_string(&instance)
                .with_context(|| format!("reading {}", instance.display()))?;
            let lp = parse_instance_json(&text).map_err(|e| anyhow::anyhow!(e))?;
            let budget = Budget {
                max_nodes: node_budget,
                max_seconds: time_budget,
            };
            if budget.max_nodes.is_none() && budget.max_seconds.is_none() {
                bail!("set --node-budget and/or --time-budget");
            }
            let result = match selector {
                SelectorKind::Bestfirst => solve(&lp, &mut BestFirst, budget),
                SelectorKind::Dfs => solve(&lp, &mut DepthFirst, budget),
                SelectorKind::Estimate => solve(&lp, &mut BestEstimate, budget),
                SelectorKind::Hybrid => solve(&lp, &mut HybridPlunge, budget),
                SelectorKind::Policy => {
                    let loaded = load_model_arg(model.as_deref())?;
                    let mut sel = PolicySelector::new(
                        &loaded.params,
                        &loaded.stats,
                        loaded.policy,
                        ScheduleConfig::default(),
                        seed,
                    );
                    solve(&lp, &mut sel, budget)
                }
            };
            let text = serde_json::to_string_pretty(&result)?;
            match out {
                Some(path) => fs::write(path, text)?,
                None => println!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench {
            instances,
            model,
            node_budget,
            seed,
            d_model,
            k_steps,
            out,
            summary,
        } => {
            let loaded = match model {
                Some(path) => load_model(&path).map_err(|e| anyhow::anyhow!(e.to_string()))?,
                None => uniform_model(
                    PolicyConfig {
                        d_model,
                        k_steps,
                        ..Default::default()
                    },
                    seed,
                ),
            };
            let named = load_instance_dir(&instances)?;
            let mut output = run_bench(&named.0, &loaded, Budget::nodes(node_budget), seed);
            // Unparseable files are reported alongside solver-side skips.
            output.skipped.extend(named.1);
            fs::write(&out, rows_to_csv(&output.rows))?;
            for (name, reason) in &output.skipped {
                eprintln!("skipped {name}: {reason}");
            }
            match aggregate(&output.rows, &AggregateConfig::default()) {
                Ok(s) => {
                    let text = serde_json::to_string_pretty(&s)?;
                    match summary {
                        Some(path) => fs::write(path, &text)?,
                        None => println!("{text}"),
                    }
                    println!("rows written to {}", out.display());
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        Command::GradCheck {
            d_model,
            k_steps,
            seed,
        } => {
            let pass = run_grad_check(d_model, k_steps, seed)?;
            Ok(if pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn load_model_arg(path: Option<&Path>) -> Result<LoadedModel> {
    let path = path.context("--model is required for the policy selector")?;
    load_model(path).map_err(|e| anyhow::anyhow!(e.to_string()))
}

/// Reads a pool directory produced by `curate`.
fn load_pool(dir: &Path) -> Result<Vec<nodesel::instances::CuratedInstance>> {
    let manifest_text = fs::read_to_string(dir.join("pool.json"))
        .with_context(|| format!("reading {}/pool.json", dir.display()))?;
    let manifest: serde_json::Value = serde_json::from_str(&manifest_text)?;
    let entries = manifest["instances"]
        .as_array()
        .context("pool.json has no instances array")?;
    let mut pool = Vec::new();
    for entry in entries {
        let id = entry["id"].as_str().context("instance without id")?;
        let file = entry["file"].as_str().context("instance without file")?;
        let lp_text = fs::read_to_string(dir.join(file))?;
        pool.push(nodesel::instances::CuratedInstance {
            id: id.to_string(),
            lp: serde_json::from_str(&lp_text)?,
            baseline_gap: entry["baseline_gap"].as_f64().unwrap_or(f64::NAN),
            baseline_nodes: entry["baseline_nodes"].as_u64().unwrap_or(0) as usize,
        });
    }
    if pool.is_empty() {
        bail!("pool at {} is empty", dir.display());
    }
    Ok(pool)
}

/// Loads every `*.json` instance in a directory in sorted filename order.
/// Files that fail to parse come back as (name, reason) skips.
#[allow(clippy::type_complexity)]
fn load_instance_dir(dir: &Path) -> Result<(Vec<NamedInstance>, Vec<(String, String)>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "json").unwrap_or(false))
        .filter(|p| p.file_name().map(|n| n != "pool.json").unwrap_or(true))
        .collect();
    paths.sort();
    let mut named = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match fs::read_to_string(&path) {
            Ok(text) => match parse_instance_json(&text) {
                Ok(lp) => named.push(NamedInstance { name, lp }),
                Err(reason) => skipped.push((name, reason)),
            },
            Err(e) => skipped.push((name, e.to_string())),
        }
    }
    if named.is_empty() && skipped.is_empty() {
        bail!("no .json instances found in {}", dir.display());
    }
    Ok((named, skipped))
}

/// Builds a frozen toy batch (three-node tree, two candidates) and checks
/// the composite PPO loss against central finite differences. The value
/// branch is frozen at the base embeddings inside the closure, mirroring
/// the detached value head.
fn run_grad_check(d_model: usize, k_steps: usize, seed: u64) -> Result<bool> {
    use rand::Rng;
    let policy = PolicyConfig {
        d_model,
        k_steps,
        temperature: 1.0,
        value_aggregation: ValueAggregation::PathMean,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = nodesel::policy::init_params(&policy, &mut rng);
    for t in 0..k_steps {
        *params.get_mut(&format!("gnn.{t}.alpha")) = Matrix::scalar(0.5);
    }
    let index = nodesel::nn::TreeIndex {
        parent: vec![None, Some(0), Some(0)],
        left: vec![Some(1), None, None],
        right: vec![Some(2), None, None],
        depth: vec![0, 1, 1],
    };
    let features = Matrix::from_fn(3, FEATURE_DIM, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
    let view = nodesel::policy::TreeView::new(index, features);
    let candidates = vec![1usize, 2usize];
    let loss_cfg = PpoLossConfig {
        clip: 0.2,
        entropy_bonus: 0.01,
        value_loss_weight: 0.5,
        policy,
    };
    let old_log_prob = -0.95;
    let advantage = 0.8;
    let value_target = 0.25;
    let report = grad_check(
        |p| {
            let mut tape = Tape::new();
            let sl = step_loss_into(
                &mut tape,
                &view,
                &candidates,
                0,
                old_log_prob,
                advantage,
                value_target,
                p,
                &loss_cfg,
            );
            (tape, sl.loss)
        },
        &mut params,
        1e-5,
        1e-4,
    );
    for (name, err) in &report.per_param {
        println!(
            "{:<16} max relative error {:.3e} {}",
            name,
            err,
            if *err < report.tolerance { "ok" } else { "FAIL" }
        );
    }
    match &report.worst {
        Some((name, err)) => println!(
            "worst: {name} at {err:.3e} (tolerance {:.1e}) -> {}",
            report.tolerance,
            if report.pass { "PASS" } else { "FAIL" }
        ),
        None => println!("no trainable parameters"),
    }
    Ok(report.pass)
}
