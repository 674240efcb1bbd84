//! End-to-end exercise of the binary: generate, curate, train, solve,
//! bench, grad-check.

use std::path::Path;
use std::process::Command;

fn nodesel() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nodesel"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    let instances = base.join("instances");
    let pool = base.join("pool");
    let model = base.join("model.json");
    let curve = base.join("curve.csv");
    let rows = base.join("rows.csv");
    let summary = base.join("summary.json");

    run_ok(nodesel()
        .args(["gen-tsp", "--n", "6", "--count", "3", "--seed", "5", "--out"])
        .arg(&instances));
    run_ok(nodesel()
        .args([
            "gen-uflp",
            "--facilities",
            "6",
            "--clients",
            "6",
            "--count",
            "1",
            "--seed",
            "5",
            "--out",
        ])
        .arg(&instances));
    assert_eq!(count_json(&instances), 4);

    run_ok(nodesel()
        .args([
            "curate",
            "--n-min",
            "8",
            "--n-max",
            "9",
            "--batches",
            "30",
            "--batch-size",
            "3",
            "--target",
            "3",
            "--node-budget",
            "120",
            "--min-nodes",
            "20",
            "--seed",
            "3",
            "--out",
        ])
        .arg(&pool));
    assert!(pool.join("pool.json").exists());
    assert!(pool.join("report.csv").exists());

    run_ok(nodesel()
        .arg("train")
        .arg("--pool")
        .arg(&pool)
        .args([
            "--iterations",
            "2",
            "--rollouts",
            "3",
            "--d-model",
            "16",
            "--k-steps",
            "1",
            "--node-budget",
            "40",
            "--seed",
            "7",
            "--model",
        ])
        .arg(&model)
        .arg("--curve")
        .arg(&curve));
    assert!(model.exists());
    let curve_text = std::fs::read_to_string(&curve).unwrap();
    assert_eq!(curve_text.lines().count(), 3, "header plus two iterations");

    // Solve a TSP instance with both a classical selector and the model.
    let instance = first_json(&instances);
    let classical = run_ok(nodesel()
        .arg("solve")
        .arg("--instance")
        .arg(&instance)
        .args(["--selector", "bestfirst", "--node-budget", "500"]));
    assert!(classical.contains("final_gap"));
    run_ok(nodesel()
        .arg("solve")
        .arg("--instance")
        .arg(&instance)
        .args(["--selector", "policy", "--node-budget", "60", "--model"])
        .arg(&model));

    run_ok(nodesel()
        .arg("bench")
        .arg("--instances")
        .arg(&instances)
        .arg("--model")
        .arg(&model)
        .args(["--node-budget", "60", "--seed", "2", "--out"])
        .arg(&rows)
        .arg("--summary")
        .arg(&summary));
    let rows_text = std::fs::read_to_string(&rows).unwrap();
    assert!(rows_text.starts_with(
        "instance,gap_policy,gap_baseline,nodes_policy,nodes_baseline,reward,utility,utility_per_node\n"
    ));
    assert_eq!(rows_text.lines().count(), 5, "header plus four instances");
    let summary_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert!(summary_json["mean_reward"].is_number());

    // Byte-identical rerun.
    let rows2 = base.join("rows2.csv");
    run_ok(nodesel()
        .arg("bench")
        .arg("--instances")
        .arg(&instances)
        .arg("--model")
        .arg(&model)
        .args(["--node-budget", "60", "--seed", "2", "--out"])
        .arg(&rows2));
    assert_eq!(rows_text, std::fs::read_to_string(&rows2).unwrap());

    let gc = run_ok(nodesel().args(["grad-check", "--d-model", "8", "--k-steps", "1", "--seed", "1"]));
    assert!(gc.contains("PASS"));
}

fn count_json(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .map(|x| x == "json")
                .unwrap_or(false)
        })
        .count()
}

fn first_json(dir: &Path) -> std::path::PathBuf {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().map(|x| x == "json").unwrap_or(false))
        .collect();
    paths.sort();
    paths.into_iter().next().unwrap()
}
