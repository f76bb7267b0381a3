use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semidiff_lab::checkpoint;
use semidiff_lab::experiment::{self, MANIFEST, RESULTS};
use semidiff_lab::report::{self, REPORT_LONG, SUMMARY};
use semidiff_lab::table::Table;
use semidiff_lab::ExperimentConfig;

const TASKS: &str = r#"
[[pipeline.tasks]]
d_x = 1
d_y = 1
marginal = { kind = "truncated_normal", mean = [0.25], std = [0.15] }
components = [{ weight = 1.0, mean = { offset = [-1.0], weights = [[4.0]] }, cov = [[1.0]] }]

[[pipeline.tasks]]
d_x = 1
d_y = 1
marginal = { kind = "truncated_normal", mean = [0.75], std = [0.15] }
components = [{ weight = 1.0, mean = { offset = [3.0], weights = [[-4.0]] }, cov = [[1.0]] }]

[pipeline.specialist]
family = "specialist"
widths = [2]

[pipeline.generalist]
family = "generalist"
widths = [4]

[pipeline.sampler]
n_steps = 20
truncation = {}

[pipeline.scalarization]
kind = "linear"
weights = [0.5, 0.5]

[pipeline.stage1]
step_size = 0.01
steps = 60
batch_size = 16
eval_every = 20
holdout_draws = 4

[pipeline.stage2]
step_size = 0.01
steps = 60
batch_size = 16
eval_every = 20
holdout_draws = 4

[pipeline.eval]
lp_draws = 500
sampler = { n_steps = 20 }
tv = { n_conditions = 1, samples_per_condition = 10000, bins = 20 }
"#;

fn distribution_config() -> String {
    format!("mode = \"distribution\"\nseeds = [0, 1]\nsave_pseudo = true\n\n[pipeline]\nn_labeled = 30\nn_pseudo = 60\n{TASKS}")
}

fn sweep_config() -> String {
    format!(
        "mode = \"sweep\"\nseeds = [3]\n\n[sweep]\nn_grid = [20, 30]\nbig_n_grid = [40, 60]\n\n[pipeline]\nn_labeled = 20\nn_pseudo = 40\n{TASKS}"
    )
}

fn pareto_config() -> String {
    format!(
        "mode = \"pareto\"\nseeds = [0]\n\n[pareto]\nweights = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]\n\n[pipeline]\nn_labeled = 30\nn_pseudo = 60\nbaseline = false\n{TASKS}"
    )
}

const MDP_CONFIG: &str = r#"
mode = "mdp"
seeds = [0]
save_trajectories = 2

[mdp]
n_labeled = 20
n_pseudo = 40

[[mdp.envs]]
env = { d_y = 1, gamma = 0.5, gain = 0.5, reward = { kind = "reach", goal = [0.25], scale = 2.0 } }
expert = { mean = { offset = [0.25], weights = [[-1.0]] }, cov = [[0.25]] }

[[mdp.envs]]
env = { d_y = 1, gamma = 0.5, gain = 0.5, reward = { kind = "reach", goal = [0.75], scale = 2.0 } }
expert = { mean = { offset = [0.75], weights = [[-1.0]] }, cov = [[0.25]] }

[mdp.specialist]
family = "specialist"
widths = [2]
growth_caps = { m0 = 8.0, m1 = 8.0 }

[mdp.generalist]
family = "generalist"
widths = [4]
growth_caps = { m0 = 8.0, m1 = 8.0 }

[mdp.sampler]
n_steps = 20
truncation = {}

[mdp.scalarization]
kind = "linear"
weights = [0.5, 0.5]

[mdp.stage1]
step_size = 0.01
steps = 40
batch_size = 16
eval_every = 20
holdout_draws = 4

[mdp.stage2]
step_size = 0.01
steps = 40
batch_size = 16
eval_every = 20
holdout_draws = 4

[mdp.eval]
n_rollouts = 30
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semidiff"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg("--config").arg(config).arg("--out").arg(out).args(extra).output().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {}", String::from_utf8_lossy(&out.stderr)))
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn missing_config_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&dir.path().join("nope.toml"), &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["exit_code"], 3);
}

#[test]
fn invalid_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    for text in [
        "mode = \"distribution\"\n".to_string(),
        "mode = \"nonsense\"\n".to_string(),
        distribution_config().replace("seeds = [0, 1]", "seeds = [1, 1]"),
        distribution_config().replace("weights = [0.5, 0.5]", "weights = [0.5, -0.5]"),
        distribution_config().replace("save_pseudo = true", "save_pseudo = true\nunknown_knob = 1"),
    ] {
        let cfg = write_config(dir.path(), &text);
        let out = run(&cfg, &dir.path().join("out"), &["--dry-run"]);
        assert_eq!(out.status.code(), Some(2), "{text}\n{}", String::from_utf8_lossy(&out.stderr));
        assert!(error_json(&out)["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}

#[test]
fn dry_run_prints_plan_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &sweep_config());
    let target = dir.path().join("out");
    let out = run(&cfg, &target, &["--dry-run"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let hash = ExperimentConfig::load(&cfg).unwrap().hash();
    assert!(text.contains(&format!("config hash {hash}")), "{text}");
    assert!(text.contains("4 cells x 1 seeds"), "{text}");
    assert!(!target.exists());
}

#[test]
fn distribution_run_writes_results_and_report_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &distribution_config());
    let target = dir.path().join("run");
    let out = run(&cfg, &target, &["--workers", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let manifest: serde_json::Value = serde_json::from_slice(&read(&target.join(MANIFEST))).unwrap();
    assert_eq!(manifest["mode"], "distribution");
    assert_eq!(manifest["config_hash"], ExperimentConfig::load(&cfg).unwrap().hash());
    for f in manifest["files"].as_array().unwrap() {
        assert!(target.join(f.as_str().unwrap()).exists(), "{f}");
    }
    let results = Table::read(&target.join(RESULTS)).unwrap();
    assert_eq!(results.rows.len(), 6, "specialists, generalist and baseline per seed");
    let (tv, model) = (results.column("scalarized_tv").unwrap(), results.column("model").unwrap());
    assert!(results.rows.iter().filter(|r| r[model] != "specialist").all(|r| r[tv].parse::<f64>().is_ok_and(|v| (0.0..=1.0).contains(&v))));
    let ck = results.column("checkpoint").unwrap();
    // specialist rows list one checkpoint per task
    for path in results.rows.iter().flat_map(|r| r[ck].split(';')) {
        let model = checkpoint::load(&target.join(path)).unwrap();
        assert!(model.capacity() > 0);
    }
    assert!(target.join("pseudo/seed0_task1.csv").exists());

    let report_out = dir.path().join("report");
    for _ in 0..2 {
        let out = bin().arg("report").arg(&target).arg("--out").arg(&report_out).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let first = (read(&report_out.join(REPORT_LONG)), read(&report_out.join(SUMMARY)));
    let out = bin().arg("report").arg(&target).output().unwrap();
    assert!(out.status.success());
    assert_eq!(first, (read(&target.join(REPORT_LONG)), read(&target.join(SUMMARY))));
}

#[test]
fn report_on_empty_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("report").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(error_json(&out)["message"].as_str().unwrap().contains(MANIFEST));
}

#[test]
fn sweep_writes_one_row_per_cell_plus_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(&sweep_config()).unwrap();
    let out = experiment::run(&cfg, &dir.path().join("sweep")).unwrap();
    // specialist and generalist rows per (n, N) cell, one baseline per n
    assert_eq!(out.results.rows.len(), 10);
    let sweep = out.sweep.unwrap();
    assert_eq!(sweep.cells.len(), 4);
    assert_eq!(sweep.baselines.len(), 2);
    let r = report::build(&dir.path().join("sweep")).unwrap();
    assert!(r.summary.contains("by n (rows) and N (columns)"), "{}", r.summary);
}

#[test]
fn pareto_run_marks_front_membership() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(&pareto_config()).unwrap();
    let out = experiment::run(&cfg, &dir.path().join("pareto")).unwrap();
    assert_eq!(out.results.rows.len(), 3);
    assert!(out.results.column("dominated").is_some());
    assert!(dir.path().join("pareto/pareto_front.json").exists());
    assert_eq!(out.pareto.unwrap().front.points.len(), 3);
}

#[test]
fn mdp_run_writes_gaps_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MDP_CONFIG);
    let target = dir.path().join("mdp");
    let out = run(&cfg, &target, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = Table::read(&target.join(RESULTS)).unwrap();
    assert_eq!(results.rows.len(), 3);
    let v = results.column("reward_violations").unwrap();
    assert!(results.rows.iter().all(|r| r[v] == "0"));
    assert!(results.column("gap_1").is_some());
    let manifest: serde_json::Value = serde_json::from_slice(&read(&target.join(MANIFEST))).unwrap();
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert!(files.iter().any(|f| f.starts_with("trajectories/")), "{files:?}");
}

/// Results must not depend on the worker count or on the run.
#[test]
fn reruns_and_worker_counts_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &sweep_config());
    let mut outputs = Vec::new();
    for (i, workers) in ["1", "3", "3"].iter().enumerate() {
        let target = dir.path().join(format!("run{i}"));
        let out = run(&cfg, &target, &["--workers", workers]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for f in [RESULTS, MANIFEST] {
            files.push((f.into(), read(&target.join(f))));
        }
        let mut ckpts: Vec<_> = fs::read_dir(target.join("checkpoints")).unwrap().map(|e| e.unwrap().path()).collect();
        ckpts.sort();
        for p in ckpts {
            files.push((p.file_name().unwrap().to_string_lossy().into_owned(), read(&p)));
        }
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
}

#[test]
fn seed_override_runs_a_single_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &distribution_config());
    let out = run(&cfg, &dir.path().join("one"), &["--seed-override", "7", "--dry-run"]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("1 seed(s) [7]"));
}
