use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use obsflow::harness::Checkpoint;
use obsflow::Dataset;

const CONFIG: &str = r#"
seed = 1

[task.spec]
task = "forecasting"
input_window = [0.0, 1.0]
output_window = [1.0, 1.5]
dt = 0.05
burn_in = 5.0

[task.spec.system]
p_indices = [0]
q_indices = [1, 2]

[task.spec.system.system]
kind = "lorenz63"
sigma = 10.0
rho = 28.0
beta = 2.6666666666666665

[model]
layers = 1
channels = 8
heads = 2
mlp_hidden = 8

[train]
epochs = 2
batch_size = 4
lr = 0.003
"#;

fn obsflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obsflow")).args(args).env_remove("OBSFLOW_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = obsflow(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace { dir: tempfile::tempdir().unwrap() };
        fs::write(ws.path("run.toml"), CONFIG).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen(&self, name: &str, count: &str, split: &str) -> PathBuf {
        let out = self.path(name);
        ok(&["gen-data", "--config", s(&self.path("run.toml")), "--count", count, "--split", split, "--out", s(&out)]);
        out
    }

    fn trained(&self) -> (PathBuf, PathBuf) {
        let train = self.gen("train.obsf", "12", "train");
        let test = self.gen("test.obsf", "4", "test");
        let ck = self.path("model.obsp");
        ok(&["train", "--config", s(&self.path("run.toml")), "--data", s(&train), "--out", s(&ck)]);
        (ck, test)
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_writes_expected_rows() {
    let ws = Workspace::new();
    let out = ws.path("l63.csv");
    ok(&["simulate", "--system", "l63", "--x0", "1,1,1", "--t1", "5", "--dt", "0.02", "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 252);
    assert_eq!(lines[0], "t,x,y,z");
    assert_eq!(lines[1], "0,1,1,1");
    assert_eq!(json(&ws.path("l63.csv.run.json"))["command"], "simulate");

    let single = ok(&["simulate", "--system", "l63", "--x0", "1,-2,3", "--t1", "0"]);
    assert_eq!(String::from_utf8(single.stdout).unwrap(), "t,x,y,z\n0,1,-2,3\n");

    assert_eq!(code(&obsflow(&["simulate", "--system", "l99", "--x0", "1", "--t1", "1"])), 2);
    assert_eq!(code(&obsflow(&["simulate", "--system", "l63", "--t1", "1"])), 2);
}

#[test]
fn simulate_ks_from_seed() {
    let out = ok(&["simulate", "--system", "ks", "--grid", "64", "--seed", "3", "--t1", "1", "--dt", "0.25"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 65);
}

#[test]
fn observability_reports() {
    let report = |point: &str| {
        let out = ok(&["observability", "--system", "l63", "--point", point, "--n", "2"]);
        serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap()
    };
    let r = report("1,1,1");
    assert_eq!(r["satisfied"], true);
    assert_eq!(r["rank"], 3);
    assert_eq!(report("0,1,1")["satisfied"], false);
    assert_eq!(code(&obsflow(&["observability", "--system", "l63", "--point", "1,1,1", "--n", "0"])), 2);
    assert_eq!(code(&obsflow(&["observability", "--system", "l63", "--point", "1,1"])), 2);
}

#[test]
fn gen_data_is_reproducible() {
    let ws = Workspace::new();
    let a = ws.gen("a.obsf", "5", "train");
    let b = ws.gen("b.obsf", "5", "train");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = ws.gen("c.obsf", "5", "test");
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let data = Dataset::load(&a).unwrap();
    assert_eq!(data.inputs.dim(), (5, 21, 1));
    assert_eq!(data.outputs.dim(), (5, 11, 1));
    let manifest = json(&ws.path("a.obsf.run.json"));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let zero = obsflow(&["gen-data", "--preset", "l63-smoothing", "--count", "0", "--out", s(&ws.path("z.obsf"))]);
    assert_eq!(code(&zero), 2);
    let unknown = obsflow(&["gen-data", "--preset", "l42", "--count", "1", "--out", s(&ws.path("z.obsf"))]);
    assert_eq!(code(&unknown), 2);
}

#[test]
fn config_errors_exit_with_two() {
    let ws = Workspace::new();
    let bad = ws.path("bad.toml");
    fs::write(&bad, CONFIG.replace("lr = 0.003", "lr = 0.003\nwarmup = 3")).unwrap();
    let out = obsflow(&["gen-data", "--config", s(&bad), "--count", "1", "--out", s(&ws.path("x.obsf"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup"));
    assert_eq!(code(&obsflow(&["--threads", "0", "observability", "--system", "l63", "--point", "1,1,1"])), 2);
}

#[test]
fn train_eval_and_resume() {
    let ws = Workspace::new();
    let (ck, test) = ws.trained();
    let history = fs::read_to_string(ws.path("model.obsp.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,train_loss"));
    let saved = Checkpoint::load(&ck).unwrap();
    assert_eq!(saved.resume.as_ref().unwrap().epochs_done, 2);
    let manifest = json(&ws.path("model.obsp.run.json"));
    assert_eq!(manifest["config"]["train"]["epochs"], 2);

    let resumed = ws.path("resumed.obsp");
    ok(&[
        "train", "--config", s(&ws.path("run.toml")), "--data", s(&ws.path("train.obsf")), "--out", s(&resumed),
        "--resume", s(&ck), "--epochs", "3",
    ]);
    let r = Checkpoint::load(&resumed).unwrap();
    assert_eq!(r.resume.as_ref().unwrap().epochs_done, 3);
    assert!(r.resume.as_ref().unwrap().adam.step > saved.resume.as_ref().unwrap().adam.step);
    assert_eq!(fs::read_to_string(ws.path("resumed.obsp.history.csv")).unwrap().lines().count(), 4);

    let dir = ws.path("eval");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&test), "--out-dir", s(&dir)]);
    let report = json(&dir.join("eval.json"));
    for key in ["mean", "median", "std", "min", "max", "improvement_percent"] {
        assert!(report[key].is_number(), "{key}");
    }
    assert_eq!(report["errors"].as_array().unwrap().len(), 4);
    assert_eq!(json(&dir.join("baseline.json"))["predictor"], "constant_baseline");
    assert_eq!(fs::read_to_string(dir.join("errors.csv")).unwrap().lines().count(), 5);

    let again = ws.path("eval2");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&test), "--out-dir", s(&again)]);
    assert_eq!(fs::read(dir.join("errors.csv")).unwrap(), fs::read(again.join("errors.csv")).unwrap());

    let missing = obsflow(&["eval", "--checkpoint", s(&ws.path("nope.obsp")), "--data", s(&test), "--out-dir", s(&dir)]);
    assert_eq!(code(&missing), 4);
}

#[test]
fn mismatched_task_needs_force() {
    let ws = Workspace::new();
    let (ck, _) = ws.trained();
    let other = ws.path("other.toml");
    fs::write(&other, CONFIG.replace("burn_in = 5.0", "burn_in = 6.0")).unwrap();
    let data = ws.path("other.obsf");
    ok(&["gen-data", "--config", s(&other), "--count", "3", "--out", s(&data)]);
    let dir = ws.path("e");
    assert_eq!(code(&obsflow(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out-dir", s(&dir)])), 2);
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out-dir", s(&dir), "--force"]);

    let wrong = obsflow(&["train", "--config", s(&ws.path("run.toml")), "--data", s(&data), "--out", s(&ws.path("w.obsp"))]);
    assert_eq!(code(&wrong), 2);
}

#[test]
fn single_rollout_matches_forecast() {
    let ws = Workspace::new();
    let (ck, test) = ws.trained();
    let dir = ws.path("roll");
    ok(&["rollout", "--checkpoint", s(&ck), "--data", s(&test), "--n", "1", "--bins", "10", "--out-dir", s(&dir)]);
    let model = Checkpoint::load(&ck).unwrap().model;
    let data = Dataset::load(&test).unwrap();
    let pred = model.predict(data.input(0)).unwrap();
    let csv = fs::read_to_string(dir.join("trajectory_0.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), pred.nrows() - 1);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[1], pred[[i + 1, 0]]);
        assert_eq!(row[2], data.output(0)[[i + 1, 0]]);
    }

    let long = ws.path("long");
    ok(&["rollout", "--checkpoint", s(&ck), "--data", s(&test), "--n", "6", "--out-dir", s(&long)]);
    let stats = json(&long.join("rollout.json"));
    let sum = |k: &str| stats[k].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum::<f64>();
    assert!((sum("pred") - 1.0).abs() < 1e-12);
    assert!((sum("truth") - 1.0).abs() < 1e-12);
    assert_eq!(stats["edges"].as_array().unwrap().len(), 101);
    assert_eq!(fs::read_to_string(long.join("histogram.csv")).unwrap().lines().count(), 101);
}
