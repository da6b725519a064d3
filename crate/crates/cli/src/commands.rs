use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use obsflow::datagen::{advance, generate, l96_observed, sample_nu0, simulate as integrate, Split, Task, TaskSpec};
use obsflow::dynsys::{aligned_steps, SystemKind};
use obsflow::formats::content_hash;
use obsflow::harness::{self, constant_baseline, rollout_stats, Checkpoint, TrainConfig};
use obsflow::neuralop::{rollout as roll, Model};
use obsflow::observability::{check_observability, Reduction, SystemField};
use obsflow::{Dataset, Error, Result, SystemSpec};
use serde::Serialize;
use serde_json::json;

use crate::config::{model_config, ModelSection, Resolved, RunConfig};
use crate::{SplitArg, SystemArgs, SystemName, TaskSource};

fn system_spec(a: &SystemArgs) -> Result<SystemSpec> {
    let kind = match a.system {
        SystemName::L63 => SystemKind::Lorenz63 { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 },
        SystemName::L96 => SystemKind::Lorenz96 { forcing: a.forcing, dim: a.dim },
        SystemName::Ks => SystemKind::KuramotoSivashinsky {
            length: a.length.unwrap_or(32.0 * std::f64::consts::PI),
            grid: a.grid,
        },
    };
    let observed = match (&a.observed, a.system) {
        (Some(o), _) => o.clone(),
        (None, SystemName::L63) => vec![0],
        (None, SystemName::L96) if a.dim == 40 => l96_observed(),
        (None, SystemName::L96) => (0..a.dim).step_by(2).collect(),
        (None, SystemName::Ks) => (0..a.grid).collect(),
    };
    SystemSpec::with_observed(kind, &observed)
}

/// Writes `value` as pretty JSON, creating parent directories.
fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Records what a command produced and from which resolved settings.
fn write_manifest<T: Serialize>(path: &Path, command: &str, config: &T, outputs: &[&Path]) -> Result<String> {
    let hash = content_hash(config)?;
    let outputs: Vec<String> = outputs.iter().map(|p| p.display().to_string()).collect();
    write_json(
        path,
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": hash,
            "config": config,
            "outputs": outputs,
        }),
    )?;
    Ok(hash)
}

fn trajectory_csv(names: &[String], times: &[f64], rows: ArrayView2<f64>) -> String {
    let mut s = format!("t,{}\n", names.join(","));
    for (t, row) in times.iter().zip(rows.rows()) {
        s += &t.to_string();
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn simulate(
    args: &SystemArgs,
    x0: Option<Vec<f64>>,
    seed: Option<u64>,
    burn_in: f64,
    t1: f64,
    dt: f64,
    out: Option<&Path>,
) -> Result<()> {
    let spec = system_spec(args)?;
    if !(t1 >= 0.0 && dt > 0.0) {
        return Err(Error::Usage(format!("need t1 >= 0 and dt > 0, got t1 = {t1}, dt = {dt}")));
    }
    let start = match (x0, seed) {
        (Some(x), _) => {
            if x.len() != spec.state_dim() {
                return Err(Error::Usage(format!("--x0 has {} values, the system has {}", x.len(), spec.state_dim())));
            }
            x
        }
        (None, Some(s)) => advance(&spec.system, &sample_nu0(&spec, s, 1)?[0], burn_in)?,
        (None, None) => return Err(Error::Usage("give either --x0 or --seed".into())),
    };
    let steps = aligned_steps(t1, dt)?;
    let states = integrate(&spec.system, &start, dt, steps)?;
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
    let names: Vec<String> = match spec.system {
        SystemKind::Lorenz63 { .. } => ["x", "y", "z"].map(String::from).to_vec(),
        _ => (0..spec.state_dim()).map(|i| format!("u{i}")).collect(),
    };
    let csv = trajectory_csv(&names, &times, states.view());
    match out {
        Some(path) => {
            write_text(path, &csv)?;
            let snapshot = json!({ "system": spec, "x0": start, "t1": t1, "dt": dt, "seed": seed, "burn_in": burn_in });
            write_manifest(&sidecar(path, ".run.json"), "simulate", &snapshot, &[path])?;
        }
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

pub fn observability(args: &SystemArgs, point: &[f64], n: usize, tolerance: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let spec = system_spec(args)?;
    if point.len() != spec.state_dim() {
        return Err(Error::Usage(format!("--point has {} values, the system has {}", point.len(), spec.state_dim())));
    }
    let field = SystemField::new(&spec)?;
    let report = check_observability(&field, &field.to_pq(point), n, &Reduction::IdentityExtension, tolerance)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn gen_data(source: &TaskSource, count: usize, split: SplitArg, seed: Option<u64>, out: &Path) -> Result<()> {
    let (task, config_seed) = match (&source.config, &source.preset) {
        (Some(path), _) => {
            let cfg = RunConfig::load(path)?;
            (cfg.task()?, cfg.seed)
        }
        (None, Some(name)) => (TaskSpec::preset(name)?, 0),
        (None, None) => return Err(Error::Usage("give --config or --preset".into())),
    };
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let seed = seed.unwrap_or(config_seed);
    let data = generate(&task, count, seed, split)?;
    data.save(out)?;
    let snapshot = json!({ "task": task, "count": count, "split": split, "seed": seed });
    let hash = write_manifest(&sidecar(out, ".run.json"), "gen-data", &snapshot, &[out])?;
    eprintln!("wrote {count} samples to {} (config {})", out.display(), &hash[..12]);
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    data_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    history: Option<&Path>,
    epochs: Option<usize>,
) -> Result<()> {
    let data = Dataset::load(data_path)?;
    let mut resolved = match config {
        Some(path) => {
            let r = RunConfig::load(path)?.resolve()?;
            if r.task != data.task {
                return Err(Error::Config(format!(
                    "dataset {} was generated for a different task than the config describes",
                    data_path.display()
                )));
            }
            r
        }
        None => Resolved {
            seed: 0,
            model: model_config(&ModelSection::default(), &data.task)?,
            task: data.task.clone(),
            train: TrainConfig::default(),
        },
    };
    if let Some(e) = epochs {
        resolved.train.epochs = e;
    }
    resolved.train.validate()?;

    let mut ckpt = match resume {
        Some(path) => {
            let c = Checkpoint::load(path)?;
            if config.is_some() && c.model.config() != &resolved.model {
                return Err(Error::Config("the resumed checkpoint has a different model configuration".into()));
            }
            resolved.model = c.model.config().clone();
            c
        }
        None => Checkpoint::new(Model::new(resolved.model.clone(), resolved.seed)?, data.task.hash()?),
    };
    eprintln!("run config {}", &resolved.hash()?[..12]);
    let history_path = history.map(Path::to_path_buf).unwrap_or_else(|| sidecar(out, ".history.csv"));
    let report = harness::train(&mut ckpt, &data, &resolved.train, Some(out), |r| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {}  lr {:.2e}  {:.1}s",
            r.epoch,
            r.train_loss,
            r.val_loss.map_or("-".into(), |v| format!("{v:.5}")),
            r.lr,
            r.seconds
        )
    })?;
    if report.history.is_empty() {
        ckpt.save(out)?;
    }
    write_text(&history_path, &report.history_csv())?;
    write_manifest(&sidecar(out, ".run.json"), "train", &resolved, &[out, &history_path])?;
    if let Some(b) = report.best_epoch {
        eprintln!("best epoch {b}, checkpoint {}", out.display());
    }
    Ok(())
}

fn load_pair(checkpoint: &Path, data: &Path, force: bool) -> Result<(Checkpoint, Dataset)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = Dataset::load(data)?;
    if ckpt.task_hash != data.task.hash()? {
        if !force {
            return Err(Error::Config(
                "checkpoint and dataset were made for different tasks (pass --force to evaluate anyway)".into(),
            ));
        }
        eprintln!("warning: task hashes differ; continuing because of --force");
    }
    Ok((ckpt, data))
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    model: &'a obsflow::ModelConfig,
    checkpoint_task_hash: &'a str,
    task: &'a TaskSpec,
    split: Split,
    dataset_seed: u64,
    samples: usize,
}

fn eval_snapshot<'a>(ckpt: &'a Checkpoint, data: &'a Dataset) -> EvalSnapshot<'a> {
    EvalSnapshot {
        model: ckpt.model.config(),
        checkpoint_task_hash: &ckpt.task_hash,
        task: &data.task,
        split: data.split,
        dataset_seed: data.seed,
        samples: data.len(),
    }
}

pub fn eval(checkpoint: &Path, data_path: &Path, out_dir: &Path, force: bool) -> Result<()> {
    let (ckpt, data) = load_pair(checkpoint, data_path, force)?;
    let report = obsflow::harness::evaluate(&ckpt.model, &data)?;
    fs::create_dir_all(out_dir)?;
    let json_path = out_dir.join("eval.json");
    let csv_path = out_dir.join("errors.csv");
    write_text(&json_path, &(report.to_json()? + "\n"))?;
    write_text(&csv_path, &report.errors_csv())?;
    let mut outputs = vec![json_path.clone(), csv_path];
    if data.task.task == Task::Forecasting {
        let baseline_path = out_dir.join("baseline.json");
        write_text(&baseline_path, &(constant_baseline(&data)?.to_json()? + "\n"))?;
        outputs.push(baseline_path);
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_manifest(&out_dir.join("run.json"), "eval", &eval_snapshot(&ckpt, &data), &refs)?;
    let s = &report.summary;
    eprintln!("mean {:.5}  median {:.5}  std {:.5}  min {:.5}  max {:.5}", s.mean, s.median, s.std, s.min, s.max);
    if let Some(imp) = report.improvement_percent {
        eprintln!("improvement over constant forecast: {imp:.2}%");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn rollout(
    checkpoint: &Path,
    data_path: &Path,
    n: usize,
    bins: usize,
    samples: Option<usize>,
    trajectories: usize,
    out_dir: &Path,
    force: bool,
) -> Result<()> {
    let (ckpt, data) = load_pair(checkpoint, data_path, force)?;
    if n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let count = samples.unwrap_or(data.len()).min(data.len());
    let stats = rollout_stats(&ckpt.model, &data, n, bins, count)?;
    fs::create_dir_all(out_dir)?;
    let json_path = out_dir.join("rollout.json");
    let hist_path = out_dir.join("histogram.csv");
    write_json(&json_path, &stats)?;
    write_text(&hist_path, &stats.histogram_csv())?;
    let mut outputs = vec![json_path, hist_path];

    let d = data.task.out_channels();
    let tb = data.task.input_window[1];
    let row_b = aligned_steps(tb, data.task.dt)?;
    for j in 0..trajectories.min(count) {
        let r = roll(&ckpt.model, data.input(j), n)?;
        let end = r.times.last().copied().unwrap_or(tb);
        let truth = data.observed_trajectory(j, end)?;
        let k = r.times.len().min(truth.nrows().saturating_sub(row_b + 1));
        let mut rows = ndarray::Array2::zeros((k, 2 * d));
        for i in 0..k {
            for c in 0..d {
                rows[[i, c]] = r.values[[i, c]];
                rows[[i, d + c]] = truth[[row_b + 1 + i, c]];
            }
        }
        let names: Vec<String> =
            (0..d).map(|c| format!("pred_{c}")).chain((0..d).map(|c| format!("true_{c}"))).collect();
        let path = out_dir.join(format!("trajectory_{j}.csv"));
        write_text(&path, &trajectory_csv(&names, &r.times[..k], rows.view()))?;
        outputs.push(path);
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    let snapshot = json!({ "eval": eval_snapshot(&ckpt, &data), "n": n, "bins": bins, "samples": count });
    write_manifest(&out_dir.join("run.json"), "rollout", &snapshot, &refs)?;
    eprintln!(
        "{} of {count} rollouts kept ({} diverged), histogram overlap {:.3}, W1 {:.4}",
        stats.samples_used, stats.diverged, stats.overlap, stats.wasserstein
    );
    Ok(())
}
