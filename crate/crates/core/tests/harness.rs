use ndarray::{Array2, Array3};
use obsflow::datagen::{generate, SampleSeed, Split, TaskSpec};
use obsflow::harness::{
    constant_baseline, evaluate, evaluate_predictions, improvement, rollout_stats, train, Checkpoint, Schedule,
    Summary, TrainConfig,
};
use obsflow::neuralop::{Architecture, Model, ModelConfig};
use obsflow::{Dataset, Error, SystemSpec};

fn small_smoothing() -> TaskSpec {
    let mut t = TaskSpec::smoothing(SystemSpec::lorenz63(&[0]).unwrap(), [0.0, 1.0], 0.05);
    t.burn_in = Some(5.0);
    t
}

fn small_forecasting() -> TaskSpec {
    let mut t = TaskSpec::forecasting(SystemSpec::lorenz63(&[0]).unwrap(), [0.0, 1.0], 0.5, 0.05);
    t.burn_in = Some(5.0);
    t
}

fn small_model(task: &TaskSpec, arch: Architecture, seed: u64) -> Checkpoint {
    let mut c = ModelConfig::new(arch, task.in_channels(), task.out_channels(), task.input_grid(), task.output_grid());
    c.layers = 1;
    c.channels = 8;
    c.heads = 2;
    c.mlp_hidden = 8;
    Checkpoint::new(Model::new(c, seed).unwrap(), task.hash().unwrap())
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig { lr: 5e-3, batch_size: 4, epochs, seed: 3, schedule: Schedule::Constant, ..Default::default() }
}

#[test]
fn zero_epochs_returns_initialisation() {
    let task = small_smoothing();
    let data = generate(&task, 8, 1, Split::Train).unwrap();
    let mut ck = small_model(&task, Architecture::SelfAttnStack, 4);
    let before = ck.model.params().to_vec();
    let rep = train(&mut ck, &data, &quick_config(0), None, |_| {}).unwrap();
    assert!(rep.history.is_empty());
    assert_eq!(ck.model.params(), &before[..]);
    assert!(ck.resume.is_none());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let task = small_smoothing();
    let data = generate(&task, 24, 1, Split::Train).unwrap();
    let run = || {
        let mut ck = small_model(&task, Architecture::SelfAttnStack, 4);
        let rep = train(&mut ck, &data, &quick_config(6), None, |_| {}).unwrap();
        (rep, ck)
    };
    let (a, ca) = run();
    let (b, cb) = run();
    let losses = |r: &obsflow::harness::TrainReport| {
        r.history.iter().map(|e| (e.train_loss.to_bits(), e.val_loss.map(f64::to_bits))).collect::<Vec<_>>()
    };
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(ca.model.params(), cb.model.params());
    assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
    assert_eq!(a.train_samples + a.val_samples, 24);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let task = small_smoothing();
    let data = generate(&task, 16, 2, Split::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.obsp");

    let mut full = small_model(&task, Architecture::SelfAttnStack, 1);
    let rep_full = train(&mut full, &data, &quick_config(4), None, |_| {}).unwrap();

    let mut part = small_model(&task, Architecture::SelfAttnStack, 1);
    train(&mut part, &data, &quick_config(2), Some(&path), |_| {}).unwrap();
    let mut restored = Checkpoint::load(&path).unwrap();
    assert_eq!(restored.resume.as_ref().unwrap().epochs_done, 2);
    let rep = train(&mut restored, &data, &quick_config(4), None, |_| {}).unwrap();

    let bits = |r: &obsflow::harness::TrainReport| r.history.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&rep), bits(&rep_full));
    assert_eq!(restored.model.params(), full.model.params());
    assert_eq!(restored.resume.as_ref().unwrap().adam.step, full.resume.as_ref().unwrap().adam.step);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let task = small_forecasting();
    let data = generate(&task, 8, 5, Split::Train).unwrap();
    let mut ck = small_model(&task, Architecture::EncoderDecoder, 7);
    train(&mut ck, &data, &quick_config(1), None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.obsp");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let bits = |m: &Model| m.params().iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&back.model), bits(&ck.model));
    assert_eq!(back.model.normalizer, ck.model.normalizer);
    assert_eq!(back.resume, ck.resume);
    assert_eq!(back.task_hash, ck.task_hash);

    let mut bytes = std::fs::read(&path).unwrap();
    let k = bytes.len() / 2;
    bytes[k] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
}

#[test]
fn mismatched_task_is_rejected() {
    let task = small_smoothing();
    let data = generate(&task, 4, 1, Split::Train).unwrap();
    let mut ck = small_model(&task, Architecture::SelfAttnStack, 0);
    ck.task_hash = "0".repeat(64);
    assert!(matches!(train(&mut ck, &data, &quick_config(1), None, |_| {}), Err(Error::Config(_))));

    let other = small_forecasting();
    let mut ck = small_model(&other, Architecture::EncoderDecoder, 0);
    ck.task_hash = task.hash().unwrap();
    assert!(train(&mut ck, &data, &quick_config(1), None, |_| {}).is_err());
}

#[test]
fn non_finite_loss_aborts() {
    let task = small_smoothing();
    let mut data = generate(&task, 4, 1, Split::Train).unwrap();
    data.outputs.mapv_inplace(|v| v * 1e200);
    let mut ck = small_model(&task, Architecture::SelfAttnStack, 0);
    let err = train(&mut ck, &data, &quick_config(1), None, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
}

#[test]
fn invalid_train_config_rejected() {
    for cfg in [
        TrainConfig { lr: 0.0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { val_fraction: 0.6, ..Default::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn oracle_predictor_scores_zero() {
    let data = generate(&small_smoothing(), 6, 1, Split::Test).unwrap();
    let r = evaluate_predictions("oracle", &data, |j| Ok(data.output(j).to_owned())).unwrap();
    assert!(r.errors.iter().all(|&e| e == 0.0));
    assert_eq!((r.summary.mean, r.summary.max), (0.0, 0.0));
}

#[test]
fn report_statistics_match_errors() {
    let task = small_forecasting();
    let data = generate(&task, 9, 1, Split::Test).unwrap();
    let ck = small_model(&task, Architecture::EncoderDecoder, 2);
    let r = evaluate(&ck.model, &data).unwrap();
    assert_eq!(r.summary, Summary::of(&r.errors).unwrap());
    let mut sorted = r.errors.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(r.summary.median, sorted[4]);
    assert_eq!(r.summary.min, sorted[0]);
    assert_eq!(r.summary.max, sorted[8]);
    let b = r.baseline.unwrap();
    let imp = improvement(r.summary.mean, b.mean);
    assert!((r.improvement_percent.unwrap() - imp).abs() < 1e-12);

    let again = evaluate(&ck.model, &data).unwrap();
    assert_eq!(again.errors, r.errors);
    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    for key in ["mean", "median", "std", "min", "max"] {
        assert!(json[key].is_number(), "{key}");
    }
    assert_eq!(r.errors_csv().lines().count(), 10);
}

#[test]
fn baseline_independent_of_model_and_zero_on_constant_truth() {
    let task = small_forecasting();
    let data = generate(&task, 5, 1, Split::Test).unwrap();
    let a = evaluate(&small_model(&task, Architecture::EncoderDecoder, 1).model, &data).unwrap();
    let b = evaluate(&small_model(&task, Architecture::EncoderDecoder, 2).model, &data).unwrap();
    assert_eq!(a.baseline_errors, b.baseline_errors);

    let (n_in, n_out) = (task.input_grid().points, task.output_grid().points);
    let constant = Dataset {
        task: task.clone(),
        split: Split::Test,
        seed: 0,
        inputs: Array3::from_elem((2, n_in, 1), 3.5),
        outputs: Array3::from_elem((2, n_out, 1), 3.5),
        seeds: vec![SampleSeed { stream: 0 }, SampleSeed { stream: 1 }],
    };
    let r = constant_baseline(&constant).unwrap();
    assert_eq!(r.errors, vec![0.0, 0.0]);
    assert!(constant_baseline(&generate(&small_smoothing(), 2, 1, Split::Test).unwrap()).is_err());
}

#[test]
fn rollout_statistics_are_normalised() {
    let task = small_forecasting();
    let data = generate(&task, 3, 1, Split::Test).unwrap();
    let ck = small_model(&task, Architecture::EncoderDecoder, 5);
    let s = rollout_stats(&ck.model, &data, 4, 20, 3).unwrap();
    assert_eq!(s.samples_used + s.diverged, 3);
    assert!((s.histograms.pred.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((s.histograms.truth.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((0.0..=1.0 + 1e-12).contains(&s.overlap));
    assert_eq!(s.histograms.edges.len(), 21);
    assert_eq!(s.histogram_csv().lines().count(), 21);
}

#[test]
fn error_field_shape() {
    let truth = Array2::from_shape_fn((7, 3), |(i, j)| 1.0 + (i + j) as f64);
    let f = obsflow::harness::spatiotemporal_error_field(truth.view(), truth.view()).unwrap();
    assert_eq!(f.dim(), (7, 3));
    assert!(f.iter().all(|&v| v == 0.0));
}
