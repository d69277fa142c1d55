use std::collections::BTreeMap;
use std::path::Path;

use twingan::autograd::{Tensor, Var};
use twingan::checkpoint;
use twingan::data::{make_toy, ToySpec};
use twingan::metrics::read_metrics;
use twingan::params::Bindings;
use twingan::trainer::{metrics_path, run_dir, DataSource};
use twingan::{train, DomainId, Error, NonFinitePolicy, RunConfig, TrainOptions, TrainerState};

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.network.max_resolution = 8;
    cfg.network.channel_schedule = vec![(4, 8), (8, 4)];
    cfg.plan.stage_length = 32;
    cfg.plan.batch_sizes = vec![(4, 2), (8, 2)];
    cfg.seed = 11;
    cfg
}

fn toy_dirs(root: &Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let (a, b) = (root.join("a"), root.join("b"));
    let spec = ToySpec {
        n_samples: n,
        image_size: 8,
        seed: 3,
    };
    make_toy(&spec, DomainId::A, &a, false).unwrap();
    make_toy(&spec, DomainId::B, &b, false).unwrap();
    (a, b)
}

fn batches(state: &TrainerState, root: &Path) -> [Tensor; 2] {
    let (a, b) = (root.join("a"), root.join("b"));
    let mut data = DataSource::load(&a, &b, state.config.network.max_resolution, state.config.seed).unwrap();
    data.seek(state.drawn);
    data.next_batches(state).unwrap()
}

fn trainable(state: &TrainerState, prefixes: &[&str]) -> BTreeMap<String, Tensor> {
    state
        .model
        .params
        .iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)) && !twingan::params::is_buffer(n))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect()
}

#[test]
fn zero_weights_and_zero_lr_leave_parameters_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    toy_dirs(tmp.path(), 8);
    let mut cfg = tiny_config();
    cfg.losses.lambda_gan = 0.0;
    cfg.losses.lambda_cyc = 0.0;
    cfg.losses.lambda_sem = 0.0;
    cfg.losses.lambda_dragan = 0.0;
    cfg.plan.adam.lr = 0.0;
    let mut state = TrainerState::new(&cfg).unwrap();
    let before = trainable(&state, &[""]);
    let [a, b] = batches(&state, tmp.path());
    state.train_step(&a, &b).unwrap();
    assert_eq!(trainable(&state, &[""]), before);
}

#[test]
fn disabled_semantic_term_reports_zero_and_sends_no_gradient() {
    let tmp = tempfile::tempdir().unwrap();
    toy_dirs(tmp.path(), 8);
    let mut cfg = tiny_config();
    cfg.losses.lambda_gan = 0.0;
    cfg.losses.lambda_cyc = 0.0;
    cfg.losses.lambda_sem = 0.0;
    let mut state = TrainerState::new(&cfg).unwrap();
    let before = trainable(&state, &["encoder.", "generator."]);
    let [a, b] = batches(&state, tmp.path());
    let out = state.train_step(&a, &b).unwrap();
    assert_eq!(out.report.sem, 0.0);
    assert_eq!(trainable(&state, &["encoder.", "generator."]), before);

    cfg.losses.lambda_sem = 0.1;
    let mut state = TrainerState::new(&cfg).unwrap();
    let out = state.train_step(&a, &b).unwrap();
    assert!(out.report.sem > 0.0);
    assert_ne!(trainable(&state, &["encoder."]), before.into_iter().filter(|(n, _)| n.starts_with("encoder.")).collect());
}

#[test]
fn every_direction_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    toy_dirs(tmp.path(), 8);
    let mut state = TrainerState::new(&tiny_config()).unwrap();
    let [a, b] = batches(&state, tmp.path());
    let r = state.train_step(&a, &b).unwrap().report;
    for v in r.gan_g.iter().chain(&r.gan_d).chain(&r.dragan) {
        assert!(v.is_finite() && *v > 0.0, "{r:?}");
    }
    let [g, c, s] = r.contributions(&state.config.losses);
    assert!((g + c + s - r.total).abs() < 1e-12);
}

#[test]
fn discriminator_and_generator_updates_touch_disjoint_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    toy_dirs(tmp.path(), 8);
    let mut state = TrainerState::new(&tiny_config()).unwrap();
    let [a, b] = batches(&state, tmp.path());
    let stage = state.stage();
    let limits = state.renorm_limits();
    let real = [Var::constant(a), Var::constant(b)];
    let eg_names: Vec<String> = ["encoder.", "generator."]
        .iter()
        .flat_map(|p| state.model.params.trainable_names(p))
        .collect();
    let eg = Bindings::new(&state.model.params, &eg_names).unwrap();
    let pass = state.translation_pass(&real, Some(&eg), &stage, limits).unwrap();

    let eg_before = trainable(&state, &["encoder.", "generator."]);
    let d_before = trainable(&state, &["disc_a.", "disc_b."]);
    let (terms, _) = state.discriminator_step(&real, &pass, &stage, limits).unwrap();
    assert_eq!(trainable(&state, &["encoder.", "generator."]), eg_before);
    let d_after = trainable(&state, &["disc_a.", "disc_b."]);
    assert_ne!(d_after, d_before);

    state.generator_step(&real, &pass, &eg, &stage, terms, limits).unwrap();
    assert_eq!(trainable(&state, &["disc_a.", "disc_b."]), d_after);
    assert_ne!(trainable(&state, &["encoder.", "generator."]), eg_before);
}

#[test]
fn non_finite_input_halts_or_skips_without_touching_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    toy_dirs(tmp.path(), 8);
    let mut state = TrainerState::new(&tiny_config()).unwrap();
    let [a, b] = batches(&state, tmp.path());
    let mut bad = a.clone();
    bad.data_mut()[5] = f32::NAN;
    let before = state.model.params.clone();
    match state.train_step(&bad, &b) {
        Err(Error::NumericalFailure { step: 0, .. }) => {}
        other => panic!("expected a numerical failure, got {other:?}"),
    }
    assert_eq!(state.model.params, before);
    assert_eq!(state.step, 0);

    state.config.on_non_finite = NonFinitePolicy::SkipStep;
    let out = state.train_step(&bad, &b).unwrap();
    assert!(out.skipped);
    assert_eq!(state.model.params, before);
    assert_eq!((state.step, state.global_images_seen), (1, 4));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = toy_dirs(tmp.path(), 12);
    let cfg = tiny_config();

    let mut straight = Vec::new();
    train(&cfg, &a, &b, &tmp.path().join("straight"), &TrainOptions { resume: None, max_steps: Some(12) }, |r| {
        straight.push(r.report)
    })
    .unwrap();

    let mut resumed = Vec::new();
    let first = train(&cfg, &a, &b, &tmp.path().join("split"), &TrainOptions { resume: None, max_steps: Some(5) }, |r| {
        resumed.push(r.report)
    })
    .unwrap();
    let ckpt = first.state.last_checkpoint.clone().unwrap();
    let second = train(
        &cfg,
        &a,
        &b,
        &tmp.path().join("split"),
        &TrainOptions { resume: Some(ckpt), max_steps: Some(7) },
        |r| resumed.push(r.report),
    )
    .unwrap();
    assert_eq!(resumed, straight);
    assert_eq!(second.state.stage(), {
        let s = TrainerState::resume(&checkpoint::list(&tmp.path().join("straight/checkpoints")).unwrap().last().unwrap().0)
            .unwrap();
        s.stage()
    });
    let logged: Vec<_> = read_metrics(&metrics_path(&tmp.path().join("split"))).unwrap();
    assert_eq!(logged.iter().map(|r| r.report).collect::<Vec<_>>(), straight);
    assert_eq!(logged.iter().map(|r| r.step).collect::<Vec<_>>(), (0..12).collect::<Vec<_>>());
}

#[test]
fn full_schedule_writes_two_checkpoints_per_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = toy_dirs(tmp.path(), 8);
    let cfg = tiny_config();
    let out = tmp.path().join("run");
    let summary = train(&cfg, &a, &b, &out, &TrainOptions::default(), |_| {}).unwrap();
    let stages = twingan::schedule::stage_layout(&cfg.network).len();
    assert_eq!(summary.checkpoints.len(), 2 * stages);
    assert_eq!(checkpoint::list(&out.join("checkpoints")).unwrap().len(), 2 * stages);
    assert!(summary.final_stage.terminal);
    assert_eq!(summary.steps_run, 3 * 32 / 4);
    assert_eq!(read_metrics(&metrics_path(&out)).unwrap().len() as u64, summary.steps_run);

    let last = summary.checkpoints.last().unwrap().clone();
    let final_params = summary.state.model.params.clone();
    let again = train(&cfg, &a, &b, &out, &TrainOptions { resume: Some(last), max_steps: None }, |_| {}).unwrap();
    assert_eq!(again.steps_run, 0);
    assert!(again.final_stage.terminal);
    assert_eq!(again.state.model.params, final_params);
}

#[test]
fn ablation_runs_get_distinct_directories() {
    let mut names = std::collections::BTreeSet::new();
    for (cyc, sem, unet) in [(true, true, true), (false, true, true), (true, false, true), (true, true, false)] {
        let mut cfg = tiny_config();
        cfg.ablation.enable_cyc = cyc;
        cfg.ablation.enable_sem = sem;
        cfg.ablation.enable_unet = unet;
        names.insert(run_dir(Path::new("/runs"), &cfg));
    }
    assert_eq!(names.len(), 4);
    assert!(names.contains(Path::new("/runs/no-unet")));
}
