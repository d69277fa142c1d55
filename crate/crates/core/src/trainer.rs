//! The optimization loop: one discriminator update then one encoder/generator
//! update per step, progressive growth, checkpoints and the metrics log.

use std::path::{Path, PathBuf};

use serde::Serialize;
use twingan_autograd::{avg_pool2, Tensor, Var};

use crate::checkpoint::{self, Checkpoint, Layout, Manifest, SCHEMA_VERSION};
use crate::config::{NonFinitePolicy, RunConfig};
use crate::data::{load_folder, ImageStream};
use crate::domain::{direction_index, DomainId};
use crate::error::{Error, Result};
use crate::losses::{cycle_loss, d_loss, dragan_penalty, g_loss, semantic_loss, total_loss, LossReport, LossTerms};
use crate::metrics::{MetricsLog, MetricsRow};
use crate::model::layout::{disc_prefix, ENCODER, GENERATOR};
use crate::model::{Forward, LatentEmbedding, StatUpdate, TwinGan};
use crate::normalization::RenormLimits;
use crate::optim::Adam;
use crate::params::{Bindings, ParamStore};
use crate::rng;
use crate::schedule::{batch_size_at, stage_at, StageState};

pub const RNG_STREAMS: [&str; 6] = ["init", "grow", "augment", "dragan-a", "dragan-b", "shuffle-{a,b}"];

/// Parameters, optimizer moments and counters of a run. Every random draw is
/// derived from `(seed, tag, step)`, so the counters are the whole RNG state.
#[derive(Clone, Debug)]
pub struct TrainerState {
    /// Effective configuration, with ablation switches applied.
    pub config: RunConfig,
    pub model: TwinGan,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
    pub global_images_seen: u64,
    pub drawn: [u64; 2],
    pub last_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    /// The stage the step was trained at.
    pub stage: StageState,
    /// Updates were discarded because a term was not finite.
    pub skipped: bool,
}

/// Encoder/generator outputs for both domains with their autograd graph.
pub struct TranslationPass {
    pub embeddings: [LatentEmbedding; 2],
    /// `outputs[from][to]`
    pub outputs: [[Var; 2]; 2],
    pub stat_updates: Vec<StatUpdate>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscriminatorTerms {
    pub gan_d: [f64; 2],
    pub dragan: [f64; 2],
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn check_grads(grads: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.all_finite()) {
        Some((name, _)) => Err(Error::NonFinite(format!("gradient of {name}"))),
        None => Ok(()),
    }
}

fn prefixed_trainable(params: &ParamStore, prefixes: &[&str]) -> Vec<String> {
    prefixes.iter().flat_map(|p| params.trainable_names(&format!("{p}."))).collect()
}

/// Averages `[n, c, r, r]` images down to `resolution`.
pub fn pool_to(images: &Tensor, resolution: usize) -> Result<Tensor> {
    let mut t = images.clone();
    while t.shape()[2] > resolution {
        if !t.shape()[2].is_multiple_of(2) {
            break;
        }
        t = avg_pool2(&t);
    }
    if t.shape()[2] != resolution {
        return Err(Error::ResolutionMismatch {
            expected: resolution,
            actual: t.shape()[2],
        });
    }
    Ok(t)
}

impl TrainerState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let config = config.effective();
        let stage = stage_at(0, &config.plan, &config.network);
        let model = TwinGan::new(config.network.clone(), &stage, &mut rng::stream(config.seed, "init", 0))?;
        Ok(Self {
            opt_g: Adam::new(config.plan.adam),
            opt_d: Adam::new(config.plan.adam),
            config,
            model,
            step: 0,
            global_images_seen: 0,
            drawn: [0, 0],
            last_checkpoint: None,
        })
    }

    pub fn stage(&self) -> StageState {
        stage_at(self.global_images_seen, &self.config.plan, &self.config.network)
    }

    pub fn is_finished(&self) -> bool {
        self.stage().terminal
    }

    /// Per-domain batch size for the current stage.
    pub fn batch_size(&self) -> Result<usize> {
        batch_size_at(self.stage().resolution, &self.config.plan)
    }

    pub fn renorm_limits(&self) -> RenormLimits {
        self.config
            .network
            .renorm
            .limits_at(self.global_images_seen, self.config.plan.stage_length)
    }

    /// Whether the stored networks are laid out for the current stage.
    pub fn layout_matches(&self) -> bool {
        let s = self.stage();
        self.model.resolution() == s.resolution && self.model.phase() == s.phase
    }

    /// Grows or settles the networks to match the current stage.
    pub fn sync_layout(&mut self) -> Result<bool> {
        if self.layout_matches() {
            return Ok(false);
        }
        let stage = self.stage();
        let mut r = rng::stream(self.config.seed, "grow", stage.index as u64);
        let report = self.model.grow_networks(&stage, &mut r)?;
        self.opt_g.retain_existing(&self.model.params);
        self.opt_d.retain_existing(&self.model.params);
        log::info!(
            "stage {} ({}x{} {}): +{} / -{} tensors",
            stage.index,
            stage.resolution,
            stage.resolution,
            stage.phase.as_str(),
            report.added.len(),
            report.removed.len()
        );
        Ok(true)
    }

    fn eg_names(&self) -> Vec<String> {
        prefixed_trainable(&self.model.params, &[ENCODER, GENERATOR])
    }

    fn d_names(&self) -> Vec<String> {
        prefixed_trainable(&self.model.params, &[disc_prefix(DomainId::A), disc_prefix(DomainId::B)])
    }

    /// Encodes both batches and decodes every embedding with both generators.
    pub fn translation_pass(
        &self,
        real: &[Var; 2],
        bindings: Option<&Bindings>,
        stage: &StageState,
        limits: RenormLimits,
    ) -> Result<TranslationPass> {
        let fw = Forward::training(&self.model, bindings, limits);
        let mut embeddings = Vec::with_capacity(2);
        let mut outputs = Vec::with_capacity(2);
        for from in DomainId::ALL {
            let (z, skips) = fw.encode(&real[from.index()], from, stage)?;
            let a = fw.generate(&z, &skips, DomainId::A, stage)?;
            let b = fw.generate(&z, &skips, DomainId::B, stage)?;
            outputs.push([a, b]);
            embeddings.push(z);
        }
        let (Ok([za, zb]), Ok([oa, ob])) = (<[LatentEmbedding; 2]>::try_from(embeddings), <[[Var; 2]; 2]>::try_from(outputs)) else {
            unreachable!("one pass per domain")
        };
        Ok(TranslationPass {
            embeddings: [za, zb],
            outputs: [oa, ob],
            stat_updates: fw.take_stat_updates(),
        })
    }

    /// Updates both discriminators against real batches and detached translations.
    /// Only `disc_*` tensors change.
    pub fn discriminator_step(
        &mut self,
        real: &[Var; 2],
        pass: &TranslationPass,
        stage: &StageState,
        limits: RenormLimits,
    ) -> Result<(DiscriminatorTerms, Vec<StatUpdate>)> {
        let w = self.config.losses;
        let bindings = Bindings::new(&self.model.params, &self.d_names())?;
        let mut terms = DiscriminatorTerms::default();
        let (total, updates) = {
            let fw = Forward::training(&self.model, Some(&bindings), limits);
            let mut total: Option<Var> = None;
            for o in DomainId::ALL {
                let cross = Var::constant(pass.outputs[o.other().index()][o.index()].value().clone());
                let recon = Var::constant(pass.outputs[o.index()][o.index()].value().clone());
                let fakes: Vec<&Var> = if w.cycle_gan_on_reconstruction { vec![&cross, &recon] } else { vec![&cross] };
                fw.set_recording(true);
                let (real_logit, fake_logits) = fw.discriminate_against(&real[o.index()], &fakes, o, stage)?;
                fw.set_recording(false);
                let mut gan = d_loss(&real_logit, &fake_logits[0]);
                if let Some(recon_logit) = fake_logits.get(1) {
                    gan = gan.add(&recon_logit.softplus().mean_all());
                }
                terms.gan_d[o.index()] = check_finite(&format!("gan_d_{}", o.key()), gan.value().item() as f64)?;
                let mut term = gan.scale(w.lambda_gan);
                if w.lambda_dragan > 0.0 {
                    let mut noise = rng::stream(self.config.seed, &format!("dragan-{}", o.key()), self.step);
                    let pen =
                        dragan_penalty(|x| fw.discriminate_per_sample(x, o, stage), real[o.index()].value(), &w, &mut noise)?;
                    terms.dragan[o.index()] =
                        check_finite(&format!("dragan_{}", o.key()), pen.value().item() as f64)?;
                    term = term.add(&pen);
                }
                total = Some(match total {
                    Some(t) => t.add(&term),
                    None => term,
                });
            }
            (total.expect("two domains"), fw.take_stat_updates())
        };
        let grads = bindings.gradients(&total)?;
        check_grads(&grads)?;
        self.opt_d.step(&mut self.model.params, &grads)?;
        Ok((terms, updates))
    }

    /// Updates the shared encoder and generator against the current discriminators.
    /// Only `encoder.*` and `generator.*` tensors change.
    pub fn generator_step(
        &mut self,
        real: &[Var; 2],
        pass: &TranslationPass,
        bindings: &Bindings,
        stage: &StageState,
        d_terms: DiscriminatorTerms,
        limits: RenormLimits,
    ) -> Result<LossReport> {
        let w = self.config.losses;
        let (report, total) = {
            let fw = Forward::training(&self.model, Some(bindings), limits);
            fw.set_recording(false);
            let mut gan_g = [0f64; 4];
            let mut gan_sum: Option<Var> = None;
            for to in DomainId::ALL {
                let real_to = Var::constant(real[to.index()].value().clone());
                let cross = &pass.outputs[to.other().index()][to.index()];
                let recon = &pass.outputs[to.index()][to.index()];
                // Without the reconstruction discriminator the same-domain term is report-only.
                let recon = if w.cycle_gan_on_reconstruction { recon.clone() } else { recon.detach() };
                let (_, logits) = fw.discriminate_against(&real_to, &[cross, &recon], to, stage)?;
                let (cross_term, recon_term) = (g_loss(&logits[0]), g_loss(&logits[1]));
                for (from, term) in [(to.other(), cross_term), (to, recon_term)] {
                    gan_g[direction_index(from, to)] = term.value().item() as f64;
                    gan_sum = Some(match gan_sum {
                        Some(s) => s.add(&term),
                        None => term,
                    });
                }
            }
            let mut cyc = cycle_loss(&real[0], &pass.outputs[0][0])?;
            cyc = cyc.add(&cycle_loss(&real[1], &pass.outputs[1][1])?);
            let sem = if w.lambda_sem > 0.0 {
                let mut sum: Option<Var> = None;
                for from in DomainId::ALL {
                    let to = from.other();
                    let (z_back, _) = fw.encode(&pass.outputs[from.index()][to.index()], to, stage)?;
                    let term = semantic_loss(&pass.embeddings[from.index()].0, &z_back.0)?;
                    sum = Some(match sum {
                        Some(s) => s.add(&term),
                        None => term,
                    });
                }
                sum
            } else {
                None
            };
            let terms = LossTerms {
                gan_g,
                gan_d: d_terms.gan_d,
                dragan: d_terms.dragan,
                cyc: cyc.value().item() as f64,
                sem: sem.as_ref().map_or(0.0, |s| s.value().item() as f64),
            };
            let report = total_loss(&terms, &w)?;
            let mut total = gan_sum.expect("four directions").scale(w.lambda_gan);
            if w.lambda_cyc > 0.0 {
                total = total.add(&cyc.scale(w.lambda_cyc));
            }
            if let Some(s) = sem {
                total = total.add(&s.scale(w.lambda_sem));
            }
            (report, total)
        };
        let grads = bindings.gradients(&total)?;
        check_grads(&grads)?;
        self.opt_g.step(&mut self.model.params, &grads)?;
        Ok(report)
    }

    /// One D-then-G update on a pair of batches at the current stage resolution.
    /// On a non-finite term every change made by the step is rolled back.
    pub fn train_step(&mut self, batch_a: &Tensor, batch_b: &Tensor) -> Result<StepOutcome> {
        let stage = self.stage();
        if stage.terminal {
            return Err(Error::Contract("training schedule already finished".into()));
        }
        self.sync_layout()?;
        let snapshot = (self.model.params.clone(), self.opt_g.clone(), self.opt_d.clone());
        let images = (batch_a.shape()[0] + batch_b.shape()[0]) as u64;
        let outcome = match self.step_inner(batch_a, batch_b, &stage) {
            Ok(report) => StepOutcome {
                report,
                stage,
                skipped: false,
            },
            Err(e) => {
                (self.model.params, self.opt_g, self.opt_d) = snapshot;
                match e {
                    Error::NonFinite(term) => match self.config.on_non_finite {
                        NonFinitePolicy::Halt => {
                            return Err(Error::NumericalFailure { step: self.step, term });
                        }
                        NonFinitePolicy::SkipStep => {
                            log::warn!("step {}: `{term}` is not finite, skipping", self.step);
                            StepOutcome {
                                report: LossReport::default(),
                                stage,
                                skipped: true,
                            }
                        }
                    },
                    other => return Err(other),
                }
            }
        };
        self.step += 1;
        self.global_images_seen += images;
        Ok(outcome)
    }

    fn step_inner(&mut self, batch_a: &Tensor, batch_b: &Tensor, stage: &StageState) -> Result<LossReport> {
        let limits = self.renorm_limits();
        let real = [Var::constant(batch_a.clone()), Var::constant(batch_b.clone())];
        let eg = Bindings::new(&self.model.params, &self.eg_names())?;
        let pass = self.translation_pass(&real, Some(&eg), stage, limits)?;
        let (d_terms, d_updates) = self.discriminator_step(&real, &pass, stage, limits)?;
        let report = self.generator_step(&real, &pass, &eg, stage, d_terms, limits)?;
        self.model.apply_stat_updates(&pass.stat_updates)?;
        self.model.apply_stat_updates(&d_updates)?;
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            manifest: Manifest {
                schema_version: SCHEMA_VERSION,
                config: self.config.clone(),
                stage: self.stage(),
                layout: Layout {
                    resolution: self.model.resolution(),
                    phase: self.model.phase(),
                },
                step: self.step,
                global_images_seen: self.global_images_seen,
                drawn: self.drawn,
                seed: self.config.seed,
                optimizer: "optimizer".into(),
                rng_streams: RNG_STREAMS.iter().map(|s| s.to_string()).collect(),
            },
            params: self.model.params.clone(),
            opt_g: self.opt_g.clone(),
            opt_d: self.opt_d.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let m = ckpt.manifest;
        m.config.validate()?;
        let layout_stage = StageState {
            phase: m.layout.phase,
            ..StageState::settled(m.layout.resolution)
        };
        let model = TwinGan::from_params(m.config.network.clone(), ckpt.params, &layout_stage)?;
        Ok(Self {
            config: m.config,
            model,
            opt_g: ckpt.opt_g,
            opt_d: ckpt.opt_d,
            step: m.step,
            global_images_seen: m.global_images_seen,
            drawn: m.drawn,
            last_checkpoint: None,
        })
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.to_checkpoint())?;
        self.last_checkpoint = Some(dir.to_path_buf());
        Ok(())
    }

    pub fn resume(dir: &Path) -> Result<Self> {
        let mut s = Self::from_checkpoint(checkpoint::load(dir)?)?;
        s.last_checkpoint = Some(dir.to_path_buf());
        Ok(s)
    }
}

/// Networks stored in a checkpoint together with the schedule position to run them at.
pub fn load_inference(dir: &Path) -> Result<(TwinGan, StageState)> {
    let state = TrainerState::resume(dir)?;
    let stage = if state.layout_matches() {
        state.stage()
    } else {
        StageState {
            phase: state.model.phase(),
            ..StageState::settled(state.model.resolution())
        }
    };
    Ok((state.model, stage))
}

/// Per-domain image streams for the training loop.
pub struct DataSource {
    pub streams: [ImageStream; 2],
}

impl DataSource {
    pub fn load(data_a: &Path, data_b: &Path, resolution: usize, seed: u64) -> Result<Self> {
        let a = load_folder(data_a, resolution)?;
        let b = load_folder(data_b, resolution)?;
        for (dir, f) in [(data_a, &a), (data_b, &b)] {
            log::info!("{}: {} images ({} skipped)", dir.display(), f.len(), f.skipped);
        }
        Ok(Self {
            streams: [ImageStream::new(a, seed, "a"), ImageStream::new(b, seed, "b")],
        })
    }

    pub fn seek(&mut self, drawn: [u64; 2]) {
        for (s, d) in self.streams.iter_mut().zip(drawn) {
            s.seek(d);
        }
    }

    pub fn drawn(&self) -> [u64; 2] {
        [self.streams[0].drawn(), self.streams[1].drawn()]
    }

    /// The augmented batches for `state`'s next step, pooled to the stage resolution.
    pub fn next_batches(&mut self, state: &TrainerState) -> Result<[Tensor; 2]> {
        let n = state.batch_size()?;
        let res = state.stage().resolution;
        let mut r = rng::stream(state.config.seed, "augment", state.step);
        let aug = state.config.augment;
        let a = self.streams[0].next_batch(n, Some(&aug), &mut r);
        let b = self.streams[1].next_batch(n, Some(&aug), &mut r);
        Ok([pool_to(&a, res)?, pool_to(&b, res)?])
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop after this many steps in this invocation.
    pub max_steps: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub checkpoints: Vec<PathBuf>,
    pub final_stage: StageState,
    pub last_report: Option<LossReport>,
    pub state: TrainerState,
}

#[derive(Serialize)]
struct FailureReport<'a> {
    step: u64,
    term: &'a str,
    stage: StageState,
    global_images_seen: u64,
    input_mean: [f64; 2],
    input_finite: [bool; 2],
}

/// Output directory of a run: `out/full`, `out/no-unet`, ...
pub fn run_dir(out: &Path, config: &RunConfig) -> PathBuf {
    out.join(config.ablation.run_name())
}

pub fn checkpoint_root(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.tsv")
}

/// Runs (or resumes) the schedule to completion, writing checkpoints at every
/// stage boundary and every `checkpoint_every_images`, and one metrics row per step.
pub fn train(
    config: &RunConfig,
    data_a: &Path,
    data_b: &Path,
    out: &Path,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&MetricsRow),
) -> Result<TrainSummary> {
    let mut state = match &opts.resume {
        Some(dir) => {
            let s = TrainerState::resume(dir)?;
            if s.config != config.effective() {
                log::warn!("resuming with the configuration stored in {}", dir.display());
            }
            s
        }
        None => TrainerState::new(config)?,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), state.config.to_toml())?;
    let mut data = DataSource::load(data_a, data_b, state.config.network.max_resolution, state.config.seed)?;
    data.seek(state.drawn);
    let mut metrics = MetricsLog::open(&metrics_path(out), state.step)?;
    let ckpt_root = checkpoint_root(out);
    let mut checkpoints = Vec::new();
    let mut save = |state: &mut TrainerState, name: String, data: &DataSource| -> Result<()> {
        state.drawn = data.drawn();
        let dir = ckpt_root.join(name);
        state.save(&dir)?;
        log::info!("checkpoint {}", dir.display());
        checkpoints.push(dir);
        Ok(())
    };

    let fresh = state.step == 0 && opts.resume.is_none();
    if fresh {
        save(&mut state, format!("stage{:02}-begin", 0), &data)?;
    }
    let every = state.config.checkpoint_every_images;
    let mut steps_run = 0u64;
    let mut last_report = None;
    while !state.is_finished() && opts.max_steps.is_none_or(|m| steps_run < m) {
        if state.sync_layout()? {
            metrics.flush()?;
            let name = format!("stage{:02}-begin", state.stage().index);
            save(&mut state, name, &data)?;
        }
        let before = state.global_images_seen;
        let [a, b] = data.next_batches(&state)?;
        let outcome = match state.train_step(&a, &b) {
            Ok(o) => o,
            Err(Error::NumericalFailure { step, term }) => {
                let report = FailureReport {
                    step,
                    term: &term,
                    stage: state.stage(),
                    global_images_seen: state.global_images_seen,
                    input_mean: [a.mean(), b.mean()],
                    input_finite: [a.all_finite(), b.all_finite()],
                };
                metrics.flush()?;
                let path = out.join(format!("failure-step{step}.json"));
                std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
                log::error!("numerical failure at step {step} in `{term}`; report in {}", path.display());
                return Err(Error::NumericalFailure { step, term });
            }
            Err(e) => return Err(e),
        };
        let row = MetricsRow {
            step: state.step - 1,
            global_images_seen: state.global_images_seen,
            stage: outcome.stage.index,
            resolution: outcome.stage.resolution,
            phase: outcome.stage.phase,
            alpha: outcome.stage.alpha,
            report: outcome.report,
        };
        metrics.append(&row)?;
        on_step(&row);
        steps_run += 1;
        last_report = Some(outcome.report);

        let next = state.stage();
        if next.index != outcome.stage.index || next.terminal {
            metrics.flush()?;
            save(&mut state, format!("stage{:02}-end", outcome.stage.index), &data)?;
        } else if every > 0 && before / every != state.global_images_seen / every {
            metrics.flush()?;
            let name = format!("images{:09}", state.global_images_seen);
            save(&mut state, name, &data)?;
        }
    }
    if !state.is_finished() && steps_run > 0 {
        metrics.flush()?;
        let name = format!("images{:09}", state.global_images_seen);
            save(&mut state, name, &data)?;
    }
    metrics.flush()?;
    state.drawn = data.drawn();
    Ok(TrainSummary {
        steps_run,
        checkpoints,
        final_stage: state.stage(),
        last_report,
        state,
    })
}
