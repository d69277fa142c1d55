use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};

use twingan_autograd::{Tensor, Var};

use super::layout::{disc_prefix, shared_net_domain_key, ENCODER, GENERATOR};
use super::{LatentEmbedding, SkipEntry, SkipStack, TwinGan};
use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::normalization::{
    minibatch_stddev_value, pixelnorm, renorm_with_set, renorm_with_stats, RenormLimits, RenormSet,
};
use crate::params::{bias_key, renorm_key, weight_key, Bindings};
use crate::schedule::StageState;

/// One row of a forward shape trace: layer kind, activation and per-sample output shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub label: &'static str,
    pub activation: &'static str,
    pub shape: [usize; 3],
}

/// Batch statistics observed by one renorm layer during a training forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    /// `{layer}.renorm.{domain}`
    pub prefix: String,
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Mode {
    Train(RenormLimits),
    Inference,
}

/// Where training-mode normalization takes its statistics from.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Stats {
    /// The batch being processed.
    Own,
    /// The batch being processed, kept as the reference for later passes.
    Capture,
    /// The captured reference; the minibatch stddev is still the batch's own
    /// unless `per_sample`, in which case the reference value is used too.
    Reference { per_sample: bool },
}

#[derive(Clone, Copy)]
enum Act {
    LeakyRelu,
    Linear,
}

/// Evaluation context for the networks: parameter source, renorm mode,
/// collected moving-statistics updates and an optional shape trace.
pub struct Forward<'m> {
    model: &'m TwinGan,
    bindings: Option<&'m Bindings>,
    mode: Mode,
    record: Cell<bool>,
    stats: Cell<Stats>,
    /// Statistics captured per renorm prefix, and the minibatch stddev per
    /// discriminator.
    reference: RefCell<BTreeMap<String, (Var, Var)>>,
    updates: RefCell<Vec<StatUpdate>>,
    trace: RefCell<Option<Vec<TraceRow>>>,
    accessed: RefCell<BTreeSet<String>>,
}

impl<'m> Forward<'m> {
    /// Moving statistics, frozen parameters.
    pub fn inference(model: &'m TwinGan) -> Self {
        Self::new(model, None, Mode::Inference)
    }

    /// Batch statistics with clamped corrections; parameters found in
    /// `bindings` are differentiable, the rest are constants.
    pub fn training(model: &'m TwinGan, bindings: Option<&'m Bindings>, limits: RenormLimits) -> Self {
        Self::new(model, bindings, Mode::Train(limits))
    }

    fn new(model: &'m TwinGan, bindings: Option<&'m Bindings>, mode: Mode) -> Self {
        Self {
            model,
            bindings,
            mode,
            record: Cell::new(matches!(mode, Mode::Train(_))),
            stats: Cell::new(Stats::Own),
            reference: RefCell::new(BTreeMap::new()),
            updates: RefCell::new(Vec::new()),
            trace: RefCell::new(None),
            accessed: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn with_trace(self) -> Self {
        *self.trace.borrow_mut() = Some(Vec::new());
        self
    }

    /// Toggles collection of moving-statistics updates; returns the previous setting.
    pub fn set_recording(&self, on: bool) -> bool {
        self.record.replace(on && matches!(self.mode, Mode::Train(_)))
    }

    pub fn take_trace(&self) -> Vec<TraceRow> {
        self.trace.borrow_mut().as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.updates.borrow_mut())
    }

    /// Names of every stored tensor read so far.
    pub fn accessed(&self) -> BTreeSet<String> {
        self.accessed.borrow().clone()
    }

    pub fn encode(&self, x: &Var, domain: DomainId, stage: &StageState) -> Result<(LatentEmbedding, SkipStack)> {
        self.check_images(x, stage, "encoder input")?;
        let dk = shared_net_domain_key(&self.model.config, domain);
        let (h, skips) = self.trunk(ENCODER, x, dk, stage, self.model.config.use_unet)?;
        Ok((LatentEmbedding(h), skips))
    }

    pub fn generate(
        &self,
        z: &LatentEmbedding,
        skips: &SkipStack,
        domain: DomainId,
        stage: &StageState,
    ) -> Result<Var> {
        let cfg = &self.model.config;
        self.check_stage(stage)?;
        let base = cfg.base_resolution;
        let n = z.0.shape()[0];
        let (c4, _, _) = cfg.latent_shape()?;
        if z.0.shape() != [n, c4, base, base] {
            return Err(Error::ShapeMismatch {
                context: "generator embedding".into(),
                expected: [n, c4, base, base],
                actual: z.0.shape(),
            });
        }
        self.check_skips(skips, n, stage.resolution)?;
        let dk = shared_net_domain_key(cfg, domain);
        let pn = cfg.use_pixelnorm;
        self.push_trace("Latent Embedding", "-", &z.0);
        let mut h = self.layer(&format!("{GENERATOR}.b{base}.conv"), &z.0, 1, Some(dk), Act::LeakyRelu, pn, Some("Conv 3x3"))?;
        let mut prev = h.clone();
        let mut skip_iter = skips.entries.iter();
        let mut l = base * 2;
        while l <= stage.resolution {
            prev = h.clone();
            h = h.upsample2();
            self.push_trace("Upsample", "-", &h);
            if cfg.use_unet {
                let skip = skip_iter.next().expect("skips checked above");
                h = h.concat_channels(&skip.features);
                self.push_trace("Concat. UNet", "-", &h);
            }
            h = self.layer(&format!("{GENERATOR}.b{l}.conv1"), &h, 1, Some(dk), Act::LeakyRelu, pn, Some("Conv 3x3"))?;
            h = self.layer(&format!("{GENERATOR}.b{l}.conv2"), &h, 1, Some(dk), Act::LeakyRelu, pn, Some("Conv 3x3"))?;
            l *= 2;
        }
        let r = stage.resolution;
        let mut img = self.layer(&format!("{GENERATOR}.to_rgb{r}"), &h, 0, None, Act::Linear, false, Some("Conv 1x1"))?;
        if stage.is_blending() && r > base {
            let low = self
                .layer(&format!("{GENERATOR}.to_rgb{}", r / 2), &prev, 0, None, Act::Linear, false, None)?
                .upsample2();
            img = low.lerp(&img, stage.alpha);
        }
        Ok(img)
    }

    /// One logit per sample, shape `[n, 1, 1, 1]`.
    pub fn discriminate(&self, x: &Var, domain: DomainId, stage: &StageState) -> Result<Var> {
        self.discriminator(x, domain, stage)
    }

    /// Scores `real`, then every batch in `others` normalized with the
    /// statistics of `real` (reference batch normalization). Each batch keeps
    /// its own minibatch stddev. The reference stays available to
    /// [`Forward::discriminate_per_sample`].
    pub fn discriminate_against(
        &self,
        real: &Var,
        others: &[&Var],
        domain: DomainId,
        stage: &StageState,
    ) -> Result<(Var, Vec<Var>)> {
        let real_logits = self.with_stats(Stats::Capture, || self.discriminator(real, domain, stage))?;
        let others = others
            .iter()
            .map(|x| self.with_stats(Stats::Reference { per_sample: false }, || self.discriminator(x, domain, stage)))
            .collect::<Result<Vec<_>>>()?;
        Ok((real_logits, others))
    }

    /// Scores `x` with every batch statistic taken from the last reference
    /// captured by [`Forward::discriminate_against`] for this domain, so each
    /// logit depends on its own sample only.
    pub fn discriminate_per_sample(&self, x: &Var, domain: DomainId, stage: &StageState) -> Result<Var> {
        self.with_stats(Stats::Reference { per_sample: true }, || self.discriminator(x, domain, stage))
    }

    fn with_stats<T>(&self, stats: Stats, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let prev = self.stats.replace(stats);
        let out = f();
        self.stats.set(prev);
        out
    }

    fn discriminator(&self, x: &Var, domain: DomainId, stage: &StageState) -> Result<Var> {
        self.check_images(x, stage, "discriminator input")?;
        let prefix = disc_prefix(domain);
        let dk = domain.key();
        let (h, _) = self.trunk(prefix, x, dk, stage, false)?;
        let [n, _, hh, ww] = h.shape();
        let key = format!("{prefix}.minibatch_stddev");
        let std = match (self.mode, self.stats.get()) {
            (Mode::Train(_), Stats::Reference { per_sample: true }) => self.reference_entry(&key)?.0,
            (Mode::Train(_), Stats::Capture) => {
                let v = minibatch_stddev_value(&h);
                let c = Var::constant(v.value().clone());
                self.reference.borrow_mut().insert(key, (c.clone(), c));
                v
            }
            _ => minibatch_stddev_value(&h),
        };
        let h = h.concat_channels(&std.expand([n, 1, hh, ww]));
        self.push_trace("Minibatch stddev", "-", &h);
        let h = self.layer(&format!("{prefix}.head.conv3x3"), &h, 1, Some(dk), Act::LeakyRelu, false, Some("Conv 3x3"))?;
        let h = self.layer(&format!("{prefix}.head.conv4x4"), &h, 0, Some(dk), Act::LeakyRelu, false, Some("Conv 4x4"))?;
        self.layer(&format!("{prefix}.head.fc"), &h, 0, None, Act::Linear, false, Some("Fully-connected"))
    }

    /// `G_to(E_from(x))`, with the source encoder's skips.
    pub fn translate(&self, x: &Var, from: DomainId, to: DomainId, stage: &StageState) -> Result<Var> {
        let (z, skips) = self.encode(x, from, stage)?;
        self.generate(&z, &skips, to, stage)
    }

    fn trunk(
        &self,
        prefix: &str,
        x: &Var,
        dk: &str,
        stage: &StageState,
        keep_skips: bool,
    ) -> Result<(Var, SkipStack)> {
        let base = self.model.config.base_resolution;
        let r = stage.resolution;
        self.push_trace("Input image", "-", x);
        let mut h = self.layer(&format!("{prefix}.from_rgb{r}"), x, 0, Some(dk), Act::LeakyRelu, false, Some("Conv 1x1"))?;
        let mut entries = Vec::new();
        let mut l = r;
        while l > base {
            h = self.layer(&format!("{prefix}.b{l}.conv1"), &h, 1, Some(dk), Act::LeakyRelu, false, Some("Conv 3x3"))?;
            h = self.layer(&format!("{prefix}.b{l}.conv2"), &h, 1, Some(dk), Act::LeakyRelu, false, Some("Conv 3x3"))?;
            if keep_skips {
                entries.push(SkipEntry {
                    resolution: l,
                    features: h.clone(),
                });
            }
            h = h.avg_pool2();
            self.push_trace("Downsample", "-", &h);
            if l == r && stage.is_blending() {
                let low = self.layer(
                    &format!("{prefix}.from_rgb{}", r / 2),
                    &x.avg_pool2(),
                    0,
                    Some(dk),
                    Act::LeakyRelu,
                    false,
                    None,
                )?;
                h = low.lerp(&h, stage.alpha);
            }
            l /= 2;
        }
        entries.reverse();
        Ok((h, SkipStack { entries }))
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        name: &str,
        x: &Var,
        pad: usize,
        norm: Option<&str>,
        act: Act,
        pixel_norm: bool,
        label: Option<&'static str>,
    ) -> Result<Var> {
        let w = self.param(&weight_key(name))?;
        let [_, c_in, _, _] = w.shape();
        let xs = x.shape();
        if xs[1] != c_in {
            return Err(Error::ShapeMismatch {
                context: format!("input to {name}"),
                expected: [xs[0], c_in, xs[2], xs[3]],
                actual: xs,
            });
        }
        let mut y = x.conv2d(&w, pad);
        let bk = bias_key(name);
        if self.model.params.contains(&bk) {
            y = y.add(&self.param(&bk)?);
        }
        if let Some(dk) = norm {
            y = self.renorm(name, dk, &y)?;
        }
        y = match act {
            Act::LeakyRelu => y.leaky_relu(self.model.config.leaky_slope),
            Act::Linear => y,
        };
        if pixel_norm {
            y = pixelnorm(&y);
        }
        if let Some(label) = label {
            let activation = match act {
                Act::LeakyRelu => "LReLU",
                Act::Linear => "linear",
            };
            self.push_trace(label, activation, &y);
        }
        Ok(y)
    }

    fn renorm(&self, layer: &str, dk: &str, y: &Var) -> Result<Var> {
        let rn = &self.model.config.renorm;
        let set = RenormSet {
            gamma: self.param(&renorm_key(layer, dk, "gamma"))?,
            beta: self.param(&renorm_key(layer, dk, "beta"))?,
            moving_mean: self.stored(&renorm_key(layer, dk, "moving_mean"))?,
            moving_var: self.stored(&renorm_key(layer, dk, "moving_var"))?,
        };
        let (training, limits) = match self.mode {
            Mode::Train(limits) => (true, limits),
            Mode::Inference => (false, RenormLimits::BATCH_NORM),
        };
        let prefix = format!("{layer}.renorm.{dk}");
        let out = match (training, self.stats.get()) {
            (true, Stats::Reference { .. }) => {
                let (mean, var) = self.reference_entry(&prefix)?;
                return Ok(renorm_with_stats(y, &set, &mean, &var, limits, rn.epsilon)?.output);
            }
            (true, Stats::Capture) => {
                let out = renorm_with_set(y, &set, true, limits, rn.momentum, rn.epsilon)?;
                if let Some((mean, var)) = &out.batch_stats {
                    self.reference
                        .borrow_mut()
                        .insert(prefix.clone(), (Var::constant(mean.clone()), Var::constant(var.clone())));
                }
                out
            }
            _ => renorm_with_set(y, &set, training, limits, rn.momentum, rn.epsilon)?,
        };
        if self.record.get() {
            if let Some((mean, var)) = out.batch_stats {
                self.updates.borrow_mut().push(StatUpdate {
                    prefix,
                    mean,
                    var,
                });
            }
        }
        Ok(out.output)
    }

    fn reference_entry(&self, key: &str) -> Result<(Var, Var)> {
        self.reference
            .borrow()
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("no reference statistics captured for {key}")))
    }

    fn stored(&self, name: &str) -> Result<Tensor> {
        let t = self.model.params.get(name)?.clone();
        self.accessed.borrow_mut().insert(name.to_string());
        Ok(t)
    }

    fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bindings.and_then(|b| b.get(name)) {
            self.accessed.borrow_mut().insert(name.to_string());
            return Ok(v.clone());
        }
        Ok(Var::constant(self.stored(name)?))
    }

    fn push_trace(&self, label: &'static str, activation: &'static str, v: &Var) {
        if let Some(rows) = self.trace.borrow_mut().as_mut() {
            let [_, c, h, w] = v.shape();
            rows.push(TraceRow {
                label,
                activation,
                shape: [c, h, w],
            });
        }
    }

    fn check_stage(&self, stage: &StageState) -> Result<()> {
        if stage.resolution != self.model.resolution() {
            return Err(Error::ResolutionMismatch {
                expected: self.model.resolution(),
                actual: stage.resolution,
            });
        }
        Ok(())
    }

    fn check_images(&self, x: &Var, stage: &StageState, what: &str) -> Result<()> {
        self.check_stage(stage)?;
        let [n, c, h, w] = x.shape();
        if h != w || h != stage.resolution {
            return Err(Error::ResolutionMismatch {
                expected: stage.resolution,
                actual: if h == w { h } else { h.max(w) },
            });
        }
        if c != 3 || n == 0 {
            return Err(Error::ShapeMismatch {
                context: what.to_string(),
                expected: [n.max(1), 3, h, w],
                actual: x.shape(),
            });
        }
        if !x.value().all_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    fn check_skips(&self, skips: &SkipStack, n: usize, resolution: usize) -> Result<()> {
        let cfg = &self.model.config;
        if !cfg.use_unet {
            if skips.entries.is_empty() {
                return Ok(());
            }
            return Err(Error::Contract("skip stack must be empty when UNet is disabled".into()));
        }
        let mut expected = Vec::new();
        let mut l = cfg.base_resolution * 2;
        while l <= resolution {
            expected.push(l);
            l *= 2;
        }
        let got: Vec<usize> = skips.entries.iter().map(|e| e.resolution).collect();
        if got != expected {
            return Err(Error::Contract(format!(
                "skip stack levels {got:?} do not match stage levels {expected:?}"
            )));
        }
        for e in &skips.entries {
            let c = cfg.channels(e.resolution / 2)?;
            let want = [n, c, e.resolution, e.resolution];
            if e.features.shape() != want {
                return Err(Error::ShapeMismatch {
                    context: format!("skip at {}", e.resolution),
                    expected: want,
                    actual: e.features.shape(),
                });
            }
        }
        Ok(())
    }
}
