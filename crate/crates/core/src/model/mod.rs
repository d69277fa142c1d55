//! Twin encoders, generators and discriminators with progressive growth.
//!
//! The encoder and generator each exist once; the two domains differ only in
//! which renorm parameter set a forward pass selects. Each discriminator owns
//! its full parameter set.

mod config;
mod forward;
pub mod layout;

use std::collections::BTreeSet;

use rand::Rng;
use twingan_autograd::{no_grad, Tensor, Var};

pub use config::{NetworkConfig, NormMode};
pub use forward::{Forward, StatUpdate, TraceRow};

use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::params::{gaussian, is_renorm_key, ParamStore};
use crate::schedule::{Phase, StageState};
use layout::{all_layers, encoder_layers, generator_layers, shared_net_domain_key, Init};

/// Shared cross-domain code, `[n, c, 4, 4]`.
#[derive(Clone, Debug)]
pub struct LatentEmbedding(pub Var);

impl LatentEmbedding {
    /// Per-sample vectors in channel-major `(c, h, w)` order.
    pub fn flatten(&self) -> Vec<Vec<f32>> {
        let v = self.0.value();
        (0..v.shape()[0]).map(|i| v.sample(i).to_vec()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SkipEntry {
    pub resolution: usize,
    pub features: Var,
}

/// Encoder features captured before each downsample, lowest resolution first.
#[derive(Clone, Debug, Default)]
pub struct SkipStack {
    pub entries: Vec<SkipEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterAudit {
    pub shared_tensors: usize,
    pub domain_private_tensors: usize,
    pub private_names: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GrowReport {
    pub added: Vec<String>,
    pub removed: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TwinGan {
    pub config: NetworkConfig,
    pub params: ParamStore,
    resolution: usize,
    phase: Phase,
}

impl TwinGan {
    /// Freshly initialized networks laid out for `stage`.
    pub fn new(config: NetworkConfig, stage: &StageState, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut model = Self {
            resolution: config.base_resolution,
            phase: Phase::Reinforcement,
            config,
            params: ParamStore::new(),
        };
        model.grow_networks(stage, rng)?;
        Ok(model)
    }

    /// Wraps stored parameters, checking that they match the layout for `stage` exactly.
    pub fn from_params(config: NetworkConfig, params: ParamStore, stage: &StageState) -> Result<Self> {
        config.validate()?;
        let expected = Self::layout_tensors(&config, stage.resolution, stage.phase)?;
        let names: BTreeSet<&String> = params.names().collect();
        let wanted: BTreeSet<&String> = expected.iter().map(|(n, _, _)| n).collect();
        if names != wanted {
            let missing: Vec<_> = wanted.difference(&names).take(3).collect();
            let extra: Vec<_> = names.difference(&wanted).take(3).collect();
            return Err(Error::Checkpoint(format!(
                "parameter set does not match layout: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (name, shape, _) in &expected {
            let got = params.get(name)?.shape();
            if got != *shape {
                return Err(Error::ShapeMismatch {
                    context: name.clone(),
                    expected: *shape,
                    actual: got,
                });
            }
        }
        Ok(Self {
            config,
            params,
            resolution: stage.resolution,
            phase: stage.phase,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    fn layout_tensors(
        cfg: &NetworkConfig,
        resolution: usize,
        phase: Phase,
    ) -> Result<Vec<(String, [usize; 4], Init)>> {
        Ok(all_layers(cfg, resolution, phase)?
            .iter()
            .flat_map(|l| l.tensors())
            .collect())
    }

    /// Adds the layers `stage` needs and retires the ones it no longer uses.
    /// Existing tensors are left untouched.
    pub fn grow_networks(&mut self, stage: &StageState, rng: &mut impl Rng) -> Result<GrowReport> {
        let max = self.config.max_resolution;
        if stage.resolution > max {
            return Err(Error::GrowBeyondMax {
                requested: stage.resolution,
                max,
            });
        }
        if !self.config.ladder().contains(&stage.resolution) {
            return Err(Error::UnknownResolution(stage.resolution));
        }
        let target = Self::layout_tensors(&self.config, stage.resolution, stage.phase)?;
        let mut report = GrowReport::default();
        for (name, shape, init) in &target {
            if self.params.contains(name) {
                continue;
            }
            let t = match init {
                Init::Gaussian => gaussian(*shape, self.config.init_std, rng),
                Init::Zeros => Tensor::zeros(*shape),
                Init::Ones => Tensor::ones(*shape),
            };
            self.params.insert(name.clone(), t);
            report.added.push(name.clone());
        }
        let keep: BTreeSet<&String> = target.iter().map(|(n, _, _)| n).collect();
        let stale: Vec<String> = self.params.names().filter(|n| !keep.contains(n)).cloned().collect();
        for name in stale {
            self.params.remove(&name);
            report.removed.push(name);
        }
        self.resolution = stage.resolution;
        self.phase = stage.phase;
        Ok(report)
    }

    /// Tensor names an encoder/generator forward pass for `domain` can touch.
    pub fn shared_net_tensor_names(&self, domain: DomainId) -> Result<BTreeSet<String>> {
        let dk = shared_net_domain_key(&self.config, domain);
        let mut layers = encoder_layers(&self.config, self.resolution, self.phase)?;
        layers.extend(generator_layers(&self.config, self.resolution, self.phase)?);
        Ok(layers
            .iter()
            .flat_map(|l| l.tensors())
            .map(|(n, _, _)| n)
            .filter(|n| !is_renorm_key(n) || n.contains(&format!(".renorm.{dk}.")))
            .collect())
    }

    /// Classifies every encoder/generator tensor as shared between the two
    /// domains or private to one of them.
    pub fn audit_parameters(&self) -> ParameterAudit {
        let a = self.shared_net_tensor_names(DomainId::A).unwrap_or_default();
        let b = self.shared_net_tensor_names(DomainId::B).unwrap_or_default();
        let private_names: Vec<String> = a.symmetric_difference(&b).cloned().collect();
        ParameterAudit {
            shared_tensors: a.intersection(&b).count(),
            domain_private_tensors: private_names.len(),
            private_names,
        }
    }

    /// Folds collected batch statistics into the moving averages, in order.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) -> Result<()> {
        let k = self.config.renorm.momentum;
        for u in updates {
            for (field, batch) in [("moving_mean", &u.mean), ("moving_var", &u.var)] {
                let t = self.params.get_mut(&format!("{}.{field}", u.prefix))?;
                *t = t.zip_map(batch, |m, b| k * m + (1.0 - k) * b);
            }
        }
        Ok(())
    }

    /// Inference-mode translation of an image batch.
    pub fn translate_images(
        &self,
        images: &Tensor,
        from: DomainId,
        to: DomainId,
        stage: &StageState,
    ) -> Result<Tensor> {
        no_grad(|| {
            let out = Forward::inference(self).translate(&Var::constant(images.clone()), from, to, stage)?;
            Ok(out.value().clone())
        })
    }

    /// Inference-mode embeddings, one flattened vector per image.
    pub fn embed_images(&self, images: &Tensor, domain: DomainId, stage: &StageState) -> Result<Vec<Vec<f32>>> {
        no_grad(|| {
            let (z, _) = Forward::inference(self).encode(&Var::constant(images.clone()), domain, stage)?;
            Ok(z.flatten())
        })
    }
}

#[cfg(test)]
mod tests;
