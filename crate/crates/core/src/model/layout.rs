//! Which convolution layers exist at a given point of the growth schedule.

use twingan_autograd::Shape;

use super::config::{NetworkConfig, NormMode};
use crate::domain::DomainId;
use crate::error::Result;
use crate::params::{bias_key, renorm_key, weight_key, RENORM_FIELDS};
use crate::schedule::Phase;

pub const ENCODER: &str = "encoder";
pub const GENERATOR: &str = "generator";

pub fn disc_prefix(domain: DomainId) -> &'static str {
    match domain {
        DomainId::A => "disc_a",
        DomainId::B => "disc_b",
    }
}

/// Renorm parameter-set key used by the encoder/generator for `domain`.
pub fn shared_net_domain_key(cfg: &NetworkConfig, domain: DomainId) -> &'static str {
    match cfg.norm {
        NormMode::DomainAdaptive => domain.key(),
        NormMode::Shared => "shared",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Gaussian,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub bias: bool,
    /// Renorm parameter sets attached to this layer.
    pub renorm: Vec<&'static str>,
}

impl LayerSpec {
    fn new(name: String, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            name,
            c_in,
            c_out,
            kernel,
            bias: false,
            renorm: Vec::new(),
        }
    }

    fn normed(mut self, keys: &[&'static str]) -> Self {
        self.renorm = keys.to_vec();
        self
    }

    fn biased(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn tensors(&self) -> Vec<(String, Shape, Init)> {
        let mut out = vec![(
            weight_key(&self.name),
            [self.c_out, self.c_in, self.kernel, self.kernel],
            Init::Gaussian,
        )];
        if self.bias {
            out.push((bias_key(&self.name), [1, self.c_out, 1, 1], Init::Zeros));
        }
        for dk in &self.renorm {
            for field in RENORM_FIELDS {
                let init = match field {
                    "gamma" | "moving_var" => Init::Ones,
                    _ => Init::Zeros,
                };
                out.push((renorm_key(&self.name, dk, field), [1, self.c_out, 1, 1], init));
            }
        }
        out
    }
}

fn head_levels(resolution: usize, phase: Phase, base: usize) -> Vec<usize> {
    if phase == Phase::Growing && resolution > base {
        vec![resolution / 2, resolution]
    } else {
        vec![resolution]
    }
}

fn trunk(
    cfg: &NetworkConfig,
    prefix: &str,
    keys: &[&'static str],
    resolution: usize,
    phase: Phase,
) -> Result<Vec<LayerSpec>> {
    let mut out = Vec::new();
    for l in head_levels(resolution, phase, cfg.base_resolution) {
        out.push(LayerSpec::new(format!("{prefix}.from_rgb{l}"), 3, cfg.channels(l)?, 1).normed(keys));
    }
    let mut l = resolution;
    while l > cfg.base_resolution {
        let (c, c_half) = (cfg.channels(l)?, cfg.channels(l / 2)?);
        out.push(LayerSpec::new(format!("{prefix}.b{l}.conv1"), c, c, 3).normed(keys));
        out.push(LayerSpec::new(format!("{prefix}.b{l}.conv2"), c, c_half, 3).normed(keys));
        l /= 2;
    }
    Ok(out)
}

pub fn encoder_layers(cfg: &NetworkConfig, resolution: usize, phase: Phase) -> Result<Vec<LayerSpec>> {
    trunk(cfg, ENCODER, &eg_keys(cfg), resolution, phase)
}

pub fn generator_layers(cfg: &NetworkConfig, resolution: usize, phase: Phase) -> Result<Vec<LayerSpec>> {
    let keys = eg_keys(cfg);
    let base = cfg.base_resolution;
    let c_base = cfg.channels(base)?;
    let mut out = vec![LayerSpec::new(format!("{GENERATOR}.b{base}.conv"), c_base, c_base, 3).normed(&keys)];
    let mut l = base * 2;
    while l <= resolution {
        let (c, c_half) = (cfg.channels(l)?, cfg.channels(l / 2)?);
        let c_in = if cfg.use_unet { 2 * c_half } else { c_half };
        out.push(LayerSpec::new(format!("{GENERATOR}.b{l}.conv1"), c_in, c, 3).normed(&keys));
        out.push(LayerSpec::new(format!("{GENERATOR}.b{l}.conv2"), c, c, 3).normed(&keys));
        l *= 2;
    }
    for l in head_levels(resolution, phase, base) {
        out.push(LayerSpec::new(format!("{GENERATOR}.to_rgb{l}"), cfg.channels(l)?, 3, 1).biased());
    }
    Ok(out)
}

pub fn discriminator_layers(
    cfg: &NetworkConfig,
    domain: DomainId,
    resolution: usize,
    phase: Phase,
) -> Result<Vec<LayerSpec>> {
    let prefix = disc_prefix(domain);
    let keys = [domain.key()];
    let mut out = trunk(cfg, prefix, &keys, resolution, phase)?;
    let c = cfg.channels(cfg.base_resolution)?;
    out.push(LayerSpec::new(format!("{prefix}.head.conv3x3"), c + 1, c, 3).normed(&keys));
    out.push(LayerSpec::new(format!("{prefix}.head.conv4x4"), c, c, cfg.base_resolution).normed(&keys));
    out.push(LayerSpec::new(format!("{prefix}.head.fc"), c, 1, 1).biased());
    Ok(out)
}

/// Every layer of all six networks, in a fixed order.
pub fn all_layers(cfg: &NetworkConfig, resolution: usize, phase: Phase) -> Result<Vec<LayerSpec>> {
    let mut out = encoder_layers(cfg, resolution, phase)?;
    out.extend(generator_layers(cfg, resolution, phase)?);
    for d in DomainId::ALL {
        out.extend(discriminator_layers(cfg, d, resolution, phase)?);
    }
    Ok(out)
}

fn eg_keys(cfg: &NetworkConfig) -> Vec<&'static str> {
    match cfg.norm {
        NormMode::DomainAdaptive => vec!["a", "b"],
        NormMode::Shared => vec!["shared"],
    }
}
