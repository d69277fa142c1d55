//! Run configuration loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::NetworkConfig;
use crate::schedule::TrainPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub enable_cyc: bool,
    pub enable_sem: bool,
    pub enable_unet: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            enable_cyc: true,
            enable_sem: true,
            enable_unet: true,
        }
    }
}

impl AblationFlags {
    /// Output directory name: `full`, or the disabled parts joined, e.g. `no-cyc-no-unet`.
    pub fn run_name(&self) -> String {
        let mut parts = Vec::new();
        if !self.enable_cyc {
            parts.push("no-cyc");
        }
        if !self.enable_sem {
            parts.push("no-sem");
        }
        if !self.enable_unet {
            parts.push("no-unet");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join("-")
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonFinitePolicy {
    /// Stop training with a numerical-failure error.
    #[default]
    Halt,
    /// Drop the step's updates and continue.
    SkipStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub plan: TrainPlan,
    pub losses: LossWeights,
    pub augment: AugmentConfig,
    #[serde(default)]
    pub ablation: AblationFlags,
    /// Extra checkpoint every this many images; 0 keeps only stage boundaries.
    #[serde(default)]
    pub checkpoint_every_images: u64,
    #[serde(default)]
    pub on_non_finite: NonFinitePolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            network: NetworkConfig::default(),
            plan: TrainPlan::default(),
            losses: LossWeights::default(),
            augment: AugmentConfig::default(),
            ablation: AblationFlags::default(),
            checkpoint_every_images: 0,
            on_non_finite: NonFinitePolicy::Halt,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.plan.validate(&self.network)?;
        self.losses.validate()?;
        self.augment.validate()
    }

    /// The configuration with ablation switches folded into the loss weights and network.
    pub fn effective(&self) -> Self {
        let mut cfg = self.clone();
        if !self.ablation.enable_cyc {
            cfg.losses.lambda_cyc = 0.0;
        }
        if !self.ablation.enable_sem {
            cfg.losses.lambda_sem = 0.0;
        }
        if !self.ablation.enable_unet {
            cfg.network.use_unet = false;
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::default().to_toml();
        text = text.replacen("seed = 0", "seed = 0\nsede = 1", 1);
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_names_and_effects() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.ablation.run_name(), "full");
        cfg.ablation.enable_unet = false;
        assert_eq!(cfg.ablation.run_name(), "no-unet");
        assert!(!cfg.effective().network.use_unet);
        cfg.ablation.enable_cyc = false;
        assert_eq!(cfg.ablation.run_name(), "no-cyc-no-unet");
        assert_eq!(cfg.effective().losses.lambda_cyc, 0.0);
    }

    #[test]
    fn shipped_presets_load() {
        let full = RunConfig::from_toml(include_str!("../../../configs/paper.toml")).unwrap();
        assert_eq!(
            full,
            RunConfig {
                checkpoint_every_images: 100_000,
                ..RunConfig::default()
            }
        );
        let desk = RunConfig::from_toml(include_str!("../../../configs/desk.toml")).unwrap();
        assert_eq!(desk.network.max_resolution, 32);
    }
}
