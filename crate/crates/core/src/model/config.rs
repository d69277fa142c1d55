use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalization::RenormConfig;

/// How the encoder/generator pair normalizes its two domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// One renorm parameter set per domain; everything else shared.
    DomainAdaptive,
    /// A single renorm parameter set used by both domains.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub max_resolution: usize,
    pub base_resolution: usize,
    /// `(resolution, channels)` for every level of the ladder.
    pub channel_schedule: Vec<(usize, usize)>,
    pub leaky_slope: f32,
    pub use_unet: bool,
    pub use_pixelnorm: bool,
    pub norm: NormMode,
    pub init_std: f32,
    pub renorm: RenormConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            max_resolution: 256,
            base_resolution: 4,
            channel_schedule: vec![
                (4, 256),
                (8, 256),
                (16, 256),
                (32, 128),
                (64, 64),
                (128, 32),
                (256, 16),
            ],
            leaky_slope: 0.2,
            use_unet: true,
            use_pixelnorm: true,
            norm: NormMode::DomainAdaptive,
            init_std: 0.02,
            renorm: RenormConfig::default(),
        }
    }
}

impl NetworkConfig {
    /// Resolutions from base to max, doubling.
    pub fn ladder(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut r = self.base_resolution;
        while r <= self.max_resolution && r > 0 {
            out.push(r);
            r *= 2;
        }
        out
    }

    pub fn channels(&self, resolution: usize) -> Result<usize> {
        self.channel_schedule
            .iter()
            .find(|(r, _)| *r == resolution)
            .map(|(_, c)| *c)
            .ok_or(Error::UnknownResolution(resolution))
    }

    /// `(channels, 4, 4)`.
    pub fn latent_shape(&self) -> Result<(usize, usize, usize)> {
        let b = self.base_resolution;
        Ok((self.channels(b)?, b, b))
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v > 0 && v.is_power_of_two();
        if self.base_resolution != 4 {
            return Err(Error::Config(format!(
                "base_resolution must be 4, got {}",
                self.base_resolution
            )));
        }
        if !pow2(self.max_resolution) || self.max_resolution < self.base_resolution {
            return Err(Error::Config(format!(
                "max_resolution must be a power of two >= {}, got {}",
                self.base_resolution, self.max_resolution
            )));
        }
        for r in self.ladder() {
            let c = self
                .channels(r)
                .map_err(|_| Error::Config(format!("channel_schedule has no entry for {r}")))?;
            if c == 0 {
                return Err(Error::Config(format!("channel count for {r} must be positive")));
            }
        }
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            return Err(Error::Config("leaky_slope must lie in [0, 1)".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        let rn = &self.renorm;
        if !(rn.r_max >= 1.0 && rn.d_max >= 0.0 && rn.ramp_stages >= 0.0) {
            return Err(Error::Config("renorm limits need r_max >= 1, d_max >= 0".into()));
        }
        if !(rn.momentum > 0.0 && rn.momentum < 1.0 && rn.epsilon > 0.0) {
            return Err(Error::Config("renorm momentum must lie in (0, 1), epsilon > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = NetworkConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.ladder(), vec![4, 8, 16, 32, 64, 128, 256]);
        assert_eq!(cfg.latent_shape().unwrap(), (256, 4, 4));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = NetworkConfig {
            max_resolution: 48,
            ..NetworkConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.max_resolution = 512;
        assert!(cfg.validate().is_err(), "no channels for 512");
        cfg.max_resolution = 2;
        assert!(cfg.validate().is_err());
    }
}
