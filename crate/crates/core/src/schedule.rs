//! Progressive-growth schedule as a pure function of images seen.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Growing,
    Reinforcement,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Growing => "growing",
            Phase::Reinforcement => "reinforcement",
        }
    }
}

/// Position in the progressive-growth schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub index: usize,
    pub resolution: usize,
    pub phase: Phase,
    pub alpha: f32,
    pub images_seen_in_stage: u64,
    pub global_images_seen: u64,
    /// Past the end of the final stage.
    pub terminal: bool,
}

impl StageState {
    /// A settled (reinforcement, α = 1) state at `resolution`, for inference.
    pub fn settled(resolution: usize) -> Self {
        Self {
            index: 0,
            resolution,
            phase: Phase::Reinforcement,
            alpha: 1.0,
            images_seen_in_stage: 0,
            global_images_seen: 0,
            terminal: false,
        }
    }

    /// A growing state at `resolution` with a fixed blend factor.
    pub fn growing(resolution: usize, alpha: f32) -> Self {
        Self {
            phase: Phase::Growing,
            alpha,
            ..Self::settled(resolution)
        }
    }

    pub fn is_blending(&self) -> bool {
        self.phase == Phase::Growing
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    /// Images per stage, counted over both domains.
    pub stage_length: u64,
    /// `(resolution, batch size per domain)` pairs.
    pub batch_sizes: Vec<(usize, usize)>,
    pub adam: AdamConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            stage_length: 600_000,
            batch_sizes: vec![(4, 8), (8, 8), (16, 8), (32, 8), (64, 8), (128, 4), (256, 2)],
            adam: AdamConfig::default(),
        }
    }
}

impl TrainPlan {
    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        if self.stage_length == 0 {
            return Err(Error::Config("plan.stage_length must be positive".into()));
        }
        for res in cfg.ladder() {
            let b = batch_size_at(res, self)?;
            if b == 0 {
                return Err(Error::Config(format!("batch size for {res} must be positive")));
            }
        }
        self.adam.validate()
    }
}

/// The ordered `(resolution, phase)` list: base reinforcement, then a growing and
/// a reinforcement stage for every doubling.
pub fn stage_layout(cfg: &NetworkConfig) -> Vec<(usize, Phase)> {
    let mut stages = vec![(cfg.base_resolution, Phase::Reinforcement)];
    let mut r = cfg.base_resolution;
    while r < cfg.max_resolution {
        r *= 2;
        stages.push((r, Phase::Growing));
        stages.push((r, Phase::Reinforcement));
    }
    stages
}

pub fn total_images(plan: &TrainPlan, cfg: &NetworkConfig) -> u64 {
    plan.stage_length * stage_layout(cfg).len() as u64
}

pub fn stage_at(global_images_seen: u64, plan: &TrainPlan, cfg: &NetworkConfig) -> StageState {
    let layout = stage_layout(cfg);
    let raw = (global_images_seen / plan.stage_length) as usize;
    let terminal = raw >= layout.len();
    let index = raw.min(layout.len() - 1);
    let (resolution, phase) = layout[index];
    let images_seen_in_stage = global_images_seen - index as u64 * plan.stage_length;
    let alpha = match phase {
        Phase::Reinforcement => 1.0,
        Phase::Growing => (images_seen_in_stage as f64 / plan.stage_length as f64).min(1.0) as f32,
    };
    StageState {
        index,
        resolution,
        phase,
        alpha,
        images_seen_in_stage,
        global_images_seen,
        terminal,
    }
}

pub fn batch_size_at(resolution: usize, plan: &TrainPlan) -> Result<usize> {
    plan.batch_sizes
        .iter()
        .find(|(r, _)| *r == resolution)
        .map(|(_, b)| *b)
        .ok_or(Error::UnknownResolution(resolution))
}

/// What changes in the networks between two consecutive schedule states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transition {
    None,
    /// A new resolution level appears.
    Grow { from: usize, to: usize },
    /// Blending ends; low-resolution heads are retired.
    Settle { resolution: usize },
}

pub fn transition(prev: &StageState, next: &StageState) -> Transition {
    if next.resolution > prev.resolution {
        Transition::Grow {
            from: prev.resolution,
            to: next.resolution,
        }
    } else if prev.phase == Phase::Growing && next.phase == Phase::Reinforcement {
        Transition::Settle {
            resolution: next.resolution,
        }
    } else {
        Transition::None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper() -> (TrainPlan, NetworkConfig) {
        (TrainPlan::default(), NetworkConfig::default())
    }

    #[test]
    fn start_is_base_reinforcement() {
        let (plan, cfg) = paper();
        let s = stage_at(0, &plan, &cfg);
        assert_eq!((s.resolution, s.phase, s.alpha), (4, Phase::Reinforcement, 1.0));
    }

    #[test]
    fn halfway_through_first_growth() {
        let (plan, cfg) = paper();
        let s = stage_at(600_000 + 300_000, &plan, &cfg);
        assert_eq!((s.resolution, s.phase, s.alpha), (8, Phase::Growing, 0.5));
    }

    #[test]
    fn thirteen_stages_to_terminal() {
        let (plan, cfg) = paper();
        assert_eq!(stage_layout(&cfg).len(), 13);
        let s = stage_at(600_000 * 13, &plan, &cfg);
        assert_eq!((s.resolution, s.phase, s.alpha), (256, Phase::Reinforcement, 1.0));
        assert!(s.terminal);
        assert!(!stage_at(600_000 * 13 - 1, &plan, &cfg).terminal);
    }

    #[test]
    fn batch_ladder() {
        let plan = TrainPlan::default();
        assert_eq!(batch_size_at(64, &plan).unwrap(), 8);
        assert_eq!(batch_size_at(128, &plan).unwrap(), 4);
        assert_eq!(batch_size_at(256, &plan).unwrap(), 2);
        assert!(matches!(batch_size_at(48, &plan), Err(Error::UnknownResolution(48))));
    }

    #[test]
    fn transitions() {
        let (plan, cfg) = paper();
        let a = stage_at(599_999, &plan, &cfg);
        let b = stage_at(600_000, &plan, &cfg);
        assert_eq!(transition(&a, &b), Transition::Grow { from: 4, to: 8 });
        let c = stage_at(1_200_000, &plan, &cfg);
        assert_eq!(transition(&b, &c), Transition::Settle { resolution: 8 });
        assert_eq!(transition(&c, &c), Transition::None);
    }

    proptest::proptest! {
        #[test]
        fn schedule_only_moves_forward(a in 0u64..9_000_000, b in 0u64..9_000_000) {
            let (plan, cfg) = paper();
            let (lo, hi) = (stage_at(a.min(b), &plan, &cfg), stage_at(a.max(b), &plan, &cfg));
            proptest::prop_assert!(lo.index <= hi.index);
            proptest::prop_assert!(lo.resolution <= hi.resolution);
            proptest::prop_assert!((0.0..=1.0).contains(&hi.alpha));
            if lo.index == hi.index {
                proptest::prop_assert!(lo.alpha <= hi.alpha);
            }
        }
    }
}
