//! Unpaired two-domain image translation with twin progressive
//! encoder/generator pairs that share every weight except their
//! batch-renormalization parameters.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod normalization;
pub mod optim;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use config::{AblationFlags, NonFinitePolicy, RunConfig};
pub use domain::{DomainId, DIRECTIONS};
pub use error::{Error, Result};
pub use model::{Forward, LatentEmbedding, NetworkConfig, NormMode, ParameterAudit, SkipStack, TwinGan};
pub use schedule::{Phase, StageState, TrainPlan};
pub use trainer::{train, TrainOptions, TrainSummary, TrainerState};
pub use twingan_autograd as autograd;
