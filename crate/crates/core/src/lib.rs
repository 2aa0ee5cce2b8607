//! Offline reinforcement-learning sequential recommendation with a
//! language-model environment.
//!
//! The crate is organised bottom-up: [`data`] and [`ingest`] hold the domain
//! types and data preparation, [`autodiff`] and [`backbone`] the sequence
//! encoders, [`policy`] the twin-Q training procedure, [`env`] the
//! environment contract, [`surrogate`] a small native language-model
//! environment, [`metrics`] ranking evaluation and [`experiment`] the
//! orchestration used by the `lea` binary.

pub mod autodiff;
pub mod backbone;
pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod ingest;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod prompt;
pub mod surrogate;

pub use data::{
    AugmentedAction, EnvState, HyperParams, InteractionSequence, ItemId, ItemToken, LossBreakdown,
    RewardValue, WindowedExample,
};
pub use error::{Error, Result};
pub use exec::Parallelism;
