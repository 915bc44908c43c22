//! Joint contrastive + classification training with active-learning selection.
//!
//! The crate is organized bottom-up:
//! - [`tensor`], [`tape`], [`optim`], [`gradcheck`]: the differentiable core;
//! - [`augment`]: seeded weak/strong image augmentation;
//! - [`model`]: the dual-branch query/key architecture with EMA updates;
//! - [`contrastive`]: key queues and the InfoNCE objectives;
//! - [`trainer`]: the alternating labelled/unlabelled training loop;
//! - [`select`]: acquisition functions (CoreSet greedy and alternatives);
//! - [`alloop`]: the multi-cycle active-learning orchestrator;
//! - [`data`], [`config`], [`metrics`]: dataset I/O, configuration, CSV output.

pub mod alloop;
pub mod augment;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod select;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
pub use tensor::{Real, Tensor};
