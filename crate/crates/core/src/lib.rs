//! Transformer training in which a deep Q-learning controller ties,
//! replicates and unties decoder blocks while the model trains.
//!
//! The crate is organised bottom-up:
//!
//! - [`tying`]: tying states, action vectors, event diffs and the packed
//!   Q-output layout.
//! - [`qcontroller`]: the Q-network, epsilon-greedy policy and Bellman
//!   update.
//! - [`model`]: the decoder stack, tying-aware parameter store and
//!   checkpoints.
//! - [`data`]: byte-level corpus loading and batch sampling.
//! - [`trainer`]: the training loop with the controller in it, plus
//!   trajectory logging.
//! - [`ablations`]: fixed tying patterns and trajectory replay.
//! - [`report`]: replication maps, event curves, trainability histograms and
//!   weight correlations.
//! - [`config`]: the JSON run configuration and run-directory layout.
//! - [`run`]: training into a run directory.

pub mod adam;
pub mod ablations;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod qcontroller;
pub mod report;
pub mod run;
pub mod trainer;
pub mod tying;

pub use error::{Error, Result};
