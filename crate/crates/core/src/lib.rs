//! Learned and classical beamformers for the multi-user MISO downlink.
//!
//! The crate covers channel generation, the sum-rate objective and its
//! derivatives, iterative reference solvers (zero-forcing, projected gradient
//! ascent, WMMSE), an unrolled projected-gradient network, an MLP baseline, a
//! TPE hyperparameter search and the experiment harness tying them together.

pub mod bench;
pub mod channel;
pub mod error;
pub mod hpo;
pub mod mlp;
pub mod numerics;
pub mod objective;
pub mod optim;
pub mod solvers;
pub mod unrolled;

pub use channel::{ChannelMatrix, Dataset, SplitTag};
pub use error::{Error, Result};
pub use numerics::{CMat, C64};
pub use objective::{BeamformingMatrix, SystemParams};
