// SPDX-License-Identifier: MIT OR Apache-2.0

//! Data-free decomposition of MLP neuron weight vectors into sparse,
//! vocabulary-aligned channels.
//!
//! A channel is a Householder reflection of a neuron's weight vector whose
//! projection onto the unembedding has high kurtosis while staying close
//! to the original vector. [`rotate::decompose`] finds channels one at a
//! time, masking the tokens each one claims; [`channels`] scores them and
//! [`synthbench`] checks the whole pipeline against planted ground truth.

pub mod channels;
pub mod error;
pub mod householder;
pub mod linstats;
pub mod mask;
pub mod modelio;
pub mod rotate;
pub mod synthbench;
pub mod vocab;

pub use channels::{AblationMode, Channel, MatchReport, TokenScore};
pub use error::{Result, RotateError};
pub use householder::{ChannelSettings, LossBreakdown, OptTrace};
pub use linstats::{LogitVector, MomentMode, MomentSummary, Unembedding};
pub use mask::{MaskReason, TokenMask};
pub use modelio::{ArchiveHeader, ChannelArchive, ModelBundle};
pub use rotate::{Decomposition, Depletion, NeuronId, Role, RotateConfig, WeightVector};
pub use vocab::Vocab;
