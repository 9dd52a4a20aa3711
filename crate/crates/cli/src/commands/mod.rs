// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod ablate;
pub mod bench;
pub mod decompose;
pub mod matching;
pub mod reconstruct;
pub mod survey;
pub mod sweep;
