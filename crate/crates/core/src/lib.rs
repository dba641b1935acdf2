//! Multi-scale continuous integrate-and-fire (CIF) alignment.
//!
//! Acoustic frames are compressed to character, phoneme and word level in turn. Each
//! stage predicts per-step firing weights, integrates its input into one embedding per
//! token, and is supervised by a CTC head and a length (quantity) loss. The crate also
//! ships the surrounding tooling: target construction (characters with word boundaries,
//! dictionary phonemes, BPE subwords), a synthetic speech-like corpus generator, a toy
//! trainer with a staged curriculum, and WER / phonetic-confusion / segmentation error
//! scoring.

pub mod cif;
pub mod ctc;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod synth;
pub mod text;
pub mod train;
pub mod verify;

pub use cif::{CifConfig, CifMode, FireTrace};
pub use nn::{ParamSet, Tensor2};
