//! Conditional diffusion toolkit for 1-D multichannel biosignals.
//!
//! The crate bundles:
//!
//! * a DDPM forward/reverse process over channel-by-length signals
//!   ([`diffusion`]),
//! * structured state-space layers with HiPPO initialization and an
//!   FFT-convolution fast path checked against the state recurrence
//!   ([`s4`]),
//! * two label-conditioning mechanisms, the legacy matrix product and the
//!   two-row table with a trainable 1x1 fold ([`conditioning`]),
//! * the denoiser assembly, training loop with sample-count checkpointing,
//!   and a finite-difference gradient harness ([`model`], [`training`]),
//! * 12-lead algebra ([`leads`]), dataset handling with a toy generator
//!   ([`data`]), and the downstream evaluation protocols ([`evaluation`]).

pub mod conditioning;
pub mod diffusion;
mod error;
pub mod leads;
pub mod s4;

pub use conditioning::{LabelEntry, LabelVector};
pub use diffusion::{NoisePredictor, NoiseSchedule};
pub use error::{Error, Result};
