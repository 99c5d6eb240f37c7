//! Low-rank plus structured video decomposition.
//!
//! Observations are held as Casorati matrices (pixels × frames) and split
//! into a low-rank background `L` and a foreground `X`, either by the
//! classical Lagrangian robust PCA ([`rpca`]) or by nuclear diffusion
//! posterior sampling ([`nucdiff`]), which keeps the nuclear-norm prior on
//! `L` but replaces the ℓ₁ prior on `X` with a per-frame diffusion prior
//! ([`score_models`]).
//!
//! The remaining modules provide the shared pieces: dense containers and the
//! tensor file format ([`tensors`]), proximal operators ([`proxops`]),
//! diffusion schedules and sampling primitives ([`diffusion`]), evaluation
//! metrics ([`metrics`]) and a planted synthetic data generator ([`synth`]).

pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nucdiff;
pub mod proxops;
pub mod rpca;
pub mod score_models;
pub mod synth;
pub mod tensors;

mod rng;

pub use error::{Error, ErrorKind, Result};
pub use rng::{normal_matrix, seeded_rng, SamplerRng};
pub use tensors::{CasoratiMatrix, Frame, RoiLabel, RoiMask};
