//! Desk-scale machinery for layout-conditioned dual energy guidance.
//!
//! The crate covers the full mathematical pipeline without a real diffusion
//! backbone: a small tape-based autodiff core ([`tensor`]), the sigmoid
//! layout target and energy ([`energy`]), masked attention with the RISA and
//! SFCA batch couplings ([`attention`]), a seeded toy denoiser
//! ([`denoiser`]), the dual backward/forward guidance loop ([`guidance`]),
//! plus benchmark construction ([`bench`]), evaluation metrics ([`metrics`])
//! and the finite-difference verification gate ([`gradcheck`]).

pub mod attention;
pub mod bench;
pub mod denoiser;
pub mod energy;
pub mod gradcheck;
pub mod guidance;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod trace;

pub use energy::BoundingBox;
pub use tensor::{GradTape, Gradients, NodeId, Tensor, TensorError};
