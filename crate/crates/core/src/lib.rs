//! Concept-routed causal interpretability for a toy multimodal classifier.
//!
//! The crate trains a small text+image classifier whose prediction is forced
//! through a latent built as a weighted sum of named concept embeddings
//! (dynamic routing weights plus learned static weights). Because the latent
//! is an explicit linear combination, removing one concept is a well-defined
//! intervention: the per-concept causal effect is the absolute change in the
//! predicted-class probability when that concept's weight is forced to zero.
//!
//! On top of the model the crate provides:
//!
//! - a minimal reverse-mode autodiff engine ([`autodiff`]) with a
//!   gradient-reversal node and a multiplier-based backward pass for
//!   reference-comparing attribution,
//! - nullspace de-confounding ([`deconfound`]): a linear reconstructor is fit
//!   to recover the concept matrix from counterfactual latents, and concepts
//!   are re-projected through its nullspace so a removed concept can no
//!   longer be recovered from what remains,
//! - counterfactual effect scores and causal concept rankings ([`causal`]),
//! - six gradient attribution baselines ([`attribution`]),
//! - rank correlations, a simulatability protocol, and top-5 trustworthiness
//!   metrics ([`metrics`]),
//! - a synthetic generator with planted ground-truth concepts ([`synthdata`]).
//!
//! Sample-level loops (effect profiles, attribution sweeps, batch gradients)
//! run data-parallel via rayon when the default `parallel` feature is on;
//! reductions preserve sample order so results are bit-identical to the
//! sequential fallback (`--no-default-features`).

pub mod attribution;
pub mod autodiff;
pub mod causal;
pub mod concepts;
pub mod deconfound;
pub mod error;
pub mod metrics;
pub mod model;
pub mod par;
pub mod ranking;
pub mod synthdata;
pub mod tensor;
#[doc(hidden)]
pub mod testing;

pub use error::CoreError;
pub use tensor::Tensor;

/// Deterministic seed derivation (splitmix64 finalizer) so independent RNG
/// streams never overlap between pipeline stages or samples.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
