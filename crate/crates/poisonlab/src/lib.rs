//! Desk-scale laboratory for clean-label targeted data poisoning by
//! gradient matching.
//!
//! The crate brews ℓ∞-bounded poison perturbations against small image
//! classifiers, retrains victim models from scratch on the poisoned data,
//! and measures attack success, gradient alignment, and defense efficacy.
//!
//! The pieces, bottom to top:
//!
//! - [`autograd`]: reverse-mode differentiation with re-entrant backward
//!   passes (gradients of gradients), the mechanism the brewing objective
//!   needs.
//! - [`nn`]: a small ConvNet / MLP zoo with deterministic initialization
//!   and bit-exact checkpoints.
//! - [`data`]: dataset ingestion (CIFAR-10 binary batches or synthetic
//!   blobs), poison-target case sampling, and differentiable augmentation.
//! - [`train`]: from-scratch victim training (SGD + Nesterov momentum,
//!   weight decay, LR drops, shuffling, augmentation) and the DP-SGD
//!   defense variant.
//! - [`brew`]: the attacker-side optimizer — gradient matching with signed
//!   Adam, ℓ∞ projection, restarts, and model ensembles.
//! - [`analysis`]: evaluation suites, gradient-alignment monitoring, the
//!   descent-bound verifier, and both defenses.
//! - [`config`] and [`cli`]: experiment configs and the command surface.
//!
//! Runnable entry points live in `examples/`; the `poisonlab` binary wires
//! the same commands behind a CLI.

pub mod analysis;
pub mod autograd;
pub mod brew;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
