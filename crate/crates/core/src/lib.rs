//! Core numerics for sequence multi-index models.
//!
//! A sequence multi-index model maps an input sequence `x` (D features by M
//! tokens) through a low-rank projection `Z = W x / sqrt(D)` and a link
//! `g: R^{P x M} -> R^{M x M}`. Deep tied attention networks (each layer's
//! query and key share one weight matrix) are exactly of this form, with the
//! link given by a mixing-function recursion over per-layer index blocks.
//!
//! The crate implements the pieces needed to study how many samples per
//! dimension such a model needs before each layer's weights become
//! recoverable:
//!
//! * [`model`]: the network forward pass, the equivalent link recursion, and
//!   synthetic dataset generation.
//! * [`channel`]: the posterior-mean denoiser of the index matrix given a
//!   label (quadrature-based for depth-2 rank-1 models, Monte Carlo for
//!   deeper stacks) and its derivative tensor.
//! * [`gamp`]: generalized approximate message passing over the weights,
//!   with optional side information.
//! * [`se`]: the scalar state evolution tracking the overlap matrix, plus
//!   prediction/estimation error and the replica free-energy objective.
//! * [`thresholds`]: weak-recovery sample-complexity thresholds from the
//!   stability operator of the trivial fixed point.
//! * [`sgd`]: a plain SGD baseline on the same two-layer architecture.
//! * [`smallmat`]: small symmetric-matrix helpers and deterministic
//!   counter-based RNG streams used everywhere above.

pub mod channel;
pub mod error;
pub mod gamp;
pub mod model;
pub mod quad;
pub mod se;
pub mod sgd;
pub mod smallmat;
pub mod thresholds;

pub use error::{Error, Result};
pub use model::{Activation, Dataset, ModelConfig, SequenceSample, WeightStack};
pub use smallmat::{RngStream, SymMatrix};
