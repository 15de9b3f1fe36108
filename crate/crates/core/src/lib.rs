//! Distributional-representation collaborative filtering.
//!
//! Users and items are embedded by lookup tables; the concatenated pair of
//! embeddings feeds a tanh hidden layer and a sigmoid output unit whose value,
//! scaled by the rating ceiling `k_max`, is the predicted rating. All
//! parameters are trained jointly by backpropagation with mini-batched L-BFGS.
//!
//! Module map:
//! - [`dataio`]: MovieLens parsing, vocabularies, seeded splits.
//! - [`model`]: parameter storage and the forward pass.
//! - [`grad`]: regularized objective, backprop gradient, finite-difference oracle.
//! - [`optim`]: two-loop recursion, strong Wolfe line search, per-batch L-BFGS.
//! - [`train`]: epoch loop with early stopping.
//! - [`eval`]: RMSE, cold-start fallback and reference baselines.
//! - [`persist`]: the versioned text model format.
//! - [`cli`]: the `drcf` command-line front end.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod grad;
pub mod model;
pub mod optim;
pub mod persist;
pub mod train;

pub use error::{Error, Result};
