//! Rotated sparse activation: training-free activation sparsification for
//! pre-norm transformer decoders.
//!
//! The pipeline: calibrate per-layer input covariances on a handful of
//! sequences, build orthogonal PCA rotations from them, absorb the rotations
//! into the projection weights (with residual adapters between layers), then
//! sparsify rotated activations with an exact Top-K rule whose per-site
//! budgets come from a constrained coefficient system. A column-major sparse
//! GEMV kernel turns the resulting sparsity into skipped memory traffic, and
//! a closed-form Gaussian error model predicts the sparsification error.
//!
//! Modules:
//! - [`mat`], [`eigen`], [`gauss`]: dense linear algebra, a Jacobi
//!   eigensolver, and standard-normal special functions.
//! - [`rotation`]: covariance accumulation, PCA rotation construction, and
//!   weight merging with residual adapters.
//! - [`sparsify`]: Top-K and magnitude-threshold sparsifiers, the sparsity
//!   coefficient constraint system, and sparsity measurement.
//! - [`model`], [`forward`]: a desk-scale decoder stack (GQA attention +
//!   SwiGLU MLP) with dense and sparsified forward modes, calibration
//!   passes, and per-site sparsity instrumentation.
//! - [`kernel`]: column-major sparse GEMV, fused Top-K GEMV, and a
//!   micro-benchmark harness.
//! - [`theory`]: the closed-form distributional relative error of Top-K
//!   sparsification and its Monte-Carlo oracle.
//! - [`search`]: exhaustive grid search over sparsity coefficients.
//! - [`weights`]: a safetensors-compatible weight file reader/writer.

pub mod eigen;
pub mod error;
pub mod forward;
pub mod gauss;
pub mod kernel;
pub mod mat;
pub mod model;
pub mod rng;
pub mod rotation;
pub mod search;
pub mod sparsify;
pub mod theory;
pub mod weights;

pub use error::{Error, ErrorKind, Result};
pub use mat::{gemv_dense, matmul, rmsnorm, Layout, Mat};
pub use model::{Model, ModelConfig};
pub use rotation::{build_rotation, merge_rotations, RotatedModel, RotationMatrix};
pub use sparsify::{
    actual_sparsity, compute_k, magnitude_sparsify, solve_alpha_constraints, top_k_sparsify,
    SparseVec, SparsityPlan, ThresholdTable,
};
