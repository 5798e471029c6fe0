//! Multi-expert low-rank adapters parameterized by sums of Kronecker products,
//! attached to a minimal pre-norm Vision Transformer.
//!
//! The adapter replaces a dense `d × d` update with `Σᵢ Sᵢ ⊗ (Dᵢ Uᵢ)`: `n` scale
//! matrices `Sᵢ` (`n × n`, shared by every layer and site) mix `n` token sub-blocks,
//! and each expert is a rank-`r` bottleneck acting on a `d/n`-wide block. Because the
//! module is linear it folds into the neighbouring backbone projection after training
//! ([`reparam::merge`]), so inference runs the unmodified architecture.
//!
//! Modules:
//! - [`linalg`]: matrices, Kronecker product, LayerNorm/softmax/GELU, seeded RNG.
//! - [`alore`]: expert banks, the block-structured forward pass, masks, baseline adapters.
//! - [`backbone`]: the ViT, its gradients, and regime-dependent trainable sets.
//! - [`reparam`]: merging adapters into backbone weights and checking equivalence.
//! - [`train`]: AdamW, cosine schedule, cross-entropy, the training loop and grid search.
//! - [`data`]: synthetic transfer tasks.
//! - [`accounting`]: closed-form parameter counts for several PETL families.
//! - [`checkpoint`], [`config`]: the binary tensor container and JSON experiment configs.

pub mod accounting;
pub mod alore;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod reparam;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{Matrix, Precision, Real, Rng};
