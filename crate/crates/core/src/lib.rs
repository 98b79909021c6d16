//! No-reference image quality assessment on compressed measurements.
//!
//! Images are sampled block-by-block with a learnable matrix at an
//! arbitrary ratio ([`csm`]), the variable-length measurements are mapped
//! to fixed-width tokens ([`aem`]), refined by a post-norm transformer and
//! a windowed-attention module ([`encoder`]), and pooled into one score by
//! a score/weight dual branch ([`head`]). Everything is differentiable
//! through the tape in [`graph`] and trained with [`optim::adam_step`].
//!
//! The crate is `no_std` and needs only `alloc`. File formats, checkpoints
//! and the command line live in the `csiqa` crate.

#![no_std]

extern crate alloc;

pub mod aem;
pub mod csm;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod head;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use image::Image;
pub use model::{Model, ModelConfig, RatioMode, Variant};
pub use tensor::Tensor;

/// Generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    <Rng as rand_core::SeedableRng>::seed_from_u64(seed)
}
