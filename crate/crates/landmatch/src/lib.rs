//! Self-supervised landmark detection and matching for pairs of 2D grayscale
//! images.
//!
//! The toolkit trains a Siamese encoder-decoder network to predict landmark
//! probability maps and feature descriptors for two images at once, plus a
//! matching head that scores descriptor pairs. Training pairs are synthesized
//! on the fly by warping a reference image with a known intensity, affine, or
//! elastic transformation, so no manual annotation is needed. Inference keeps
//! landmark candidates above a probability threshold and accepts only
//! inverse-consistent matches.
//!
//! Module map:
//!
//! - [`image_io`]: grayscale image loading/saving, isotropic resampling, and
//!   valid-mask computation.
//! - [`transforms`]: the intensity / affine / elastic transformation families,
//!   backward warping, and exact target-to-reference point projection.
//! - [`network`]: the shared-weight CNN branch (probability map + multi-scale
//!   descriptors) and the descriptor matching head, with explicit backward
//!   passes for end-to-end training.
//! - [`sampling`]: grid-constrained landmark selection and on-the-fly ground
//!   truth generation.
//! - [`loss`]: the multi-task training objective (landmark probability loss
//!   and descriptor matching loss).
//! - [`pipeline`]: the training loop, inference, and inverse-consistent
//!   matching.
//! - [`baseline`]: a self-contained classical multi-scale keypoint baseline
//!   with ratio-test and inverse-consistency matching strategies.
//! - [`evaluation`]: spatial matching error, cumulative error curves, and
//!   summary tables.
//! - [`synthetic`]: procedural textured test images.

pub mod baseline;
pub mod error;
pub mod evaluation;
pub mod image_io;
pub mod loss;
pub mod network;
pub mod pipeline;
pub mod sampling;
pub mod synthetic;
pub mod transforms;

mod nn;
mod stats;

pub use error::{Error, Result};
pub use image_io::{BinaryMask, GrayImage};
pub use transforms::Transform;

/// Environment variable capping numeric-kernel parallelism.
pub const NUM_THREADS_ENV: &str = "LANDMATCH_NUM_THREADS";

/// Configure the global rayon pool from `LANDMATCH_NUM_THREADS`.
///
/// Call once at process start; later calls are no-ops. All parallel code in
/// this crate reduces in a fixed order, so results do not depend on the
/// thread count; the cap exists to bound CPU usage.
pub fn init_thread_pool() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        if let Ok(v) = std::env::var(NUM_THREADS_ENV) {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}
