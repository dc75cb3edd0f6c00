//! Weakly supervised manipulation-map generation.
//!
//! Two vision-transformer branches read an RGB image and its Sobel gradient
//! magnitude. A class-activation head on each branch proposes attentive
//! regions, and a Gumbel-Softmax token selector fuses the two streams into a
//! single map that marks the regions driving a real/fake decision. The crate
//! also carries comparison-based baseline maps, a synthetic spliced-image
//! generator with ground-truth masks, and a multi-task evaluation harness.

pub mod autograd;
pub mod backbone;
pub mod carp;
pub mod dataset;
pub mod error;
pub mod evalharness;
pub mod fusion;
pub mod imaging;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Mat;
