//! Content-aware quadtree patchification of images, a coordinate-based
//! positional-embedding interpolator, and encoder bias metrics, backed by a
//! small fixed-graph reverse-mode differentiation core.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod fdcheck;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod posenc;
pub mod quadtree;
pub mod tensor;
pub mod trainer;

pub use error::QtpError;
pub use tensor::Tensor;
