//! Pivot-language alignment of frozen embedding spaces.
//!
//! Two small projection heads map a CLIP-like space and a multilingual text
//! space into one shared space. Training needs no image/caption pairs: only
//! English sentences embedded in both spaces, plus fixed banks of images and
//! multilingual captions that are queried by soft retrieval.

pub mod alignment;
pub mod bank;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod numerics;
pub mod pipeline;
pub mod projector;
pub mod synth;
pub mod trainer;

pub use bank::{EmbeddingBank, LabeledBank};
pub use error::{Error, Result};
pub use numerics::Rng;
pub use projector::{HeadShape, Mode, ProjectionHead};
