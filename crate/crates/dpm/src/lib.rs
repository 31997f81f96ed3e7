//! Occlusion-robust embedding learning with dynamically masked class
//! prototypes: a small ViT-style encoder, a hierarchical mask generator
//! that carves per-sample subspaces out of a shared prototype bank, a
//! head-diversity penalty, and a masked-subspace retrieval protocol,
//! all on a self-contained reverse-mode tensor tape.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hem;
pub mod hmg;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::DpmError;
pub use graph::{Graph, Var};
pub use tensor::{FreezeGroup, ParamStore, Scalar, Tensor};
