//! Cascaded set-prediction human-object interaction detector.
//!
//! The pipeline: a small convolutional backbone plus transformer encoder
//! extracts sequenced visual features; a pair decoder turns learned queries
//! into human/object box pairs with object class and interactive score; a
//! second decoder, seeded with the pair decoder's output queries, classifies
//! actions. Training uses Hungarian matching with a five-part weighted loss,
//! optionally followed by a decoupled fine-tuning phase with dynamic
//! class re-weighting. Inference composes scored triplets and filters them
//! with pair-wise NMS; evaluation reports mean average precision over
//! full/rare/non-rare HOI class splits.

pub mod config;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod matching;
pub mod model;
pub mod postproc;
pub mod reweight;
pub mod tensor;
pub mod train;

pub use geometry::{BoundingBox, Corners};
