//! Cascaded set-prediction model: a convolutional backbone, a transformer
//! encoder over image tokens, and two stacked decoders. The first decoder
//! turns learned queries into human-object pair detections; the second takes
//! the first decoder's output queries as its input queries and classifies the
//! action for each pair. Every decoder layer gets its own supervision, so
//! outputs are exposed per layer.

pub mod net;
pub mod params;
pub mod posenc;

pub use net::{Features, ForwardPass, HoiModel, PairLayerNodes, Provenance, QueryState};
pub use params::{
    init_params, is_extractor_param, BoundParams, ModelConfig, ModelError, ParamStore,
};
pub use posenc::positional_encoding;

use crate::geometry::BoundingBox;
use ndarray::Array2;

/// Plain-value pair detections from one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerDetections {
    /// Predicted human boxes, normalized center-size, one per query.
    pub human_boxes: Vec<BoundingBox>,
    /// Predicted object boxes, aligned with `human_boxes`.
    pub object_boxes: Vec<BoundingBox>,
    /// Softmax object-class probabilities, `(num_queries, C_o + 1)`;
    /// the last column is the background class.
    pub object_probs: Array2<f64>,
    /// Sigmoid probabilities that the query holds an interacting pair.
    pub interactive_probs: Vec<f64>,
}

impl LayerDetections {
    pub fn num_queries(&self) -> usize {
        self.human_boxes.len()
    }

    /// Number of real (non-background) object classes.
    pub fn num_object_classes(&self) -> usize {
        self.object_probs.ncols() - 1
    }
}

/// Pair detections for every layer of the first decoder, last layer last.
#[derive(Debug, Clone)]
pub struct PairDetections {
    pub layers: Vec<LayerDetections>,
}

impl PairDetections {
    pub fn last(&self) -> &LayerDetections {
        self.layers.last().expect("decoder has at least one layer")
    }
}

/// Sigmoid action probabilities `(num_queries, C_a)` for every layer of the
/// second decoder, last layer last.
#[derive(Debug, Clone)]
pub struct ActionScores {
    pub layers: Vec<Array2<f64>>,
}

impl ActionScores {
    pub fn last(&self) -> &Array2<f64> {
        self.layers.last().expect("decoder has at least one layer")
    }
}
