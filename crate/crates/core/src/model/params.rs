//! Model configuration, parameter storage and initialization.
//!
//! Parameters live in a name-keyed map of dense matrices; names are
//! hierarchical (`encoder.0.attn.wq`, `heads.human_box.2.weight`, ...) so the
//! fine-tuning phase can freeze whole subtrees by prefix. Bias vectors and
//! layer-norm scales are stored as `(1, n)` matrices.

use crate::tensor::{Grads, NodeId, Tape};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type ParamStore = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Backbone output channels per stride-2 block; the last entry is the
    /// backbone feature width before projection.
    pub backbone_channels: Vec<usize>,
    /// Token width D_c shared by encoder, decoders and queries.
    pub d_model: usize,
    pub encoder_layers: usize,
    /// Depth of each decoder (pair decoder and interaction decoder alike).
    pub decoder_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Query count N_d: detection slots per image.
    pub num_queries: usize,
    pub num_object_classes: usize,
    pub num_action_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![16, 32, 64],
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            num_queries: 16,
            num_object_classes: 3,
            num_action_classes: 4,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("image with {tokens} tokens is not a {size}x{size} grid")]
    BadImageShape { tokens: usize, size: usize },
    #[error("image size {size} not divisible by backbone stride {stride}")]
    NonDivisibleImage { size: usize, stride: usize },
    #[error("interaction decoder requires pair-decoder output queries, got {0}")]
    WrongProvenance(&'static str),
}

impl ModelConfig {
    /// Total spatial downsampling factor of the backbone.
    pub fn stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.backbone_channels.is_empty() {
            return Err(ModelError::BadConfig(
                "backbone needs at least one block".into(),
            ));
        }
        if !self.d_model.is_multiple_of(4) {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be divisible by 4 for the positional encoding",
                self.d_model
            )));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must divide into {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(ModelError::BadConfig(
                "layer counts must be positive".into(),
            ));
        }
        if self.num_queries == 0 || self.num_object_classes == 0 || self.num_action_classes == 0 {
            return Err(ModelError::BadConfig(
                "queries and class counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

fn attention_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.{name}"), xavier(rng, d, d));
        store.insert(format!("{prefix}.{name}_bias"), Array2::zeros((1, d)));
    }
}

fn layer_norm_params(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gamma"), Array2::ones((1, d)));
    store.insert(format!("{prefix}.beta"), Array2::zeros((1, d)));
}

fn ffn_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, hidden: usize) {
    store.insert(format!("{prefix}.w1"), xavier(rng, d, hidden));
    store.insert(format!("{prefix}.b1"), Array2::zeros((1, hidden)));
    store.insert(format!("{prefix}.w2"), xavier(rng, hidden, d));
    store.insert(format!("{prefix}.b2"), Array2::zeros((1, d)));
}

fn mlp3_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, out: usize) {
    let dims = [d, d, d, out];
    for i in 0..3 {
        store.insert(
            format!("{prefix}.{i}.weight"),
            xavier(rng, dims[i], dims[i + 1]),
        );
        store.insert(
            format!("{prefix}.{i}.bias"),
            Array2::zeros((1, dims[i + 1])),
        );
    }
}

/// Initializes all parameters deterministically from a seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = config.d_model;

    let mut in_ch = 3;
    for (i, &out_ch) in config.backbone_channels.iter().enumerate() {
        store.insert(
            format!("backbone.conv{i}.weight"),
            xavier(&mut rng, 9 * in_ch, out_ch),
        );
        store.insert(format!("backbone.conv{i}.bias"), Array2::zeros((1, out_ch)));
        in_ch = out_ch;
    }
    store.insert("backbone.proj.weight".into(), xavier(&mut rng, in_ch, d));
    store.insert("backbone.proj.bias".into(), Array2::zeros((1, d)));

    for l in 0..config.encoder_layers {
        let p = format!("encoder.{l}");
        attention_params(&mut store, &mut rng, &format!("{p}.attn"), d);
        layer_norm_params(&mut store, &format!("{p}.ln1"), d);
        ffn_params(&mut store, &mut rng, &format!("{p}.ffn"), d, config.ffn_dim);
        layer_norm_params(&mut store, &format!("{p}.ln2"), d);
    }

    store.insert(
        "pair_decoder.queries".into(),
        xavier(&mut rng, config.num_queries, d),
    );
    for decoder in ["pair_decoder", "action_decoder"] {
        for l in 0..config.decoder_layers {
            let p = format!("{decoder}.{l}");
            attention_params(&mut store, &mut rng, &format!("{p}.self_attn"), d);
            layer_norm_params(&mut store, &format!("{p}.ln1"), d);
            attention_params(&mut store, &mut rng, &format!("{p}.cross_attn"), d);
            layer_norm_params(&mut store, &format!("{p}.ln2"), d);
            ffn_params(&mut store, &mut rng, &format!("{p}.ffn"), d, config.ffn_dim);
            layer_norm_params(&mut store, &format!("{p}.ln3"), d);
        }
    }

    mlp3_params(&mut store, &mut rng, "heads.human_box", d, 4);
    mlp3_params(&mut store, &mut rng, "heads.object_box", d, 4);
    store.insert(
        "heads.object_class.weight".into(),
        xavier(&mut rng, d, config.num_object_classes + 1),
    );
    store.insert(
        "heads.object_class.bias".into(),
        Array2::zeros((1, config.num_object_classes + 1)),
    );
    store.insert("heads.interactive.weight".into(), xavier(&mut rng, d, 1));
    store.insert("heads.interactive.bias".into(), Array2::zeros((1, 1)));
    store.insert(
        "heads.action.weight".into(),
        xavier(&mut rng, d, config.num_action_classes),
    );
    store.insert(
        "heads.action.bias".into(),
        Array2::zeros((1, config.num_action_classes)),
    );

    store
}

/// Parameters whose names start with one of these prefixes belong to the
/// visual feature extractor and are frozen during decoupled fine-tuning.
pub const EXTRACTOR_PREFIXES: [&str; 2] = ["backbone.", "encoder."];

pub fn is_extractor_param(name: &str) -> bool {
    EXTRACTOR_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Tape leaves for every parameter, bound once per forward pass.
pub struct BoundParams {
    nodes: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParamStore) -> Self {
        let nodes = params
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect();
        Self { nodes }
    }

    /// Node for a parameter name; all names are known at init time so a
    /// missing one is a programming error.
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Extracts per-parameter gradients after a backward pass. Parameters
    /// that did not influence the loss get zero gradients.
    pub fn collect_grads(
        &self,
        grads: &Grads,
        params: &ParamStore,
    ) -> BTreeMap<String, Array2<f64>> {
        self.nodes
            .iter()
            .map(|(name, &node)| {
                let g = grads
                    .get(node)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(params[name].dim()));
                (name.clone(), g)
            })
            .collect()
    }
}
