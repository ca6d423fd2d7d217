//! Optimization loop: AdamW, mini-batch gradient descent over per-image
//! tapes, the decoupled fine-tuning phase with dynamic class re-weighting,
//! and checkpoint serialization.

use crate::data::{Dataset, GtInstance};
use crate::loss::{compute_loss, match_queries, LossError, LossWeights};
use crate::matching::MatchError;
use crate::model::{
    is_extractor_param, BoundParams, HoiModel, ModelConfig, ModelError, ParamStore,
};
use crate::postproc::{compose_triplets, pnms, PnmsConfig, ScoredTriplet};
use crate::reweight::{
    blend, dynamic_weights, weights_from_counts, ClassCountQueue, WeightKind, WeightVector,
};
use crate::tensor::Tape;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss became non-finite ({loss}) at epoch {epoch}, image {image}")]
    NonFinite {
        epoch: usize,
        image: String,
        loss: f64,
    },
    #[error("no training examples supplied")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {source}")]
    Format {
        path: String,
        source: serde_json::Error,
    },
}

impl TrainError {
    /// True for failures of the numerics rather than of the setup.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. } | TrainError::Match(MatchError::NonFinite { .. })
        )
    }
}

/// AdamW with decoupled weight decay. The decay step multiplies parameters
/// directly by `1 - lr * weight_decay` instead of entering the moment
/// estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Parameters for which `frozen` returns true are
    /// left bit-identical: no gradient step, no decay, no moment update.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Array2<f64>>,
        frozen: &dyn Fn(&str) -> bool,
    ) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, value) in params.iter_mut() {
            if frozen(name) {
                continue;
            }
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(value.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(value.dim()));
            azip(m, v, value, g, |m, v, p, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.learning_rate
                    * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * *p);
            });
        }
    }
}

fn azip(
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    f: impl FnMut(&mut f64, &mut f64, &mut f64, &f64),
) {
    ndarray::Zip::from(m).and(v).and(p).and(g).for_each(f);
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epoch index at which the learning rate is multiplied by
    /// `lr_drop_factor`; 0 disables the drop.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 1e-3,
            lr_drop_epoch: 400,
            lr_drop_factor: 0.1,
            weight_decay: 1e-4,
            batch_size: 8,
            grad_clip: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

/// One training image: flattened RGB tokens plus its ground truth.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image_id: String,
    pub tokens: Array2<f64>,
    pub instances: Vec<GtInstance>,
}

/// Deterministic per-epoch shuffle.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_add((epoch as u64).wrapping_mul(0x9E3779B97F4A7C15)),
    );
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReweightSettings {
    /// Sliding-queue capacities for object and action statistics.
    pub object_queue: usize,
    pub action_queue: usize,
    pub p_object: f64,
    pub p_action: f64,
    pub reweight_objects: bool,
    pub reweight_actions: bool,
    /// Smooth against the queue capacity instead of its current fill.
    pub gamma_by_capacity: bool,
}

impl Default for ReweightSettings {
    fn default() -> Self {
        Self {
            object_queue: 64,
            action_queue: 64,
            p_object: 0.7,
            p_action: 0.7,
            reweight_objects: true,
            reweight_actions: true,
            gamma_by_capacity: false,
        }
    }
}

/// Maintains sliding class statistics during decoupled fine-tuning and
/// produces the blended weight vectors injected into the loss.
#[derive(Debug, Clone)]
pub struct Reweighter {
    settings: ReweightSettings,
    object_queue: ClassCountQueue,
    action_queue: ClassCountQueue,
    static_object: WeightVector,
    static_action: WeightVector,
    num_queries: usize,
}

impl Reweighter {
    /// Static weights come from whole-training-set statistics; the queues
    /// start empty and fill as batches are observed.
    pub fn new(
        settings: ReweightSettings,
        examples: &[TrainExample],
        num_queries: usize,
        num_object_classes: usize,
        num_action_classes: usize,
    ) -> Self {
        let mut object_counts = vec![0u64; num_object_classes];
        let mut action_counts = vec![0u64; num_action_classes];
        let mut pairs = 0u64;
        let mut labels = 0u64;
        for ex in examples {
            for inst in &ex.instances {
                object_counts[inst.object_class] += 1;
                pairs += 1;
                for &a in &inst.actions {
                    action_counts[a] += 1;
                    labels += 1;
                }
            }
        }
        let slots = (examples.len() * num_queries) as u64;
        let static_object = weights_from_counts(
            &object_counts,
            slots.saturating_sub(pairs),
            settings.p_object,
            WeightKind::Static,
        );
        let static_action = weights_from_counts(
            &action_counts,
            slots.saturating_sub(labels.min(slots)),
            settings.p_action,
            WeightKind::Static,
        );
        Self {
            object_queue: ClassCountQueue::new(num_object_classes, settings.object_queue),
            action_queue: ClassCountQueue::new(num_action_classes, settings.action_queue),
            settings,
            static_object,
            static_action,
            num_queries,
        }
    }

    /// Pushes one image's assignments into the queues: each ground-truth
    /// pair contributes its object class and action labels; queries left
    /// unmatched contribute background samples.
    pub fn observe(&mut self, instances: &[GtInstance]) {
        let object_labels: Vec<usize> = instances.iter().map(|i| i.object_class).collect();
        let action_labels: Vec<usize> = instances
            .iter()
            .flat_map(|i| i.actions.iter().copied())
            .collect();
        let bg = self.num_queries.saturating_sub(instances.len());
        self.object_queue
            .push(&object_labels, bg)
            .expect("object labels validated at load time");
        self.action_queue
            .push(&action_labels, bg)
            .expect("action labels validated at load time");
    }

    fn blended(
        &self,
        queue: &ClassCountQueue,
        p: f64,
        statics: &WeightVector,
        enabled: bool,
    ) -> WeightVector {
        if !enabled {
            return WeightVector::uniform(statics.len());
        }
        if queue.fill() == 0 {
            return statics.clone();
        }
        let dynamic = dynamic_weights(queue, p, Some(statics)).expect("queue is non-empty");
        let fill = if self.settings.gamma_by_capacity {
            queue.capacity()
        } else {
            queue.fill()
        };
        blend(statics, &dynamic, fill).expect("static and dynamic vectors share a length")
    }

    /// Current (object, action) weight vectors.
    pub fn weights(&self) -> (WeightVector, WeightVector) {
        (
            self.blended(
                &self.object_queue,
                self.settings.p_object,
                &self.static_object,
                self.settings.reweight_objects,
            ),
            self.blended(
                &self.action_queue,
                self.settings.p_action,
                &self.static_action,
                self.settings.reweight_actions,
            ),
        )
    }

    pub fn static_weights(&self) -> (&WeightVector, &WeightVector) {
        (&self.static_object, &self.static_action)
    }
}

/// Runs one epoch of mini-batch training and returns the mean loss.
///
/// Each image gets its own tape; batch gradients are averaged, clipped by
/// global norm and applied once per batch.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &HoiModel,
    params: &mut ParamStore,
    opt: &mut AdamW,
    examples: &[TrainExample],
    order: &[usize],
    batch_size: usize,
    grad_clip: f64,
    loss_weights: &LossWeights,
    mut reweighter: Option<&mut Reweighter>,
    frozen: &dyn Fn(&str) -> bool,
    epoch: usize,
) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let c_o = model.config().num_object_classes;
    let c_a = model.config().num_action_classes;
    let uniform = (WeightVector::uniform(c_o), WeightVector::uniform(c_a));
    let mut loss_sum = 0.0;
    for batch in order.chunks(batch_size.max(1)) {
        let weights = match reweighter.as_deref_mut() {
            Some(rw) => {
                for &i in batch {
                    rw.observe(&examples[i].instances);
                }
                rw.weights()
            }
            None => uniform.clone(),
        };
        let mut grad_sum: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for &i in batch {
            let ex = &examples[i];
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, params);
            let pass = model.forward(&mut tape, &bound, &ex.tokens, false)?;
            let assignment = if ex.instances.is_empty() {
                None
            } else {
                let dets = pass.detections(&tape);
                let scores = pass.action_scores(&tape);
                Some(match_queries(
                    dets.last(),
                    scores.last(),
                    &ex.instances,
                    loss_weights,
                )?)
            };
            let (node, breakdown) = compute_loss(
                &mut tape,
                &pass,
                &ex.instances,
                assignment.as_ref(),
                loss_weights,
                &weights.0,
                &weights.1,
            )?;
            if !breakdown.total.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    image: ex.image_id.clone(),
                    loss: breakdown.total,
                });
            }
            loss_sum += breakdown.total;
            let grads = tape.backward(node);
            for (name, g) in bound.collect_grads(&grads, params) {
                grad_sum
                    .entry(name)
                    .and_modify(|acc| *acc += &g)
                    .or_insert(g);
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for g in grad_sum.values_mut() {
            g.mapv_inplace(|v| v * inv);
        }
        clip_global_norm(&mut grad_sum, grad_clip);
        opt.step(params, &grad_sum, frozen);
    }
    Ok(loss_sum / examples.len() as f64)
}

/// Main end-to-end training: all parameters update, uniform class weights.
pub fn train(
    model: &HoiModel,
    params: &mut ParamStore,
    opt: &mut AdamW,
    examples: &[TrainExample],
    settings: &TrainSettings,
    loss_weights: &LossWeights,
    start_epoch: usize,
) -> Result<Vec<EpochStats>, TrainError> {
    let mut stats = Vec::new();
    for epoch in start_epoch..settings.epochs {
        let lr = if settings.lr_drop_epoch > 0 && epoch >= settings.lr_drop_epoch {
            settings.learning_rate * settings.lr_drop_factor
        } else {
            settings.learning_rate
        };
        opt.learning_rate = lr;
        opt.weight_decay = settings.weight_decay;
        let order = epoch_order(examples.len(), settings.seed, epoch);
        let mean_loss = train_epoch(
            model,
            params,
            opt,
            examples,
            &order,
            settings.batch_size,
            settings.grad_clip,
            loss_weights,
            None,
            &|_| false,
            epoch,
        )?;
        log::info!("epoch {epoch}: mean loss {mean_loss:.6}, lr {lr:e}");
        stats.push(EpochStats {
            epoch,
            mean_loss,
            learning_rate: lr,
        });
    }
    Ok(stats)
}

/// Decoupled fine-tuning: the backbone and encoder are frozen bit-exactly,
/// both decoders and all prediction heads keep training, and the class
/// weights injected into the loss come from the sliding re-weighting queues.
#[allow(clippy::too_many_arguments)]
pub fn finetune_reweight(
    model: &HoiModel,
    params: &mut ParamStore,
    opt: &mut AdamW,
    examples: &[TrainExample],
    settings: &TrainSettings,
    loss_weights: &LossWeights,
    reweight: ReweightSettings,
    start_epoch: usize,
) -> Result<Vec<EpochStats>, TrainError> {
    let mut reweighter = Reweighter::new(
        reweight,
        examples,
        model.config().num_queries,
        model.config().num_object_classes,
        model.config().num_action_classes,
    );
    let mut stats = Vec::new();
    for epoch in start_epoch..settings.epochs {
        opt.learning_rate = settings.learning_rate;
        opt.weight_decay = settings.weight_decay;
        let order = epoch_order(examples.len(), settings.seed, epoch);
        let mean_loss = train_epoch(
            model,
            params,
            opt,
            examples,
            &order,
            settings.batch_size,
            settings.grad_clip,
            loss_weights,
            Some(&mut reweighter),
            &is_extractor_param_name,
            epoch,
        )?;
        log::info!(
            "decoupled epoch {epoch}: mean loss {mean_loss:.6}, lr {:e}",
            settings.learning_rate
        );
        stats.push(EpochStats {
            epoch,
            mean_loss,
            learning_rate: settings.learning_rate,
        });
    }
    Ok(stats)
}

fn is_extractor_param_name(name: &str) -> bool {
    is_extractor_param(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    Main,
    Decoupled,
}

/// Full training state, serialized as JSON. Positions and moments are kept
/// in full f64 precision, so save/load/resume is bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub phase: TrainPhase,
    pub epochs_completed: usize,
    pub config_fingerprint: String,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let file = std::fs::File::create(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut writer = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut writer, self).map_err(|source| TrainError::Format {
            path: path.display().to_string(),
            source,
        })?;
        use std::io::Write;
        writer.flush().map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let file = std::fs::File::open(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|source| {
            TrainError::Format {
                path: path.display().to_string(),
                source,
            }
        })
    }
}

/// Runs inference over a set of images and returns the post-processed
/// predictions for the final decoder layer.
pub fn predict(
    model: &HoiModel,
    params: &ParamStore,
    images: &[(String, Array2<f64>)],
    pnms_config: Option<&PnmsConfig>,
    argmax_only: bool,
) -> Result<Vec<ScoredTriplet>, ModelError> {
    let mut triplets = Vec::new();
    for (image_id, tokens) in images {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params);
        let pass = model.forward(&mut tape, &bound, tokens, false)?;
        let dets = pass.detections(&tape);
        let scores = pass.action_scores(&tape);
        triplets.extend(compose_triplets(
            image_id,
            dets.last(),
            scores.last(),
            argmax_only,
        ));
    }
    Ok(match pnms_config {
        Some(cfg) => pnms(&triplets, cfg),
        None => triplets,
    })
}

/// Head-averaged cross-attention of the top-scored query, one map per
/// decoder, reshaped to the feature grid. Rows of the underlying attention
/// are softmax-normalized, so each map is nonnegative and sums to one.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub pair: Array2<f64>,
    pub action: Array2<f64>,
    pub top_query: usize,
}

/// Extracts final-layer cross-attention maps for the query whose best
/// composed triplet scores highest.
pub fn attention_maps(
    model: &HoiModel,
    params: &ParamStore,
    tokens: &Array2<f64>,
) -> Result<AttentionMaps, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let pass = model.forward(&mut tape, &bound, tokens, false)?;
    let dets = pass.detections(&tape);
    let scores = pass.action_scores(&tape);
    // One triplet per query, in query order.
    let per_query = compose_triplets("", dets.last(), scores.last(), true);
    let top_query = per_query
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.score.total_cmp(&b.score))
        .map(|(q, _)| q)
        .unwrap_or(0);

    let grid = (pass.feature_height, pass.feature_width);
    let head_mean_row = |tape: &Tape, heads: &[crate::tensor::NodeId]| {
        let mut acc = Array2::zeros(grid);
        for &h in heads {
            let row = tape.value(h).row(top_query).to_owned();
            let map = row.into_shape_with_order(grid).expect("grid-sized row");
            acc += &map;
        }
        acc / heads.len() as f64
    };
    let pair = head_mean_row(&tape, pass.pair_cross_attention.last().expect("layers"));
    let action = head_mean_row(&tape, pass.action_cross_attention.last().expect("layers"));
    Ok(AttentionMaps {
        pair,
        action,
        top_query,
    })
}

/// Builds in-memory training examples from a dataset whose images are
/// already decoded to token matrices.
pub fn examples_from_tokens(dataset: &Dataset, tokens: Vec<Array2<f64>>) -> Vec<TrainExample> {
    dataset
        .annotations
        .iter()
        .zip(tokens)
        .map(|(ann, tokens)| TrainExample {
            image_id: ann.image_id.clone(),
            tokens,
            instances: ann.instances.clone(),
        })
        .collect()
}
