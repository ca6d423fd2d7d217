//! Class-frequency re-weighting for the decoupled fine-tuning phase.
//!
//! Sliding-window queues accumulate recent training labels; from the counts,
//! each class gets the weight `(sum_i N_i / N_i)^p` and the background class
//! `(sum_i N_i / N_bg)^p`, so rarer classes weigh more. The applied weight is
//! a convex blend `gamma * w_static + (1 - gamma) * w_dynamic` with
//! `gamma = min(0.999^fill, 0.9)`, which starts near the whole-dataset static
//! weights and shifts toward the window statistics as the queue fills.

use crate::data::Dataset;
use std::collections::VecDeque;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ReweightError {
    #[error("label {id} out of range for {num_classes} classes")]
    LabelOutOfRange { id: usize, num_classes: usize },
    #[error("queue is empty; weights need at least one accumulated sample")]
    EmptyQueue,
    #[error("weight vectors have {left} and {right} classes")]
    LengthMismatch { left: usize, right: usize },
}

/// One accumulated sample: a positive of some class, or a background slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Label {
    Class(usize),
    Background,
}

/// Sliding-window accumulator of per-class sample counts.
#[derive(Debug, Clone)]
pub struct ClassCountQueue {
    capacity: usize,
    counts: Vec<u64>,
    background: u64,
    fifo: VecDeque<Label>,
}

impl ClassCountQueue {
    pub fn new(num_classes: usize, capacity: usize) -> Self {
        Self {
            capacity,
            counts: vec![0; num_classes],
            background: 0,
            fifo: VecDeque::new(),
        }
    }

    /// Appends positive labels and background samples, evicting the oldest
    /// entries beyond capacity.
    pub fn push(&mut self, labels: &[usize], background_count: usize) -> Result<(), ReweightError> {
        for &id in labels {
            if id >= self.counts.len() {
                return Err(ReweightError::LabelOutOfRange {
                    id,
                    num_classes: self.counts.len(),
                });
            }
        }
        for &id in labels {
            self.fifo.push_back(Label::Class(id));
            self.counts[id] += 1;
        }
        for _ in 0..background_count {
            self.fifo.push_back(Label::Background);
            self.background += 1;
        }
        while self.fifo.len() > self.capacity {
            match self.fifo.pop_front().expect("nonempty") {
                Label::Class(id) => self.counts[id] -= 1,
                Label::Background => self.background -= 1,
            }
        }
        Ok(())
    }

    /// Number of samples currently inside the window.
    pub fn fill(&self) -> usize {
        self.fifo.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn background(&self) -> u64 {
        self.background
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Static,
    Dynamic,
    Blended,
}

/// Per-class loss weights plus the background weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub class_weights: Vec<f64>,
    pub background: f64,
    pub exponent: f64,
    pub kind: WeightKind,
}

impl WeightVector {
    /// All-ones weights: the unweighted baseline.
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            class_weights: vec![1.0; num_classes],
            background: 1.0,
            exponent: 0.0,
            kind: WeightKind::Static,
        }
    }

    pub fn len(&self) -> usize {
        self.class_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_weights.is_empty()
    }
}

/// Applies the re-weighting formula to raw counts.
///
/// The shared numerator is the sum of positive counts only. Classes with a
/// zero count are treated as having one sample, keeping weights finite.
pub fn weights_from_counts(
    counts: &[u64],
    background: u64,
    p: f64,
    kind: WeightKind,
) -> WeightVector {
    let total: u64 = counts.iter().sum();
    let total = total as f64;
    let class_weights = counts
        .iter()
        .map(|&n| (total / n.max(1) as f64).powf(p))
        .collect();
    WeightVector {
        class_weights,
        background: (total / background.max(1) as f64).powf(p),
        exponent: p,
        kind,
    }
}

/// Window statistics turned into weights.
///
/// Bins absent from the window fall back to the matching entry of `fallback`
/// (typically the static weights); without a fallback an absent bin is
/// treated as having one sample, i.e. weighted as the rarest possible class.
pub fn dynamic_weights(
    queue: &ClassCountQueue,
    p: f64,
    fallback: Option<&WeightVector>,
) -> Result<WeightVector, ReweightError> {
    if queue.fill() == 0 {
        return Err(ReweightError::EmptyQueue);
    }
    if let Some(f) = fallback {
        if f.len() != queue.num_classes() {
            return Err(ReweightError::LengthMismatch {
                left: f.len(),
                right: queue.num_classes(),
            });
        }
    }
    let total: u64 = queue.counts().iter().sum();
    let total = total as f64;
    let weight_or = |n: u64, fb: Option<f64>| match (n, fb) {
        (0, Some(w)) => w,
        (n, _) => (total / n.max(1) as f64).powf(p),
    };
    let class_weights = queue
        .counts()
        .iter()
        .enumerate()
        .map(|(i, &n)| weight_or(n, fallback.map(|f| f.class_weights[i])))
        .collect();
    Ok(WeightVector {
        class_weights,
        background: weight_or(queue.background(), fallback.map(|f| f.background)),
        exponent: p,
        kind: WeightKind::Dynamic,
    })
}

/// Smoothing factor `min(0.999^fill, 0.9)`: largest (most static) early on,
/// decaying toward dynamic weights as samples accumulate.
pub fn smoothing_gamma(fill: usize) -> f64 {
    0.999f64.powf(fill as f64).min(0.9)
}

/// Convex blend `gamma * w_static + (1 - gamma) * w_dynamic`.
pub fn blend(
    w_static: &WeightVector,
    w_dynamic: &WeightVector,
    fill: usize,
) -> Result<WeightVector, ReweightError> {
    if w_static.len() != w_dynamic.len() {
        return Err(ReweightError::LengthMismatch {
            left: w_static.len(),
            right: w_dynamic.len(),
        });
    }
    let gamma = smoothing_gamma(fill);
    let class_weights = w_static
        .class_weights
        .iter()
        .zip(&w_dynamic.class_weights)
        .map(|(s, d)| gamma * s + (1.0 - gamma) * d)
        .collect();
    Ok(WeightVector {
        class_weights,
        background: gamma * w_static.background + (1.0 - gamma) * w_dynamic.background,
        exponent: w_dynamic.exponent,
        kind: WeightKind::Blended,
    })
}

/// Whole-dataset object-class counts. Every ground-truth pair is one
/// positive of its object class; each of the `num_queries` decoder slots per
/// image not covered by a pair counts as background.
pub fn dataset_object_counts(dataset: &Dataset, num_queries: usize) -> (Vec<u64>, u64) {
    let mut counts = vec![0u64; dataset.meta.num_object_classes];
    let mut positives = 0u64;
    for ann in &dataset.annotations {
        for inst in &ann.instances {
            counts[inst.object_class] += 1;
            positives += 1;
        }
    }
    let slots = (num_queries * dataset.annotations.len()) as u64;
    (counts, slots.saturating_sub(positives))
}

/// Whole-dataset action counts. Every (pair, action) ground-truth label is
/// one positive; unmatched decoder slots count as background.
pub fn dataset_action_counts(dataset: &Dataset, num_queries: usize) -> (Vec<u64>, u64) {
    let mut counts = vec![0u64; dataset.meta.num_action_classes];
    let mut pairs = 0u64;
    for ann in &dataset.annotations {
        for inst in &ann.instances {
            pairs += 1;
            for &a in &inst.actions {
                counts[a] += 1;
            }
        }
    }
    let slots = (num_queries * dataset.annotations.len()) as u64;
    (counts, slots.saturating_sub(pairs))
}
