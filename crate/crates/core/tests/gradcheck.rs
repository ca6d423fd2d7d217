//! Finite-difference gradient check of the full training loss through the
//! complete network, exercised via the public API only.

use hoidet_core::data::GtInstance;
use hoidet_core::geometry::BoundingBox;
use hoidet_core::loss::{compute_loss, match_queries, LossWeights};
use hoidet_core::model::{BoundParams, HoiModel, ModelConfig, ParamStore};
use hoidet_core::reweight::WeightVector;
use hoidet_core::tensor::Tape;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone_channels: vec![4, 6, 8],
        d_model: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        num_heads: 2,
        ffn_dim: 16,
        num_queries: 3,
        num_object_classes: 2,
        num_action_classes: 2,
    }
}

fn fixture() -> (HoiModel, ParamStore, Array2<f64>, Vec<GtInstance>) {
    let model = HoiModel::new(tiny_config()).unwrap();
    let params = model.init_params(7);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tokens = Array2::from_shape_simple_fn((16 * 16, 3), || rng.random_range(0.0..1.0));
    let gts = vec![
        GtInstance {
            human_box: BoundingBox::new(0.3, 0.5, 0.2, 0.3),
            object_box: BoundingBox::new(0.6, 0.5, 0.15, 0.2),
            object_class: 1,
            actions: vec![0],
        },
        GtInstance {
            human_box: BoundingBox::new(0.7, 0.3, 0.18, 0.28),
            object_box: BoundingBox::new(0.45, 0.25, 0.12, 0.15),
            object_class: 0,
            actions: vec![0, 1],
        },
    ];
    (model, params, tokens, gts)
}

fn loss_total(
    model: &HoiModel,
    params: &ParamStore,
    tokens: &Array2<f64>,
    gts: &[GtInstance],
    assignment: &hoidet_core::matching::Assignment,
) -> f64 {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let pass = model.forward(&mut tape, &bound, tokens, false).unwrap();
    let (_, breakdown) = compute_loss(
        &mut tape,
        &pass,
        gts,
        Some(assignment),
        &LossWeights::default(),
        &WeightVector::uniform(2),
        &WeightVector::uniform(2),
    )
    .unwrap();
    breakdown.total
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let (model, params, tokens, gts) = fixture();

    // The assignment is computed once and held fixed, so the perturbed loss
    // is a smooth function of the parameters almost everywhere.
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params);
    let pass = model.forward(&mut tape, &bound, &tokens, false).unwrap();
    let dets = pass.detections(&tape);
    let scores = pass.action_scores(&tape);
    let assignment =
        match_queries(dets.last(), scores.last(), &gts, &LossWeights::default()).unwrap();
    let (node, _) = compute_loss(
        &mut tape,
        &pass,
        &gts,
        Some(&assignment),
        &LossWeights::default(),
        &WeightVector::uniform(2),
        &WeightVector::uniform(2),
    )
    .unwrap();
    let grads = tape.backward(node);
    let analytic = bound.collect_grads(&grads, &params);

    // Sample coordinates spread over every parameter tensor.
    let mut coords: Vec<(String, usize, usize)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (name, value) in &params {
        let (r, c) = value.dim();
        for _ in 0..3 {
            coords.push((name.clone(), rng.random_range(0..r), rng.random_range(0..c)));
        }
    }
    coords.shuffle(&mut rng);
    coords.truncate(160);

    let h = 1e-5;
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, i, j) in &coords {
        let mut plus = params.clone();
        plus.get_mut(name).unwrap()[[*i, *j]] += h;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap()[[*i, *j]] -= h;
        let numeric = (loss_total(&model, &plus, &tokens, &gts, &assignment)
            - loss_total(&model, &minus, &tokens, &gts, &assignment))
            / (2.0 * h);
        let a = analytic[name][[*i, *j]];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        if rel > 1e-3 {
            failures.push(format!(
                "{name}[{i},{j}] analytic {a} numeric {numeric} rel {rel}"
            ));
        }
    }
    let allowed = coords.len() / 100;
    assert!(
        failures.len() <= allowed,
        "{} of {} coordinates above 1e-3:\n{}",
        failures.len(),
        coords.len(),
        failures.join("\n")
    );
    assert!(worst <= 1e-2, "worst relative error {worst} above 1e-2");
}

#[test]
fn detached_handoff_blocks_gradients_into_pair_stage() {
    let (model, params, tokens, gts) = fixture();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params);
    let pass = model.forward(&mut tape, &bound, &tokens, true).unwrap();
    let dets = pass.detections(&tape);
    let scores = pass.action_scores(&tape);
    let assignment =
        match_queries(dets.last(), scores.last(), &gts, &LossWeights::default()).unwrap();

    // Supervise only the interaction decoder outputs: zero out every other
    // term by weighting, leaving the pure action loss.
    let w = LossWeights {
        lambda_box: 0.0,
        lambda_giou: 0.0,
        lambda_interactive: 0.0,
        lambda_object: 0.0,
        lambda_action: 1.0,
    };
    let (node, _) = compute_loss(
        &mut tape,
        &pass,
        &gts,
        Some(&assignment),
        &w,
        &WeightVector::uniform(2),
        &WeightVector::uniform(2),
    )
    .unwrap();
    let grads = tape.backward(node);
    let collected = bound.collect_grads(&grads, &params);
    // Pair-stage parameters must see exactly zero action-loss gradient once
    // the handoff is detached. The backbone and encoder still receive
    // gradient through the interaction decoder's cross-attention memory.
    let pair_stage = [
        "pair_decoder.",
        "heads.human_box.",
        "heads.object_box.",
        "heads.object_class.",
        "heads.interactive.",
    ];
    for (name, g) in &collected {
        let magnitude = g.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        if pair_stage.iter().any(|p| name.starts_with(p)) {
            assert_eq!(magnitude, 0.0, "{name} leaked gradient across the handoff");
        } else if name.starts_with("action_decoder.") || name.starts_with("heads.action.") {
            assert!(
                magnitude > 0.0,
                "{name} should receive action-loss gradient"
            );
        }
    }
    let backbone_grad: f64 = collected["backbone.conv0.weight"]
        .iter()
        .map(|v| v.abs())
        .sum();
    assert!(
        backbone_grad > 0.0,
        "shared feature memory should still carry gradient"
    );
}
