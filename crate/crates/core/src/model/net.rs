//! Tape-based forward pass: backbone, encoder, and the two decoders.
//!
//! Everything runs on the autodiff tape so one `backward` call yields
//! gradients for all parameters. Attention softmax nodes are recorded so
//! their values can be visualized after a forward pass.

use super::params::{BoundParams, ModelConfig, ModelError, ParamStore};
use super::posenc::positional_encoding;
use super::{ActionScores, LayerDetections, PairDetections};
use crate::geometry::BoundingBox;
use crate::tensor::{NodeId, Tape, PAD_ROW};
use ndarray::Array2;
use std::sync::Arc;

const LN_EPS: f64 = 1e-5;

/// Where a query tensor came from; the interaction decoder only accepts
/// pair-decoder output, which is the cascade's defining contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    LearnedInit,
    PairDecoderOutput,
}

#[derive(Debug, Clone, Copy)]
pub struct QueryState {
    pub node: NodeId,
    pub provenance: Provenance,
}

/// Encoded image memory: tokens, their positional encoding and grid shape.
#[derive(Debug)]
pub struct Features {
    pub tokens: NodeId,
    pub pos: NodeId,
    pub height: usize,
    pub width: usize,
    /// Per encoder layer, per head: self-attention softmax nodes.
    pub attention: Vec<Vec<NodeId>>,
}

/// Head outputs of one pair-decoder layer, as tape nodes.
#[derive(Debug)]
pub struct PairLayerNodes {
    /// Query vectors after this layer, `(N_d, D_c)`.
    pub queries: NodeId,
    /// Sigmoid-normalized center-size boxes `(N_d, 4)`.
    pub human_boxes: NodeId,
    pub object_boxes: NodeId,
    /// `(N_d, C_o + 1)`, last column background.
    pub object_logits: NodeId,
    /// `(N_d, 1)`.
    pub interactive_logits: NodeId,
}

/// Complete forward pass of one image.
#[derive(Debug)]
pub struct ForwardPass {
    pub pair_layers: Vec<PairLayerNodes>,
    /// Action logits `(N_d, C_a)` per interaction-decoder layer.
    pub action_layers: Vec<NodeId>,
    /// Last-layer pair-decoder queries handed to the interaction decoder.
    pub q_d_out: NodeId,
    /// The node actually consumed by the interaction decoder (differs from
    /// `q_d_out` only when the hand-off was detached).
    pub action_input: NodeId,
    pub feature_height: usize,
    pub feature_width: usize,
    pub encoder_attention: Vec<Vec<NodeId>>,
    /// Per pair-decoder layer, per head: cross-attention softmax nodes of
    /// shape `(N_d, H' * W')`.
    pub pair_cross_attention: Vec<Vec<NodeId>>,
    pub action_cross_attention: Vec<Vec<NodeId>>,
}

impl ForwardPass {
    /// Plain-value detections per pair-decoder layer.
    pub fn detections(&self, tape: &Tape) -> PairDetections {
        let layers = self
            .pair_layers
            .iter()
            .map(|l| {
                let hb = tape.value(l.human_boxes);
                let ob = tape.value(l.object_boxes);
                let logits = tape.value(l.object_logits);
                let inter = tape.value(l.interactive_logits);
                let to_boxes = |m: &Array2<f64>| {
                    m.rows()
                        .into_iter()
                        .map(|r| BoundingBox::new(r[0], r[1], r[2], r[3]))
                        .collect()
                };
                let mut probs = Array2::zeros(logits.dim());
                for (i, row) in logits.rows().into_iter().enumerate() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for (j, e) in exps.iter().enumerate() {
                        probs[[i, j]] = e / sum;
                    }
                }
                LayerDetections {
                    human_boxes: to_boxes(hb),
                    object_boxes: to_boxes(ob),
                    object_probs: probs,
                    interactive_probs: inter.column(0).iter().map(|&v| sigmoid(v)).collect(),
                }
            })
            .collect();
        PairDetections { layers }
    }

    /// Plain-value sigmoid action probabilities per interaction-decoder layer.
    pub fn action_scores(&self, tape: &Tape) -> ActionScores {
        let layers = self
            .action_layers
            .iter()
            .map(|&n| tape.value(n).mapv(sigmoid))
            .collect();
        ActionScores { layers }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct HoiModel {
    pub config: ModelConfig,
}

impl HoiModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        super::params::init_params(&self.config, seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Learned initial queries for the pair decoder.
    pub fn initial_queries(&self, p: &BoundParams) -> QueryState {
        QueryState {
            node: p.node("pair_decoder.queries"),
            provenance: Provenance::LearnedInit,
        }
    }

    /// Runs backbone, projection, positional encoding and encoder.
    ///
    /// `image_tokens` is the `(H * W, 3)` pixel matrix in row-major order;
    /// H and W must be equal and divisible by the backbone stride.
    pub fn extract_features(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        image_tokens: &Array2<f64>,
    ) -> Result<Features, ModelError> {
        let tokens = image_tokens.nrows();
        let size = (tokens as f64).sqrt().round() as usize;
        if size * size != tokens || image_tokens.ncols() != 3 {
            return Err(ModelError::BadImageShape { tokens, size });
        }
        let stride = self.config.stride();
        if !size.is_multiple_of(stride) {
            return Err(ModelError::NonDivisibleImage { size, stride });
        }

        let mut x = tape.leaf(image_tokens.clone());
        let mut h = size;
        let mut w = size;
        let mut in_ch = 3;
        for (i, &out_ch) in self.config.backbone_channels.iter().enumerate() {
            x = conv3x3_s2(tape, p, &format!("backbone.conv{i}"), x, h, w, in_ch);
            h /= 2;
            w /= 2;
            in_ch = out_ch;
        }
        let proj_w = p.node("backbone.proj.weight");
        let proj_b = p.node("backbone.proj.bias");
        let projected = tape.matmul(x, proj_w);
        let mut tokens = tape.add_row(projected, proj_b);

        let pos_table = positional_encoding(h, w, self.config.d_model)
            .expect("config validated d_model divisibility");
        let pos = tape.leaf(pos_table);

        let mut attention = Vec::with_capacity(self.config.encoder_layers);
        for l in 0..self.config.encoder_layers {
            let prefix = format!("encoder.{l}");
            let qk = tape.add(tokens, pos);
            let attn = self.attention(tape, p, &format!("{prefix}.attn"), qk, qk, tokens);
            tokens = self.residual_norm(tape, p, &format!("{prefix}.ln1"), tokens, attn.output);
            let f = self.ffn(tape, p, &format!("{prefix}.ffn"), tokens);
            tokens = self.residual_norm(tape, p, &format!("{prefix}.ln2"), tokens, f);
            attention.push(attn.weights);
        }

        Ok(Features {
            tokens,
            pos,
            height: h,
            width: w,
            attention,
        })
    }

    /// First decoder: turns queries into per-layer pair detections.
    #[allow(clippy::type_complexity)]
    pub fn decode_pairs(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        features: &Features,
        queries: QueryState,
    ) -> Result<(Vec<PairLayerNodes>, Vec<Vec<NodeId>>, QueryState), ModelError> {
        if queries.provenance != Provenance::LearnedInit {
            return Err(ModelError::WrongProvenance("pair-decoder output"));
        }
        let mut y = queries.node;
        let mut layers = Vec::with_capacity(self.config.decoder_layers);
        let mut cross_attention = Vec::with_capacity(self.config.decoder_layers);
        for l in 0..self.config.decoder_layers {
            let (next, cross) =
                self.decoder_layer(tape, p, &format!("pair_decoder.{l}"), y, features);
            y = next;
            cross_attention.push(cross);

            let hb = self.box_head(tape, p, "heads.human_box", y);
            let ob = self.box_head(tape, p, "heads.object_box", y);
            let logits = self.linear(tape, p, "heads.object_class", y);
            let inter = self.linear(tape, p, "heads.interactive", y);
            layers.push(PairLayerNodes {
                queries: y,
                human_boxes: hb,
                object_boxes: ob,
                object_logits: logits,
                interactive_logits: inter,
            });
        }
        let out = QueryState {
            node: y,
            provenance: Provenance::PairDecoderOutput,
        };
        Ok((layers, cross_attention, out))
    }

    /// Second decoder: classifies actions from pair-decoder output queries.
    #[allow(clippy::type_complexity)]
    pub fn decode_interactions(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        features: &Features,
        queries: QueryState,
    ) -> Result<(Vec<NodeId>, Vec<Vec<NodeId>>), ModelError> {
        if queries.provenance != Provenance::PairDecoderOutput {
            return Err(ModelError::WrongProvenance("learned-init"));
        }
        let mut y = queries.node;
        let mut layers = Vec::with_capacity(self.config.decoder_layers);
        let mut cross_attention = Vec::with_capacity(self.config.decoder_layers);
        for l in 0..self.config.decoder_layers {
            let (next, cross) =
                self.decoder_layer(tape, p, &format!("action_decoder.{l}"), y, features);
            y = next;
            cross_attention.push(cross);
            layers.push(self.linear(tape, p, "heads.action", y));
        }
        Ok((layers, cross_attention))
    }

    /// Full forward pass. With `detach_handoff` the interaction decoder sees
    /// the pair-decoder output as a constant, cutting the gradient path.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        image_tokens: &Array2<f64>,
        detach_handoff: bool,
    ) -> Result<ForwardPass, ModelError> {
        let features = self.extract_features(tape, p, image_tokens)?;
        let init = self.initial_queries(p);
        let (pair_layers, pair_cross, q_d_out) = self.decode_pairs(tape, p, &features, init)?;
        let handoff = if detach_handoff {
            QueryState {
                node: tape.detach(q_d_out.node),
                provenance: q_d_out.provenance,
            }
        } else {
            q_d_out
        };
        let (action_layers, action_cross) =
            self.decode_interactions(tape, p, &features, handoff)?;
        Ok(ForwardPass {
            pair_layers,
            action_layers,
            q_d_out: q_d_out.node,
            action_input: handoff.node,
            feature_height: features.height,
            feature_width: features.width,
            encoder_attention: features.attention,
            pair_cross_attention: pair_cross,
            action_cross_attention: action_cross,
        })
    }

    fn attention(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        prefix: &str,
        q_in: NodeId,
        k_in: NodeId,
        v_in: NodeId,
    ) -> AttentionOut {
        let project = |tape: &mut Tape, x: NodeId, name: &str| {
            let w = p.node(&format!("{prefix}.{name}"));
            let b = p.node(&format!("{prefix}.{name}_bias"));
            let xw = tape.matmul(x, w);
            tape.add_row(xw, b)
        };
        let q = project(tape, q_in, "wq");
        let k = project(tape, k_in, "wk");
        let v = project(tape, v_in, "wv");

        let heads = self.config.num_heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outputs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let logits = tape.matmul_nt(qh, kh);
            let scaled = tape.scale(logits, scale);
            let attn = tape.softmax_rows(scaled);
            outputs.push(tape.matmul(attn, vh));
            weights.push(attn);
        }
        let concat = tape.concat_cols(&outputs);
        let wo = p.node(&format!("{prefix}.wo"));
        let wob = p.node(&format!("{prefix}.wo_bias"));
        let out = tape.matmul(concat, wo);
        let output = tape.add_row(out, wob);
        AttentionOut { output, weights }
    }

    fn residual_norm(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        prefix: &str,
        x: NodeId,
        delta: NodeId,
    ) -> NodeId {
        let sum = tape.add(x, delta);
        let gamma = p.node(&format!("{prefix}.gamma"));
        let beta = p.node(&format!("{prefix}.beta"));
        tape.layer_norm_rows(sum, gamma, beta, LN_EPS)
    }

    fn ffn(&self, tape: &mut Tape, p: &BoundParams, prefix: &str, x: NodeId) -> NodeId {
        let w1 = p.node(&format!("{prefix}.w1"));
        let b1 = p.node(&format!("{prefix}.b1"));
        let w2 = p.node(&format!("{prefix}.w2"));
        let b2 = p.node(&format!("{prefix}.b2"));
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let out = tape.matmul(h, w2);
        tape.add_row(out, b2)
    }

    fn decoder_layer(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        prefix: &str,
        y: NodeId,
        features: &Features,
    ) -> (NodeId, Vec<NodeId>) {
        let self_attn = self.attention(tape, p, &format!("{prefix}.self_attn"), y, y, y);
        let y = self.residual_norm(tape, p, &format!("{prefix}.ln1"), y, self_attn.output);

        let key = tape.add(features.tokens, features.pos);
        let cross = self.attention(
            tape,
            p,
            &format!("{prefix}.cross_attn"),
            y,
            key,
            features.tokens,
        );
        let y = self.residual_norm(tape, p, &format!("{prefix}.ln2"), y, cross.output);

        let f = self.ffn(tape, p, &format!("{prefix}.ffn"), y);
        let y = self.residual_norm(tape, p, &format!("{prefix}.ln3"), y, f);
        (y, cross.weights)
    }

    /// Three affine layers with ReLU between them, sigmoid on the output.
    fn box_head(&self, tape: &mut Tape, p: &BoundParams, prefix: &str, x: NodeId) -> NodeId {
        let mut h = x;
        for i in 0..3 {
            h = self.linear(tape, p, &format!("{prefix}.{i}"), h);
            if i < 2 {
                h = tape.relu(h);
            }
        }
        tape.sigmoid(h)
    }

    fn linear(&self, tape: &mut Tape, p: &BoundParams, prefix: &str, x: NodeId) -> NodeId {
        let w = p.node(&format!("{prefix}.weight"));
        let b = p.node(&format!("{prefix}.bias"));
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

struct AttentionOut {
    output: NodeId,
    weights: Vec<NodeId>,
}

/// 3x3 convolution with stride 2 and padding 1 via gather + matmul, then
/// ReLU. Input `(h * w, in_ch)` row-major, output `(h/2 * w/2, out_ch)`.
fn conv3x3_s2(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: NodeId,
    h: usize,
    w: usize,
    in_ch: usize,
) -> NodeId {
    let oh = h / 2;
    let ow = w / 2;
    let mut idx = Vec::with_capacity(oh * ow * 9);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    let ix = (2 * ox + kx) as isize - 1;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        idx.push(PAD_ROW);
                    } else {
                        idx.push(iy as usize * w + ix as usize);
                    }
                }
            }
        }
    }
    let gathered = tape.gather_rows(x, Arc::new(idx));
    let cols = tape.reshape(gathered, oh * ow, 9 * in_ch);
    let weight = p.node(&format!("{prefix}.weight"));
    let bias = p.node(&format!("{prefix}.bias"));
    let conv = tape.matmul(cols, weight);
    let conv = tape.add_row(conv, bias);
    tape.relu(conv)
}
