//! Anchor-refining decoder stack.
//!
//! Every query pairs a content vector with a 4-D anchor box held in logit
//! space. Each layer re-derives the positional query from the current anchor,
//! runs self-attention, modulated cross-attention and a feed-forward block, and
//! the shared box head predicts a logit-space delta that refines the anchor for
//! the next layer. The shared class head predicts per-class logits at every layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    modulated_cross_attention, multi_head_attention_tape, self_attention_inputs, stack_heads,
    AttentionHeadsConfig, CrossAttentionInputs, FeatureGrid, PositionalHeads, MAX_RATIO,
};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, zero_param, LayerNorm, Linear, Mlp};
use crate::pe::{
    encode_coords, grid_encoding, positional_query, AnchorBox, ExponentBase, PeConfig,
    PositionalQueryMlp, EPS_BOX,
};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

const PROB_CLAMP: f64 = 1e-4;
/// Focal-loss prior probability used to initialize the class bias.
const CLASS_PRIOR: f64 = 0.01;

/// `ln(p / (1 − p))` with `p` clamped to `[1e-4, 1 − 1e-4]`.
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Logit-space refinement `(Δx, Δy, Δw, Δh)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorDelta(pub [f64; 4]);

/// Adds `d` to the anchor's logits.
pub fn anchor_update(a: &AnchorBox, d: &AnchorDelta) -> Result<AnchorBox> {
    if d.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract(format!("non-finite anchor delta {:?}", d.0)));
    }
    let mut logits = a.logits;
    for (l, dv) in logits.iter_mut().zip(d.0) {
        *l += dv;
    }
    Ok(AnchorBox::from_logits(logits))
}

/// Whether anchors carry a learned size or only a center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorDims {
    #[default]
    Box4d,
    /// Width and height are frozen at `point_wh` and never refined.
    Point2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_anchors: usize,
    pub n_patterns: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_classes: usize,
    pub fix_xy: bool,
    pub anchor_update: bool,
    pub modulation: bool,
    pub temperature: f64,
    pub two_pi_scale: bool,
    pub exponent_base: ExponentBase,
    pub anchor_dims: AnchorDims,
    pub point_wh: f64,
    pub detach_between_layers: bool,
    pub positional_heads: PositionalHeads,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            n_anchors: 20,
            n_patterns: 3,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            n_classes: 3,
            fix_xy: false,
            anchor_update: true,
            modulation: true,
            temperature: 20.0,
            two_pi_scale: true,
            exponent_base: ExponentBase::OutputDim,
            anchor_dims: AnchorDims::Box4d,
            point_wh: 0.2,
            detach_between_layers: true,
            positional_heads: PositionalHeads::PerHead,
        }
    }
}

impl DecoderConfig {
    /// The full-size setting (6 layers, 300 anchors, 3 patterns, D = 256, 8 heads).
    pub fn full_scale() -> Self {
        Self {
            n_layers: 6,
            n_anchors: 300,
            n_patterns: 3,
            d_model: 256,
            n_heads: 8,
            d_ffn: 2048,
            n_classes: 91,
            ..Self::default()
        }
    }

    pub fn n_queries(&self) -> usize {
        self.n_anchors * self.n_patterns
    }

    pub fn pe(&self) -> PeConfig {
        PeConfig {
            d_model: self.d_model,
            temperature: self.temperature,
            two_pi_scale: self.two_pi_scale,
            exponent_base: self.exponent_base,
        }
    }

    pub fn heads(&self) -> Result<AttentionHeadsConfig> {
        AttentionHeadsConfig::new(self.n_heads, self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| {
            Err(Error::Config {
                key: format!("model.{key}"),
                detail,
            })
        };
        if self.n_layers == 0 {
            return bad("n_layers", "must be at least 1".into());
        }
        if self.n_anchors == 0 {
            return bad("n_anchors", "must be at least 1".into());
        }
        if self.n_patterns == 0 {
            return bad("n_patterns", "must be at least 1".into());
        }
        if self.n_classes == 0 {
            return bad("n_classes", "must be at least 1".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(4 * self.n_heads) {
            return bad(
                "n_heads",
                format!("4·n_heads must divide d_model = {}", self.d_model),
            );
        }
        if !(self.point_wh > 0.0 && self.point_wh < 1.0) {
            return bad("point_wh", format!("{} is not in (0, 1)", self.point_wh));
        }
        self.pe().validate().map_err(|e| match e {
            Error::Config { key, detail } => Error::Config {
                key: key.replace("pe.", "model."),
                detail,
            },
            other => other,
        })
    }
}

/// How the cross-attention positional logits are scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModulationMode {
    /// `w_ref, h_ref` from the reference head.
    Learned,
    /// `w_ref, h_ref` replaced by the anchor's own size (unit ratios).
    AnchorSize,
    /// No ratios at all.
    Off,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Copy attention, content and positional maps into the trace.
    pub record_maps: bool,
    pub modulation_override: Option<ModulationMode>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    sa_q: Linear,
    sa_k: Linear,
    sa_v: Linear,
    sa_o: Linear,
    ln1: LayerNorm,
    ca_qc: Linear,
    ca_kc: Linear,
    ca_v: Linear,
    ca_o: Linear,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ln3: LayerNorm,
}

impl DecoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let lin = |store: &mut ParamStore, n: &str, a, b, rng: &mut R| {
            Linear::new(store, &format!("{name}.{n}"), a, b, rng)
        };
        Self {
            sa_q: lin(store, "self_attn.q", d, d, rng),
            sa_k: lin(store, "self_attn.k", d, d, rng),
            sa_v: lin(store, "self_attn.v", d, d, rng),
            sa_o: lin(store, "self_attn.out", d, d, rng),
            ln1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ca_qc: lin(store, "cross_attn.q_content", d, d, rng),
            ca_kc: lin(store, "cross_attn.k_content", d, d, rng),
            ca_v: lin(store, "cross_attn.v", d, d, rng),
            ca_o: lin(store, "cross_attn.out", d, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ffn1: lin(store, "ffn.0", d, cfg.d_ffn, rng),
            ffn2: lin(store, "ffn.1", cfg.d_ffn, d, rng),
            ln3: LayerNorm::new(store, &format!("{name}.norm3"), d),
        }
    }
}

/// Feature tokens already on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GridVar {
    pub features: Var,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Anchor logits the layer attended with.
    pub reference: Tensor,
    /// Anchor logits after this layer's update (what the next layer uses).
    pub anchors: Tensor,
    pub class_logits: Tensor,
    /// Predicted `(cx, cy, w, h)` per query.
    pub boxes: Tensor,
    /// `n_queries × 2` reference `(w_ref, h_ref)`.
    pub modulation: Tensor,
    /// Queries whose width or height sat below the box floor.
    pub clamped: usize,
    /// `n_heads × n_queries × H·W`, only with `record_maps`.
    pub attention: Option<Tensor>,
    pub positional_logits: Option<Tensor>,
    pub content_logits: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct DecoderTrace {
    pub layers: Vec<LayerTrace>,
}

impl DecoderTrace {
    pub fn last(&self) -> Option<&LayerTrace> {
        self.layers.last()
    }
}

/// Differentiable per-layer outputs.
#[derive(Clone, Copy, Debug)]
pub struct LayerPrediction {
    pub logits: Var,
    pub boxes: Var,
}

#[derive(Debug)]
pub struct DecoderOutput {
    pub predictions: Vec<LayerPrediction>,
    pub trace: DecoderTrace,
    /// `n_queries × 4` anchor logits entering the first layer.
    pub initial_anchors: Var,
}

/// Content query and anchor of one decoder query before the first layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DualQuery {
    pub content: Vec<f64>,
    pub anchor: AnchorBox,
}

/// Replicates every anchor once per pattern; replica `k` starts from pattern `k`.
/// Queries are pattern-major: query `k·n_anchors + a` uses anchor `a`.
pub fn apply_patterns(anchors: &[AnchorBox], pattern_embeds: &Tensor) -> Result<Vec<DualQuery>> {
    let np = pattern_embeds.rows();
    if np == 0 || pattern_embeds.shape().len() != 2 {
        return Err(Error::contract("need at least one pattern embedding"));
    }
    Ok((0..np)
        .flat_map(|k| {
            anchors.iter().map(move |a| DualQuery {
                content: pattern_embeds.row(k).to_vec(),
                anchor: *a,
            })
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub anchor_xy: ParamId,
    pub anchor_wh: ParamId,
    pub patterns: Option<ParamId>,
    pub pe_mlp: PositionalQueryMlp,
    pub csq_mlp: Mlp,
    pub ref_wh: Mlp,
    pub class_head: Linear,
    pub box_head: Mlp,
    layers: Vec<DecoderLayer>,
}

struct LayerStep {
    content: Var,
    refwh: Var,
    clamped: usize,
    weights: Vec<Var>,
    positional: Vec<Var>,
    content_logits: Vec<Var>,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let na = cfg.n_anchors;
        let xy: Vec<f64> = (0..na * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let wh: Vec<f64> = match cfg.anchor_dims {
            AnchorDims::Box4d => (0..na * 2).map(|_| rng.random_range(-2.0..2.0)).collect(),
            AnchorDims::Point2d => vec![inverse_sigmoid(cfg.point_wh); na * 2],
        };
        let anchor_xy = store.add("anchors.xy", Tensor::from_parts(vec![na, 2], xy));
        let anchor_wh = store.add("anchors.wh", Tensor::from_parts(vec![na, 2], wh));
        if cfg.fix_xy {
            store.set_trainable(anchor_xy, false);
        }
        if cfg.anchor_dims == AnchorDims::Point2d {
            store.set_trainable(anchor_wh, false);
        }
        let patterns = (cfg.n_patterns > 1)
            .then(|| store.add("patterns", normal_tensor(&[cfg.n_patterns, d], 0.02, rng)));
        let pe_mlp = PositionalQueryMlp::new(store, "pe_mlp", d, rng);
        let csq_mlp = Mlp::new(store, "csq_mlp", &[d, d, d], rng);
        let ref_wh = Mlp::new(store, "ref_wh_mlp", &[d, d, 2], rng);
        let class_head = Linear::new(store, "class_head", d, cfg.n_classes, rng);
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        store
            .get_mut(class_head.b)
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = prior);
        let box_head = Mlp::new(store, "box_head", &[d, d, d, 4], rng);
        let last = box_head.layers.last().expect("box head has layers");
        zero_param(store, last.w);
        let layers = (0..cfg.n_layers)
            .map(|l| DecoderLayer::new(store, &format!("layers.{l}"), &cfg, rng))
            .collect();
        Ok(Self {
            cfg,
            anchor_xy,
            anchor_wh,
            patterns,
            pe_mlp,
            csq_mlp,
            ref_wh,
            class_head,
            box_head,
            layers,
        })
    }

    /// Learned first-layer anchors (one per anchor, not per query).
    pub fn anchors(&self, store: &ParamStore) -> Vec<AnchorBox> {
        let xy = store.get(self.anchor_xy);
        let wh = store.get(self.anchor_wh);
        (0..self.cfg.n_anchors)
            .map(|a| {
                AnchorBox::from_logits([xy.at(a, 0), xy.at(a, 1), wh.at(a, 0), wh.at(a, 1)])
            })
            .collect()
    }

    /// Initial dual queries (content from patterns or zeros).
    pub fn initial_queries(&self, store: &ParamStore) -> Result<Vec<DualQuery>> {
        let embeds = match self.patterns {
            Some(p) => store.get(p).clone(),
            None => Tensor::zeros(&[1, self.cfg.d_model]),
        };
        apply_patterns(&self.anchors(store), &embeds)
    }

    /// Positional query of every initial query.
    pub fn initial_positional_queries(&self, store: &ParamStore) -> Result<Vec<Vec<f64>>> {
        let pe = self.cfg.pe();
        self.initial_queries(store)?
            .iter()
            .map(|q| positional_query(&q.anchor, &self.pe_mlp, store, &pe))
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, grid: GridVar, opts: ForwardOptions) -> Result<DecoderOutput> {
        let cfg = &self.cfg;
        let nq = cfg.n_queries();
        let na = cfg.n_anchors;
        let d = cfg.d_model;
        let pe = cfg.pe();
        let heads = cfg.heads()?;
        let mode = opts.modulation_override.unwrap_or(if cfg.modulation {
            ModulationMode::Learned
        } else {
            ModulationMode::Off
        });
        if tape.shape(grid.features) != [grid.h * grid.w, d] {
            return Err(Error::shape(
                "decoder_forward",
                tape.shape(grid.features),
                &[grid.h * grid.w, d],
            ));
        }

        let xy_p = tape.p(self.anchor_xy);
        let xy = if cfg.fix_xy { tape.detach(xy_p) } else { xy_p };
        let wh_p = tape.p(self.anchor_wh);
        let wh = match cfg.anchor_dims {
            AnchorDims::Box4d => wh_p,
            AnchorDims::Point2d => tape.detach(wh_p),
        };
        let base = tape.concat_cols(&[xy, wh])?;
        let per_query: Vec<usize> = (0..nq).map(|q| q % na).collect();
        let initial = tape.gather_rows(base, &per_query)?;
        let mut content = match self.patterns {
            Some(p) => {
                let idx: Vec<usize> = (0..nq).map(|q| q / na).collect();
                let pv = tape.p(p);
                tape.gather_rows(pv, &idx)?
            }
            None => tape.constant(Tensor::zeros(&[nq, d])),
        };
        let pos_k = tape.constant(grid_encoding(grid.h, grid.w, &pe)?);
        let kc_v: Vec<(Var, Var)> = self
            .layers
            .iter()
            .map(|l| {
                Ok((
                    l.ca_kc.forward(tape, grid.features)?,
                    l.ca_v.forward(tape, grid.features)?,
                ))
            })
            .collect::<Result<_>>()?;

        let mut reference = initial;
        let mut predictions = Vec::with_capacity(cfg.n_layers);
        let mut trace = DecoderTrace::default();
        for (layer, &(kc, v)) in self.layers.iter().zip(&kc_v) {
            let step = self.layer_forward(tape, layer, content, reference, kc, v, pos_k, &heads, mode)?;
            let logits = self.class_head.forward(tape, step.content)?;
            let delta = self.box_head.forward(tape, step.content)?;
            let updated = tape.add(reference, delta)?;
            let boxes = tape.sigmoid(updated)?;
            let next = if cfg.anchor_update {
                let n = if cfg.detach_between_layers {
                    tape.detach(updated)
                } else {
                    updated
                };
                match cfg.anchor_dims {
                    AnchorDims::Box4d => n,
                    AnchorDims::Point2d => {
                        let c = tape.slice_cols(n, 0, 2)?;
                        let s = tape.slice_cols(reference, 2, 4)?;
                        tape.concat_cols(&[c, s])?
                    }
                }
            } else {
                reference
            };
            trace.layers.push(LayerTrace {
                reference: tape.value(reference).clone(),
                anchors: tape.value(next).clone(),
                class_logits: tape.value(logits).clone(),
                boxes: tape.value(boxes).clone(),
                modulation: tape.value(step.refwh).clone(),
                clamped: step.clamped,
                attention: opts
                    .record_maps
                    .then(|| stack_heads(tape, &step.weights))
                    .transpose()?,
                positional_logits: opts
                    .record_maps
                    .then(|| stack_heads(tape, &step.positional))
                    .transpose()?,
                content_logits: opts
                    .record_maps
                    .then(|| stack_heads(tape, &step.content_logits))
                    .transpose()?,
            });
            predictions.push(LayerPrediction { logits, boxes });
            content = step.content;
            reference = next;
        }
        Ok(DecoderOutput {
            predictions,
            trace,
            initial_anchors: initial,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        tape: &mut Tape,
        layer: &DecoderLayer,
        content: Var,
        reference: Var,
        content_k: Var,
        value: Var,
        pos_k: Var,
        heads: &AttentionHeadsConfig,
        mode: ModulationMode,
    ) -> Result<LayerStep> {
        let pe = self.cfg.pe();
        let coords = tape.sigmoid(reference)?;
        let p = self.pe_mlp.forward(tape, coords, &pe)?;

        let (qk, _, v_in) = self_attention_inputs(tape, content, p)?;
        let q = layer.sa_q.forward(tape, qk)?;
        let k = layer.sa_k.forward(tape, qk)?;
        let v = layer.sa_v.forward(tape, v_in)?;
        let (sa, _) = multi_head_attention_tape(tape, q, k, v, heads.n_heads, None)?;
        let sa = layer.sa_o.forward(tape, sa)?;
        let r = tape.add(content, sa)?;
        let c1 = layer.ln1.forward(tape, r)?;

        let scale = self.csq_mlp.forward(tape, content)?;
        let xy = tape.slice_cols(coords, 0, 2)?;
        let pe_xy = encode_coords(tape, xy, &pe)?;
        let pos_q = tape.mul(pe_xy, scale)?;
        let refwh_raw = self.ref_wh.forward(tape, content)?;
        let refwh = tape.sigmoid(refwh_raw)?;

        let w_raw = tape.slice_cols(coords, 2, 3)?;
        let h_raw = tape.slice_cols(coords, 3, 4)?;
        let clamped = tape
            .value(w_raw)
            .data()
            .iter()
            .zip(tape.value(h_raw).data())
            .filter(|(&w, &h)| w < EPS_BOX || h < EPS_BOX)
            .count();
        let ratios = match mode {
            ModulationMode::Off => None,
            ModulationMode::Learned | ModulationMode::AnchorSize => {
                let wq = tape.clamp_min(w_raw, EPS_BOX)?;
                let hq = tape.clamp_min(h_raw, EPS_BOX)?;
                let (wr, hr) = if mode == ModulationMode::Learned {
                    (tape.slice_cols(refwh, 0, 1)?, tape.slice_cols(refwh, 1, 2)?)
                } else {
                    (wq, hq)
                };
                let rw = tape.div(wr, wq)?;
                let rh = tape.div(hr, hq)?;
                Some((tape.clamp_max(rw, MAX_RATIO)?, tape.clamp_max(rh, MAX_RATIO)?))
            }
        };

        let qc = layer.ca_qc.forward(tape, c1)?;
        let ca = modulated_cross_attention(
            tape,
            &CrossAttentionInputs {
                content_q: qc,
                content_k,
                value,
                pos_q,
                pos_k,
                ratios,
            },
            heads,
            self.cfg.positional_heads,
        )?;
        let o = layer.ca_o.forward(tape, ca.out)?;
        let r = tape.add(c1, o)?;
        let c2 = layer.ln2.forward(tape, r)?;

        let h = layer.ffn1.forward(tape, c2)?;
        let h = tape.relu(h)?;
        let f = layer.ffn2.forward(tape, h)?;
        let r = tape.add(c2, f)?;
        let c3 = layer.ln3.forward(tape, r)?;

        Ok(LayerStep {
            content: c3,
            refwh,
            clamped,
            weights: ca.weights,
            positional: ca.positional,
            content_logits: ca.content,
        })
    }
}

/// Runs the decoder on a fixed feature grid without recording gradients.
pub fn decoder_forward(
    decoder: &Decoder,
    store: &ParamStore,
    grid: &FeatureGrid,
    opts: ForwardOptions,
) -> Result<DecoderTrace> {
    let mut tape = Tape::with_params(store, false);
    let features = tape.constant(grid.features.clone());
    let out = decoder.forward(
        &mut tape,
        GridVar {
            features,
            h: grid.h,
            w: grid.w,
        },
        opts,
    )?;
    Ok(out.trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> DecoderConfig {
        DecoderConfig {
            n_layers: 2,
            n_anchors: 2,
            n_patterns: 2,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            n_classes: 3,
            ..DecoderConfig::default()
        }
    }

    /// Gives the zero-initialized last box-head layer random weights.
    fn randomize_box_deltas(dec: &Decoder, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let w = dec.box_head.layers.last().unwrap().w;
        let shape = store.get(w).shape().to_vec();
        *store.get_mut(w) = normal_tensor(&shape, 0.5, rng);
    }

    #[test]
    fn fresh_decoder_predicts_its_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, small_cfg(), &mut rng).unwrap();
        let g = grid(&mut rng, 4, 4, 16);
        let trace = decoder_forward(&dec, &store, &g, ForwardOptions::default()).unwrap();
        let first = &trace.layers[0];
        for (q, row) in first.reference.data().chunks(4).enumerate() {
            for (c, &logit) in row.iter().enumerate() {
                assert!((first.boxes.at(q, c) - sigmoid(logit)).abs() < 1e-12);
            }
        }
    }

    fn grid(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureGrid {
        let data = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureGrid::new(h, w, Tensor::matrix(h * w, d, data).unwrap()).unwrap()
    }

    #[test]
    fn inverse_sigmoid_examples() {
        assert_eq!(inverse_sigmoid(0.5), 0.0);
        assert!((inverse_sigmoid(0.731_058_6) - 1.0).abs() < 1e-6);
        for k in 1..=999 {
            let p = k as f64 / 1000.0;
            assert!((sigmoid(inverse_sigmoid(p)) - p).abs() < 1e-9);
        }
        assert!(inverse_sigmoid(0.0).is_finite());
        assert!(inverse_sigmoid(1.0).is_finite());
    }

    #[test]
    fn anchor_update_examples() {
        let a = AnchorBox::from_coords([0.5, 0.3, 0.2, 0.6]);
        assert_eq!(anchor_update(&a, &AnchorDelta([0.0; 4])).unwrap(), a);
        let b = anchor_update(&AnchorBox::from_coords([0.5; 4]), &AnchorDelta([1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((b.coords()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(anchor_update(&a, &AnchorDelta([f64::NAN, 0.0, 0.0, 0.0])).is_err());
    }

    proptest! {
        #[test]
        fn anchor_update_stays_valid(
            l in proptest::array::uniform4(-5.0f64..5.0),
            d in proptest::array::uniform4(-1e6f64..1e6),
        ) {
            let b = anchor_update(&AnchorBox::from_logits(l), &AnchorDelta(d)).unwrap();
            prop_assert!(b.is_valid());
        }
    }

    #[test]
    fn pattern_replication() {
        let anchors: Vec<AnchorBox> = (0..20)
            .map(|i| AnchorBox::from_coords([0.04 * i as f64 + 0.1, 0.5, 0.2, 0.2]))
            .collect();
        let q = apply_patterns(&anchors, &Tensor::zeros(&[1, 8])).unwrap();
        assert_eq!(q.len(), 20);
        assert!(q.iter().all(|d| d.content.iter().all(|&v| v == 0.0)));
        let pats = Tensor::matrix(3, 8, (0..24).map(|v| v as f64).collect()).unwrap();
        let q = apply_patterns(&anchors, &pats).unwrap();
        assert_eq!(q.len(), 60);
        assert_eq!(q[0].anchor, q[20].anchor);
        assert_eq!(q[40].content, pats.row(2));
    }

    #[test]
    fn replicas_share_positional_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            n_anchors: 4,
            ..small_cfg()
        };
        let dec = Decoder::new(&mut store, cfg, &mut rng).unwrap();
        let pq = dec.initial_positional_queries(&store).unwrap();
        assert_eq!(pq.len(), 8);
        for a in 0..4 {
            assert_eq!(pq[a], pq[a + 4]);
        }
        assert_ne!(pq[0], pq[1]);
    }

    #[test]
    fn forward_shapes_and_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            n_layers: 6,
            ..small_cfg()
        };
        let dec = Decoder::new(&mut store, cfg, &mut rng).unwrap();
        randomize_box_deltas(&dec, &mut store, &mut rng);
        let g = grid(&mut rng, 4, 4, 16);
        let trace = decoder_forward(
            &dec,
            &store,
            &g,
            ForwardOptions {
                record_maps: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(trace.layers.len(), 6);
        for l in &trace.layers {
            assert_eq!(l.class_logits.shape(), &[4, 3]);
            assert_eq!(l.boxes.shape(), &[4, 4]);
            assert_eq!(l.attention.as_ref().unwrap().shape(), &[2, 4, 16]);
            assert_eq!(l.positional_logits.as_ref().unwrap().shape(), &[2, 4, 16]);
            assert!(l.boxes.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        // nonzero deltas move the anchors between layers
        let moved = trace
            .layers
            .windows(2)
            .any(|w| w[0].anchors.data() != w[1].anchors.data());
        assert!(moved);
    }

    #[test]
    fn no_anchor_update_keeps_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            anchor_update: false,
            n_layers: 3,
            ..small_cfg()
        };
        let dec = Decoder::new(&mut store, cfg, &mut rng).unwrap();
        randomize_box_deltas(&dec, &mut store, &mut rng);
        let g = grid(&mut rng, 4, 4, 16);
        let trace = decoder_forward(&dec, &store, &g, ForwardOptions::default()).unwrap();
        let first = &trace.layers[0].anchors;
        assert!(trace.layers.iter().all(|l| &l.anchors == first && &l.reference == first));
        // boxes still differ per layer because deltas are predicted every layer
        assert_ne!(trace.layers[0].boxes, trace.layers[1].boxes);
    }

    #[test]
    fn anchor_size_modulation_equals_no_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, small_cfg(), &mut rng).unwrap();
        let g = grid(&mut rng, 4, 4, 16);
        let run = |m| {
            decoder_forward(
                &dec,
                &store,
                &g,
                ForwardOptions {
                    record_maps: true,
                    modulation_override: Some(m),
                },
            )
            .unwrap()
        };
        let a = run(ModulationMode::AnchorSize);
        let b = run(ModulationMode::Off);
        let c = run(ModulationMode::Learned);
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            let pa = la.positional_logits.as_ref().unwrap();
            let pb = lb.positional_logits.as_ref().unwrap();
            for (x, y) in pa.data().iter().zip(pb.data()) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in la.class_logits.data().iter().zip(lb.class_logits.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_ne!(
            a.layers[0].positional_logits.as_ref().unwrap().data(),
            c.layers[0].positional_logits.as_ref().unwrap().data()
        );
    }

    #[test]
    fn shared_positional_heads_match_standalone_logits() {
        // With a unit csq scale and unmodulated logits, the model's shared
        // positional map of query q equals the standalone formula.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            positional_heads: PositionalHeads::Shared,
            n_layers: 1,
            ..small_cfg()
        };
        let dec = Decoder::new(&mut store, cfg.clone(), &mut rng).unwrap();
        for id in dec.csq_mlp.params() {
            crate::nn::zero_param(&mut store, id);
        }
        let last_b = dec.csq_mlp.layers[1].b;
        store.get_mut(last_b).data_mut().iter_mut().for_each(|v| *v = 1.0);
        let g = grid(&mut rng, 4, 4, 16);
        let trace = decoder_forward(
            &dec,
            &store,
            &g,
            ForwardOptions {
                record_maps: true,
                modulation_override: Some(ModulationMode::Off),
            },
        )
        .unwrap();
        let pos = trace.layers[0].positional_logits.as_ref().unwrap();
        let anchors = dec.anchors(&store);
        let pe = cfg.pe();
        for q in 0..cfg.n_queries() {
            let a = anchors[q % cfg.n_anchors];
            let [x, y, _, _] = a.coords();
            let want = crate::attention::positional_logits((x, y), &g.positions(), &pe).unwrap();
            for k in 0..16 {
                assert!((pos.data()[q * 16 + k] - want.data()[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [
            DecoderConfig {
                n_layers: 0,
                ..small_cfg()
            },
            DecoderConfig {
                n_heads: 3,
                ..small_cfg()
            },
            DecoderConfig {
                temperature: -1.0,
                ..small_cfg()
            },
        ] {
            assert!(matches!(
                Decoder::new(&mut store, cfg, &mut rng),
                Err(Error::Config { .. })
            ));
        }
    }

    #[test]
    fn full_scale_preset_counts() {
        let p = DecoderConfig::full_scale();
        assert_eq!(p.n_queries(), 900);
        assert!(p.validate().is_ok());
    }
}
