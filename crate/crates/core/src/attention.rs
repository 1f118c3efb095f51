//! Multi-head attention and the dual-query constructions around it.
//!
//! Self-attention adds the positional query to both queries and keys while the
//! values carry content only. Cross-attention keeps content and position apart:
//! its logit is the content dot product plus a positional term whose x and y
//! parts are scaled by `w_ref / w_q` and `h_ref / h_q` before the softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::pe::{grid_centers, pe_point, pe_scalar, AnchorBox, PeConfig, EPS_BOX};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Upper bound on `w_ref / w_q` and `h_ref / h_q`.
pub const MAX_RATIO: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionHeadsConfig {
    pub n_heads: usize,
    pub d_model: usize,
}

impl AttentionHeadsConfig {
    pub fn new(n_heads: usize, d_model: usize) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::contract(format!(
                "{n_heads} heads do not divide model dimension {d_model}"
            )));
        }
        Ok(Self { n_heads, d_model })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn content_scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn positional_scale(&self) -> f64 {
        1.0 / (self.d_model as f64).sqrt()
    }
}

/// How the positional logit is split across heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionalHeads {
    /// Head `h` uses the `h`-th slice of both the x block and the y block.
    #[default]
    PerHead,
    /// One logit from the full encodings, added to every head.
    Shared,
}

/// Reference width and height predicted from a content query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationParams {
    pub w_ref: f64,
    pub h_ref: f64,
}

/// `H × W` grid of `D`-dimensional feature tokens, row-major.
#[derive(Clone, Debug)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub features: Tensor,
}

impl FeatureGrid {
    pub fn new(h: usize, w: usize, features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != h * w {
            return Err(Error::shape("feature_grid", features.shape(), &[h * w]));
        }
        Ok(Self { h, w, features })
    }

    pub fn positions(&self) -> Vec<(f64, f64)> {
        grid_centers(self.h, self.w)
    }
}

/// Per-head scaled dot-product attention.
///
/// `extra_logits`, when given, holds one `n_q × n_k` term per head (or a single
/// shared one) added before the softmax. Returns the concatenated head outputs
/// and each head's weight matrix.
pub fn multi_head_attention_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    extra_logits: Option<&[Var]>,
) -> Result<(Var, Vec<Var>)> {
    let (nq, dq) = two_dims(tape, q, "multi_head_attention")?;
    let (nk, dk) = two_dims(tape, k, "multi_head_attention")?;
    let (nv, dv) = two_dims(tape, v, "multi_head_attention")?;
    if dq != dk || nk != nv || n_heads == 0 || dq % n_heads != 0 || dv % n_heads != 0 {
        return Err(Error::shape("multi_head_attention", tape.shape(q), tape.shape(k)));
    }
    let hq = dq / n_heads;
    let hv = dv / n_heads;
    let scale = 1.0 / (hq as f64).sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * hq, (h + 1) * hq)?;
        let kh = tape.slice_cols(k, h * hq, (h + 1) * hq)?;
        let vh = tape.slice_cols(v, h * hv, (h + 1) * hv)?;
        let raw = tape.matmul_nt(qh, kh)?;
        let mut logits = tape.scale(raw, scale)?;
        if let Some(extra) = extra_logits {
            let e = extra[if extra.len() == 1 { 0 } else { h }];
            if tape.shape(e) != [nq, nk] {
                return Err(Error::shape("multi_head_attention", tape.shape(e), &[nq, nk]));
            }
            logits = tape.add(logits, e)?;
        }
        let w = tape.softmax_rows(logits)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let out = tape.concat_cols(&outs)?;
    Ok((out, weights))
}

/// Plain-tensor multi-head attention; weights come back as `n_heads × n_q × n_k`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionHeadsConfig) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let (out, ws) = multi_head_attention_tape(&mut tape, qv, kv, vv, cfg.n_heads, None)?;
    let weights = stack_heads(&tape, &ws)?;
    Ok((tape.value(out).clone(), weights))
}

/// Stacks per-head `n_q × n_k` maps into one `n_heads × n_q × n_k` tensor.
pub fn stack_heads(tape: &Tape, heads: &[Var]) -> Result<Tensor> {
    let first = heads
        .first()
        .ok_or_else(|| Error::contract("no heads to stack"))?;
    let (nq, nk) = (tape.value(*first).rows(), tape.value(*first).cols());
    let mut data = Vec::with_capacity(heads.len() * nq * nk);
    for &h in heads {
        data.extend_from_slice(tape.value(h).data());
    }
    Tensor::new(vec![heads.len(), nq, nk], data)
}

fn two_dims(tape: &Tape, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::shape(op, s, &[])),
    }
}

/// Tape inputs of one modulated cross-attention call. `ratios` holds the
/// per-query `(w_ref / w_q, h_ref / h_q)` columns, each `n_q × 1`; `None` leaves
/// the positional logits unmodulated.
pub struct CrossAttentionInputs {
    pub content_q: Var,
    pub content_k: Var,
    pub value: Var,
    pub pos_q: Var,
    pub pos_k: Var,
    pub ratios: Option<(Var, Var)>,
}

pub struct CrossAttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
    pub positional: Vec<Var>,
    pub content: Vec<Var>,
}

/// Cross-attention whose per-head logit is the scaled content dot product plus
/// a width/height-modulated positional term normalized by `1/√D`.
pub fn modulated_cross_attention(
    tape: &mut Tape,
    inp: &CrossAttentionInputs,
    heads: &AttentionHeadsConfig,
    mode: PositionalHeads,
) -> Result<CrossAttentionOutput> {
    let d = heads.d_model;
    let hd = heads.head_dim();
    let nh = heads.n_heads;
    for v in [inp.content_q, inp.content_k, inp.value, inp.pos_q, inp.pos_k] {
        if two_dims(tape, v, "modulated_cross_attention")?.1 != d {
            return Err(Error::shape("modulated_cross_attention", tape.shape(v), &[d]));
        }
    }
    let half = d / 2;
    let slices: Vec<(usize, usize)> = match mode {
        PositionalHeads::PerHead => {
            if !half.is_multiple_of(nh) {
                return Err(Error::contract(format!(
                    "per-head positional slices need D/2 = {half} divisible by {nh} heads"
                )));
            }
            let s = half / nh;
            (0..nh).map(|h| (h * s, (h + 1) * s)).collect()
        }
        PositionalHeads::Shared => vec![(0, half)],
    };
    let mut positional = Vec::with_capacity(slices.len());
    for &(a, b) in &slices {
        let qx = tape.slice_cols(inp.pos_q, a, b)?;
        let kx = tape.slice_cols(inp.pos_k, a, b)?;
        let qy = tape.slice_cols(inp.pos_q, half + a, half + b)?;
        let ky = tape.slice_cols(inp.pos_k, half + a, half + b)?;
        let mut xt = tape.matmul_nt(qx, kx)?;
        let mut yt = tape.matmul_nt(qy, ky)?;
        if let Some((rw, rh)) = inp.ratios {
            xt = tape.mul_rows(xt, rw)?;
            yt = tape.mul_rows(yt, rh)?;
        }
        let sum = tape.add(xt, yt)?;
        positional.push(tape.scale(sum, heads.positional_scale())?);
    }
    let mut outs = Vec::with_capacity(nh);
    let mut weights = Vec::with_capacity(nh);
    let mut content = Vec::with_capacity(nh);
    for h in 0..nh {
        let qh = tape.slice_cols(inp.content_q, h * hd, (h + 1) * hd)?;
        let kh = tape.slice_cols(inp.content_k, h * hd, (h + 1) * hd)?;
        let vh = tape.slice_cols(inp.value, h * hd, (h + 1) * hd)?;
        let raw = tape.matmul_nt(qh, kh)?;
        let c = tape.scale(raw, heads.content_scale())?;
        let p = positional[if positional.len() == 1 { 0 } else { h }];
        let logits = tape.add(c, p)?;
        let w = tape.softmax_rows(logits)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
        content.push(c);
    }
    let out = tape.concat_cols(&outs)?;
    Ok(CrossAttentionOutput {
        out,
        weights,
        positional,
        content,
    })
}

/// Self-attention triplet: `Q = K = C + P`, `V = C`.
pub fn self_attention_inputs(tape: &mut Tape, content: Var, positional: Var) -> Result<(Var, Var, Var)> {
    if tape.shape(content) != tape.shape(positional) {
        return Err(Error::shape(
            "self_attention_inputs",
            tape.shape(content),
            tape.shape(positional),
        ));
    }
    let qk = tape.add(content, positional)?;
    Ok((qk, qk, content))
}

/// `Cat(C_q, PE(x_q, y_q) ⊙ MLP_csq(C_q))`, length `2D`.
pub fn conditional_spatial_query(
    c_q: &[f64],
    anchor: &AnchorBox,
    csq: &Mlp,
    store: &ParamStore,
    cfg: &PeConfig,
) -> Result<Vec<f64>> {
    let d = cfg.d_model;
    if c_q.len() != d || csq.d_in() != d || csq.d_out() != d {
        return Err(Error::contract("conditional spatial query dims must all equal D"));
    }
    let mut tape = Tape::with_params(store, false);
    let c = tape.constant(Tensor::from_parts(vec![1, d], c_q.to_vec()));
    let scale = csq.forward(&mut tape, c)?;
    let [x, y, _, _] = anchor.coords();
    let pe = pe_point(x, y, cfg)?;
    let mut out = c_q.to_vec();
    out.extend(pe.iter().zip(tape.value(scale).data()).map(|(p, s)| p * s));
    Ok(out)
}

/// Per-cell keys `Cat(F_{x,y}, PE(x, y))`, shape `(H·W) × 2D`.
pub fn cross_attention_keys(grid: &FeatureGrid, cfg: &PeConfig) -> Result<Tensor> {
    let d = grid.features.cols();
    if d != cfg.d_model {
        return Err(Error::shape("cross_attention_keys", grid.features.shape(), &[cfg.d_model]));
    }
    let mut data = Vec::with_capacity(grid.h * grid.w * 2 * d);
    for (i, (x, y)) in grid.positions().into_iter().enumerate() {
        data.extend_from_slice(grid.features.row(i));
        data.extend(pe_point(x, y, cfg)?);
    }
    Tensor::new(vec![grid.h * grid.w, 2 * d], data)
}

#[derive(Clone, Debug)]
pub struct PositionalLogits {
    pub logits: Tensor,
    /// Whether `w_q` or `h_q` had to be raised to the box floor.
    pub clamped: bool,
}

/// Width/height ratios `(w_ref / w_q, h_ref / h_q)` with the box floor and ratio cap.
pub fn modulation_ratios(anchor: &AnchorBox, m: &ModulationParams) -> (f64, f64, bool) {
    let [_, _, w, h] = anchor.coords();
    let clamped = w < EPS_BOX || h < EPS_BOX;
    let (w, h) = (w.max(EPS_BOX), h.max(EPS_BOX));
    ((m.w_ref / w).min(MAX_RATIO), (m.h_ref / h).min(MAX_RATIO), clamped)
}

/// Modulated positional logits over `positions`:
/// `(PE(x)·PE(x_ref)·w_ref/w_q + PE(y)·PE(y_ref)·h_ref/h_q) / √D`.
pub fn modulated_positional_logits(
    anchor: &AnchorBox,
    m: &ModulationParams,
    positions: &[(f64, f64)],
    cfg: &PeConfig,
) -> Result<PositionalLogits> {
    let half = cfg.d_model / 2;
    let [xr, yr, _, _] = anchor.coords();
    let (rw, rh, clamped) = modulation_ratios(anchor, m);
    let pr_x = pe_scalar(xr, half, cfg)?;
    let pr_y = pe_scalar(yr, half, cfg)?;
    let scale = 1.0 / (cfg.d_model as f64).sqrt();
    let mut out = Vec::with_capacity(positions.len());
    for &(x, y) in positions {
        let dx = dot(&pe_scalar(x, half, cfg)?, &pr_x);
        let dy = dot(&pe_scalar(y, half, cfg)?, &pr_y);
        out.push((dx * rw + dy * rh) * scale);
    }
    Ok(PositionalLogits {
        logits: Tensor::vector(out),
        clamped,
    })
}

/// Unmodulated positional logits `PE(x,y)·PE(x_ref,y_ref) / √D`, via whole-point encodings.
pub fn positional_logits(reference: (f64, f64), positions: &[(f64, f64)], cfg: &PeConfig) -> Result<Tensor> {
    let r = pe_point(reference.0, reference.1, cfg)?;
    let scale = 1.0 / (cfg.d_model as f64).sqrt();
    let mut out = Vec::with_capacity(positions.len());
    for &(x, y) in positions {
        out.push(dot(&pe_point(x, y, cfg)?, &r) * scale);
    }
    Ok(Tensor::vector(out))
}

/// `σ(MLP(C_q))` for one content query.
pub fn reference_wh(c_q: &[f64], head: &Mlp, store: &ParamStore) -> Result<ModulationParams> {
    if head.d_out() != 2 || head.d_in() != c_q.len() {
        return Err(Error::contract("reference width/height head must map D → 2"));
    }
    let mut tape = Tape::with_params(store, false);
    let c = tape.constant(Tensor::from_parts(vec![1, c_q.len()], c_q.to_vec()));
    let raw = head.forward(&mut tape, c)?;
    let s = tape.sigmoid(raw)?;
    let v = tape.value(s).data();
    Ok(ModulationParams {
        w_ref: v[0],
        h_ref: v[1],
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Softmax of a flat logit map.
pub fn softmax_map(logits: &[f64]) -> Vec<f64> {
    crate::tensor::softmax_rows_slice(logits, logits.len().max(1))
}

/// Second moments `(Σ p·(x − cx)², Σ p·(y − cy)²)` of a map about `center`.
pub fn second_moments(p: &[f64], positions: &[(f64, f64)], center: (f64, f64)) -> (f64, f64) {
    p.iter().zip(positions).fold((0.0, 0.0), |(mx, my), (&w, &(x, y))| {
        (
            mx + w * (x - center.0) * (x - center.0),
            my + w * (y - center.1) * (y - center.1),
        )
    })
}

/// Entropy of the softmaxed unmodulated positional map for `reference` on an `n × n` grid.
pub fn positional_map_entropy(reference: (f64, f64), n: usize, cfg: &PeConfig) -> Result<f64> {
    let logits = positional_logits(reference, &grid_centers(n, n), cfg)?;
    Ok(entropy(&softmax_map(logits.data())))
}
