//! Set-prediction objective: bipartite matching, sigmoid focal classification,
//! L1 and GIoU box losses, summed over every decoder layer.

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderTrace, LayerPrediction};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tape, Tensor, Var};

const AREA_EPS: f64 = 1e-7;
const PROB_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub match_class_coef: f64,
    pub loss_class_coef: f64,
    pub l1_coef: f64,
    pub giou_coef: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            match_class_coef: 2.0,
            loss_class_coef: 1.0,
            l1_coef: 5.0,
            giou_coef: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("match_class_coef", self.match_class_coef),
            ("loss_class_coef", self.loss_class_coef),
            ("l1_coef", self.l1_coef),
            ("giou_coef", self.giou_coef),
        ];
        for (k, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config {
                    key: format!("loss.{k}"),
                    detail: format!("{v} must be finite and non-negative"),
                });
            }
        }
        if self.alpha > 1.0 {
            return Err(Error::Config {
                key: "loss.alpha".into(),
                detail: "must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }
}

/// Ground truth of one image: normalized `(cx, cy, w, h)` boxes and class ids.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Matched `(prediction, target)` pairs sorted by prediction index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &Tensor) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost.at(i, j)).sum()
    }
}

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = b;
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

pub fn xyxy_to_cxcywh(b: [f64; 4]) -> [f64; 4] {
    let [x1, y1, x2, y2] = b;
    [0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1]
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn check_box(op: &'static str, b: &[f64; 4]) -> Result<()> {
    if b.iter().all(|v| v.is_finite()) && b[2] > b[0] && b[3] > b[1] {
        Ok(())
    } else {
        Err(Error::Domain {
            op,
            detail: format!("degenerate box {b:?}"),
        })
    }
}

/// Intersection over union of two `xyxy` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    check_box("iou", &a)?;
    check_box("iou", &b)?;
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    Ok(inter / (area(&a) + area(&b) - inter).max(AREA_EPS))
}

/// Generalized IoU of two `xyxy` boxes, in `[-1, 1]`.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    check_box("giou", &a)?;
    check_box("giou", &b)?;
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(&a) + area(&b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    Ok(inter / union.max(AREA_EPS) - (hull - union) / hull.max(AREA_EPS))
}

/// Minimum-cost assignment of `min(rows, cols)` pairs.
///
/// Shortest augmenting paths with row/column potentials, `O(n²m)`. Among
/// equal-cost columns the lowest index wins, so results are deterministic.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    if cost.shape().len() != 2 {
        return Err(Error::contract("hungarian expects a matrix"));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite { op: "hungarian" });
    }
    let (r, c) = (cost.rows(), cost.cols());
    if r == 0 || c == 0 {
        return Ok(Assignment::default());
    }
    let transposed = r > c;
    let (n, m) = if transposed { (c, r) } else { (r, c) };
    let at = |i: usize, j: usize| if transposed { cost.at(j, i) } else { cost.at(i, j) };

    // 1-based: index 0 is the virtual root of each augmenting search.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (row, col) = (owner[j] - 1, j - 1);
            if transposed {
                (col, row)
            } else {
                (row, col)
            }
        })
        .collect();
    pairs.sort_unstable();
    Ok(Assignment { pairs })
}

/// Focal loss of a single probability for a positive or negative label.
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Classification matching cost of probability `p` for the target class.
pub fn focal_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    focal_loss(p, true, alpha, gamma) - focal_loss(p, false, alpha, gamma)
}

/// `n_pred × n_target` matching cost from class logits and `cxcywh` boxes.
pub fn matching_cost(logits: &Tensor, boxes: &Tensor, targets: &Targets, cfg: &LossConfig) -> Result<Tensor> {
    let nq = logits.rows();
    let nc = logits.cols();
    if boxes.shape() != [nq, 4] {
        return Err(Error::shape("matching_cost", boxes.shape(), &[nq, 4]));
    }
    if targets.classes.len() != targets.boxes.len() {
        return Err(Error::contract("targets need one class per box"));
    }
    if let Some(&c) = targets.classes.iter().find(|&&c| c >= nc) {
        return Err(Error::contract(format!("target class {c} ≥ {nc} classes")));
    }
    let nt = targets.len();
    let mut out = Vec::with_capacity(nq * nt);
    for i in 0..nq {
        let b = [boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)];
        let bx = cxcywh_to_xyxy(b);
        for (tb, &tc) in targets.boxes.iter().zip(&targets.classes) {
            let p = sigmoid(logits.at(i, tc));
            let class = focal_cost(p, cfg.alpha, cfg.gamma);
            let l1: f64 = b.iter().zip(tb).map(|(x, y)| (x - y).abs()).sum();
            let g = giou(bx, cxcywh_to_xyxy(*tb))?;
            out.push(cfg.match_class_coef * class + cfg.l1_coef * l1 + cfg.giou_coef * (1.0 - g));
        }
    }
    Tensor::matrix(nq, nt, out)
}

/// `1 − GIoU` per row between differentiable `cxcywh` predictions and constant targets.
pub fn giou_loss_tape(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let m = tape.shape(pred)[0];
    let xyxy = |tape: &mut Tape, b: Var| -> Result<[Var; 4]> {
        let cx = tape.slice_cols(b, 0, 1)?;
        let cy = tape.slice_cols(b, 1, 2)?;
        let w = tape.slice_cols(b, 2, 3)?;
        let h = tape.slice_cols(b, 3, 4)?;
        let hw = tape.scale(w, 0.5)?;
        let hh = tape.scale(h, 0.5)?;
        Ok([tape.sub(cx, hw)?, tape.sub(cy, hh)?, tape.add(cx, hw)?, tape.add(cy, hh)?])
    };
    let t = tape.constant(target.clone());
    let [px1, py1, px2, py2] = xyxy(tape, pred)?;
    let [tx1, ty1, tx2, ty2] = xyxy(tape, t)?;
    let area = |tape: &mut Tape, x1, y1, x2, y2| -> Result<Var> {
        let w = tape.sub(x2, x1)?;
        let h = tape.sub(y2, y1)?;
        tape.mul(w, h)
    };
    let pa = area(tape, px1, py1, px2, py2)?;
    let ta = area(tape, tx1, ty1, tx2, ty2)?;
    let ix1 = tape.maximum(px1, tx1)?;
    let iy1 = tape.maximum(py1, ty1)?;
    let ix2 = tape.minimum(px2, tx2)?;
    let iy2 = tape.minimum(py2, ty2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.clamp_min(iw, 0.0)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.clamp_min(ih, 0.0)?;
    let inter = tape.mul(iw, ih)?;
    let sum = tape.add(pa, ta)?;
    let union = tape.sub(sum, inter)?;
    let union_d = tape.clamp_min(union, AREA_EPS)?;
    let iou = tape.div(inter, union_d)?;
    let cx1 = tape.minimum(px1, tx1)?;
    let cy1 = tape.minimum(py1, ty1)?;
    let cx2 = tape.maximum(px2, tx2)?;
    let cy2 = tape.maximum(py2, ty2)?;
    let hull = area(tape, cx1, cy1, cx2, cy2)?;
    let hull_d = tape.clamp_min(hull, AREA_EPS)?;
    let gap = tape.sub(hull, union)?;
    let frac = tape.div(gap, hull_d)?;
    let g = tape.sub(iou, frac)?;
    let neg = tape.scale(g, -1.0)?;
    let out = tape.add_const(neg, 1.0)?;
    debug_assert_eq!(tape.shape(out), &[m, 1]);
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    /// `loss_class_coef · focal / n_gt` and the unweighted box terms.
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub layers: Vec<LayerLoss>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn last(&self) -> &LayerLoss {
        self.layers.last().expect("breakdown has at least one layer")
    }

    /// Accumulates another image's breakdown term by term.
    pub fn add(&mut self, other: &LossBreakdown) {
        if self.layers.is_empty() {
            self.layers = vec![LayerLoss::default(); other.layers.len()];
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.class += b.class;
            a.l1 += b.l1;
            a.giou += b.giou;
            a.total += b.total;
        }
        self.total += other.total;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for l in &mut self.layers {
            l.class *= s;
            l.l1 *= s;
            l.giou *= s;
            l.total *= s;
        }
        self.total *= s;
        self
    }
}

/// Matching of one layer's predictions to the targets.
pub fn match_layer(tape: &Tape, pred: &LayerPrediction, targets: &Targets, cfg: &LossConfig) -> Result<Assignment> {
    let cost = matching_cost(tape.value(pred.logits), tape.value(pred.boxes), targets, cfg)?;
    hungarian(&cost)
}

/// Deep-supervised loss on the tape plus its per-layer breakdown.
///
/// With `fixed` the given per-layer assignments replace the matcher, which
/// keeps the objective smooth for finite-difference checks.
pub fn detr_loss(
    tape: &mut Tape,
    preds: &[LayerPrediction],
    targets: &Targets,
    cfg: &LossConfig,
    fixed: Option<&[Assignment]>,
) -> Result<(Var, LossBreakdown)> {
    if preds.is_empty() {
        return Err(Error::contract("loss needs at least one decoder layer"));
    }
    if let Some(f) = fixed {
        if f.len() != preds.len() {
            return Err(Error::contract("one fixed assignment per layer required"));
        }
    }
    let norm = 1.0 / targets.len().max(1) as f64;
    let mut terms = Vec::with_capacity(preds.len());
    let mut breakdown = LossBreakdown::default();
    for (l, pred) in preds.iter().enumerate() {
        let assignment = match fixed {
            Some(f) => f[l].clone(),
            None => match_layer(tape, pred, targets, cfg)?,
        };
        let (nq, nc) = (tape.shape(pred.logits)[0], tape.shape(pred.logits)[1]);
        let mut onehot = vec![0.0; nq * nc];
        for &(i, j) in &assignment.pairs {
            onehot[i * nc + targets.classes[j]] = 1.0;
        }
        let focal = tape.sigmoid_focal(pred.logits, &onehot, cfg.alpha, cfg.gamma)?;
        let class = tape.scale(focal, cfg.loss_class_coef * norm)?;
        let mut layer = LayerLoss {
            class: tape.value(class).data()[0],
            ..Default::default()
        };
        let mut total = class;
        if !assignment.pairs.is_empty() {
            let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
            let tgt: Vec<f64> = assignment
                .pairs
                .iter()
                .flat_map(|&(_, j)| targets.boxes[j])
                .collect();
            let tgt = Tensor::matrix(rows.len(), 4, tgt)?;
            let matched = tape.gather_rows(pred.boxes, &rows)?;
            let tv = tape.constant(tgt.clone());
            let diff = tape.sub(matched, tv)?;
            let diff = tape.abs(diff)?;
            let l1 = tape.sum(diff)?;
            let l1 = tape.scale(l1, norm)?;
            let g = giou_loss_tape(tape, matched, &tgt)?;
            let g = tape.sum(g)?;
            let g = tape.scale(g, norm)?;
            layer.l1 = tape.value(l1).data()[0];
            layer.giou = tape.value(g).data()[0];
            let wl1 = tape.scale(l1, cfg.l1_coef)?;
            let wg = tape.scale(g, cfg.giou_coef)?;
            total = tape.add(total, wl1)?;
            total = tape.add(total, wg)?;
        }
        layer.total = tape.value(total).data()[0];
        breakdown.total += layer.total;
        breakdown.layers.push(layer);
        terms.push(total);
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    Ok((sum, breakdown))
}

/// Loss breakdown of a recorded trace (values only).
pub fn trace_loss(trace: &DecoderTrace, targets: &Targets, cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let preds: Vec<LayerPrediction> = trace
        .layers
        .iter()
        .map(|l| LayerPrediction {
            logits: tape.constant(l.class_logits.clone()),
            boxes: tape.constant(l.boxes.clone()),
        })
        .collect();
    Ok(detr_loss(&mut tape, &preds, targets, cfg, None)?.1)
}
