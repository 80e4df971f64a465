//! Training objective: focal classification loss, L1 in signal space and
//! generalized IoU, each returned together with its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::diffusion::SignalCodec;
use crate::error::{invalid, Result};
use crate::tensor::Scalar;
use crate::types::{BBox, ElementClass};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const W_CLS: f64 = 5.0;
pub const W_L1: f64 = 5.0;
pub const W_GIOU: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(cls: f64, l1: f64, giou: f64) -> Self {
        Self {
            cls,
            l1,
            giou,
            total: W_CLS * cls + W_L1 * l1 + W_GIOU * giou,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.l1, self.giou, self.total].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        let s = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::new(s(|b| b.cls), s(|b| b.l1), s(|b| b.giou))
    }
}

/// Mean over rows of `−α (1 − p_t)^γ log p_t` with `p = softmax(logits)`.
/// `logits` is row-major `[targets.len(), k]`. Returns `(value, dvalue/dlogits)`.
pub fn focal_loss(logits: &[f64], targets: &[usize], k: usize, alpha: f64, gamma: f64) -> (f64, Vec<f64>) {
    let n = targets.len();
    assert_eq!(logits.len(), n * k, "focal_loss: logits shape");
    let mut grad = vec![0.0; logits.len()];
    if n == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        assert!(y < k, "focal_loss: target {y} out of range");
        let z = &logits[i * k..(i + 1) * k];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let log_pt = z[y] - lse;
        let pt = log_pt.exp();
        let q = 1.0 - pt;
        total += -alpha * q.powf(gamma) * log_pt;
        // d/dlog_pt of −α q^γ log_pt, with dq/dlog_pt = −p_t.
        let focus = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * pt * log_pt };
        let d_logpt = -alpha * (q.powf(gamma) - focus);
        let g = &mut grad[i * k..(i + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (z[j] - lse).exp();
            let dl = if j == y { 1.0 - p } else { -p };
            *gj = d_logpt * dl / n as f64;
        }
    }
    (total / n as f64, grad)
}

/// `1 − GIoU(pred, gt)` and its gradient with respect to `pred` as
/// `(cx, cy, w, h)`.
pub fn giou_loss(pred: BBox, gt: BBox) -> (f64, [f64; 4]) {
    let [px1, py1, px2, py2] = pred.to_corners();
    let [gx1, gy1, gx2, gy2] = gt.to_corners();
    let (pw, ph) = (px2 - px1, py2 - py1);
    let ap = pw * ph;
    let ag = (gx2 - gx1) * (gy2 - gy1);
    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let overlap = iw > 0.0 && ih > 0.0;
    let inter = if overlap { iw * ih } else { 0.0 };
    let union = ap + ag - inter;
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let enclose = cw * ch;
    let loss = 2.0 - inter / union - union / enclose;

    let d_union = inter / (union * union) - 1.0 / enclose;
    let d_inter = -1.0 / union - d_union;
    let d_enclose = union / (enclose * enclose);
    // Corner gradients [x1, y1, x2, y2].
    let mut d = [
        -ph * d_union,
        -pw * d_union,
        ph * d_union,
        pw * d_union,
    ];
    if overlap {
        if px1 > gx1 {
            d[0] -= ih * d_inter;
        }
        if px2 < gx2 {
            d[2] += ih * d_inter;
        }
        if py1 > gy1 {
            d[1] -= iw * d_inter;
        }
        if py2 < gy2 {
            d[3] += iw * d_inter;
        }
    }
    if px1 <= gx1 {
        d[0] -= ch * d_enclose;
    }
    if px2 >= gx2 {
        d[2] += ch * d_enclose;
    }
    if py1 <= gy1 {
        d[1] -= cw * d_enclose;
    }
    if py2 >= gy2 {
        d[3] += cw * d_enclose;
    }
    let grad = [d[0] + d[2], d[1] + d[3], (d[2] - d[0]) / 2.0, (d[3] - d[1]) / 2.0];
    (loss, grad)
}

/// Mean absolute error over `(slot, coordinate)` pairs of masked slots.
pub fn l1_loss(pred: &[[f64; 4]], gt: &[[f64; 4]], mask: &[bool]) -> (f64, Vec<[f64; 4]>) {
    let count = mask.iter().filter(|m| **m).count();
    let mut grad = vec![[0.0; 4]; pred.len()];
    if count == 0 {
        return (0.0, grad);
    }
    let denom = (count * 4) as f64;
    let mut total = 0.0;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        for c in 0..4 {
            let diff = pred[i][c] - gt[i][c];
            total += diff.abs();
            grad[i][c] = diff.signum() / denom;
        }
    }
    (total / denom, grad)
}

/// Decodes a signal-space prediction without clipping, flooring the extent at
/// [`BBox::MIN_SIZE`]. Also returns `d box / d signal` per coordinate (zero on
/// floored extents).
fn decode_pred(codec: &SignalCodec, s: [f64; 4]) -> (BBox, [f64; 4]) {
    let x = s.map(|v| (v / codec.scale + 1.0) / 2.0);
    let slope = 0.5 / codec.scale;
    let w = x[2].max(BBox::MIN_SIZE);
    let h = x[3].max(BBox::MIN_SIZE);
    let jac = [
        slope,
        slope,
        if x[2] > BBox::MIN_SIZE { slope } else { 0.0 },
        if x[3] > BBox::MIN_SIZE { slope } else { 0.0 },
    ];
    (BBox::new(x[0], x[1], w, h), jac)
}

/// Mean `1 − GIoU` over masked slots, on boxes decoded from signal space.
pub fn giou_signal_loss(
    codec: &SignalCodec,
    pred: &[[f64; 4]],
    gt: &[[f64; 4]],
    mask: &[bool],
) -> (f64, Vec<[f64; 4]>) {
    let count = mask.iter().filter(|m| **m).count();
    let mut grad = vec![[0.0; 4]; pred.len()];
    if count == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let (pb, jac) = decode_pred(codec, pred[i]);
        let (gb, _) = decode_pred(codec, gt[i]);
        let (l, g) = giou_loss(pb, gb);
        total += l;
        for c in 0..4 {
            grad[i][c] = g[c] * jac[c] / count as f64;
        }
    }
    (total / count as f64, grad)
}

/// Weighted objective on one sample's decoder outputs. `logits: [N, K]`,
/// `boxes: [N, 4]` in signal space; targets are index aligned.
pub fn training_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    boxes: Var,
    gt_signal: &[[f64; 4]],
    gt_cls: &[ElementClass],
    codec: &SignalCodec,
) -> Result<(Var, LossBreakdown)> {
    let n = gt_cls.len();
    let k = tape.shape(logits).get(1).copied().unwrap_or(0);
    if tape.shape(logits) != [n, k] || tape.shape(boxes) != [n, 4] || gt_signal.len() != n {
        return Err(invalid(format!(
            "loss inputs disagree: logits {:?}, boxes {:?}, {} targets",
            tape.shape(logits),
            tape.shape(boxes),
            n
        )));
    }
    let targets: Vec<usize> = gt_cls.iter().map(|c| c.index()).collect();
    if targets.iter().any(|&t| t >= k) {
        return Err(invalid(format!("target class outside {k} logits")));
    }
    let z = tape.value(logits).to_f64();
    let (cls, g_cls) = focal_loss(&z, &targets, k, FOCAL_ALPHA, FOCAL_GAMMA);
    let pred: Vec<[f64; 4]> = tape
        .value(boxes)
        .to_f64()
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    let mask: Vec<bool> = gt_cls.iter().map(|c| *c != ElementClass::Background).collect();
    let (l1, g_l1) = l1_loss(&pred, gt_signal, &mask);
    let (giou, g_giou) = giou_signal_loss(codec, &pred, gt_signal, &mask);
    let cast = |g: Vec<f64>| g.into_iter().map(F::of).collect::<Vec<F>>();
    let flat = |g: Vec<[f64; 4]>| g.into_iter().flatten().collect::<Vec<f64>>();
    let v_cls = tape.fused_scalar(logits, F::of(cls), cast(g_cls));
    let v_l1 = tape.fused_scalar(boxes, F::of(l1), cast(flat(g_l1)));
    let v_giou = tape.fused_scalar(boxes, F::of(giou), cast(flat(g_giou)));
    let total = tape.weighted_sum(&[(v_cls, W_CLS), (v_l1, W_L1), (v_giou, W_GIOU)]);
    Ok((total, LossBreakdown::new(cls, l1, giou)))
}
