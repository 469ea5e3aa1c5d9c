//! Training objective: per-head cross-entropy plus soft-IoU for the interior
//! heads and a Dice term on the boundary head.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard for every denominator and log clamp.
pub const EPS: f64 = 1e-7;
pub const DEFAULT_ALPHA: f64 = 3.0;

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return shape_err(format!(
            "{what}: prediction {:?} vs target {:?}",
            g.shape(a),
            g.shape(b)
        ));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities `pred` against `target`.
pub fn ce_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "cross-entropy")?;
    let eps = T::lit(EPS);
    let p = g.clamp(pred, eps, T::one() - eps);
    let log_p = g.ln(p);
    let q = g.one_minus(p);
    let log_q = g.ln(q);
    let not_y = g.one_minus(target);
    let pos = g.mul(target, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let ll = g.add(pos, neg)?;
    let mean = g.mean_all(ll);
    Ok(g.scale(mean, -T::one()))
}

/// Sums an NCHW tensor per channel, keeping shape `[1, C, 1, 1]`.
fn per_class_sum<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let [_, c, _, _] = g.value(x).dims4()?;
    g.sum_to(x, &[1, c, 1, 1])
}

/// `1 - sum(y p) / sum(y + p - y p)`, computed per channel and averaged over channels.
pub fn miou_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "mIoU")?;
    let inter = g.mul(pred, target)?;
    let both = g.add(pred, target)?;
    let union = g.sub(both, inter)?;
    let inter = per_class_sum(g, inter)?;
    let union = per_class_sum(g, union)?;
    let union = g.add_scalar(union, T::lit(EPS));
    let iou = g.div(inter, union)?;
    let miou = g.mean_all(iou);
    Ok(g.one_minus(miou))
}

/// `1 - 2 sum(y p) / sum(y + p)`. When both masses are below `EPS` the loss is 0.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "Dice")?;
    let eps = T::lit(EPS);
    if g.value(pred).sum() < eps && g.value(target).sum() < eps {
        return Ok(g.input(Tensor::scalar(T::zero())));
    }
    let inter = g.mul(pred, target)?;
    let inter = g.sum_all(inter);
    let total = g.add(pred, target)?;
    let total = g.sum_all(total);
    let total = g.add_scalar(total, eps);
    let ratio = g.div(inter, total)?;
    let ratio = g.scale(ratio, T::lit(2.0));
    Ok(g.one_minus(ratio))
}

/// Converts logits to probabilities: sigmoid for one channel, softmax over channels otherwise.
pub fn probabilities<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let [_, c, _, _] = g.value(logits).dims4()?;
    if c == 1 {
        return Ok(g.sigmoid(logits));
    }
    let last = g.permute(logits, &[0, 2, 3, 1])?;
    let p = g.softmax_last(last);
    g.permute(p, &[0, 3, 1, 2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_per_head: Vec<f64>,
    pub miou_per_head: Vec<f64>,
    pub boundary_dice: Option<f64>,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<String> {
        for (i, v) in self.ce_per_head.iter().enumerate() {
            if !v.is_finite() {
                return Some(format!("ce[head {}]", i + 1));
            }
        }
        for (i, v) in self.miou_per_head.iter().enumerate() {
            if !v.is_finite() {
                return Some(format!("miou[head {}]", i + 1));
            }
        }
        if self.boundary_dice.is_some_and(|d| !d.is_finite()) {
            return Some("boundary_dice".into());
        }
        (!self.total.is_finite()).then(|| "total".into())
    }
}

/// Targets for one batch: interior target `[B, K, H, W]` (binary or one-hot) and
/// boundary target at the boundary head's resolution.
pub struct LossTargets {
    pub interior: Var,
    pub boundary: Option<Var>,
}

/// `sum_heads (CE + mIoU) + alpha * Dice(boundary)`. The boundary term is
/// skipped when the model has no boundary head.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    interior_logits: &[Var],
    boundary_logits: Option<Var>,
    targets: &LossTargets,
    alpha: f64,
) -> Result<(Var, LossBreakdown)> {
    if interior_logits.len() != crate::bim_decoder::DECODER_STAGES {
        return shape_err(format!(
            "expected {} interior heads, got {}",
            crate::bim_decoder::DECODER_STAGES,
            interior_logits.len()
        ));
    }
    let mut ce_per_head = Vec::with_capacity(3);
    let mut miou_per_head = Vec::with_capacity(3);
    let mut total: Option<Var> = None;
    for &logits in interior_logits {
        let p = probabilities(g, logits)?;
        let ce = ce_loss(g, p, targets.interior)?;
        let miou = miou_loss(g, p, targets.interior)?;
        ce_per_head.push(g.value(ce).item().as_f64());
        miou_per_head.push(g.value(miou).item().as_f64());
        let head = g.add(ce, miou)?;
        total = Some(match total {
            Some(t) => g.add(t, head)?,
            None => head,
        });
    }
    let mut total = total.expect("three heads");
    let mut boundary_dice = None;
    if let Some(logits) = boundary_logits {
        let Some(target) = targets.boundary else {
            return shape_err("boundary head present but no boundary target");
        };
        let p = g.sigmoid(logits);
        let dice = dice_loss(g, p, target)?;
        boundary_dice = Some(g.value(dice).item().as_f64());
        let weighted = g.scale(dice, T::lit(alpha));
        total = g.add(total, weighted)?;
    }
    let breakdown = LossBreakdown {
        ce_per_head,
        miou_per_head,
        boundary_dice,
        alpha,
        total: g.value(total).item().as_f64(),
    };
    Ok((total, breakdown))
}
