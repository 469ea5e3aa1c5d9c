//! Evaluation metrics: Dice, IoU, average Hausdorff distance and panoptic quality.
//!
//! Overlap ratios are generic over any numeric type constructible from counts,
//! so they can be evaluated in floating point or exactly with rationals.

use std::collections::HashMap;

use num_traits::{Float, FromPrimitive, Num};
use serde::{Deserialize, Serialize};

use crate::error::{CtoError, Result};
use crate::mask::{BinaryMask, InstanceMap};

fn count<R: FromPrimitive>(n: usize) -> R {
    R::from_usize(n).expect("pixel count representable")
}

/// `(dice, iou)` of two binary masks. Two empty masks score `(1, 1)`.
pub fn dice_iou<R>(pred: &BinaryMask, gt: &BinaryMask) -> Result<(R, R)>
where
    R: Num + FromPrimitive + Clone,
{
    pred.same_dims(gt)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(gt.data()) {
        a += p as usize;
        b += t as usize;
        inter += (p && t) as usize;
    }
    if a + b == 0 {
        return Ok((R::one(), R::one()));
    }
    let dice = count::<R>(2 * inter) / count::<R>(a + b);
    let iou = count::<R>(inter) / count::<R>(a + b - inter);
    Ok((dice, iou))
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel
/// (separable lower-envelope transform). `None` when the mask is empty.
fn squared_distance_field(mask: &BinaryMask) -> Option<Vec<f64>> {
    if mask.foreground() == 0 {
        return None;
    }
    let (h, w) = mask.dims();
    let inf = ((h * h + w * w) as f64) * 4.0 + 1.0;
    let mut field: Vec<f64> = mask.data().iter().map(|&v| if v { 0.0 } else { inf }).collect();
    let mut buf = Vec::new();
    for x in 0..w {
        buf.clear();
        buf.extend((0..h).map(|y| field[y * w + x]));
        let out = envelope_1d(&buf);
        for y in 0..h {
            field[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let out = envelope_1d(&field[y * w..(y + 1) * w]);
        field[y * w..(y + 1) * w].copy_from_slice(&out);
    }
    Some(field)
}

/// `d[q] = min_p (q - p)^2 + f[p]` over integer positions.
fn envelope_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut d = vec![0f64; n];
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        *dq = diff * diff + f[v[k]];
    }
    d
}

/// Average Hausdorff distance in pixels:
/// `(mean_{a in A} min_b |a-b| + mean_{b in B} min_a |a-b|) / 2`.
pub fn avg_hausdorff<F: Float + FromPrimitive>(pred: &BinaryMask, gt: &BinaryMask) -> Result<F> {
    pred.same_dims(gt)?;
    let (Some(to_gt), Some(to_pred)) = (squared_distance_field(gt), squared_distance_field(pred)) else {
        return Err(CtoError::UndefinedMetric(
            "average Hausdorff distance needs two nonempty masks".into(),
        ));
    };
    let directed = |from: &BinaryMask, field: &[f64]| {
        let mut total = F::zero();
        for (i, _) in from.data().iter().enumerate().filter(|(_, &v)| v) {
            total = total + F::from_f64(field[i]).expect("finite").sqrt();
        }
        total / F::from_usize(from.foreground()).expect("count fits")
    };
    let two = F::one() + F::one();
    Ok((directed(pred, &to_gt) + directed(gt, &to_pred)) / two)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanopticQuality<R> {
    pub pq: R,
    pub detection_quality: R,
    pub segmentation_quality: R,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Set when both maps have no instances and the scores are 1 by convention.
    pub both_empty: bool,
}

/// Panoptic quality of two instance maps (0 = background). A prediction and a
/// ground-truth instance match when their IoU exceeds 1/2.
pub fn panoptic_quality<R>(pred: &InstanceMap, gt: &InstanceMap) -> Result<PanopticQuality<R>>
where
    R: Num + FromPrimitive + Clone,
{
    pred.same_dims(gt)?;
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    let mut pred_area: HashMap<u32, usize> = HashMap::new();
    let mut gt_area: HashMap<u32, usize> = HashMap::new();
    for (&p, &t) in pred.data().iter().zip(gt.data()) {
        if p != 0 {
            *pred_area.entry(p).or_default() += 1;
        }
        if t != 0 {
            *gt_area.entry(t).or_default() += 1;
        }
        if p != 0 && t != 0 {
            *inter.entry((p, t)).or_default() += 1;
        }
    }
    if pred_area.is_empty() && gt_area.is_empty() {
        return Ok(PanopticQuality {
            pq: R::one(),
            detection_quality: R::one(),
            segmentation_quality: R::one(),
            true_positives: 0,
            false_positives: 0,
            false_negatives: 0,
            both_empty: true,
        });
    }
    let mut matched: Vec<((u32, u32), usize, usize)> = inter
        .iter()
        .filter_map(|(&(p, t), &i)| {
            let union = pred_area[&p] + gt_area[&t] - i;
            (2 * i > union).then_some(((p, t), i, union))
        })
        .collect();
    matched.sort_unstable();
    let mut used_pred = HashMap::new();
    let mut used_gt = HashMap::new();
    let mut iou_sum = R::zero();
    for &((p, t), i, union) in &matched {
        assert!(
            used_pred.insert(p, t).is_none() && used_gt.insert(t, p).is_none(),
            "IoU > 1/2 matching must be one-to-one"
        );
        iou_sum = iou_sum + count::<R>(i) / count::<R>(union);
    }
    let tp = matched.len();
    let fp = pred_area.len() - tp;
    let fneg = gt_area.len() - tp;
    // denominators doubled to stay integral: TP + FP/2 + FN/2 = (2TP + FP + FN) / 2
    let denom2 = count::<R>(2 * tp + fp + fneg);
    let two = count::<R>(2);
    let pq = two.clone() * iou_sum.clone() / denom2.clone();
    let dq = two * count::<R>(tp) / denom2;
    let sq = if tp == 0 {
        R::zero()
    } else {
        iou_sum / count::<R>(tp)
    };
    Ok(PanopticQuality {
        pq,
        detection_quality: dq,
        segmentation_quality: sq,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
        both_empty: false,
    })
}

/// 4-connected components of a binary mask, labelled 1.. in raster order.
pub fn connected_components(mask: &BinaryMask) -> InstanceMap {
    let (h, w) = mask.dims();
    let mut labels = InstanceMap::new(h, w);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) || labels.get(y, x) != 0 {
                continue;
            }
            next += 1;
            labels.set(y, x, next);
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                let neighbors = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < h && nx < w && mask.get(ny, nx) && labels.get(ny, nx) == 0 {
                        labels.set(ny, nx, next);
                        stack.push((ny, nx));
                    }
                }
            }
        }
    }
    labels
}
