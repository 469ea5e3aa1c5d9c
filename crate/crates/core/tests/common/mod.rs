//! Helpers shared by the integration tests: finite-difference gradient
//! checks, the per-module gradient suites and brute-force metric oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cto::backbone::{Backbone, BackboneConfig, FeaturePyramid};
use cto::bem::{BoundaryKind, BoundaryModule};
use cto::bim_decoder::{Decoder, DecoderLayout};
use cto::lightvit::{LightVit, LightVitConfig};
use cto::losses::{total_loss, LossTargets};
use cto::mask::{BinaryMask, InstanceMap};
use cto::nn::Module;
use cto::{Graph, Tensor, Var};

/// Central differences are taken at each step and the closest one is kept:
/// a wrong analytic gradient disagrees at every step, while the best step
/// balances truncation, rounding and nearby ReLU kinks.
pub const STEPS: [f64; 4] = [1e-4, 1e-5, 1e-6, 1e-7];
/// Denominator floor so gradients that are zero up to rounding compare absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradCheck {
    fn record(&mut self, what: String, analytic: f64, estimates: &[f64]) {
        let rel_of = |n: f64| (analytic - n).abs() / analytic.abs().max(n.abs()).max(FLOOR);
        let numeric = estimates
            .iter()
            .copied()
            .min_by(|a, b| rel_of(*a).total_cmp(&rel_of(*b)))
            .expect("at least one step");
        let rel = rel_of(numeric);
        self.checked += 1;
        if rel > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(rel);
            self.worst = format!("{what}: analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }

    pub fn merge(mut self, other: GradCheck) -> GradCheck {
        self.checked += other.checked;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
        self
    }
}

/// Sum of every output weighted by a fixed pseudo-random tensor.
pub fn project(g: &mut Graph<f64>, outputs: &[Var], seed: u64) -> cto::Result<Var> {
    let mut r = rng(seed);
    let mut total: Option<Var> = None;
    for &v in outputs {
        let n = g.shape(v).iter().product::<usize>() as f64;
        let w = g.input(Tensor::randn(g.shape(v), 1.0 / n.sqrt(), &mut r));
        let prod = g.mul(v, w)?;
        let s = g.sum_all(prod);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one output"))
}

/// Moves normalization affines and biases off their initial values. Freshly
/// initialized BN on tiny batches can put ReLU inputs exactly on the kink,
/// where central differences and the subgradient disagree.
pub fn jitter<M: Module<f64>>(model: &mut M, seed: u64) {
    let mut r = rng(seed);
    model.visit_params_mut(&mut |p| {
        let n = p.name();
        if n.ends_with("gamma") || n.ends_with("beta") || n.ends_with("bias") {
            let noise = Tensor::randn(p.value().shape(), 0.3, &mut r);
            p.value_mut().add_assign(&noise);
        }
    });
}

fn nth_param_value<M: Module<f64>>(model: &mut M, which: usize, idx: usize, f: impl FnOnce(&mut f64)) {
    let mut f = Some(f);
    let mut i = 0;
    model.visit_params_mut(&mut |p| {
        if i == which {
            if let Some(f) = f.take() {
                f(&mut p.value_mut().data_mut()[idx]);
            }
        }
        i += 1;
    });
}

/// Central differences on up to `per_param` random entries of every parameter.
pub fn check_params<M, L>(model: &mut M, per_param: usize, seed: u64, mut loss: L) -> GradCheck
where
    M: Module<f64>,
    L: FnMut(&mut M, &mut Graph<f64>) -> cto::Result<Var>,
{
    let mut g = Graph::new(true);
    let l = loss(model, &mut g).expect("forward");
    let grads = g.backward(l).expect("backward");
    let mut analytic = Vec::new();
    model.visit_params(&mut |p| {
        let grad = grads
            .param(p.id())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value().shape()));
        analytic.push((p.name().to_string(), grad));
    });
    let mut eval = |model: &mut M| {
        let mut g = Graph::new(true);
        let l = loss(model, &mut g).expect("forward");
        g.value(l).item()
    };
    let mut r = rng(seed);
    let mut report = GradCheck::default();
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.numel();
        let picks: BTreeSet<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            let mut s = BTreeSet::new();
            while s.len() < per_param {
                s.insert(r.random_range(0..n));
            }
            s
        };
        for idx in picks {
            let mut estimates = Vec::with_capacity(STEPS.len());
            for h in STEPS {
                let mut orig = 0.0;
                nth_param_value(model, pi, idx, |v| {
                    orig = *v;
                    *v = orig + h;
                });
                let plus = eval(model);
                nth_param_value(model, pi, idx, |v| *v = orig - h);
                let minus = eval(model);
                nth_param_value(model, pi, idx, |v| *v = orig);
                estimates.push((plus - minus) / (2.0 * h));
            }
            report.record(format!("{name}[{idx}]"), grad.data()[idx], &estimates);
        }
    }
    report
}

/// Central differences on up to `per_input` random entries of every input.
pub fn check_inputs<L>(inputs: &[Tensor<f64>], per_input: usize, seed: u64, mut loss: L) -> GradCheck
where
    L: FnMut(&mut Graph<f64>, &[Var]) -> cto::Result<Var>,
{
    let run = |values: &[Tensor<f64>], loss: &mut L| {
        let mut g = Graph::new(true);
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let l = loss(&mut g, &vars).expect("forward");
        (g, vars, l)
    };
    let (g, vars, l) = run(inputs, &mut loss);
    let grads = g.backward(l).expect("backward");
    let mut r = rng(seed);
    let mut report = GradCheck::default();
    let mut values = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let grad = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let n = grad.numel();
        let picks: BTreeSet<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            let mut s = BTreeSet::new();
            while s.len() < per_input {
                s.insert(r.random_range(0..n));
            }
            s
        };
        for idx in picks {
            let orig = values[k].data()[idx];
            let mut estimates = Vec::with_capacity(STEPS.len());
            for h in STEPS {
                values[k].data_mut()[idx] = orig + h;
                let (g, _, l) = run(&values, &mut loss);
                let plus = g.value(l).item();
                values[k].data_mut()[idx] = orig - h;
                let (g, _, l) = run(&values, &mut loss);
                let minus = g.value(l).item();
                estimates.push((plus - minus) / (2.0 * h));
            }
            values[k].data_mut()[idx] = orig;
            report.record(format!("input{k}[{idx}]"), grad.data()[idx], &estimates);
        }
    }
    report
}

pub fn backbone_gradients() -> GradCheck {
    let mut model = Backbone::<f64>::new(&BackboneConfig::tiny(), &mut rng(1)).unwrap();
    jitter(&mut model, 101);
    let x = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng(2));
    let params = check_params(&mut model, 3, 3, |m, g| {
        let xv = g.input(x.clone());
        let p = m.forward(g, xv)?;
        project(g, &p.levels, 4)
    });
    let inputs = check_inputs(&[x.clone()], 12, 5, |g, v| {
        let p = model.clone().forward(g, v[0])?;
        project(g, &p.levels, 4)
    });
    params.merge(inputs)
}

pub fn lightvit_gradients() -> GradCheck {
    let cfg = LightVitConfig {
        in_channels: 4,
        d_model: 8,
        heads: 2,
        mlp_ratio: 2,
        out_channels: 6,
    };
    let mut model = LightVit::<f64>::new(&cfg, (32, 32), &mut rng(6)).unwrap();
    // non-zero position embeddings so their gradient path is exercised
    model.visit_params_mut(&mut |p| {
        if p.name().ends_with("position") {
            *p.value_mut() = Tensor::randn(p.value().shape(), 0.1, &mut rng(7));
        }
    });
    jitter(&mut model, 102);
    let x = Tensor::randn(&[2, 4, 32, 32], 1.0, &mut rng(8));
    let params = check_params(&mut model, 3, 9, |m, g| {
        let xv = g.input(x.clone());
        let out = m.forward(g, xv)?;
        project(g, &[out.feature], 10)
    });
    let inputs = check_inputs(&[x.clone()], 12, 11, |g, v| {
        let out = model.clone().forward(g, v[0])?;
        project(g, &[out.feature], 10)
    });
    params.merge(inputs)
}

pub fn bem_gradients() -> GradCheck {
    let f1 = Tensor::randn(&[2, 4, 16, 16], 1.0, &mut rng(12));
    let f4 = Tensor::randn(&[2, 8, 2, 2], 1.0, &mut rng(13));
    let mut total = GradCheck::default();
    for kind in [BoundaryKind::Sobel, BoundaryKind::Plain] {
        let mut model = BoundaryModule::<f64>::new(kind, 4, 8, 6, &mut rng(14));
        jitter(&mut model, 103);
        let params = check_params(&mut model, 3, 15, |m, g| {
            let (a, b) = (g.input(f1.clone()), g.input(f4.clone()));
            let out = m.forward(g, a, b)?;
            project(g, &[out.feature, out.logits], 16)
        });
        let inputs = check_inputs(&[f1.clone(), f4.clone()], 12, 17, |g, v| {
            let out = model.clone().forward(g, v[0], v[1])?;
            project(g, &[out.feature, out.logits], 16)
        });
        total = total.merge(params).merge(inputs);
    }
    total
}

pub fn decoder_gradients() -> GradCheck {
    let shapes: [&[usize]; 6] = [
        &[2, 4, 16, 16],
        &[2, 6, 8, 8],
        &[2, 8, 4, 4],
        &[2, 10, 2, 2],
        &[2, 3, 16, 16],
        &[2, 5, 16, 16],
    ];
    let mut r = rng(18);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
    let layout = DecoderLayout {
        skip_channels: [8, 6, 4],
        bottleneck_in: 13,
        boundary_channels: Some(5),
        channels: 6,
        classes: 2,
    };
    let mut model = Decoder::<f64>::new(&layout, &mut rng(19));
    jitter(&mut model, 104);
    let forward = |m: &mut Decoder<f64>, g: &mut Graph<f64>, v: &[Var]| {
        let pyramid = FeaturePyramid {
            levels: [v[0], v[1], v[2], v[3]],
        };
        let state = m.forward(g, &pyramid, Some(v[4]), Some(v[5]), (64, 64))?;
        let mut outs = state.logits.clone();
        outs.extend(&state.attention);
        project(g, &outs, 20)
    };
    let params = check_params(&mut model, 3, 21, |m, g| {
        let v: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        forward(m, g, &v)
    });
    let plain_layout = DecoderLayout {
        boundary_channels: None,
        ..layout
    };
    let mut plain = Decoder::<f64>::new(&plain_layout, &mut rng(22));
    jitter(&mut plain, 105);
    let plain_params = check_params(&mut plain, 3, 23, |m, g| {
        let v: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let pyramid = FeaturePyramid {
            levels: [v[0], v[1], v[2], v[3]],
        };
        let s = m.forward(g, &pyramid, Some(v[4]), None, (32, 32))?;
        project(g, &s.logits, 24)
    });
    let grads = check_inputs(&inputs, 8, 25, |g, v| forward(&mut model.clone(), g, v));
    params.merge(plain_params).merge(grads)
}

/// Gradients of the full objective with respect to every head's logits.
pub fn loss_gradients() -> GradCheck {
    let mut r = rng(26);
    let mut report = GradCheck::default();
    for classes in [1usize, 3] {
        let heads: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[2, classes, 8, 8], 1.5, &mut r)).collect();
        let boundary = Tensor::randn(&[2, 1, 4, 4], 1.5, &mut r);
        let target = if classes == 1 {
            Tensor::from_vec(&[2, 1, 8, 8], (0..128).map(|_| r.random_range(0..2) as f64).collect()).unwrap()
        } else {
            let labels: Vec<usize> = (0..128).map(|_| r.random_range(0..classes)).collect();
            let mut t = Tensor::zeros(&[2, classes, 8, 8]);
            for (p, &k) in labels.iter().enumerate() {
                let (b, pix) = (p / 64, p % 64);
                t.data_mut()[(b * classes + k) * 64 + pix] = 1.0;
            }
            t
        };
        let bt = Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|_| r.random_range(0..2) as f64).collect()).unwrap();
        let mut inputs = heads.clone();
        inputs.push(boundary);
        report = report.merge(check_inputs(&inputs, 40, 27, |g, v| {
            let targets = LossTargets {
                interior: g.input(target.clone()),
                boundary: Some(g.input(bt.clone())),
            };
            Ok(total_loss(g, &v[..3], Some(v[3]), &targets, 3.0)?.0)
        }));
    }
    report
}

pub fn random_binary(r: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_vec(h, w, (0..h * w).map(|_| r.random_bool(p)).collect()).unwrap()
}

pub fn points(m: &BinaryMask) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

/// Mean of the two directed mean nearest-neighbour distances, by exhaustive search.
pub fn brute_avg_hausdorff(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (pa, pb) = (points(a), points(b));
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(v, u)| ((y - v).powi(2) + (x - u).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    (directed(&pa, &pb) + directed(&pb, &pa)) / 2.0
}

fn pixel_set<L: Copy + Default + PartialEq>(m: &cto::mask::Mask<L>, pred: impl Fn(L) -> bool) -> BTreeSet<(usize, usize)> {
    let mut s = BTreeSet::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if pred(m.get(y, x)) {
                s.insert((y, x));
            }
        }
    }
    s
}

pub fn ratio(n: usize, d: usize) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Dice and IoU from explicit set intersection and union.
pub fn set_dice_iou(a: &BinaryMask, b: &BinaryMask) -> (BigRational, BigRational) {
    let (sa, sb) = (pixel_set(a, |v| v), pixel_set(b, |v| v));
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    if union == 0 {
        return (ratio(1, 1), ratio(1, 1));
    }
    (ratio(2 * inter, sa.len() + sb.len()), ratio(inter, union))
}

/// PQ straight from its definition: every (pred, gt) instance pair is
/// compared and pairs with IoU > 1/2 are matches.
pub fn direct_pq(pred: &InstanceMap, gt: &InstanceMap) -> BigRational {
    let instances = |m: &InstanceMap| {
        let mut by_id: BTreeMap<u32, BTreeSet<(usize, usize)>> = BTreeMap::new();
        for y in 0..m.height() {
            for x in 0..m.width() {
                let id = m.get(y, x);
                if id != 0 {
                    by_id.entry(id).or_default().insert((y, x));
                }
            }
        }
        by_id
    };
    let (p, g) = (instances(pred), instances(gt));
    if p.is_empty() && g.is_empty() {
        return ratio(1, 1);
    }
    let half = ratio(1, 2);
    let mut iou_sum = ratio(0, 1);
    let mut tp = 0;
    for ps in p.values() {
        for gs in g.values() {
            let inter = ps.intersection(gs).count();
            let iou = ratio(inter, ps.union(gs).count());
            if iou > half {
                tp += 1;
                iou_sum += iou;
            }
        }
    }
    let (fp, fn_) = (p.len() - tp, g.len() - tp);
    let denom = BigRational::from_integer(BigInt::from(tp)) + ratio(fp + fn_, 2);
    iou_sum / denom
}

/// Instance map of up to four overlapping rectangles (later ones on top).
pub fn random_instances(r: &mut ChaCha8Rng, h: usize, w: usize) -> InstanceMap {
    let mut m = InstanceMap::new(h, w);
    for id in 1..=r.random_range(0..=4u32) {
        let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
        let (y1, x1) = (r.random_range(y0..h) + 1, r.random_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, id);
            }
        }
    }
    m
}

/// `gt` with a few pixels flipped, ids relabelled and an optional shift, so
/// that matches sit on both sides of the 1/2 threshold.
pub fn perturbed_instances(r: &mut ChaCha8Rng, gt: &InstanceMap) -> InstanceMap {
    let (h, w) = gt.dims();
    let (dy, dx) = (r.random_range(0..2usize), r.random_range(0..2usize));
    let offset = r.random_range(0..3u32);
    let mut m = InstanceMap::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let src = gt.get(y.saturating_sub(dy), x.saturating_sub(dx));
            let v = if r.random_bool(0.1) { r.random_range(0..6) } else { src };
            m.set(y, x, if v == 0 { 0 } else { v + offset });
        }
    }
    m
}
