//! Release acceptance: every criterion runs, prints one PASS/FAIL line, and
//! the test fails if any criterion does.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use num_rational::BigRational;
use num_traits::One;
use rand::seq::SliceRandom;
use rand::Rng;

use common::*;
use cto::bem::{SOBEL_X, SOBEL_Y};
use cto::checkpoint::Checkpoint;
use cto::data::{boundary_from_mask, make_batch, synth_dataset, Sample};
use cto::eval::evaluate;
use cto::losses::{ce_loss, dice_loss, miou_loss, probabilities, total_loss, LossTargets, DEFAULT_ALPHA};
use cto::mask::{BinaryMask, LabelMask};
use cto::metrics::{avg_hausdorff, dice_iou, panoptic_quality};
use cto::nn::Module;
use cto::train::{StepLog, TrainConfig, Trainer};
use cto::{Graph, ModelConfig, Tensor, Variant};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    match &outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(detail) => println!("FAIL  {name}: {detail}"),
    }
    outcome.is_ok()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let suites: [(&str, fn() -> GradCheck, f64); 5] = [
        ("backbone", backbone_gradients, 1e-3),
        ("lightvit", lightvit_gradients, 1e-3),
        ("bem", bem_gradients, 1e-3),
        ("bim_decoder", decoder_gradients, 1e-3),
        ("losses", loss_gradients, 1e-4),
    ];
    let mut parts = Vec::new();
    for (name, suite, tol) in suites {
        let check = suite();
        ensure(check.checked > 0, format!("{name}: nothing checked"))?;
        ensure(
            check.max_rel < tol,
            format!("{name}: max rel {:.3e} >= {tol:e} at {}", check.max_rel, check.worst),
        )?;
        parts.push(format!("{name} {:.1e} ({} entries)", check.max_rel, check.checked));
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!("{} in {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

fn shape_contract() -> Outcome {
    let cfg = ModelConfig {
        image_size: 256,
        ..ModelConfig::tiny(Variant::Full)
    };
    let mut model = cto::Model32::new(&cfg, &mut rng(40)).map_err(|e| e.to_string())?;
    let x = Tensor::randn(&[1, 3, 256, 256], 1.0, &mut rng(41));
    let mut g = Graph::new(false);
    let xv = g.input(x.clone());
    let pyramid = model.backbone.forward(&mut g, xv).map_err(|e| e.to_string())?;
    let sides: Vec<(usize, usize)> = pyramid
        .levels
        .iter()
        .map(|&l| (g.shape(l)[2], g.shape(l)[3]))
        .collect();
    ensure(sides == [(64, 64), (32, 32), (16, 16), (8, 8)], format!("pyramid {sides:?}"))?;
    let xv = g.input(x);
    let out = model.forward(&mut g, xv).map_err(|e| e.to_string())?;
    let vit = out.vit.as_ref().ok_or("no transformer output")?;
    let tokens: Vec<usize> = vit.branch_tokens.iter().map(|t| t.len()).collect();
    ensure(tokens == [256, 64, 16, 4], format!("token counts {tokens:?}"))?;
    ensure(out.interior.len() == 3, format!("{} interior heads", out.interior.len()))?;
    for &h in &out.interior {
        ensure(g.shape(h) == [1, 1, 256, 256], format!("interior head {:?}", g.shape(h)))?;
    }
    let b = out.boundary.ok_or("no boundary head")?;
    ensure(g.shape(b) == [1, 1, 64, 64], format!("boundary head {:?}", g.shape(b)))?;
    Ok(format!(
        "pyramid {{64,32,16,8}}, tokens {tokens:?}, 3 interior heads + boundary {:?}",
        g.shape(b)
    ))
}

fn loss_composition() -> Outcome {
    ensure(DEFAULT_ALPHA == 3.0, "default alpha is not 3")?;
    let mut r = rng(42);
    let heads: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[2, 1, 16, 16], 2.0, &mut r)).collect();
    let boundary = Tensor::randn(&[2, 1, 4, 4], 2.0, &mut r);
    let y = Tensor::from_vec(&[2, 1, 16, 16], (0..512).map(|_| r.random_range(0..2) as f64).collect()).unwrap();
    let yb = Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|_| r.random_range(0..2) as f64).collect()).unwrap();

    let mut g = Graph::new(true);
    let hv: Vec<_> = heads.iter().map(|h| g.input(h.clone())).collect();
    let bv = g.input(boundary.clone());
    let targets = LossTargets {
        interior: g.input(y.clone()),
        boundary: Some(g.input(yb.clone())),
    };
    let (total, breakdown) = total_loss(&mut g, &hv, Some(bv), &targets, DEFAULT_ALPHA).map_err(|e| e.to_string())?;
    let total = g.value(total).item();

    // each component evaluated on its own graph, summed in the same order
    let component = |logits: &Tensor<f64>, target: &Tensor<f64>, which: u8| {
        let mut g = Graph::new(true);
        let l = g.input(logits.clone());
        let t = g.input(target.clone());
        let v = match which {
            0 => {
                let p = probabilities(&mut g, l).unwrap();
                ce_loss(&mut g, p, t).unwrap()
            }
            1 => {
                let p = probabilities(&mut g, l).unwrap();
                miou_loss(&mut g, p, t).unwrap()
            }
            _ => {
                let p = g.sigmoid(l);
                dice_loss(&mut g, p, t).unwrap()
            }
        };
        g.value(v).item()
    };
    let mut sum: Option<f64> = None;
    for h in &heads {
        let head = component(h, &y, 0) + component(h, &y, 1);
        sum = Some(sum.map_or(head, |s| s + head));
    }
    let recomposed = sum.unwrap() + DEFAULT_ALPHA * component(&boundary, &yb, 2);
    ensure(
        total.to_bits() == recomposed.to_bits(),
        format!("total {total:e} vs recomposed {recomposed:e}"),
    )?;

    // closed-form oracle in plain arithmetic
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let eps = cto::losses::EPS;
    let mut oracle = 0.0;
    for h in &heads {
        let p: Vec<f64> = h.data().iter().map(|&v| sig(v)).collect();
        let n = p.len() as f64;
        let ce = -p
            .iter()
            .zip(y.data())
            .map(|(&p, &t)| {
                let p = p.clamp(eps, 1.0 - eps);
                t * p.ln() + (1.0 - t) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / n;
        let inter: f64 = p.iter().zip(y.data()).map(|(p, t)| p * t).sum();
        let union: f64 = p.iter().zip(y.data()).map(|(p, t)| p + t - p * t).sum();
        oracle += ce + 1.0 - inter / (union + eps);
    }
    let pb: Vec<f64> = boundary.data().iter().map(|&v| sig(v)).collect();
    let inter: f64 = pb.iter().zip(yb.data()).map(|(p, t)| p * t).sum();
    let mass: f64 = pb.iter().chain(yb.data()).sum();
    oracle += DEFAULT_ALPHA * (1.0 - 2.0 * inter / (mass + eps));
    ensure(
        ((total - oracle) / oracle).abs() < 1e-12,
        format!("closed form {oracle:e} vs {total:e}"),
    )?;
    ensure(breakdown.ce_per_head.len() == 3 && breakdown.boundary_dice.is_some(), "breakdown incomplete")?;
    Ok(format!("total {total:.6} bitwise equal to recomposition; closed form within 1e-12"))
}

fn hand_values() -> Outcome {
    let eval = |which: u8| {
        let mut g = Graph::<f64>::new(true);
        let p = g.input(Tensor::from_vec(&[1, 1, 1, 2], vec![0.5, 0.5]).unwrap());
        let y = g.input(Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap());
        let v = match which {
            0 => ce_loss(&mut g, p, y),
            1 => miou_loss(&mut g, p, y),
            _ => dice_loss(&mut g, p, y),
        }
        .unwrap();
        g.value(v).item()
    };
    let (ce, miou, dice) = (eval(0), eval(1), eval(2));
    ensure((ce - 0.6931).abs() <= 1e-4, format!("CE {ce}"))?;
    ensure((miou - 2.0 / 3.0).abs() <= 1e-6, format!("mIoU loss {miou}"))?;
    ensure((dice - 0.5).abs() <= 1e-6, format!("Dice loss {dice}"))?;
    Ok(format!("CE {ce:.6}, mIoU {miou:.8}, Dice {dice:.8}"))
}

fn metric_oracles() -> Outcome {
    let mut r = rng(43);
    for i in 0..1000 {
        let p = r.random_range(0.0..1.0);
        let (a, b) = (random_binary(&mut r, 4, 4, p), random_binary(&mut r, 4, 4, p));
        let (dice, iou) = dice_iou::<BigRational>(&a, &b).map_err(|e| e.to_string())?;
        let (od, oi) = set_dice_iou(&a, &b);
        ensure(dice == od && iou == oi, format!("pair {i}: {dice}/{iou} vs {od}/{oi}"))?;
        let two = BigRational::one() + BigRational::one();
        ensure(
            dice == &two * &iou / (BigRational::one() + &iou),
            format!("pair {i}: dice != 2 iou / (1 + iou)"),
        )?;
    }
    let mut worst_hd: f64 = 0.0;
    let mut done = 0;
    while done < 200 {
        let p = r.random_range(0.05..0.6);
        let (a, b) = (random_binary(&mut r, 8, 8, p), random_binary(&mut r, 8, 8, p));
        if a.foreground() == 0 || b.foreground() == 0 {
            continue;
        }
        let fast: f64 = avg_hausdorff(&a, &b).map_err(|e| e.to_string())?;
        worst_hd = worst_hd.max((fast - brute_avg_hausdorff(&a, &b)).abs());
        done += 1;
    }
    ensure(worst_hd < 1e-9, format!("HD differs by {worst_hd:e}"))?;
    let mut matched = 0;
    for i in 0..200 {
        let gt = random_instances(&mut r, 10, 10);
        let pred = perturbed_instances(&mut r, &gt);
        let pq = panoptic_quality::<BigRational>(&pred, &gt).map_err(|e| e.to_string())?;
        let direct = direct_pq(&pred, &gt);
        ensure(pq.pq == direct, format!("map {i}: PQ {} vs {}", pq.pq, direct))?;
        matched += pq.true_positives;
    }
    Ok(format!(
        "1000 Dice/IoU pairs exact, 200 HD pairs within {worst_hd:.1e}, 200 PQ maps exact ({matched} matches)"
    ))
}

struct Overfit {
    trainer: Trainer<f32>,
    dice: f64,
    elapsed: Duration,
}

fn overfit_run() -> cto::Result<Overfit> {
    let data = synth_dataset(8, 64, 0, 1)?;
    let config = TrainConfig {
        epochs: 100,
        ..TrainConfig::desk()
    };
    let start = Instant::now();
    let mut trainer = Trainer::<f32>::new(&ModelConfig::tiny(Variant::Full), config)?;
    trainer.fit(&data, &mut |_| {})?;
    let dice = evaluate(&mut trainer.model, &data)?.dice.mean.unwrap_or(0.0);
    Ok(Overfit {
        trainer,
        dice,
        elapsed: start.elapsed(),
    })
}

fn overfit(run: &Result<Overfit, String>) -> Outcome {
    let o = run.as_ref().map_err(|e| e.clone())?;
    let steps = o.trainer.step_count();
    ensure(steps <= 200, format!("{steps} steps"))?;
    ensure(o.trainer.adam.config.lr == 1e-4, "learning rate is not 1e-4")?;
    ensure(o.elapsed < Duration::from_secs(600), format!("took {:?}", o.elapsed))?;
    ensure(o.dice >= 0.95, format!("train Dice {:.4} after {steps} steps", o.dice))?;
    Ok(format!(
        "train Dice {:.4} after {steps} steps at lr 1e-4 in {:.1}s",
        o.dice,
        o.elapsed.as_secs_f64()
    ))
}

fn frozen_sobel(run: &Result<Overfit, String>) -> Outcome {
    let o = run.as_ref().map_err(|e| e.clone())?;
    let steps = o.trainer.step_count();
    ensure(steps >= 100, format!("only {steps} steps"))?;
    let sobel = o
        .trainer
        .model
        .boundary
        .as_ref()
        .and_then(|b| b.sobel())
        .ok_or("model has no Sobel kernels")?;
    let expect = |k: [[i8; 3]; 3]| -> Vec<u32> { k.iter().flatten().map(|&v| (v as f32).to_bits()).collect() };
    let bits = |t: &Tensor<f32>| -> Vec<u32> { t.data().iter().map(|v| v.to_bits()).collect() };
    ensure(bits(sobel.kx()) == expect(SOBEL_X), format!("K_x changed: {:?}", sobel.kx().data()))?;
    ensure(bits(sobel.ky()) == expect(SOBEL_Y), format!("K_y changed: {:?}", sobel.ky().data()))?;
    Ok(format!("K_x and K_y bitwise intact after {steps} Adam steps"))
}

fn ablation() -> Outcome {
    let data = synth_dataset(2, 64, 44, 1).map_err(|e| e.to_string())?;
    let refs: Vec<&Sample> = data.iter().collect();
    let mut lines = Vec::new();
    for v in Variant::ALL {
        let mut trainer =
            Trainer::<f32>::new(&ModelConfig::tiny(v), TrainConfig::desk()).map_err(|e| format!("{v}: {e}"))?;
        let batch = make_batch(&refs, 1).map_err(|e| e.to_string())?;
        let loss = trainer.train_step(&batch).map_err(|e| format!("{v}: {e}"))?;
        ensure(loss.total.is_finite(), format!("{v}: loss {}", loss.total))?;
        ensure(loss.ce_per_head.len() == 3, format!("{v}: {} heads", loss.ce_per_head.len()))?;
        ensure(
            loss.boundary_dice.is_some() == v.boundary().is_some(),
            format!("{v}: boundary term presence"),
        )?;
        let mut g = Graph::new(false);
        let x = g.input(batch.images.clone());
        let out = trainer.model.forward(&mut g, x).map_err(|e| e.to_string())?;
        ensure(out.interior.len() == 3, format!("{v}: interior heads"))?;
        ensure(out.boundary.is_some() == v.boundary().is_some(), format!("{v}: boundary head"))?;
        lines.push(format!("{v} {}{:.3}", if out.boundary.is_some() { "3+1 " } else { "3 " }, loss.total));
    }
    Ok(lines.join(", "))
}

fn trainer(seed: u64, epochs: usize, dir: Option<std::path::PathBuf>) -> Trainer<f32> {
    let config = TrainConfig {
        seed,
        epochs,
        checkpoint_dir: dir,
        ..TrainConfig::desk()
    };
    Trainer::new(&ModelConfig::tiny(Variant::Full), config).unwrap()
}

fn params(t: &Trainer<f32>) -> Vec<u32> {
    let mut v = Vec::new();
    t.model.visit_params(&mut |p| v.extend(p.value().data().iter().map(|x| x.to_bits())));
    t.model.visit_buffers(&mut |_, b| v.extend(b.data().iter().map(|x| x.to_bits())));
    v
}

fn determinism() -> Outcome {
    let data = synth_dataset(8, 64, 45, 1).map_err(|e| e.to_string())?;
    let step10 = || {
        let mut t = trainer(7, 5, None);
        let logs = t.fit(&data, &mut |_| {}).unwrap();
        logs.into_iter().find(|l| l.step == 10).expect("ten steps").loss
    };
    let (a, b) = (step10(), step10());
    ensure(a == b, format!("step-10 losses differ: {} vs {}", a.total, b.total))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut straight = trainer(7, 2, None);
    let full: Vec<StepLog> = straight.fit(&data, &mut |_| {}).map_err(|e| e.to_string())?;
    let mut first = trainer(7, 1, Some(dir.path().to_path_buf()));
    first.fit(&data, &mut |_| {}).map_err(|e| e.to_string())?;
    drop(first);
    let ckpt = Checkpoint::read(&cto::train::checkpoint_path(dir.path(), 1)).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::<f32>::resume(&ckpt).map_err(|e| e.to_string())?;
    resumed.config.epochs = 2;
    let second = resumed.fit(&data, &mut |_| {}).map_err(|e| e.to_string())?;
    let uninterrupted: Vec<&StepLog> = full.iter().filter(|l| l.epoch == 2).collect();
    ensure(
        second.iter().collect::<Vec<_>>() == uninterrupted,
        "epoch-2 losses differ after resume",
    )?;
    ensure(params(&resumed) == params(&straight), "final parameters differ after resume")?;
    Ok(format!(
        "step-10 loss {:.6} reproduced; resumed epoch 2 matches bitwise ({} steps)",
        a.total,
        second.len()
    ))
}

fn boundary_gt() -> Outcome {
    let mut square = LabelMask::new(8, 8);
    for y in 2..6 {
        for x in 2..6 {
            square.set(y, x, 1);
        }
    }
    let b = boundary_from_mask(&square, 1);
    let mut expected = BinaryMask::new(8, 8);
    for y in 2..6 {
        for x in 2..6 {
            expected.set(y, x, y == 2 || y == 5 || x == 2 || x == 5);
        }
    }
    ensure(b == expected, "square boundary is not its perimeter")?;
    ensure(b.foreground() == 12, format!("{} boundary pixels", b.foreground()))?;
    let mut r = rng(46);
    for i in 0..100 {
        let (h, w) = (r.random_range(3..12), r.random_range(3..12));
        let mask = LabelMask::from_vec(h, w, (0..h * w).map(|_| r.random_range(0..4u8)).collect()).unwrap();
        let mut perm: Vec<u8> = (1..4).collect();
        perm.shuffle(&mut r);
        let relabelled = mask.map(|v| if v == 0 { 0 } else { perm[v as usize - 1] });
        let width = r.random_range(1..3);
        ensure(
            boundary_from_mask(&mask, width) == boundary_from_mask(&relabelled, width),
            format!("mask {i} changes under {perm:?}"),
        )?;
    }
    Ok("4x4 square -> 12 perimeter pixels; 100 masks invariant under class relabelling".into())
}

fn main() {
    let overfit_result = catch_unwind(overfit_run)
        .map_err(|_| "overfit run panicked".to_string())
        .and_then(|r| r.map_err(|e| e.to_string()));
    let results = [
        run("gradient suite", gradient_suite),
        run("shape contract", shape_contract),
        run("frozen Sobel operator", || frozen_sobel(&overfit_result)),
        run("loss composition", loss_composition),
        run("hand values", hand_values),
        run("metric oracles", metric_oracles),
        run("overfit convergence", || overfit(&overfit_result)),
        run("ablation buildability", ablation),
        run("determinism and resume", determinism),
        run("boundary ground truth", boundary_gt),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
