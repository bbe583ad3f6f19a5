//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if a property criterion fails, or any criterion under
//! `CORANET_ACCEPTANCE_STRICT=1`.
//!
//! Criteria can be selected by number: `cargo test --test acceptance -- 1 4 10`.

use std::process::ExitCode;
use std::time::Instant;

use coranet::data::{generate, DatasetSplit, Ratio, Sample, SyntheticConfig};
use coranet::experiment::{build_split, ExperimentConfig};
use coranet::losses::{
    certain_region_loss, certain_region_loss_grad, certain_region_objective, consistency_loss, consistency_loss_grad,
    consistency_objective, crm_objective, weighted_cross_entropy, weighted_cross_entropy_grad, ClassWeights,
};
use coranet::metrics::{confusion_counts, csi, dice, hausdorff, ppv, tpr, Counts};
use coranet::model::{build_model_with, HeadInit, LabelMap, Mode, ModelConfig, ModelState, ProbMap, SegNet};
use coranet::nn::{softmax_backward, softmax_channels, Module, ParamKind};
use coranet::tensor::Tensor;
use coranet::trainer::{ema_update, evaluate, relabel, Trainer, Variant};
use coranet::uncertainty::{make_masks, mask_quality, quality_from_counts, softmax_threshold_mask, RegionMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-3;
const FD_TOL: f64 = 1e-4;
const FD_COORDS: usize = 200;
const FD_SHARE: f64 = 0.99;
// Central differences through ReLU and max-pool switch sides for many
// coordinates at 1e-3; the network-level check uses a step below the kink scale.
const NET_STEP: f64 = 1e-6;

fn tiny_config() -> ModelConfig {
    ModelConfig::new(&[4, 4, 8, 8], 2).with_head_width(4)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, side: usize) -> (Tensor<f64>, Vec<LabelMap>) {
    let cfg = SyntheticConfig {
        height: side,
        width: side,
        n_images: n,
        seed: rng.random(),
        area_lo: 0.15,
        area_hi: 0.4,
        ..SyntheticConfig::default()
    };
    let samples = generate(&cfg).expect("valid generator settings");
    let data: Vec<Vec<f64>> = samples.iter().map(|s| s.image.data().iter().map(|&v| v as f64).collect()).collect();
    let refs: Vec<&[f64]> = data.iter().map(|d| d.as_slice()).collect();
    (Tensor::stack(&refs, 1, side, side), samples.into_iter().map(|s| s.label).collect())
}

fn random_mask(rng: &mut ChaCha8Rng, side: usize, p_on: f64) -> RegionMask {
    RegionMask::new(side, side, (0..side * side).map(|_| u8::from(rng.random_bool(p_on))).collect()).unwrap()
}

fn relative(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Share of sampled coordinates of `x` whose analytic derivative matches the
/// central difference, and the worst relative error.
fn flat_share(x: &[f64], analytic: &[f64], step: f64, rng: &mut ChaCha8Rng, f: impl Fn(&[f64]) -> f64) -> (f64, f64) {
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..FD_COORDS {
        let i = rng.random_range(0..x.len());
        let at = |d: f64| {
            let mut y = x.to_vec();
            y[i] += d;
            f(&y)
        };
        let rel = relative(analytic[i], (at(step) - at(-step)) / (2.0 * step));
        worst = worst.max(rel);
        ok += usize::from(rel < FD_TOL);
    }
    (ok as f64 / FD_COORDS as f64, worst)
}

fn probs(logits: &[f64], side: usize) -> ProbMap<f64> {
    let t = softmax_channels(&Tensor::from_vec(&[1, 2, side, side], logits.to_vec()));
    ProbMap::new(2, side, side, t.into_data()).unwrap()
}

/// `dL/dlogits` from `dL/dp` through the softmax.
fn through_softmax(p: &ProbMap<f64>, dp: &ProbMap<f64>, side: usize) -> Vec<f64> {
    let t = |m: &ProbMap<f64>| Tensor::from_vec(&[1, 2, side, side], m.data().to_vec());
    softmax_backward(&t(p), &t(dp)).into_data()
}

/// The three losses as functions of head logits on one random instance.
fn loss_level_checks(rng: &mut ChaCha8Rng) -> [(f64, f64); 3] {
    let side = 16;
    let n = 2 * side * side;
    let mut logits = || (0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
    let (zn, zc, zr, zt) = (logits(), logits(), logits(), logits());
    let y = random_labels(rng, side, side, 0.35);
    let certain = random_mask(rng, side, 0.7);
    let uncertain = certain.complement();
    let teacher = probs(&zt, side);
    let weights = [
        ClassWeights::uniform(2),
        ClassWeights::conservative(5.0).unwrap(),
        ClassWeights::radical(5.0).unwrap(),
    ];

    let crm_value = |z: &[f64]| {
        (0..3)
            .map(|h| weighted_cross_entropy(&probs(&z[h * n..(h + 1) * n], side), &y, &weights[h]).unwrap().value)
            .sum::<f64>()
    };
    let crm_x: Vec<f64> = [zn.clone(), zc, zr].concat();
    let crm_grad: Vec<f64> = (0..3)
        .flat_map(|h| {
            let p = probs(&crm_x[h * n..(h + 1) * n], side);
            let (_, dp) = weighted_cross_entropy_grad(&p, &y, &weights[h]).unwrap();
            through_softmax(&p, &dp, side)
        })
        .collect();
    let crm = flat_share(&crm_x, &crm_grad, FD_STEP, rng, crm_value);

    let p = probs(&zn, side);
    let (_, dp) = certain_region_loss_grad(&p, &y, &certain).unwrap();
    let csn = flat_share(&zn, &through_softmax(&p, &dp, side), FD_STEP, rng, |z| {
        certain_region_loss(&probs(z, side), &y, &certain).unwrap().value
    });
    let (_, dp) = consistency_loss_grad(&p, &teacher, &uncertain).unwrap();
    let cnt = flat_share(&zn, &through_softmax(&p, &dp, side), FD_STEP, rng, |z| {
        consistency_loss(&probs(z, side), &teacher, &uncertain).unwrap().value
    });
    [crm, csn, cnt]
}

/// The same losses differentiated through the whole network with respect to
/// sampled weights of every parameter group.
fn network_share<M: Module<f64> + Clone>(
    params: &M,
    rng: &mut ChaCha8Rng,
    loss_and_grad: impl Fn(&M) -> (f64, Vec<(String, Tensor<f64>)>),
) -> (f64, f64) {
    let (_, grads) = loss_and_grad(params);
    let mut flat = Vec::new();
    let mut analytic = Vec::new();
    let mut names = Vec::new();
    for (name, kind, t) in params.tensors() {
        if kind != ParamKind::Weight {
            continue;
        }
        let g = grads.iter().find(|(n, _)| *n == name).map(|(_, g)| g.data().to_vec());
        for (i, &v) in t.data().iter().enumerate() {
            flat.push(v);
            analytic.push(g.as_ref().map_or(0.0, |g| g[i]));
            names.push((name.clone(), i));
        }
    }
    let rebuild = |x: &[f64]| {
        let mut p = params.clone();
        let mut pos = 0;
        for (_, kind, t) in p.tensors_mut() {
            if kind != ParamKind::Weight {
                continue;
            }
            let len = t.len();
            t.data_mut().copy_from_slice(&x[pos..pos + len]);
            pos += len;
        }
        p
    };
    flat_share(&flat, &analytic, NET_STEP, rng, |x| loss_and_grad(&rebuild(x)).0)
}

fn named(grads: &impl Module<f64>) -> Vec<(String, Tensor<f64>)> {
    grads.tensors().into_iter().map(|(n, _, t)| (n, t.clone())).collect()
}

fn network_level_checks(rng: &mut ChaCha8Rng) -> [(f64, f64); 3] {
    let model: ModelState<f64> = build_model_with(5, &tiny_config(), HeadInit::Independent).unwrap();
    let teacher: SegNet<f64> = build_model_with::<f64>(6, &tiny_config(), HeadInit::Independent).unwrap().into_segnet();
    let (x, y) = random_batch(rng, 2, 16);
    let refs: Vec<&LabelMap> = y.iter().collect();
    let certain: Vec<RegionMask> = (0..2).map(|_| random_mask(rng, 16, 0.7)).collect();
    let uncertain: Vec<RegionMask> = certain.iter().map(|m| m.complement()).collect();
    let teacher_probs = teacher.forward_batch(&x, Mode::Eval).unwrap().normal.unwrap().probs().clone();
    let crm = network_share(&model, rng, |m| {
        let (o, _) = crm_objective(m, &x, &refs, 5.0, Mode::Train).unwrap();
        (o.loss.value, named(&o.grads))
    });
    let masks_c: Vec<&RegionMask> = certain.iter().collect();
    let csn = network_share(&model.net, rng, |n| {
        let o = certain_region_objective(n, &x, &refs, &masks_c, Mode::Train).unwrap();
        (o.loss.value, named(&o.grads))
    });
    let masks_u: Vec<&RegionMask> = uncertain.iter().collect();
    let cnt = network_share(&model.net, rng, |n| {
        let o = consistency_objective(n, &x, &teacher_probs, &masks_u, Mode::Train).unwrap();
        (o.loss.value, named(&o.grads))
    });
    [crm, csn, cnt]
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let losses = loss_level_checks(&mut rng);
    let network = network_level_checks(&mut rng);
    let pass = losses.iter().chain(&network).all(|r| r.0 >= FD_SHARE);
    let fmt = |r: &[(f64, f64); 3]| {
        ["crm", "c-sn", "cnt"]
            .iter()
            .zip(r)
            .map(|(n, (s, w))| format!("{n} {:.1}% (worst {w:.1e})", 100.0 * s))
            .collect::<Vec<_>>()
            .join(", ")
    };
    outcome(
        pass,
        format!(
            "share within {FD_TOL:e}, need >= {:.0}%: logits at step {FD_STEP:e}: {}; network weights at step {NET_STEP:e}: {}",
            100.0 * FD_SHARE,
            fmt(&losses),
            fmt(&network)
        ),
    )
}

// ---------------------------------------------------------------- masks

fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, p_fg: f64) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| u8::from(rng.random_bool(p_fg))).collect()).unwrap()
}

fn criterion_mask_partition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..33), rng.random_range(1..33));
        let (pa, pb) = (rng.random::<f64>(), rng.random::<f64>());
        let (a, b) = (random_labels(&mut rng, h, w, pa), random_labels(&mut rng, h, w, pb));
        let (u, c) = make_masks(&a, &b).unwrap();
        let (u2, c2) = make_masks(&b, &a).unwrap();
        let (u3, c3) = make_masks(&a, &b).unwrap();
        let and_zero = u.data().iter().zip(c.data()).all(|(x, y)| x & y == 0);
        let or_one = u.data().iter().zip(c.data()).all(|(x, y)| x | y == 1);
        if !and_zero || !or_one || (u2, c2) != (u.clone(), c.clone()) || (u3, c3) != (u, c) {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{violations} violations over 1000 pairs"))
}

// ---------------------------------------------------------------- exclusivity

fn criterion_exclusivity() -> Outcome {
    let side = 12;
    let hw = side * side;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fg: Vec<f64> = (0..hw).map(|_| rng.random_range(0.05..0.95)).collect();
    let probs = |fg: &[f64]| {
        let mut d: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
        d.extend_from_slice(fg);
        ProbMap::new(2, side, side, d).unwrap()
    };
    let teacher: Vec<f64> = (0..hw).map(|_| rng.random_range(0.05..0.95)).collect();
    let pseudo = random_labels(&mut rng, side, side, 0.4);
    // A disc of certain pixels with a ragged edge.
    let certain = RegionMask::new(
        side,
        side,
        (0..hw)
            .map(|z| {
                let (r, c) = ((z / side) as f64 - 5.5, (z % side) as f64 - 5.5);
                u8::from(r * r + c * c < 16.0 + (z % 3) as f64)
            })
            .collect(),
    )
    .unwrap();
    let uncertain = certain.complement();
    let base = probs(&fg);
    let csn0 = certain_region_loss(&base, &pseudo, &certain).unwrap().value;
    let cnt0 = consistency_loss(&base, &probs(&teacher), &uncertain).unwrap().value;
    let (mut leak, mut missing) = (0, 0);
    let mut max_leak: f64 = 0.0;
    for z in 0..hw {
        let mut moved = fg.clone();
        moved[z] += 1e-3;
        let p = probs(&moved);
        let d_csn = (certain_region_loss(&p, &pseudo, &certain).unwrap().value - csn0).abs();
        let d_cnt = (consistency_loss(&p, &probs(&teacher), &uncertain).unwrap().value - cnt0).abs();
        let (inside, outside) = if certain.data()[z] == 1 { (d_csn, d_cnt) } else { (d_cnt, d_csn) };
        max_leak = max_leak.max(outside);
        if outside > 1e-9 {
            leak += 1;
        }
        if inside <= 1e-9 {
            missing += 1;
        }
    }
    outcome(
        leak == 0 && missing == 0,
        format!(
            "{} certain / {} uncertain pixels: {leak} leaking (max {max_leak:.1e}), {missing} without effect",
            certain.count(),
            uncertain.count()
        ),
    )
}

// ---------------------------------------------------------------- EMA

fn sup_distance(a: &SegNet<f64>, b: &SegNet<f64>) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|((_, _, x), (_, _, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

fn criterion_ema() -> Outcome {
    let student: SegNet<f64> = build_model_with::<f64>(1, &tiny_config(), HeadInit::Independent).unwrap().into_segnet();
    let mut teacher: SegNet<f64> = build_model_with::<f64>(2, &tiny_config(), HeadInit::Independent).unwrap().into_segnet();
    let d0 = sup_distance(&student, &teacher);
    let mut prev = d0;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        ema_update(&student, &mut teacher, 0.99).unwrap();
        let d = sup_distance(&student, &teacher);
        worst = worst.max((d / prev - 0.99).abs());
        prev = d;
    }
    outcome(
        worst <= 1e-7,
        format!("distance {d0:.4} -> {prev:.4e} after 100 steps; worst per-step factor deviation {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- metrics

fn brute_hausdorff(a: &LabelMap, b: &LabelMap) -> Option<f64> {
    let pts = |m: &LabelMap| -> Vec<(f64, f64)> {
        (0..m.len())
            .filter(|&z| m.data()[z] == 1)
            .map(|z| ((z / m.width()) as f64, (z % m.width()) as f64))
            .collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|p| to.iter().map(|q| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)).sqrt())
}

fn criterion_metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut count_err, mut hd_err, mut ratio_err) = (0, 0, 0);
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        (None, None) => true,
        _ => false,
    };
    for i in 0..1000 {
        let (pa, pb) = if i % 10 == 0 { (0.0, rng.random()) } else { (rng.random(), rng.random()) };
        let (pred, truth) = (random_labels(&mut rng, 16, 16, pa), random_labels(&mut rng, 16, 16, pb));
        let mut naive = Counts::default();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p, t) {
                (1, 1) => naive.tp += 1,
                (1, 0) => naive.fp += 1,
                (0, 1) => naive.fn_ += 1,
                _ => naive.tn += 1,
            }
        }
        let c = confusion_counts(&pred, &truth, 1).unwrap();
        if c != naive {
            count_err += 1;
        }
        if hausdorff(&pred, &truth, 1).unwrap() != brute_hausdorff(&pred, &truth) {
            hd_err += 1;
        }
        let q = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        let n = naive;
        let ok = close(ppv(&c), q(n.tp, n.tp + n.fp))
            && close(tpr(&c), q(n.tp, n.tp + n.fn_))
            && close(csi(&c), q(n.tp, n.tp + n.fp + n.fn_))
            && close(dice(&c), q(2 * n.tp, 2 * n.tp + n.fp + n.fn_));
        if !ok {
            ratio_err += 1;
        }
    }
    outcome(
        count_err + hd_err + ratio_err == 0,
        format!("1000 pairs: {count_err} count, {hd_err} Hausdorff, {ratio_err} ratio mismatches"),
    )
}

// ---------------------------------------------------------------- training

const SEEDS: [u64; 3] = [0, 1, 2];

fn seed_config(seed: u64, ratio: Ratio) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.train.seed = seed;
    cfg.split.ratio = ratio;
    cfg
}

fn pretrained(cfg: &ExperimentConfig) -> (Trainer, DatasetSplit) {
    let split = build_split(cfg).expect("benchmark split");
    let mut t = Trainer::new(cfg.train.clone(), cfg.data.classes).expect("trainer");
    while t.pretrain_done < cfg.train.pretrain_epochs {
        t.pretrain_epoch(&split).expect("pretraining");
    }
    (t, split)
}

fn finish(base: &Trainer, split: &DatasetSplit, variant: Variant) -> f64 {
    let mut t = base.clone();
    t.cfg.variant = variant;
    t.run(split, |_, _| Ok(())).expect("training");
    evaluate(t.final_net(), &split.test).expect("evaluation").mean_dsc().expect("foreground present")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Foreground recall of each auxiliary head over a sample set.
fn head_recall(model: &ModelState, samples: &[Sample]) -> (f64, f64) {
    let (mut con, mut rad) = (Counts::default(), Counts::default());
    for s in samples {
        let (_, pc, pr) = model.forward_all(&s.image).unwrap();
        let add = |acc: &mut Counts, y: &LabelMap| {
            let c = confusion_counts(y, &s.label, 1).unwrap();
            acc.tp += c.tp;
            acc.fn_ += c.fn_;
        };
        add(&mut con, &pc.argmax());
        add(&mut rad, &pr.argmax());
    }
    (tpr(&con).unwrap_or(0.0), tpr(&rad).unwrap_or(0.0))
}

/// Certain-region quality of a mask method: CSI of the pseudo labels inside
/// the certain region and the share of pixels the region covers.
#[derive(Clone, Copy)]
struct MaskScore {
    csi: f64,
    coverage: f64,
}

/// Disagreement masks against the softmax baseline at each threshold, pooled
/// over the unlabeled pool.
fn initial_mask_csi(model: &ModelState, split: &DatasetSplit, taus: &[f64]) -> (MaskScore, Vec<MaskScore>) {
    let cache = relabel(model, &split.unlabeled, 0).unwrap();
    let ours = MaskScore {
        csi: cache.quality(split.unlabeled_truth()).unwrap().csi.unwrap_or(0.0),
        coverage: 1.0 - cache.uncertain_fraction().unwrap_or(0.0),
    };
    let baseline = taus
        .iter()
        .map(|&tau| {
            let (mut pooled, mut kept, mut total) = (Counts::default(), 0usize, 0usize);
            for (x, truth) in split.unlabeled.iter().zip(split.unlabeled_truth()) {
                let p = model.net.forward(x).unwrap();
                let (certain, pseudo) = softmax_threshold_mask(&p, tau).unwrap();
                kept += certain.count();
                total += certain.data().len();
                let c = mask_quality(&certain, &pseudo, truth).unwrap().counts;
                pooled.tp += c.tp;
                pooled.fp += c.fp;
                pooled.fn_ += c.fn_;
            }
            MaskScore {
                csi: quality_from_counts(pooled).csi.unwrap_or(0.0),
                coverage: kept as f64 / total as f64,
            }
        })
        .collect();
    (ours, baseline)
}

#[derive(Default)]
struct Benchmark {
    dsc: Vec<(Variant, Vec<f64>)>,
    recall: Vec<(f64, f64)>,
    mask_csi: Vec<(MaskScore, Vec<MaskScore>)>,
    seconds: f64,
}

const TAUS: [f64; 3] = [0.5, 0.7, 0.9];
const ABLATION: [Variant; 4] = [Variant::Seg, Variant::SegSt, Variant::SegMt, Variant::Ours];

fn run_benchmark() -> Benchmark {
    let start = Instant::now();
    let mut b = Benchmark {
        dsc: ABLATION.iter().map(|&v| (v, Vec::new())).collect(),
        ..Benchmark::default()
    };
    for seed in SEEDS {
        let cfg = seed_config(seed, Ratio::ONE_TO_ONE);
        let (base, split) = pretrained(&cfg);
        let mut probe = base.clone();
        probe.recalibrate(&split).unwrap();
        b.recall.push(head_recall(&probe.model, &split.test));
        b.mask_csi.push(initial_mask_csi(&probe.model, &split, &TAUS));
        for (v, scores) in &mut b.dsc {
            scores.push(finish(&base, &split, *v));
        }
        eprintln!("  seed {seed} done after {:.0}s", start.elapsed().as_secs_f64());
    }
    b.seconds = start.elapsed().as_secs_f64();
    b
}

fn criterion_direction(b: &Benchmark) -> Outcome {
    let m = |v: Variant| mean(&b.dsc.iter().find(|(x, _)| *x == v).unwrap().1);
    let (seg, st, mt, ours) = (m(Variant::Seg), m(Variant::SegSt), m(Variant::SegMt), m(Variant::Ours));
    let pass = ours > st && st >= seg && ours > mt && mt >= seg && ours - seg >= 0.02;
    let per_seed: Vec<String> = b
        .dsc
        .iter()
        .map(|(v, s)| format!("{v} [{}]", s.iter().map(|d| format!("{:.2}", 100.0 * d)).collect::<Vec<_>>().join(" ")))
        .collect();
    outcome(
        pass,
        format!(
            "mean DSC seg {:.2}, seg+st {:.2}, seg+mt {:.2}, ours {:.2} (ours - seg = {:+.2}); per seed: {}; {:.0}s",
            100.0 * seg,
            100.0 * st,
            100.0 * mt,
            100.0 * ours,
            100.0 * (ours - seg),
            per_seed.join(", "),
            b.seconds
        ),
    )
}

fn criterion_ratio_trend(b: &Benchmark) -> Outcome {
    let start = Instant::now();
    let mut means = Vec::new();
    for ratio in ["1:4", "1:2"] {
        let r: Ratio = ratio.parse().unwrap();
        let scores: Vec<f64> = SEEDS
            .iter()
            .map(|&s| {
                let (base, split) = pretrained(&seed_config(s, r));
                finish(&base, &split, Variant::Ours)
            })
            .collect();
        means.push((ratio, mean(&scores)));
    }
    means.push(("1:1", mean(&b.dsc.iter().find(|(v, _)| *v == Variant::Ours).unwrap().1)));
    let pass = means.windows(2).all(|w| w[1].1 >= w[0].1);
    let text: Vec<String> = means.iter().map(|(r, d)| format!("{r} {:.2}", 100.0 * d)).collect();
    outcome(pass, format!("ours mean DSC {}; {:.0}s", text.join(", "), start.elapsed().as_secs_f64()))
}

fn criterion_cost_direction(b: &Benchmark) -> Outcome {
    let con = mean(&b.recall.iter().map(|r| r.0).collect::<Vec<_>>());
    let rad = mean(&b.recall.iter().map(|r| r.1).collect::<Vec<_>>());
    outcome(rad > con, format!("test foreground recall after pretraining: radical {rad:.4}, conservative {con:.4}"))
}

fn criterion_initial_masks(b: &Benchmark) -> Outcome {
    let avg = |f: &dyn Fn(&(MaskScore, Vec<MaskScore>)) -> f64| mean(&b.mask_csi.iter().map(f).collect::<Vec<_>>());
    let (ours, ours_cov) = (avg(&|r| r.0.csi), avg(&|r| r.0.coverage));
    let per_tau: Vec<(f64, f64)> = (0..TAUS.len()).map(|i| (avg(&|r| r.1[i].csi), avg(&|r| r.1[i].coverage))).collect();
    let best = per_tau.iter().map(|t| t.0).fold(f64::MIN, f64::max);
    let text: Vec<String> = TAUS
        .iter()
        .zip(&per_tau)
        .map(|(t, (c, cov))| format!("tau {t} {c:.4} (covers {:.1}%)", 100.0 * cov))
        .collect();
    outcome(
        ours >= best,
        format!(
            "certain-region CSI: disagreement {ours:.4} (covers {:.1}%); softmax {}",
            100.0 * ours_cov,
            text.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- discard

fn criterion_discard() -> Outcome {
    let cfg = ExperimentConfig::desk();
    let model = build_model_with::<f32>(9, &cfg.train.model_config(2), HeadInit::Independent).unwrap();
    let samples = generate(&SyntheticConfig {
        n_images: 100,
        seed: 77,
        ..cfg.data.clone()
    })
    .unwrap();
    let before: Vec<Vec<u32>> = samples
        .iter()
        .map(|s| model.forward_all(&s.image).unwrap().0.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let net = model.into_segnet();
    let differing = samples
        .iter()
        .zip(&before)
        .filter(|(s, b)| net.forward(&s.image).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>() != **b)
        .count();
    outcome(differing == 0, format!("{differing} of 100 test predictions differ after dropping the auxiliary heads"))
}

// ---------------------------------------------------------------- driver

/// Trained-benchmark outcomes. A failure here is reported but only fails the
/// run when `CORANET_ACCEPTANCE_STRICT=1`; the property criteria always do.
const BENCHMARK: [usize; 4] = [6, 7, 8, 9];
const STRICT_VAR: &str = "CORANET_ACCEPTANCE_STRICT";

const NAMES: [&str; 10] = [
    "gradient correctness",
    "mask partition",
    "loss exclusivity",
    "EMA contraction",
    "metric oracle equivalence",
    "end-to-end direction",
    "ratio trend",
    "cost-sensitivity direction",
    "initial-mask quality",
    "discard property",
];

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |id: usize| wanted.is_empty() || wanted.contains(&id);
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |id: usize, f: &dyn Fn() -> Outcome| {
        if run(id) {
            let start = Instant::now();
            let o = f();
            println!(
                "criterion {id:>2} {}: {} ({:.1}s) {}",
                if o.pass { "PASS" } else { "FAIL" },
                NAMES[id - 1],
                start.elapsed().as_secs_f64(),
                o.detail
            );
            results.push((id, o));
        }
    };
    record(1, &criterion_gradients);
    record(2, &criterion_mask_partition);
    record(3, &criterion_exclusivity);
    record(4, &criterion_ema);
    record(5, &criterion_metric_oracle);
    record(10, &criterion_discard);
    if [6, 7, 8, 9].iter().any(|&i| run(i)) {
        let bench = run_benchmark();
        record(6, &|| criterion_direction(&bench));
        record(7, &|| criterion_ratio_trend(&bench));
        record(8, &|| criterion_cost_direction(&bench));
        record(9, &|| criterion_initial_masks(&bench));
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(i, _)| *i).collect();
    let strict = std::env::var(STRICT_VAR).is_ok_and(|v| v == "1");
    let fatal: Vec<usize> = failed.iter().copied().filter(|i| strict || !BENCHMARK.contains(i)).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed {failed:?}, of which fatal {fatal:?}")
        }
    );
    if fatal.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
