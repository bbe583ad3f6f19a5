use coranet::data::{generate, AugmentParams, Ellipse, SyntheticConfig};
use coranet::metrics::{confusion_counts, dice};
use coranet::model::LabelMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean over images of the best global-threshold DSC for one dataset.
fn best_threshold_dsc(cfg: &SyntheticConfig) -> f64 {
    let samples = generate(cfg).unwrap();
    let grid: Vec<f32> = (1..40).map(|i| i as f32 / 40.0).collect();
    let mut best = 0.0f64;
    for &t in &grid {
        let mut sum = 0.0;
        for s in &samples {
            let pred: Vec<u8> = s.image.data().iter().map(|&v| u8::from(v > t)).collect();
            let pred = LabelMap::new(s.label.height(), s.label.width(), pred).unwrap();
            sum += dice(&confusion_counts(&pred, &s.label, 1).unwrap()).unwrap_or(0.0);
        }
        best = best.max(sum / samples.len() as f64);
    }
    best
}

#[test]
fn more_noise_never_makes_thresholding_easier() {
    let sigmas = [0.0, 0.05, 0.15, 0.3, 0.6];
    let seeds = [0u64, 1, 2];
    let mut means = Vec::new();
    for &noise_sigma in &sigmas {
        let total: f64 = seeds
            .iter()
            .map(|&seed| {
                best_threshold_dsc(&SyntheticConfig {
                    height: 32,
                    width: 32,
                    n_images: 100,
                    noise_sigma,
                    seed,
                    ..SyntheticConfig::default()
                })
            })
            .sum();
        means.push(total / seeds.len() as f64);
    }
    for w in means.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "threshold DSC by sigma {sigmas:?}: {means:?}");
    }
    assert!(means[0] > means[4] + 0.1, "{means:?}");
}

fn iou(a: &LabelMap, b: &LabelMap) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += usize::from(x == 1 && y == 1);
        union += usize::from(x == 1 || y == 1);
    }
    inter as f64 / union as f64
}

#[test]
fn rotated_mask_matches_rotated_analytic_shape() {
    let (h, w) = (64usize, 64usize);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let n = (h * w) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut scores = Vec::new();
    while scores.len() < 200 {
        let e = Ellipse {
            cy: rng.random_range(24.0..40.0),
            cx: rng.random_range(24.0..40.0),
            ry: rng.random_range(5.0..18.0),
            rx: rng.random_range(5.0..18.0),
            theta: rng.random_range(-1.5..1.5),
        };
        let mask = e.rasterize(h, w);
        let area = mask.data().iter().filter(|&&v| v == 1).count() as f64 / n;
        if !(0.05..=0.25).contains(&area) {
            continue;
        }
        let angle_deg: f64 = rng.random_range(-30.0..=30.0);
        let warped = AugmentParams { angle_deg, ..AugmentParams::IDENTITY }.apply_labels(&mask);
        // Rotating the picture by +phi about the centre maps a point p to
        // R(phi) p in (x right, y down) pixel coordinates.
        let (s, c) = angle_deg.to_radians().sin_cos();
        let (dy, dx) = (e.cy - cy, e.cx - cx);
        let rotated = Ellipse {
            cy: cy + c * dy - s * dx,
            cx: cx + s * dy + c * dx,
            theta: e.theta - angle_deg.to_radians(),
            ..e
        };
        scores.push(iou(&warped, &rotated.rasterize(h, w)));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    eprintln!("rotation IoU mean {mean:.4} min {min:.4}");
    assert!(mean >= 0.95, "mean IoU {mean:.4}");
    assert!(min >= 0.9, "min IoU {min:.4}");
}
