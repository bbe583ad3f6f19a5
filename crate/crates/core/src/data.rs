//! Synthetic segmentation data, semi-supervised splits, augmentation and the
//! `CRD1` container format.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ImageTensor, LabelMap};
use crate::uncertainty::RegionMask;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub label: LabelMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub n_images: usize,
    pub shape: ShapeKind,
    /// Foreground intensity offset over the background.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Foreground area fraction range `[lo, hi]`.
    pub area_lo: f64,
    pub area_hi: f64,
    /// 2 for binary data; larger values place `classes - 1` disjoint objects.
    pub classes: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_images: 200,
            shape: ShapeKind::Ellipse,
            contrast: 0.3,
            noise_sigma: 0.15,
            area_lo: 0.05,
            area_hi: 0.25,
            classes: 2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < crate::model::MIN_SIDE || self.width < crate::model::MIN_SIDE {
            return bad(format!("image size {}x{} is too small", self.height, self.width));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return bad(format!("contrast {} must lie in (0, 1]", self.contrast));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be non-negative", self.noise_sigma));
        }
        if !(self.area_lo > 0.0 && self.area_lo < self.area_hi && self.area_hi < 1.0) {
            return bad(format!("area range [{}, {}] must satisfy 0 < lo < hi < 1", self.area_lo, self.area_hi));
        }
        if !(2..=255).contains(&self.classes) {
            return bad(format!("{} classes is out of range", self.classes));
        }
        let n = (self.height * self.width) as f64;
        let (lo, hi) = ((self.area_lo * n).ceil(), (self.area_hi * n).floor());
        if lo > hi || hi < (self.classes - 1) as f64 {
            return bad(format!(
                "area range [{}, {}] admits no pixel count on a {}x{} image",
                self.area_lo, self.area_hi, self.height, self.width
            ));
        }
        Ok(())
    }
}

/// Rotated ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            ry: self.ry * k,
            rx: self.rx * k,
            ..*self
        }
    }

    pub fn rasterize(&self, height: usize, width: usize) -> LabelMap {
        let mut m = LabelMap::filled(height, width, 0);
        for y in 0..height {
            for x in 0..width {
                if self.contains(y as f64, x as f64) {
                    m.data_mut()[y * width + x] = 1;
                }
            }
        }
        m
    }
}

/// Shape whose extent grows monotonically with a single scale factor.
struct Shape {
    parts: Vec<Ellipse>,
}

impl Shape {
    fn random(kind: ShapeKind, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let cy = rng.random_range(0.3..0.7) * (h - 1) as f64;
        let cx = rng.random_range(0.3..0.7) * (w - 1) as f64;
        let unit = h.min(w) as f64 / 4.0;
        let blob = |rng: &mut ChaCha8Rng, cy: f64, cx: f64| {
            let aspect: f64 = rng.random_range(0.6..1.0);
            Ellipse {
                cy,
                cx,
                ry: unit * aspect,
                rx: unit / aspect,
                theta: rng.random_range(0.0..PI),
            }
        };
        let parts = match kind {
            ShapeKind::Ellipse => vec![blob(rng, cy, cx)],
            ShapeKind::Blobs => {
                let n = rng.random_range(2..=4);
                (0..n)
                    .map(|_| {
                        let oy = cy + rng.random_range(-0.5..0.5) * unit;
                        let ox = cx + rng.random_range(-0.5..0.5) * unit;
                        blob(rng, oy, ox).scaled(rng.random_range(0.5..0.9))
                    })
                    .collect()
            }
        };
        Self { parts }
    }

    fn coverage(&self, k: f64, free: &[bool], h: usize, w: usize) -> Vec<bool> {
        let parts: Vec<Ellipse> = self.parts.iter().map(|e| e.scaled(k)).collect();
        (0..h * w)
            .map(|z| free[z] && parts.iter().any(|e| e.contains((z / w) as f64, (z % w) as f64)))
            .collect()
    }

    /// Bisects the scale factor so the covered count lands in `[lo, hi]`.
    fn fit(&self, free: &[bool], h: usize, w: usize, lo: usize, hi: usize, target: usize) -> Option<Vec<bool>> {
        let count = |c: &[bool]| c.iter().filter(|&&v| v).count();
        let (mut a, mut b) = (0.0f64, 8.0f64);
        if count(&self.coverage(b, free, h, w)) < lo {
            return None;
        }
        for _ in 0..40 {
            let mid = 0.5 * (a + b);
            let cov = self.coverage(mid, free, h, w);
            let n = count(&cov);
            if (lo..=hi).contains(&n) && n.abs_diff(target) <= (hi - lo) / 8 + 1 {
                return Some(cov);
            }
            if n < target {
                a = mid;
            } else {
                b = mid;
            }
        }
        let cov = self.coverage(b, free, h, w);
        (lo..=hi).contains(&count(&cov)).then_some(cov)
    }
}

/// Low-frequency background in `[0.1, 0.35]`.
fn background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let amp = rng.random_range(0.3..1.0);
            let fy = rng.random_range(0.5..2.0) * 2.0 * PI / h as f64;
            let fx = rng.random_range(0.5..2.0) * 2.0 * PI / w as f64;
            (amp, fy, fx, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.0).sum();
    (0..h * w)
        .map(|z| {
            let (y, x) = ((z / w) as f64, (z % w) as f64);
            let s: f64 = waves.iter().map(|&(a, fy, fx, ph)| a * (fy * y + fx * x + ph).cos()).sum();
            0.1 + 0.25 * (0.5 + 0.5 * s / total)
        })
        .collect()
}

const MAX_ATTEMPTS: usize = 200;

fn generate_one(cfg: &SyntheticConfig, index: usize) -> Result<Sample> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let n = h * w;
    let lo = (cfg.area_lo * n as f64).ceil() as usize;
    let hi = (cfg.area_hi * n as f64).floor() as usize;
    let objects = cfg.classes - 1;
    let mut mask = vec![0u8; n];
    'attempt: for _ in 0..MAX_ATTEMPTS {
        mask.fill(0);
        let total = rng.random_range(lo..=hi);
        let mut placed = 0;
        for class in 1..=objects {
            let share = (total.saturating_sub(placed) / (objects + 1 - class)).max(1);
            let free: Vec<bool> = mask.iter().map(|&m| m == 0).collect();
            let shape = Shape::random(cfg.shape, h, w, &mut rng);
            let slack = (hi - lo) / (2 * objects);
            let (a, b) = (share.saturating_sub(slack).max(1), share + slack);
            let Some(cov) = shape.fit(&free, h, w, a, b, share) else {
                continue 'attempt;
            };
            for (m, c) in mask.iter_mut().zip(cov) {
                if c {
                    *m = class as u8;
                }
            }
            placed = mask.iter().filter(|&&m| m != 0).count();
        }
        if (lo..=hi).contains(&placed) {
            let bg = background(h, w, &mut rng);
            let image: Vec<f32> = (0..n)
                .map(|z| {
                    let lift = cfg.contrast * mask[z] as f64 / objects as f64;
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.noise_sigma;
                    (bg[z] + lift + noise).clamp(0.0, 1.0) as f32
                })
                .collect();
            return Ok(Sample {
                image: ImageTensor::new(h, w, image)?,
                label: LabelMap::new(h, w, mask)?,
            });
        }
    }
    Err(Error::Config(format!(
        "could not place a foreground within area range [{}, {}] for image {index}",
        cfg.area_lo, cfg.area_hi
    )))
}

/// Deterministic under `cfg.seed`; image `i` depends only on `(seed, i)`.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.n_images).map(|i| generate_one(cfg, i)).collect()
}

/// Labeled:unlabeled proportion of the training pool, written `A:B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub labeled: u32,
    pub unlabeled: u32,
}

impl Ratio {
    pub const ONE_TO_ONE: Self = Self { labeled: 1, unlabeled: 1 };
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::Config(format!("ratio `{s}` is not of the form A:B"));
        let (a, b) = s.split_once(':').ok_or_else(err)?;
        let r = Self {
            labeled: a.trim().parse().map_err(|_| err())?,
            unlabeled: b.trim().parse().map_err(|_| err())?,
        };
        if r.labeled == 0 {
            return Err(Error::Config(format!("ratio `{s}` has no labeled share")));
        }
        Ok(r)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.labeled, self.unlabeled)
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub ratio: Ratio,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            test_fraction: 0.2,
            ratio: Ratio::ONE_TO_ONE,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.train_fraction) || !ok(self.test_fraction) || self.train_fraction + self.test_fraction > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "train/test fractions {} and {} must be in [0, 1] and sum to at most 1",
                self.train_fraction, self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Labeled, unlabeled and test partitions. Labels of the unlabeled pool are
/// kept apart for mask-quality evaluation only.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<ImageTensor>,
    pub test: Vec<Sample>,
    unlabeled_truth: Vec<LabelMap>,
}

impl DatasetSplit {
    pub fn new(labeled: Vec<Sample>, unlabeled: Vec<Sample>, test: Vec<Sample>) -> Self {
        let (unlabeled, unlabeled_truth) = unlabeled.into_iter().map(|s| (s.image, s.label)).unzip();
        Self {
            labeled,
            unlabeled,
            test,
            unlabeled_truth,
        }
    }

    pub fn unlabeled_truth(&self) -> &[LabelMap] {
        &self.unlabeled_truth
    }
}

fn floor_frac(n: usize, f: f64) -> usize {
    (n as f64 * f + 1e-9).floor() as usize
}

fn shuffled(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Separates a train pool and a test set by seeded shuffle.
pub fn split_test(dataset: Vec<Sample>, cfg: &SplitConfig, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    cfg.validate()?;
    let n = dataset.len();
    let n_train = floor_frac(n, cfg.train_fraction);
    let n_test = floor_frac(n, cfg.test_fraction);
    if n_train == 0 || n_test == 0 {
        return Err(Error::EmptyPartition(format!("{n} images give {n_train} train and {n_test} test")));
    }
    let order = shuffled(n, seed, 1);
    let mut slots: Vec<Option<Sample>> = dataset.into_iter().map(Some).collect();
    let mut take = |r: &[usize]| r.iter().map(|&i| slots[i].take().expect("indices are unique")).collect::<Vec<_>>();
    let train = take(&order[..n_train]);
    let test = take(&order[n_train..n_train + n_test]);
    Ok((train, test))
}

/// Partitions the train pool into labeled and unlabeled sets at `ratio`,
/// rounding the labeled count down.
pub fn split_labeled(train: Vec<Sample>, ratio: Ratio, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let n = train.len();
    let parts = (ratio.labeled + ratio.unlabeled) as usize;
    let n_lab = n * ratio.labeled as usize / parts;
    if n_lab == 0 {
        return Err(Error::EmptyPartition(format!("ratio {ratio} of {n} images leaves no labeled image")));
    }
    if ratio.unlabeled > 0 && n_lab == n {
        return Err(Error::EmptyPartition(format!("ratio {ratio} of {n} images leaves no unlabeled image")));
    }
    let order = shuffled(n, seed, 2);
    let mut slots: Vec<Option<Sample>> = train.into_iter().map(Some).collect();
    let mut take = |r: &[usize]| r.iter().map(|&i| slots[i].take().expect("indices are unique")).collect::<Vec<_>>();
    let labeled = take(&order[..n_lab]);
    let unlabeled = take(&order[n_lab..]);
    Ok((labeled, unlabeled))
}

pub fn split(dataset: Vec<Sample>, cfg: &SplitConfig, seed: u64) -> Result<DatasetSplit> {
    let (train, test) = split_test(dataset, cfg, seed)?;
    let (labeled, unlabeled) = split_labeled(train, cfg.ratio, seed)?;
    Ok(DatasetSplit::new(labeled, unlabeled, test))
}

/// One geometric augmentation draw: rotation and scale about the image
/// center, then flips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub scale: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        angle_deg: 0.0,
        scale: 1.0,
        hflip: false,
        vflip: false,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            angle_deg: rng.random_range(-30.0..=30.0),
            scale: rng.random_range(0.5..=2.0),
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
        }
    }

    fn resamples(&self) -> bool {
        self.angle_deg != 0.0 || self.scale != 1.0
    }

    /// Source coordinate read for output pixel `(y, x)` before flipping.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dy, dx) = ((y as f64 - cy) / self.scale, (x as f64 - cx) / self.scale);
        (cy + c * dy + s * dx, cx - s * dy + c * dx)
    }

    fn flip_index(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        (if self.vflip { h - 1 - y } else { y }, if self.hflip { w - 1 - x } else { x })
    }

    fn warp<V: Copy>(&self, h: usize, w: usize, mut read: impl FnMut(f64, f64) -> V, data: &[V]) -> Vec<V> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = self.flip_index(y, x, h, w);
                if self.resamples() {
                    let (sy, sx) = self.source(fy, fx, h, w);
                    out.push(read(sy, sx));
                } else {
                    out.push(data[fy * w + fx]);
                }
            }
        }
        out
    }

    /// Bilinear resampling with edge replication.
    pub fn apply_image(&self, x: &ImageTensor) -> ImageTensor {
        let (h, w) = (x.height(), x.width());
        let src = x.data();
        let read = |sy: f64, sx: f64| {
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
            let at = |y: usize, x: usize| src[y * w + x] as f64;
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            (top * (1.0 - ty) + bot * ty) as f32
        };
        ImageTensor::new(h, w, self.warp(h, w, read, src)).expect("same size, finite values")
    }

    fn nearest(&self, h: usize, w: usize, src: &[u8]) -> Vec<u8> {
        let read = |sy: f64, sx: f64| {
            let y = sy.round().clamp(0.0, (h - 1) as f64) as usize;
            let x = sx.round().clamp(0.0, (w - 1) as f64) as usize;
            src[y * w + x]
        };
        self.warp(h, w, read, src)
    }

    /// Nearest-neighbour resampling, so labels stay integral.
    pub fn apply_labels(&self, y: &LabelMap) -> LabelMap {
        let (h, w) = (y.height(), y.width());
        LabelMap::new(h, w, self.nearest(h, w, y.data())).expect("same size")
    }

    pub fn apply_mask(&self, m: &RegionMask) -> RegionMask {
        let (h, w) = (m.height(), m.width());
        RegionMask::new(h, w, self.nearest(h, w, m.data())).expect("binary values are preserved")
    }
}

/// Draws one transform from `seed` and applies it to the image/label pair.
pub fn augment(x: &ImageTensor, y: &LabelMap, seed: u64) -> (ImageTensor, LabelMap) {
    let params = AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(seed));
    (params.apply_image(x), params.apply_labels(y))
}

pub const CRD_MAGIC: &[u8; 4] = b"CRD1";
pub const CRD_VERSION: u32 = 1;

pub fn encode(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CRD_MAGIC);
    out.extend_from_slice(&CRD_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&(s.image.height() as u32).to_le_bytes());
        out.extend_from_slice(&(s.image.width() as u32).to_le_bytes());
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(s.label.data());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CRD_MAGIC {
        c.pos = 0;
        return c.fail("bad magic, expected CRD1");
    }
    let version = c.u32("version")?;
    if version != CRD_VERSION {
        c.pos -= 4;
        return c.fail(format!("unsupported version {version}"));
    }
    let count = c.u32("item count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        let start = c.pos;
        let h = c.u32("height")? as usize;
        let w = c.u32("width")? as usize;
        let n = h.checked_mul(w).filter(|n| *n <= (bytes.len() - c.pos) / 4);
        let Some(n) = n else {
            c.pos = start;
            return c.fail(format!("item {i}: {h}x{w} exceeds the remaining file"));
        };
        let raw = c.take(4 * n, "image data")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let mask = c.take(n, "mask data")?.to_vec();
        let sample = ImageTensor::new(h, w, data)
            .and_then(|image| LabelMap::new(h, w, mask).map(|label| Sample { image, label }));
        match sample {
            Ok(s) => out.push(s),
            Err(e) => {
                c.pos = start;
                return c.fail(format!("item {i}: {e}"));
            }
        }
    }
    if c.pos != bytes.len() {
        return c.fail(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    std::fs::write(path, encode(samples))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    decode(&std::fs::read(path)?)
}

pub fn image_to_gray(x: &ImageTensor) -> GrayImage {
    GrayImage::from_fn(x.width() as u32, x.height() as u32, |c, r| {
        image::Luma([(x.get(r as usize, c as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Classes spread evenly over 0..=255.
pub fn labels_to_gray(y: &LabelMap, classes: usize) -> GrayImage {
    let step = 255 / (classes.max(2) - 1) as u32;
    GrayImage::from_fn(y.width() as u32, y.height() as u32, |c, r| {
        image::Luma([(y.get(r as usize, c as usize) as u32 * step).min(255) as u8])
    })
}
