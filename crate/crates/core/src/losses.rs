//! Training objectives: cost-weighted cross-entropy for the three heads,
//! masked self-training on certain pixels and masked student/teacher
//! consistency on uncertain pixels.
//!
//! Every loss is averaged over the pixels that contribute to it, so values
//! are comparable across image sizes and region sizes; the certain and
//! uncertain objectives are then combined with equal weight.

use crate::error::{Error, Result};
use crate::model::{HeadSet, LabelMap, Mode, ModelGrads, ModelState, Pass, ProbMap, SegNet};
use crate::tensor::{Real, Tensor};
use crate::uncertainty::RegionMask;

/// Probabilities are clamped to this floor inside logarithms.
pub const LOG_FLOOR: f64 = 1e-7;

/// Default cost ratio between the expensive and the cheap mistake.
pub const DEFAULT_ALPHA: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("class weights must be positive and finite: {weights:?}")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            weights: vec![1.0; classes],
        }
    }

    /// `(alpha, 1)`: calling background "object" is expensive, so the head under-segments.
    pub fn conservative(alpha: f64) -> Result<Self> {
        Self::new(vec![alpha, 1.0])
    }

    /// `(1, alpha)`: missing object pixels is expensive, so the head over-segments.
    pub fn radical(alpha: f64) -> Result<Self> {
        Self::new(vec![1.0, alpha])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub pixel_count: usize,
}

impl LossValue {
    pub const EMPTY: Self = Self {
        value: 0.0,
        pixel_count: 0,
    };

    pub fn is_empty(&self) -> bool {
        self.pixel_count == 0
    }
}

fn mask_count(mask: Option<&[u8]>, hw: usize) -> usize {
    mask.map_or(hw, |m| m.iter().filter(|&&v| v != 0).count())
}

/// Adds the masked, weighted `-log p` sum of one image to `sum` and, when
/// `grad` is given, `scale * dL/dp` into it.
fn ce_kernel<T: Real>(
    probs: &[T],
    labels: &[u8],
    mask: Option<&[u8]>,
    weights: &[f64],
    grad: Option<&mut [T]>,
    scale: f64,
) -> f64 {
    let hw = labels.len();
    let floor = T::lit(LOG_FLOOR);
    let mut sum = 0.0;
    let mut grad = grad;
    for z in 0..hw {
        if mask.is_some_and(|m| m[z] == 0) {
            continue;
        }
        let k = labels[z] as usize;
        let w = weights[k];
        let p = probs[k * hw + z];
        sum += w * -(p.max(floor)).as_f64().ln();
        if let Some(g) = grad.as_deref_mut() {
            if p > floor {
                g[k * hw + z] += T::lit(-w * scale) / p;
            }
        }
    }
    sum
}

fn check_pair<T: Real>(p: &ProbMap<T>, y: &LabelMap, w: &ClassWeights) -> Result<()> {
    if (p.height(), p.width()) != (y.height(), y.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs labels {}x{}",
            p.height(),
            p.width(),
            y.height(),
            y.width()
        )));
    }
    if w.len() != p.classes() {
        return Err(Error::Shape(format!("{} class weights for {} classes", w.len(), p.classes())));
    }
    y.check_classes(p.classes())
}

/// `-(1/|Z|) sum_z w_{y_z} log p_{z, y_z}` over all pixels of one image.
pub fn weighted_cross_entropy<T: Real>(p: &ProbMap<T>, y: &LabelMap, w: &ClassWeights) -> Result<LossValue> {
    check_pair(p, y, w)?;
    let hw = p.pixels();
    let sum = ce_kernel(p.data(), y.data(), None, w.weights(), None, 0.0);
    Ok(LossValue {
        value: sum / hw as f64,
        pixel_count: hw,
    })
}

/// Loss plus `dL/dp` for [`weighted_cross_entropy`].
pub fn weighted_cross_entropy_grad<T: Real>(p: &ProbMap<T>, y: &LabelMap, w: &ClassWeights) -> Result<(LossValue, ProbMap<T>)> {
    check_pair(p, y, w)?;
    let hw = p.pixels();
    let mut g = vec![T::zero(); p.data().len()];
    let sum = ce_kernel(p.data(), y.data(), None, w.weights(), Some(&mut g), 1.0 / hw as f64);
    Ok((
        LossValue {
            value: sum / hw as f64,
            pixel_count: hw,
        },
        ProbMap::new(p.classes(), p.height(), p.width(), g)?,
    ))
}

/// Unweighted cross-entropy against `pseudo`, averaged over pixels with `mask = 1`.
pub fn certain_region_loss<T: Real>(p: &ProbMap<T>, pseudo: &LabelMap, mask: &RegionMask) -> Result<LossValue> {
    let w = ClassWeights::uniform(p.classes());
    check_pair(p, pseudo, &w)?;
    check_mask(p.height(), p.width(), mask)?;
    let count = mask_count(Some(mask.data()), p.pixels());
    if count == 0 {
        return Ok(LossValue::EMPTY);
    }
    let sum = ce_kernel(p.data(), pseudo.data(), Some(mask.data()), w.weights(), None, 0.0);
    Ok(LossValue {
        value: sum / count as f64,
        pixel_count: count,
    })
}

/// Loss plus `dL/dp` for [`certain_region_loss`]; the gradient is zero off the mask.
pub fn certain_region_loss_grad<T: Real>(p: &ProbMap<T>, pseudo: &LabelMap, mask: &RegionMask) -> Result<(LossValue, ProbMap<T>)> {
    let w = ClassWeights::uniform(p.classes());
    check_pair(p, pseudo, &w)?;
    check_mask(p.height(), p.width(), mask)?;
    let mut g = vec![T::zero(); p.data().len()];
    let count = mask_count(Some(mask.data()), p.pixels());
    let mut loss = LossValue::EMPTY;
    if count > 0 {
        let sum = ce_kernel(p.data(), pseudo.data(), Some(mask.data()), w.weights(), Some(&mut g), 1.0 / count as f64);
        loss = LossValue {
            value: sum / count as f64,
            pixel_count: count,
        };
    }
    Ok((loss, ProbMap::new(p.classes(), p.height(), p.width(), g)?))
}

/// Mean over masked pixels of `sum_k (student_k - teacher_k)^2`.
pub fn consistency_loss<T: Real>(student: &ProbMap<T>, teacher: &ProbMap<T>, mask: &RegionMask) -> Result<LossValue> {
    if !student.same_shape(teacher) {
        return Err(Error::Shape("student and teacher predictions differ in shape".into()));
    }
    check_mask(student.height(), student.width(), mask)?;
    let hw = student.pixels();
    let count = mask_count(Some(mask.data()), hw);
    if count == 0 {
        return Ok(LossValue::EMPTY);
    }
    let sum = mse_kernel(student.data(), teacher.data(), Some(mask.data()), hw, None, 0.0);
    Ok(LossValue {
        value: sum / count as f64,
        pixel_count: count,
    })
}

/// Loss plus `dL/d(student)` for [`consistency_loss`]; the teacher is a constant.
pub fn consistency_loss_grad<T: Real>(student: &ProbMap<T>, teacher: &ProbMap<T>, mask: &RegionMask) -> Result<(LossValue, ProbMap<T>)> {
    if !student.same_shape(teacher) {
        return Err(Error::Shape("student and teacher predictions differ in shape".into()));
    }
    check_mask(student.height(), student.width(), mask)?;
    let hw = student.pixels();
    let mut g = vec![T::zero(); student.data().len()];
    let count = mask_count(Some(mask.data()), hw);
    let mut loss = LossValue::EMPTY;
    if count > 0 {
        let sum = mse_kernel(student.data(), teacher.data(), Some(mask.data()), hw, Some(&mut g), 1.0 / count as f64);
        loss = LossValue {
            value: sum / count as f64,
            pixel_count: count,
        };
    }
    Ok((loss, ProbMap::new(student.classes(), student.height(), student.width(), g)?))
}

fn mse_kernel<T: Real>(s: &[T], t: &[T], mask: Option<&[u8]>, hw: usize, grad: Option<&mut [T]>, scale: f64) -> f64 {
    let classes = s.len() / hw;
    let mut sum = 0.0;
    let mut grad = grad;
    let two_scale = T::lit(2.0 * scale);
    for z in 0..hw {
        if mask.is_some_and(|m| m[z] == 0) {
            continue;
        }
        for k in 0..classes {
            let d = s[k * hw + z] - t[k * hw + z];
            sum += (d * d).as_f64();
            if let Some(g) = grad.as_deref_mut() {
                g[k * hw + z] += two_scale * d;
            }
        }
    }
    sum
}

fn check_mask(h: usize, w: usize, mask: &RegionMask) -> Result<()> {
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs prediction {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Loss value, per-head breakdown and parameter gradients of one step.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    pub loss: LossValue,
    pub grads: ModelGrads<T>,
    pub pass: Pass<T>,
}

/// Cross-entropy terms of the three-head objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrmTerms {
    pub normal: f64,
    pub conservative: f64,
    pub radical: f64,
}

impl CrmTerms {
    pub fn total(&self) -> f64 {
        self.normal + self.conservative + self.radical
    }
}

fn check_batch<T: Real>(batch: &Tensor<T>, labels: &[&LabelMap]) -> Result<(usize, usize)> {
    let (n, _, h, w) = batch.dims4();
    if labels.len() != n || labels.iter().any(|y| (y.height(), y.width()) != (h, w)) {
        return Err(Error::Shape(format!(
            "label batch does not match image batch of {n} x {h}x{w}"
        )));
    }
    Ok((h, w))
}

/// Batch-pooled masked cross-entropy and its gradient w.r.t. the probabilities.
fn ce_batch<T: Real>(
    probs: &Tensor<T>,
    labels: &[&LabelMap],
    masks: Option<&[&RegionMask]>,
    weights: &ClassWeights,
) -> Result<(LossValue, Tensor<T>)> {
    let (n, k, h, w) = probs.dims4();
    if weights.len() != k {
        return Err(Error::Shape(format!("{} class weights for {k} classes", weights.len())));
    }
    let hw = h * w;
    for y in labels {
        y.check_classes(k)?;
    }
    let count: usize = (0..n).map(|i| mask_count(masks.map(|m| m[i].data()), hw)).sum();
    let mut grad = Tensor::zeros(probs.shape());
    if count == 0 {
        return Ok((LossValue::EMPTY, grad));
    }
    let scale = 1.0 / count as f64;
    let mut sum = 0.0;
    for i in 0..n {
        let mask = masks.map(|m| m[i].data());
        sum += ce_kernel(probs.image(i), labels[i].data(), mask, weights.weights(), Some(grad.image_mut(i)), scale);
    }
    Ok((
        LossValue {
            value: sum * scale,
            pixel_count: count,
        },
        grad,
    ))
}

/// Three-head cost-sensitive objective on a labeled batch: plain CE on the
/// main head plus conservative- and radical-weighted CE on the auxiliary
/// heads, all from one encoder pass.
pub fn crm_objective<T: Real>(
    model: &ModelState<T>,
    batch: &Tensor<T>,
    labels: &[&LabelMap],
    alpha: f64,
    mode: Mode,
) -> Result<(Objective<T>, CrmTerms)> {
    check_batch(batch, labels)?;
    let classes = model.classes();
    if classes != 2 {
        return Err(Error::Config(format!(
            "cost-sensitive heads are binary; got {classes} classes (decompose one-vs-rest)"
        )));
    }
    let pass = model.forward_batch(batch, mode, HeadSet::ALL)?;
    let probs = |c: &Option<crate::model::HeadCache<T>>| c.as_ref().expect("all heads run").probs().clone();
    let (normal, dn) = ce_batch(&probs(&pass.normal), labels, None, &ClassWeights::uniform(classes))?;
    let (con, dc) = ce_batch(&probs(&pass.conservative), labels, None, &ClassWeights::conservative(alpha)?)?;
    let (rad, dr) = ce_batch(&probs(&pass.radical), labels, None, &ClassWeights::radical(alpha)?)?;
    let grads = model.backward(&pass, Some(&dn), Some(&dc), Some(&dr));
    let terms = CrmTerms {
        normal: normal.value,
        conservative: con.value,
        radical: rad.value,
    };
    Ok((
        Objective {
            loss: LossValue {
                value: terms.total(),
                pixel_count: normal.pixel_count,
            },
            grads,
            pass,
        },
        terms,
    ))
}

/// Value of the three-head objective on one labeled image (single-image batch,
/// training-mode normalization).
pub fn crm_loss<T: Real>(model: &ModelState<T>, x: &crate::model::ImageTensor, y: &LabelMap, alpha: f64) -> Result<LossValue> {
    if (x.height(), x.width()) != (y.height(), y.width()) {
        return Err(Error::Shape("image and label sizes differ".into()));
    }
    if x.height() % crate::model::SIZE_MULTIPLE != 0 || x.width() % crate::model::SIZE_MULTIPLE != 0 {
        return Err(Error::Shape("training images must have sides divisible by 8".into()));
    }
    let batch = x.to_padded_batch::<T>();
    crm_objective(model, &batch, &[y], alpha, Mode::Train).map(|(o, _)| o.loss)
}

/// Self-training on certain pixels: CE of the main head against cached pseudo
/// labels, restricted to `mask = 1`.
pub fn certain_region_objective<T: Real>(
    net: &SegNet<T>,
    batch: &Tensor<T>,
    pseudo: &[&LabelMap],
    masks: &[&RegionMask],
    mode: Mode,
) -> Result<Objective<T>> {
    check_batch(batch, pseudo)?;
    let pass = net.forward_batch(batch, mode)?;
    let probs = pass.normal.as_ref().expect("main head").probs();
    let (loss, dp) = ce_batch(probs, pseudo, Some(masks), &ClassWeights::uniform(net.classes()))?;
    let grads = net.backward(&pass, &dp);
    Ok(Objective { loss, grads, pass })
}

/// Student/teacher squared difference of probability vectors on pixels with
/// `mask = 1`. `teacher` is a constant target (no gradient reaches it).
pub fn consistency_objective<T: Real>(
    net: &SegNet<T>,
    batch: &Tensor<T>,
    teacher: &Tensor<T>,
    masks: &[&RegionMask],
    mode: Mode,
) -> Result<Objective<T>> {
    let (n, k, h, w) = teacher.dims4();
    let hw = h * w;
    if masks.len() != n || masks.iter().any(|m| (m.height(), m.width()) != (h, w)) {
        return Err(Error::Shape("masks do not match the teacher batch".into()));
    }
    let pass = net.forward_batch(batch, mode)?;
    let student = pass.normal.as_ref().expect("main head").probs();
    if student.dims4() != (n, k, h, w) {
        return Err(Error::Shape("student and teacher batches differ".into()));
    }
    let count: usize = masks.iter().map(|m| mask_count(Some(m.data()), hw)).sum();
    let mut dp = Tensor::zeros(student.shape());
    let mut loss = LossValue::EMPTY;
    if count > 0 {
        let scale = 1.0 / count as f64;
        let mut sum = 0.0;
        for i in 0..n {
            sum += mse_kernel(student.image(i), teacher.image(i), Some(masks[i].data()), hw, Some(dp.image_mut(i)), scale);
        }
        loss = LossValue {
            value: sum * scale,
            pixel_count: count,
        };
    }
    let grads = net.backward(&pass, &dp);
    Ok(Objective { loss, grads, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(pixels: &[[f64; 2]]) -> ProbMap<f64> {
        let v: Vec<Vec<f64>> = pixels.iter().map(|p| p.to_vec()).collect();
        ProbMap::from_pixels(1, pixels.len(), &v).unwrap()
    }

    fn labels(v: &[u8]) -> LabelMap {
        LabelMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let l = weighted_cross_entropy(&pm(&[[1.0, 0.0]]), &labels(&[0]), &ClassWeights::uniform(2)).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.pixel_count, 1);
    }

    #[test]
    fn object_pixel_at_half_costs_alpha_ln2() {
        let w = ClassWeights::new(vec![1.0, 5.0]).unwrap();
        let l = weighted_cross_entropy(&pm(&[[0.5, 0.5]]), &labels(&[1]), &w).unwrap();
        // 5 * ln 2 = 3.4657359...
        assert!((l.value - 3.465_735_902_799_726_5).abs() < 1e-12);
    }

    #[test]
    fn weight_swap_with_label_flip_is_symmetric() {
        for &a in &[0.01, 0.3, 0.77] {
            for &lab in &[0u8, 1] {
                let l1 = weighted_cross_entropy(&pm(&[[a, 1.0 - a]]), &labels(&[lab]), &ClassWeights::conservative(5.0).unwrap()).unwrap();
                let l2 = weighted_cross_entropy(&pm(&[[1.0 - a, a]]), &labels(&[1 - lab]), &ClassWeights::radical(5.0).unwrap()).unwrap();
                assert!((l1.value - l2.value).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_probability_is_clamped_not_nan() {
        let (l, g) = weighted_cross_entropy_grad(&pm(&[[1.0, 0.0]]), &labels(&[1]), &ClassWeights::uniform(2)).unwrap();
        assert!((l.value - (-(LOG_FLOOR.ln()))).abs() < 1e-9);
        assert!(g.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_weights_and_shapes() {
        assert!(ClassWeights::new(vec![1.0, 0.0]).is_err());
        assert!(ClassWeights::new(vec![]).is_err());
        assert!(weighted_cross_entropy(&pm(&[[0.5, 0.5]]), &labels(&[0, 1]), &ClassWeights::uniform(2)).is_err());
        assert!(weighted_cross_entropy(&pm(&[[0.5, 0.5]]), &labels(&[2]), &ClassWeights::uniform(2)).is_err());
    }

    #[test]
    fn certain_loss_respects_mask() {
        // per-pixel CE of 0.7 and 9.9
        let p = pm(&[[(-0.7f64).exp(), 1.0 - (-0.7f64).exp()], [1.0 - (-9.9f64).exp(), (-9.9f64).exp()]]);
        let y = labels(&[0, 1]);
        let mask = RegionMask::new(1, 2, vec![1, 0]).unwrap();
        let l = certain_region_loss(&p, &y, &mask).unwrap();
        assert!((l.value - 0.7).abs() < 1e-12);
        assert_eq!(l.pixel_count, 1);

        let all = RegionMask::filled(1, 2, true);
        let plain = weighted_cross_entropy(&p, &y, &ClassWeights::uniform(2)).unwrap();
        assert!((certain_region_loss(&p, &y, &all).unwrap().value - plain.value).abs() < 1e-12);

        let none = RegionMask::filled(1, 2, false);
        assert_eq!(certain_region_loss(&p, &y, &none).unwrap(), LossValue::EMPTY);
    }

    #[test]
    fn consistency_masked_squared_difference() {
        let s = pm(&[[0.8, 0.2], [0.1, 0.9]]);
        let t = pm(&[[0.6, 0.4], [0.9, 0.1]]);
        let mask = RegionMask::new(1, 2, vec![1, 0]).unwrap();
        let l = consistency_loss(&s, &t, &mask).unwrap();
        assert!((l.value - 0.08).abs() < 1e-12);
        assert_eq!(consistency_loss(&s, &s, &RegionMask::filled(1, 2, true)).unwrap().value, 0.0);
        assert_eq!(consistency_loss(&s, &t, &RegionMask::filled(1, 2, false)).unwrap(), LossValue::EMPTY);
    }
}
