//! Certain/uncertain region masks.
//!
//! A pixel is uncertain when the conservative and radical heads disagree on
//! its label; everything else is certain. The softmax-threshold estimator is
//! kept alongside as the comparison baseline.

use std::path::Path;

use image::GrayImage;

use crate::error::{Error, Result};
use crate::metrics::{ratio, Counts};
use crate::model::{LabelMap, ProbMap};
use crate::tensor::Real;

/// Binary pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("mask {height}x{width} needs {} values", height * width)));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Shape("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, on: bool) -> Self {
        Self {
            height,
            width,
            data: vec![u8::from(on); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// 8-bit visualization: 0 for off, 255 for on.
    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.data[y as usize * self.width + x as usize] * 255])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray_image().save(path)?;
        Ok(())
    }
}

/// Returns `(uncertain, certain)`: uncertain where the two label maps differ.
pub fn make_masks(y_con: &LabelMap, y_rad: &LabelMap) -> Result<(RegionMask, RegionMask)> {
    if !y_con.same_shape(y_rad) {
        return Err(Error::Shape(format!(
            "conservative {}x{} vs radical {}x{}",
            y_con.height(),
            y_con.width(),
            y_rad.height(),
            y_rad.width()
        )));
    }
    let uncertain: Vec<u8> = y_con.data().iter().zip(y_rad.data()).map(|(a, b)| u8::from(a != b)).collect();
    let certain = uncertain.iter().map(|&u| 1 - u).collect();
    let (h, w) = (y_con.height(), y_con.width());
    Ok((
        RegionMask {
            height: h,
            width: w,
            data: uncertain,
        },
        RegionMask {
            height: h,
            width: w,
            data: certain,
        },
    ))
}

/// Baseline: certain where the top class probability exceeds `tau`; pseudo
/// label is the argmax.
pub fn softmax_threshold_mask<T: Real>(p: &ProbMap<T>, tau: f64) -> Result<(RegionMask, LabelMap)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("threshold {tau} must lie in (0, 1)")));
    }
    let hw = p.pixels();
    let certain = (0..hw)
        .map(|z| {
            let top = (0..p.classes()).map(|k| p.prob(z, k).as_f64()).fold(f64::MIN, f64::max);
            u8::from(top > tau)
        })
        .collect();
    Ok((
        RegionMask {
            height: p.height(),
            width: p.width(),
            data: certain,
        },
        p.argmax(),
    ))
}

/// Precision, recall and critical success index of the pseudo labels inside
/// the certain region. `None` marks an empty denominator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskQuality {
    pub ppv: Option<f64>,
    pub tpr: Option<f64>,
    pub csi: Option<f64>,
    pub counts: Counts,
}

pub fn mask_quality(certain: &RegionMask, pseudo: &LabelMap, truth: &LabelMap) -> Result<MaskQuality> {
    if (certain.height, certain.width) != (pseudo.height(), pseudo.width()) || !pseudo.same_shape(truth) {
        return Err(Error::Shape("mask, pseudo labels and truth must agree in size".into()));
    }
    let mut c = Counts::default();
    for ((&m, &p), &t) in certain.data.iter().zip(pseudo.data()).zip(truth.data()) {
        if m == 0 {
            continue;
        }
        match (p == 1, t == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(quality_from_counts(c))
}

pub fn quality_from_counts(c: Counts) -> MaskQuality {
    MaskQuality {
        ppv: ratio(c.tp, c.tp + c.fp),
        tpr: ratio(c.tp, c.tp + c.fn_),
        csi: ratio(c.tp, c.tp + c.fp + c.fn_),
        counts: c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(rows: &[&[u8]]) -> LabelMap {
        let w = rows[0].len();
        LabelMap::new(rows.len(), w, rows.concat()).unwrap()
    }

    #[test]
    fn agreement_is_all_certain() {
        let y = lm(&[&[1, 0], &[0, 1]]);
        let (u, c) = make_masks(&y, &y).unwrap();
        assert_eq!(u.count(), 0);
        assert_eq!(c.count(), 4);
    }

    #[test]
    fn xor_of_two_by_two_example() {
        let (u, c) = make_masks(&lm(&[&[1, 0], &[0, 0]]), &lm(&[&[1, 1], &[0, 1]])).unwrap();
        assert_eq!(u.data(), &[0, 1, 0, 1]);
        assert_eq!(c.data(), &[1, 0, 1, 0]);
        let (u2, c2) = make_masks(&lm(&[&[1, 1], &[0, 1]]), &lm(&[&[1, 0], &[0, 0]])).unwrap();
        assert_eq!((u, c), (u2, c2));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        assert!(make_masks(&lm(&[&[1, 0]]), &lm(&[&[1], &[0]])).is_err());
    }

    #[test]
    fn threshold_baseline_definitions() {
        let p = ProbMap::<f32>::from_pixels(1, 3, &[vec![0.8, 0.2], vec![0.6, 0.4], vec![0.5, 0.5]]).unwrap();
        let (c, y) = softmax_threshold_mask(&p, 0.7).unwrap();
        assert_eq!(c.data(), &[1, 0, 0]);
        assert_eq!(y.data(), &[0, 0, 0]);
        let (c, _) = softmax_threshold_mask(&p, 0.5).unwrap();
        assert_eq!(c.data(), &[1, 1, 0]);
        assert!(softmax_threshold_mask(&p, 1.0).is_err());
        assert!(softmax_threshold_mask(&p, 0.0).is_err());
    }

    #[test]
    fn tau_half_marks_all_but_exact_ties() {
        // exhaustive grid of binary probability pairs
        for i in 0..=1000 {
            let a = i as f64 / 1000.0;
            let p = ProbMap::<f64>::from_pixels(1, 1, &[vec![a, 1.0 - a]]).unwrap();
            let (c, _) = softmax_threshold_mask(&p, 0.5).unwrap();
            assert_eq!(c.data()[0] == 1, i != 500, "a = {a}");
        }
    }

    #[test]
    fn quality_counts_and_undefined() {
        let truth = lm(&[&[1, 1, 1, 1, 1, 0, 0]]);
        let pseudo = lm(&[&[1, 1, 1, 0, 0, 1, 0]]);
        let q = mask_quality(&RegionMask::filled(1, 7, true), &pseudo, &truth).unwrap();
        assert_eq!((q.counts.tp, q.counts.fp, q.counts.fn_), (3, 1, 2));
        assert_eq!(q.ppv, Some(0.75));
        assert_eq!(q.tpr, Some(0.6));
        assert_eq!(q.csi, Some(0.5));

        let q = mask_quality(&RegionMask::filled(1, 7, true), &truth, &truth).unwrap();
        assert_eq!((q.ppv, q.tpr, q.csi), (Some(1.0), Some(1.0), Some(1.0)));

        let q = mask_quality(&RegionMask::filled(1, 7, false), &pseudo, &truth).unwrap();
        assert_eq!((q.ppv, q.tpr, q.csi), (None, None, None));
    }

    #[test]
    fn png_export_is_binary() {
        let m = RegionMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let img = m.to_gray_image();
        assert_eq!(img.as_raw(), &vec![0, 255, 255, 0]);
    }
}
