//! Segmentation backbone with three prediction heads sharing one encoder.
//!
//! The encoder `E` is a four-level U-Net producing `channels[0]` feature maps
//! at input resolution. Each decoder (`D`, `D_con`, `D_rad`) is a small head
//! on those features. Only `E` and `D` are needed at inference time; the
//! teacher network mirrors exactly that pair.

mod types;
mod unet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use types::{ImageTensor, LabelMap, ProbMap, MIN_SIDE, SIZE_MULTIPLE};
pub use unet::{Block, ConvBnRelu, Encoder, EncoderCache, Head, HeadCache, Mode};

use crate::error::{Error, Result};
use crate::nn::{join, Module, NamedMut, NamedRef, BN_MOMENTUM};
use crate::tensor::{Real, Tensor};

/// Head widths default to the 64-channel last-level feature width used at full scale.
pub const DEFAULT_HEAD_WIDTH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder widths per level, finest first.
    pub channels: Vec<usize>,
    /// Width of the two 3x3 layers inside each head.
    pub head_width: usize,
    pub classes: usize,
}

impl ModelConfig {
    pub fn new(channels: &[usize], classes: usize) -> Self {
        Self {
            channels: channels.to_vec(),
            head_width: DEFAULT_HEAD_WIDTH,
            classes,
        }
    }

    pub fn with_head_width(mut self, width: usize) -> Self {
        self.head_width = width;
        self
    }

    pub fn validate(&self) -> Result<[usize; 4]> {
        let levels: [usize; 4] = self.channels.as_slice().try_into().map_err(|_| {
            Error::Config(format!(
                "channel list must have 4 levels (3 poolings, inputs padded to multiples of {SIZE_MULTIPLE}); got {}",
                self.channels.len()
            ))
        })?;
        if levels.contains(&0) || self.head_width == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.classes < 2 || self.classes > u8::MAX as usize {
            return Err(Error::Config(format!("class count {} outside 2..=255", self.classes)));
        }
        Ok(levels)
    }
}

/// Encoder plus one decoder: the student's main path, and the teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet<T = f32> {
    pub encoder: Encoder<T>,
    pub decoder: Head<T>,
    config: ModelConfig,
}

/// The mean-teacher copy `(E', D')`; only ever EMA-blended, never optimized.
pub type TeacherState<T = f32> = SegNet<T>;

/// Student with all three heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T = f32> {
    pub net: SegNet<T>,
    pub con_decoder: Head<T>,
    pub rad_decoder: Head<T>,
}

/// Which heads take part in a training pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSet {
    pub normal: bool,
    pub conservative: bool,
    pub radical: bool,
}

impl HeadSet {
    pub const ALL: Self = Self {
        normal: true,
        conservative: true,
        radical: true,
    };
    pub const NORMAL: Self = Self {
        normal: true,
        conservative: false,
        radical: false,
    };
}

/// Forward record of one batch, retained for the backward pass.
#[derive(Clone, Debug)]
pub struct Pass<T> {
    encoder: EncoderCache<T>,
    pub normal: Option<HeadCache<T>>,
    pub conservative: Option<HeadCache<T>>,
    pub radical: Option<HeadCache<T>>,
}

/// Parameter gradients; heads that did not take part are `None`.
#[derive(Clone, Debug)]
pub struct ModelGrads<T> {
    pub encoder: Encoder<T>,
    pub decoder: Option<Head<T>>,
    pub con_decoder: Option<Head<T>>,
    pub rad_decoder: Option<Head<T>>,
}

impl<T: Real> Module<T> for ModelGrads<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        self.encoder.collect(&join(prefix, "encoder"), out);
        for (name, h) in [
            ("decoder", &self.decoder),
            ("con_decoder", &self.con_decoder),
            ("rad_decoder", &self.rad_decoder),
        ] {
            if let Some(h) = h {
                h.collect(&join(prefix, name), out);
            }
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        self.encoder.collect_mut(&join(prefix, "encoder"), out);
        for (name, h) in [
            ("decoder", &mut self.decoder),
            ("con_decoder", &mut self.con_decoder),
            ("rad_decoder", &mut self.rad_decoder),
        ] {
            if let Some(h) = h {
                h.collect_mut(&join(prefix, name), out);
            }
        }
    }
}

/// How the two auxiliary heads are initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInit {
    /// Every head draws its own weights from the seeded stream.
    #[default]
    Independent,
    /// Conservative and radical heads start as copies of the main head.
    Shared,
}

/// Builds a freshly initialized three-head model; deterministic in `seed`.
pub fn build_model(seed: u64, channels: &[usize], classes: usize) -> Result<ModelState> {
    build_model_with(seed, &ModelConfig::new(channels, classes), HeadInit::Independent)
}

pub fn build_model_with<T: Real>(seed: u64, config: &ModelConfig, init: HeadInit) -> Result<ModelState<T>> {
    let levels = config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::new(levels, &mut rng);
    let feat = encoder.out_channels();
    let decoder = Head::new(feat, config.head_width, config.classes, &mut rng);
    let (con_decoder, rad_decoder) = match init {
        HeadInit::Independent => (
            Head::new(feat, config.head_width, config.classes, &mut rng),
            Head::new(feat, config.head_width, config.classes, &mut rng),
        ),
        HeadInit::Shared => (decoder.clone(), decoder.clone()),
    };
    Ok(ModelState {
        net: SegNet {
            encoder,
            decoder,
            config: config.clone(),
        },
        con_decoder,
        rad_decoder,
    })
}

fn probs_of<T: Real>(cache: &HeadCache<T>, h: usize, w: usize) -> ProbMap<T> {
    ProbMap::from_batch(cache.probs(), 0, h, w)
}

impl<T: Real> SegNet<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Inference-mode prediction for one image.
    pub fn forward(&self, x: &ImageTensor) -> Result<ProbMap<T>> {
        let batch = x.to_padded_batch::<T>();
        let (feat, _) = self.encoder.forward(&batch, Mode::Eval)?;
        let head = self.decoder.forward(&feat, Mode::Eval, "decoder")?;
        Ok(probs_of(&head, x.height(), x.width()))
    }

    /// Forward over an NCHW batch whose sides are multiples of 8.
    pub fn forward_batch(&self, batch: &Tensor<T>, mode: Mode) -> Result<Pass<T>> {
        let (feat, encoder) = self.encoder.forward(batch, mode)?;
        let normal = Some(self.decoder.forward(&feat, mode, "decoder")?);
        Ok(Pass {
            encoder,
            normal,
            conservative: None,
            radical: None,
        })
    }

    /// Gradients of a loss given `dL/dprobs` of the main head.
    pub fn backward(&self, pass: &Pass<T>, dprobs: &Tensor<T>) -> ModelGrads<T> {
        let mut grads = ModelGrads {
            encoder: self.encoder.zeros_like(),
            decoder: Some(self.decoder.zeros_like()),
            con_decoder: None,
            rad_decoder: None,
        };
        let cache = pass.normal.as_ref().expect("main head was run");
        let dfeat = self
            .decoder
            .backward(cache, dprobs, grads.decoder.as_mut().expect("allocated"));
        self.encoder.backward(&pass.encoder, &dfeat, &mut grads.encoder);
        grads
    }

    /// Folds the batch statistics of a training pass into the running averages.
    pub fn absorb(&mut self, pass: &Pass<T>) {
        self.absorb_with(pass, BN_MOMENTUM);
    }

    pub fn absorb_with(&mut self, pass: &Pass<T>, momentum: f64) {
        self.encoder.absorb(&pass.encoder, momentum);
        if let Some(c) = &pass.normal {
            self.decoder.absorb(c, momentum);
        }
    }

    pub fn cast<U: Real>(&self) -> SegNet<U> {
        let mut out: SegNet<U> = build_model_with::<U>(0, &self.config, HeadInit::Independent)
            .expect("config already validated")
            .net;
        copy_cast(self, &mut out);
        out
    }

    /// Errors unless `other` has identical tensor names and shapes.
    pub fn check_congruent(&self, other: &SegNet<T>) -> Result<()> {
        let a = self.tensors();
        let b = other.tensors();
        if a.len() != b.len()
            || a
                .iter()
                .zip(&b)
                .any(|((na, _, ta), (nb, _, tb))| na != nb || ta.shape() != tb.shape())
        {
            return Err(Error::Shape("teacher and student networks are not shape-congruent".into()));
        }
        Ok(())
    }
}

fn copy_cast<T: Real, U: Real>(src: &impl Module<T>, dst: &mut impl Module<U>) {
    let from = src.tensors();
    for ((na, _, to), (nb, _, t)) in dst.tensors_mut().into_iter().zip(from) {
        assert_eq!(na, nb);
        *to = t.cast();
    }
}

impl<T: Real> Module<T> for SegNet<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.decoder.collect(&join(prefix, "decoder"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        self.encoder.collect_mut(&join(prefix, "encoder"), out);
        self.decoder.collect_mut(&join(prefix, "decoder"), out);
    }
}

impl<T: Real> ModelState<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn classes(&self) -> usize {
        self.net.config.classes
    }

    /// Inference-mode normal, conservative and radical predictions from one
    /// shared encoder pass.
    pub fn forward_all(&self, x: &ImageTensor) -> Result<(ProbMap<T>, ProbMap<T>, ProbMap<T>)> {
        let batch = x.to_padded_batch::<T>();
        let pass = self.forward_batch(&batch, Mode::Eval, HeadSet::ALL)?;
        let (h, w) = (x.height(), x.width());
        Ok((
            probs_of(pass.normal.as_ref().expect("run"), h, w),
            probs_of(pass.conservative.as_ref().expect("run"), h, w),
            probs_of(pass.radical.as_ref().expect("run"), h, w),
        ))
    }

    pub fn forward_batch(&self, batch: &Tensor<T>, mode: Mode, heads: HeadSet) -> Result<Pass<T>> {
        let (feat, encoder) = self.net.encoder.forward(batch, mode)?;
        let run = |on: bool, head: &Head<T>, name: &str| -> Result<Option<HeadCache<T>>> {
            if on {
                head.forward(&feat, mode, name).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Pass {
            encoder,
            normal: run(heads.normal, &self.net.decoder, "decoder")?,
            conservative: run(heads.conservative, &self.con_decoder, "con_decoder")?,
            radical: run(heads.radical, &self.rad_decoder, "rad_decoder")?,
        })
    }

    /// Gradients for a loss given `dL/dprobs` per head; feature gradients of
    /// every participating head are summed into the shared encoder.
    pub fn backward(
        &self,
        pass: &Pass<T>,
        dnormal: Option<&Tensor<T>>,
        dcon: Option<&Tensor<T>>,
        drad: Option<&Tensor<T>>,
    ) -> ModelGrads<T> {
        let mut dfeat: Option<Tensor<T>> = None;
        let mut run = |head: &Head<T>, cache: &Option<HeadCache<T>>, d: Option<&Tensor<T>>| -> Option<Head<T>> {
            let d = d?;
            let cache = cache.as_ref().expect("head gradient without forward");
            let mut g = head.zeros_like();
            let df = head.backward(cache, d, &mut g);
            match dfeat.as_mut() {
                Some(acc) => acc.add_assign(&df),
                None => dfeat = Some(df),
            }
            Some(g)
        };
        let decoder = run(&self.net.decoder, &pass.normal, dnormal);
        let con_decoder = run(&self.con_decoder, &pass.conservative, dcon);
        let rad_decoder = run(&self.rad_decoder, &pass.radical, drad);
        let mut encoder = self.net.encoder.zeros_like();
        if let Some(df) = dfeat {
            self.net.encoder.backward(&pass.encoder, &df, &mut encoder);
        }
        ModelGrads {
            encoder,
            decoder,
            con_decoder,
            rad_decoder,
        }
    }

    pub fn absorb(&mut self, pass: &Pass<T>) {
        self.absorb_with(pass, BN_MOMENTUM);
    }

    pub fn absorb_with(&mut self, pass: &Pass<T>, momentum: f64) {
        self.net.absorb_with(pass, momentum);
        if let Some(c) = &pass.conservative {
            self.con_decoder.absorb(c, momentum);
        }
        if let Some(c) = &pass.radical {
            self.rad_decoder.absorb(c, momentum);
        }
    }

    /// Replaces the running normalization statistics of every head by the
    /// average batch statistics over `batches`, with weights frozen.
    pub fn recalibrate(&mut self, batches: &[Tensor<T>]) -> Result<()> {
        for (k, b) in batches.iter().enumerate() {
            let pass = self.forward_batch(b, Mode::Train, HeadSet::ALL)?;
            self.absorb_with(&pass, 1.0 / (k + 1) as f64);
        }
        Ok(())
    }

    /// Drops the auxiliary heads, keeping the inference network `(E, D)`.
    pub fn into_segnet(self) -> SegNet<T> {
        self.net
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        let mut out = build_model_with::<U>(0, self.config(), HeadInit::Independent).expect("validated");
        copy_cast(self, &mut out);
        out
    }
}

impl<T: Real> Module<T> for ModelState<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        self.net.collect(prefix, out);
        self.con_decoder.collect(&join(prefix, "con_decoder"), out);
        self.rad_decoder.collect(&join(prefix, "rad_decoder"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        self.net.collect_mut(prefix, out);
        self.con_decoder.collect_mut(&join(prefix, "con_decoder"), out);
        self.rad_decoder.collect_mut(&join(prefix, "rad_decoder"), out);
    }
}

/// Teacher prediction `F'(x; E', D')`, checked against the student's layout.
pub fn forward_teacher<T: Real>(teacher: &TeacherState<T>, student: &ModelState<T>, x: &ImageTensor) -> Result<ProbMap<T>> {
    teacher.check_congruent(&student.net)?;
    teacher.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u32, side: usize) -> ImageTensor {
        let data = (0..side * side)
            .map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed)) % 1000) as f32 / 1000.0)
            .collect();
        ImageTensor::new(side, side, data).unwrap()
    }

    fn max_row_error(p: &ProbMap) -> f64 {
        (0..p.pixels())
            .map(|z| ((0..p.classes()).map(|k| p.prob(z, k) as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(7, &[4, 8, 8, 8], 2).unwrap();
        let b = build_model(7, &[4, 8, 8, 8], 2).unwrap();
        assert_eq!(a, b);
        let c = build_model(8, &[4, 8, 8, 8], 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_channel_lists() {
        assert!(build_model(0, &[8, 16, 32], 2).is_err());
        assert!(build_model(0, &[8, 16, 32, 64, 64], 2).is_err());
        assert!(build_model(0, &[8, 0, 32, 64], 2).is_err());
        assert!(build_model(0, &[8, 8, 8, 8], 1).is_err());
    }

    #[test]
    fn heads_emit_full_resolution_probabilities() {
        let model = build_model_with::<f32>(1, &ModelConfig::new(&[16, 32, 64, 64], 2).with_head_width(8), HeadInit::Independent)
            .unwrap();
        let (n, c, r) = model.forward_all(&image(1, 64)).unwrap();
        for p in [&n, &c, &r] {
            assert_eq!((p.classes(), p.height(), p.width()), (2, 64, 64));
            assert!(max_row_error(p) < 1e-6);
        }
    }

    #[test]
    fn three_classes_and_odd_sizes_are_cropped_back() {
        let model = build_model(2, &[4, 4, 8, 8], 3).unwrap();
        let data = vec![0.3; 19 * 21];
        let x = ImageTensor::new(19, 21, data).unwrap();
        let (n, _, _) = model.forward_all(&x).unwrap();
        assert_eq!((n.classes(), n.height(), n.width()), (3, 19, 21));
        assert!(max_row_error(&n) < 1e-6);
        assert!(n.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn inference_is_deterministic() {
        let model = build_model(3, &[4, 8, 8, 8], 2).unwrap();
        let x = image(5, 16);
        assert_eq!(model.forward_all(&x).unwrap(), model.forward_all(&x).unwrap());
    }

    #[test]
    fn perturbing_one_head_changes_only_its_output() {
        let model = build_model(4, &[4, 8, 8, 8], 2).unwrap();
        let x = image(9, 16);
        let (n0, c0, r0) = model.forward_all(&x).unwrap();
        let mut poked = model.clone();
        for v in poked.con_decoder.classifier.weight.data_mut() {
            *v += 0.25;
        }
        let (n1, c1, r1) = poked.forward_all(&x).unwrap();
        assert_eq!(n0, n1);
        assert_eq!(r0, r1);
        assert_ne!(c0, c1);
    }

    #[test]
    fn discarding_aux_heads_keeps_predictions() {
        let model = build_model(5, &[4, 8, 8, 8], 2).unwrap();
        let x = image(2, 24);
        let (n, _, _) = model.forward_all(&x).unwrap();
        let net = model.into_segnet();
        assert_eq!(net.forward(&x).unwrap(), n);
    }

    #[test]
    fn teacher_copy_matches_student_and_rejects_mismatch() {
        let model = build_model(6, &[4, 8, 8, 8], 2).unwrap();
        let teacher = model.net.clone();
        let x = image(3, 16);
        let (n, _, _) = model.forward_all(&x).unwrap();
        let t = forward_teacher(&teacher, &model, &x).unwrap();
        for (a, b) in n.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let other = build_model(6, &[4, 8, 8, 16], 2).unwrap();
        assert!(forward_teacher(&other.net, &model, &x).is_err());
    }

    #[test]
    fn non_finite_input_is_reported_with_layer() {
        let model = build_model(6, &[4, 8, 8, 8], 2).unwrap();
        let mut batch = Tensor::<f32>::zeros(&[1, 1, 16, 16]);
        batch.data_mut()[0] = f32::INFINITY;
        match model.forward_batch(&batch, Mode::Eval, HeadSet::ALL) {
            Err(Error::NonFinite { layer }) => assert!(layer.starts_with("encoder.down.0")),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn encoder_storage_is_shared() {
        let model = build_model(1, &[4, 8, 8, 8], 2).unwrap();
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _, _)| n).collect();
        let enc = names.iter().filter(|n| n.starts_with("encoder.")).count();
        assert!(enc > 0);
        assert!(names.iter().all(|n| !n.contains("con_decoder.encoder")));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }
}
