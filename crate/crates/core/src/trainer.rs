//! Pretraining on labeled data, then alternating certain-region
//! self-training, uncertain-region consistency against a mean teacher, and
//! the supervised three-head objective.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorFile;
use crate::data::{AugmentParams, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::losses::{certain_region_objective, consistency_objective, crm_objective, DEFAULT_ALPHA};
use crate::metrics::{Counts, ImageMetrics, MetricReport};
use crate::model::{
    build_model_with, HeadInit, ImageTensor, LabelMap, ModelConfig, ModelGrads, ModelState, Mode, ProbMap, SegNet,
    TeacherState, DEFAULT_HEAD_WIDTH, SIZE_MULTIPLE,
};
use crate::nn::Module;
use crate::optim::{Adam, AdamConfig, Moments};
use crate::tensor::{Real, Tensor};
use crate::uncertainty::{make_masks, quality_from_counts, MaskQuality, RegionMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Seg,
    SegSt,
    SegStMask,
    SegMt,
    SegMtMask,
    Ours,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Seg,
        Variant::SegSt,
        Variant::SegStMask,
        Variant::SegMt,
        Variant::SegMtMask,
        Variant::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Seg => "seg",
            Variant::SegSt => "seg+st",
            Variant::SegStMask => "seg+st_mask",
            Variant::SegMt => "seg+mt",
            Variant::SegMtMask => "seg+mt_mask",
            Variant::Ours => "ours",
        }
    }

    /// Certain-region step: `None` when disabled, `Some(true)` when
    /// restricted to the certain mask, `Some(false)` over all pixels.
    pub fn certain_step(self) -> Option<bool> {
        match self {
            Variant::SegSt => Some(false),
            Variant::SegStMask | Variant::Ours => Some(true),
            _ => None,
        }
    }

    /// Consistency step, with the same encoding as [`Variant::certain_step`].
    pub fn consistency_step(self) -> Option<bool> {
        match self {
            Variant::SegMt => Some(false),
            Variant::SegMtMask | Variant::Ours => Some(true),
            _ => None,
        }
    }

    pub fn is_semi_supervised(self) -> bool {
        self != Variant::Seg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub relabel_interval: usize,
    /// Run the supervised step on every `crm_every`-th joint iteration.
    pub crm_every: usize,
    pub seed: u64,
    pub variant: Variant,
    pub augment: bool,
    /// Standard deviation of Gaussian noise added to the teacher input; 0 disables it.
    pub teacher_noise: f64,
    pub channels: Vec<usize>,
    pub head_width: usize,
    pub head_init: HeadInit,
    /// Test-set DSC is logged every this many joint epochs; 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: 0.99,
            lr: 1e-3,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 4,
            pretrain_epochs: 30,
            joint_epochs: 100,
            relabel_interval: 5,
            crm_every: 1,
            seed: 0,
            variant: Variant::Ours,
            augment: true,
            teacher_noise: 0.0,
            channels: vec![16, 32, 64, 128],
            head_width: DEFAULT_HEAD_WIDTH,
            head_init: HeadInit::Independent,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} must lie in [0, 1]", self.beta));
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be at least 1", self.alpha));
        }
        if self.relabel_interval == 0 || self.batch_size == 0 || self.crm_every == 0 {
            return bad("relabel_interval, batch_size and crm_every must be positive".into());
        }
        if !(self.teacher_noise >= 0.0 && self.teacher_noise.is_finite()) {
            return bad(format!("teacher noise {} must be non-negative", self.teacher_noise));
        }
        self.adam().validate()?;
        self.model_config(2).validate().map(|_| ())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig::new(&self.channels, classes).with_head_width(self.head_width)
    }
}

/// Blends every tensor (weights and normalization statistics):
/// `teacher = beta * teacher + (1 - beta) * student`.
pub fn ema_update<T: Real>(student: &SegNet<T>, teacher: &mut TeacherState<T>, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("EMA coefficient {beta} must lie in [0, 1]")));
    }
    teacher.check_congruent(student)?;
    let (b, c) = (T::lit(beta), T::lit(1.0 - beta));
    for ((_, _, t), (_, _, s)) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = b * *tv + c * sv;
        }
    }
    Ok(())
}

pub fn init_teacher<T: Real>(model: &ModelState<T>) -> TeacherState<T> {
    model.net.clone()
}

/// Argmax of the main head; auxiliary heads are never consulted.
pub fn predict<T: Real>(net: &SegNet<T>, x: &ImageTensor) -> Result<LabelMap> {
    Ok(net.forward(x)?.argmax())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub pseudo: LabelMap,
    pub certain: RegionMask,
    pub uncertain: RegionMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelCache {
    pub entries: Vec<CacheEntry>,
    pub stamp: usize,
}

impl PseudoLabelCache {
    pub fn uncertain_fraction(&self) -> Option<f64> {
        let total: usize = self.entries.iter().map(|e| e.uncertain.data().len()).sum();
        let on: usize = self.entries.iter().map(|e| e.uncertain.count()).sum();
        crate::metrics::ratio(on, total)
    }

    /// Quality of the pseudo labels inside the certain regions, pooled over images.
    pub fn quality(&self, truth: &[LabelMap]) -> Result<MaskQuality> {
        if truth.len() != self.entries.len() {
            return Err(Error::Shape(format!("{} truths for {} cache entries", truth.len(), self.entries.len())));
        }
        let mut pooled = Counts::default();
        for (e, t) in self.entries.iter().zip(truth) {
            let c = crate::uncertainty::mask_quality(&e.certain, &e.pseudo, t)?.counts;
            pooled.tp += c.tp;
            pooled.fp += c.fp;
            pooled.fn_ += c.fn_;
            pooled.tn += c.tn;
        }
        Ok(quality_from_counts(pooled))
    }
}

/// Pseudo labels from the main head and certain/uncertain masks from the
/// disagreement of the auxiliary heads, all in inference mode.
pub fn relabel(model: &ModelState, unlabeled: &[ImageTensor], epoch: usize) -> Result<PseudoLabelCache> {
    let entries = unlabeled
        .par_iter()
        .map(|x| {
            let (p, con, rad) = model.forward_all(x)?;
            let (uncertain, certain) = make_masks(&con.argmax(), &rad.argmax())?;
            Ok(CacheEntry {
                pseudo: p.argmax(),
                certain,
                uncertain,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabelCache { entries, stamp: epoch })
}

pub fn evaluate(net: &SegNet, samples: &[Sample]) -> Result<MetricReport> {
    let rows = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| ImageMetrics::evaluate(format!("img_{i:04}"), &predict(net, &s.image)?, &s.label, 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Joint,
}

/// Per-epoch means of each loss over the steps that ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub phase: Phase,
    pub epoch: usize,
    pub l_crm: Option<f64>,
    pub l_csn: Option<f64>,
    pub l_cnt: Option<f64>,
    pub uncertain_fraction: Option<f64>,
    pub mask_ppv: Option<f64>,
    pub mask_tpr: Option<f64>,
    pub mask_csi: Option<f64>,
    pub val_dsc: Option<f64>,
}

pub const EPOCH_COLUMNS: &str = "phase,epoch,l_crm,l_csn,l_cnt,uncertain_fraction,mask_ppv,mask_tpr,mask_csi,val_dsc";

impl EpochStats {
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| crate::metrics::UNDEFINED.to_string(), |x| format!("{x:.6}"));
        let phase = match self.phase {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        };
        format!(
            "{phase},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            f(self.l_crm),
            f(self.l_csn),
            f(self.l_cnt),
            f(self.uncertain_fraction),
            f(self.mask_ppv),
            f(self.mask_tpr),
            f(self.mask_csi),
            f(self.val_dsc)
        )
    }
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Endless stream of seeded permutations of `0..n`.
struct Sampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size.min(self.n))
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

const STREAM_LABELED: u64 = 0;
const STREAM_UNLABELED: u64 = 1;
const STREAM_AUG_LABELED: u64 = 2;
const STREAM_AUG_UNLABELED: u64 = 3;
const STREAM_NOISE: u64 = 4;

fn epoch_rng(seed: u64, phase: Phase, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = match phase {
        Phase::Pretrain => 0,
        Phase::Joint => 1,
    };
    rng.set_stream((p << 40) | ((epoch as u64) << 8) | purpose);
    rng
}

fn batch_tensor(images: &[&ImageTensor]) -> Result<Tensor<f32>> {
    let (h, w) = (images[0].height(), images[0].width());
    if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || images.iter().any(|x| (x.height(), x.width()) != (h, w)) {
        return Err(Error::Shape(format!(
            "training batches need equal image sizes with sides divisible by {SIZE_MULTIPLE}"
        )));
    }
    let data: Vec<&[f32]> = images.iter().map(|x| x.data()).collect();
    Ok(Tensor::stack(&data, 1, h, w))
}

fn check_loss(value: f64, phase: &'static str, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { phase, batch })
    }
}

/// Mutable training state; everything needed to resume lives here.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelState,
    pub teacher: Option<TeacherState>,
    pub adam: Adam<f32>,
    pub cache: Option<PseudoLabelCache>,
    pub pretrain_done: usize,
    pub joint_done: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let model = build_model_with::<f32>(cfg.seed, &cfg.model_config(classes), cfg.head_init)?;
        Ok(Self {
            adam: Adam::new(cfg.adam()),
            cfg,
            model,
            teacher: None,
            cache: None,
            pretrain_done: 0,
            joint_done: 0,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.pretrain_done >= self.cfg.pretrain_epochs && self.joint_done >= self.cfg.joint_epochs
    }

    fn step(&mut self, grads: &ModelGrads<f32>) -> Result<()> {
        self.adam.step(&mut self.model, grads)
    }

    fn labeled_batch(&self, split: &DatasetSplit, idx: &[usize], aug: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Vec<LabelMap>)> {
        let mut images = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = &split.labeled[i];
            if self.cfg.augment {
                let a = AugmentParams::sample(aug);
                images.push(a.apply_image(&s.image));
                labels.push(a.apply_labels(&s.label));
            } else {
                images.push(s.image.clone());
                labels.push(s.label.clone());
            }
        }
        Ok((batch_tensor(&images.iter().collect::<Vec<_>>())?, labels))
    }

    fn crm_step(&mut self, split: &DatasetSplit, idx: &[usize], aug: &mut ChaCha8Rng, batch_no: usize, phase: &'static str) -> Result<f64> {
        let (x, y) = self.labeled_batch(split, idx, aug)?;
        let refs: Vec<&LabelMap> = y.iter().collect();
        let (obj, _) = crm_objective(&self.model, &x, &refs, self.cfg.alpha, Mode::Train)?;
        check_loss(obj.loss.value, phase, batch_no)?;
        self.model.absorb(&obj.pass);
        self.step(&obj.grads)?;
        Ok(obj.loss.value)
    }

    pub fn pretrain_epoch(&mut self, split: &DatasetSplit) -> Result<EpochStats> {
        let m = split.labeled.len();
        if m == 0 {
            return Err(Error::EmptyPartition("pretraining needs at least one labeled image".into()));
        }
        let epoch = self.pretrain_done;
        let mut order = Sampler::new(m, epoch_rng(self.cfg.seed, Phase::Pretrain, epoch, STREAM_LABELED));
        let mut aug = epoch_rng(self.cfg.seed, Phase::Pretrain, epoch, STREAM_AUG_LABELED);
        let mut crm = Mean::default();
        for b in 0..m.div_ceil(self.cfg.batch_size) {
            let idx = order.next_batch(self.cfg.batch_size);
            crm.add(self.crm_step(split, &idx, &mut aug, b, "pretrain")?);
        }
        self.pretrain_done += 1;
        Ok(EpochStats {
            phase: Phase::Pretrain,
            epoch,
            l_crm: crm.get(),
            l_csn: None,
            l_cnt: None,
            uncertain_fraction: None,
            mask_ppv: None,
            mask_tpr: None,
            mask_csi: None,
            val_dsc: None,
        })
    }

    /// Recomputes the inference-mode normalization statistics from the
    /// un-augmented training pool.
    pub fn recalibrate(&mut self, split: &DatasetSplit) -> Result<()> {
        let pool: Vec<&ImageTensor> = split.labeled.iter().map(|s| &s.image).chain(&split.unlabeled).collect();
        let batches = pool
            .chunks(self.cfg.batch_size)
            .map(batch_tensor)
            .collect::<Result<Vec<_>>>()?;
        self.model.recalibrate(&batches)
    }

    fn refresh_cache(&mut self, split: &DatasetSplit) -> Result<()> {
        if !split.unlabeled.is_empty() && self.joint_done % self.cfg.relabel_interval == 0 {
            self.recalibrate(split)?;
            self.cache = Some(relabel(&self.model, &split.unlabeled, self.joint_done)?);
        }
        Ok(())
    }

    pub fn joint_epoch(&mut self, split: &DatasetSplit) -> Result<EpochStats> {
        let variant = self.cfg.variant;
        let (m, n) = (split.labeled.len(), split.unlabeled.len());
        if m == 0 {
            return Err(Error::EmptyPartition("joint training needs labeled images".into()));
        }
        if variant.is_semi_supervised() && n == 0 {
            return Err(Error::EmptyPartition(format!("variant {variant} needs unlabeled images")));
        }
        let epoch = self.joint_done;
        if self.teacher.is_none() {
            self.recalibrate(split)?;
            self.teacher = Some(init_teacher(&self.model));
        }
        self.refresh_cache(split)?;
        let seed = self.cfg.seed;
        let rng = |purpose| epoch_rng(seed, Phase::Joint, epoch, purpose);
        let (mut lab, mut unl) = (Sampler::new(m, rng(STREAM_LABELED)), Sampler::new(n, rng(STREAM_UNLABELED)));
        let (mut aug_l, mut aug_u, mut noise) = (rng(STREAM_AUG_LABELED), rng(STREAM_AUG_UNLABELED), rng(STREAM_NOISE));
        let (mut crm, mut csn, mut cnt) = (Mean::default(), Mean::default(), Mean::default());
        let b = self.cfg.batch_size;
        for it in 0..m.max(n).div_ceil(b) {
            let uidx = unl.next_batch(b);
            if variant.is_semi_supervised() {
                self.unlabeled_steps(split, &uidx, &mut aug_u, &mut noise, it, &mut csn, &mut cnt)?;
            }
            let lidx = lab.next_batch(b);
            if it % self.cfg.crm_every == 0 {
                crm.add(self.crm_step(split, &lidx, &mut aug_l, it, "crm")?);
            }
            let teacher = self.teacher.as_mut().expect("initialized above");
            ema_update(&self.model.net, teacher, self.cfg.beta)?;
        }
        self.joint_done += 1;
        let (mut stats, cache) = (
            EpochStats {
                phase: Phase::Joint,
                epoch,
                l_crm: crm.get(),
                l_csn: csn.get(),
                l_cnt: cnt.get(),
                uncertain_fraction: None,
                mask_ppv: None,
                mask_tpr: None,
                mask_csi: None,
                val_dsc: None,
            },
            self.cache.as_ref(),
        );
        if let Some(c) = cache {
            stats.uncertain_fraction = c.uncertain_fraction();
            if split.unlabeled_truth().len() == c.entries.len() {
                let q = c.quality(split.unlabeled_truth())?;
                (stats.mask_ppv, stats.mask_tpr, stats.mask_csi) = (q.ppv, q.tpr, q.csi);
            }
        }
        if self.cfg.eval_every > 0 && self.joint_done % self.cfg.eval_every == 0 && !split.test.is_empty() {
            let mut probe = self.clone();
            probe.recalibrate(split)?;
            stats.val_dsc = evaluate(&probe.model.net, &split.test)?.mean_dsc();
        }
        Ok(stats)
    }

    #[allow(clippy::too_many_arguments)]
    fn unlabeled_steps(
        &mut self,
        split: &DatasetSplit,
        idx: &[usize],
        aug: &mut ChaCha8Rng,
        noise: &mut ChaCha8Rng,
        it: usize,
        csn: &mut Mean,
        cnt: &mut Mean,
    ) -> Result<()> {
        let variant = self.cfg.variant;
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Config("pseudo-label cache missing for a semi-supervised step".into()))?;
        let mut images = Vec::with_capacity(idx.len());
        let (mut pseudo, mut certain, mut uncertain) = (Vec::new(), Vec::new(), Vec::new());
        for &j in idx {
            let e = &cache.entries[j];
            let a = if self.cfg.augment {
                AugmentParams::sample(aug)
            } else {
                AugmentParams::IDENTITY
            };
            images.push(a.apply_image(&split.unlabeled[j]));
            pseudo.push(a.apply_labels(&e.pseudo));
            certain.push(a.apply_mask(&e.certain));
            uncertain.push(a.apply_mask(&e.uncertain));
        }
        let x = batch_tensor(&images.iter().collect::<Vec<_>>())?;
        let (h, w) = (images[0].height(), images[0].width());
        let everywhere = vec![RegionMask::filled(h, w, true); idx.len()];

        if let Some(masked) = variant.certain_step() {
            let masks: Vec<&RegionMask> = if masked { certain.iter().collect() } else { everywhere.iter().collect() };
            let labels: Vec<&LabelMap> = pseudo.iter().collect();
            let obj = certain_region_objective(&self.model.net, &x, &labels, &masks, Mode::Train)?;
            if !obj.loss.is_empty() {
                check_loss(obj.loss.value, "certain-region", it)?;
                self.model.net.absorb(&obj.pass);
                self.step(&obj.grads)?;
                csn.add(obj.loss.value);
            }
        }

        if let Some(masked) = variant.consistency_step() {
            let masks: Vec<&RegionMask> = if masked { uncertain.iter().collect() } else { everywhere.iter().collect() };
            let teacher = self.teacher.as_ref().expect("teacher exists during joint training");
            let mut tx = x.clone();
            if self.cfg.teacher_noise > 0.0 {
                for v in tx.data_mut() {
                    *v += (noise.sample::<f64, _>(StandardNormal) * self.cfg.teacher_noise) as f32;
                }
            }
            let tpass = teacher.forward_batch(&tx, Mode::Eval)?;
            let tprobs = tpass.normal.as_ref().expect("main head").probs();
            let obj = consistency_objective(&self.model.net, &x, tprobs, &masks, Mode::Train)?;
            if !obj.loss.is_empty() {
                check_loss(obj.loss.value, "consistency", it)?;
                self.model.net.absorb(&obj.pass);
                self.step(&obj.grads)?;
                cnt.add(obj.loss.value);
            }
        }
        Ok(())
    }

    /// Runs the remaining epochs, calling `observer` after each one. The
    /// normalization statistics are recalibrated once the schedule is
    /// complete, before the last observer call.
    pub fn run(&mut self, split: &DatasetSplit, mut observer: impl FnMut(&Trainer, &EpochStats) -> Result<()>) -> Result<Vec<EpochStats>> {
        let mut history = Vec::new();
        while !self.is_finished() {
            let s = if self.pretrain_done < self.cfg.pretrain_epochs {
                self.pretrain_epoch(split)?
            } else {
                self.joint_epoch(split)?
            };
            if self.is_finished() {
                self.recalibrate(split)?;
            }
            observer(self, &s)?;
            history.push(s);
        }
        if history.is_empty() {
            self.recalibrate(split)?;
        }
        Ok(history)
    }

    /// Network used at test time: the teacher is not used, only the student
    /// encoder and main head.
    pub fn final_net(&self) -> &SegNet {
        &self.model.net
    }

    pub fn snapshot(&self) -> TensorFile {
        let mut f = TensorFile::new(self.model.config().clone());
        f.push_module("student", &self.model);
        if let Some(t) = &self.teacher {
            f.push_module("teacher", t);
        }
        for (name, st) in self.adam.state() {
            f.insert(format!("adam.m.{name}"), st.m.clone());
            f.insert(format!("adam.v.{name}"), st.v.clone());
            f.insert(format!("adam.t.{name}"), Tensor::filled(&[1], st.t as f32));
        }
        f.insert(
            "meta.progress",
            Tensor::from_vec(&[2], vec![self.pretrain_done as f32, self.joint_done as f32]),
        );
        if let Some(c) = &self.cache {
            let (h, w) = c.entries.first().map_or((0, 0), |e| (e.pseudo.height(), e.pseudo.width()));
            let n = c.entries.len();
            let pseudo = c.entries.iter().flat_map(|e| e.pseudo.data().iter().map(|&v| v as f32)).collect();
            let certain = c.entries.iter().flat_map(|e| e.certain.data().iter().map(|&v| v as f32)).collect();
            f.insert("cache.stamp", Tensor::filled(&[1], c.stamp as f32));
            f.insert("cache.pseudo", Tensor::from_vec(&[n, h, w], pseudo));
            f.insert("cache.certain", Tensor::from_vec(&[n, h, w], certain));
        }
        f
    }

    pub fn restore(cfg: TrainConfig, file: &TensorFile) -> Result<Self> {
        cfg.validate()?;
        if file.config != cfg.model_config(file.config.classes) {
            return Err(Error::Config("snapshot architecture differs from the configuration".into()));
        }
        let model = file.to_model("student")?;
        let has_teacher = file.tensors.keys().any(|k| k.starts_with("teacher."));
        let teacher = has_teacher.then(|| file.to_segnet("teacher")).transpose()?;
        let mut adam = Adam::new(cfg.adam());
        for (key, m) in file.tensors.range("adam.m.".to_string().."adam.m/".to_string()) {
            let name = &key["adam.m.".len()..];
            let get = |k: &str| file.get(k).ok_or_else(|| Error::Config(format!("snapshot lacks `{k}`")));
            let v = get(&format!("adam.v.{name}"))?.clone();
            let t = get(&format!("adam.t.{name}"))?.data()[0] as u64;
            adam.insert_state(name.to_string(), Moments { m: m.clone(), v, t });
        }
        let progress = file
            .get("meta.progress")
            .ok_or_else(|| Error::Config("snapshot lacks training progress".into()))?;
        let cache = match (file.get("cache.pseudo"), file.get("cache.certain"), file.get("cache.stamp")) {
            (Some(p), Some(c), Some(s)) => {
                let (n, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
                let entries = (0..n)
                    .map(|i| {
                        let part = |t: &Tensor<f32>| t.data()[i * h * w..(i + 1) * h * w].iter().map(|&v| v as u8).collect::<Vec<_>>();
                        let certain = RegionMask::new(h, w, part(c))?;
                        Ok(CacheEntry {
                            pseudo: LabelMap::new(h, w, part(p))?,
                            uncertain: certain.complement(),
                            certain,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(PseudoLabelCache {
                    entries,
                    stamp: s.data()[0] as usize,
                })
            }
            _ => None,
        };
        Ok(Self {
            cfg,
            model,
            teacher,
            adam,
            cache,
            pretrain_done: progress.data()[0] as usize,
            joint_done: progress.data()[1] as usize,
        })
    }
}

/// Trains the configured variant from scratch and returns the final state.
pub fn train(split: &DatasetSplit, cfg: &TrainConfig, classes: usize) -> Result<(Trainer, Vec<EpochStats>)> {
    let mut t = Trainer::new(cfg.clone(), classes)?;
    let history = t.run(split, |_, _| Ok(()))?;
    Ok((t, history))
}

/// Assigns each pixel the class whose binary model claims it with the
/// highest foreground probability; unclaimed pixels are background.
/// `fg[c]` holds the binary output of the model for class `c + 1`.
pub fn vote<T: Real>(fg: &[ProbMap<T>]) -> Result<LabelMap> {
    let first = fg.first().ok_or_else(|| Error::Config("voting needs at least one model".into()))?;
    if fg.iter().any(|p| !p.same_shape(first) || p.classes() != 2) {
        return Err(Error::Shape("voting needs binary maps of one size".into()));
    }
    let data = (0..first.pixels())
        .map(|z| {
            let mut best: Option<(usize, f64)> = None;
            for (c, p) in fg.iter().enumerate() {
                let (bg, f) = (p.prob(z, 0).as_f64(), p.prob(z, 1).as_f64());
                if f > bg && best.is_none_or(|(_, b)| f > b) {
                    best = Some((c, f));
                }
            }
            best.map_or(0, |(c, _)| c as u8 + 1)
        })
        .collect();
    LabelMap::new(first.height(), first.width(), data)
}

/// One-vs-rest ensemble of binary networks.
#[derive(Clone, Debug)]
pub struct MultiClassModel {
    pub models: Vec<SegNet>,
}

impl MultiClassModel {
    pub fn predict(&self, x: &ImageTensor) -> Result<LabelMap> {
        let maps = self.models.iter().map(|m| m.forward(x)).collect::<Result<Vec<_>>>()?;
        vote(&maps)
    }
}

fn binary_split(split: &DatasetSplit, class: u8) -> DatasetSplit {
    let bin = |s: &Sample| Sample {
        image: s.image.clone(),
        label: s.label.binary_for(class),
    };
    let unlabeled = split
        .unlabeled
        .iter()
        .zip(split.unlabeled_truth())
        .map(|(x, y)| Sample {
            image: x.clone(),
            label: y.binary_for(class),
        })
        .collect::<Vec<_>>();
    let mut out = DatasetSplit::new(split.labeled.iter().map(bin).collect(), unlabeled, split.test.iter().map(bin).collect());
    if split.unlabeled_truth().is_empty() {
        out.unlabeled = split.unlabeled.clone();
    }
    out
}

/// Decomposes a `classes`-way task into binary sub-tasks and trains one
/// model per foreground class; the seed is offset per class.
pub fn train_multiclass(split: &DatasetSplit, cfg: &TrainConfig, classes: usize) -> Result<MultiClassModel> {
    if classes < 3 {
        return Err(Error::Config(format!("multi-class training needs at least 3 classes, got {classes}")));
    }
    for s in split.labeled.iter().chain(&split.test) {
        s.label.check_classes(classes)?;
    }
    let models = (1..classes)
        .map(|c| {
            let sub = binary_split(split, c as u8);
            let cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(c as u64),
                ..cfg.clone()
            };
            train(&sub, &cfg, 2).map(|(t, _)| t.model.into_segnet())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiClassModel { models })
}
