//! Four-level U-Net trunk and the lightweight prediction heads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    join, maxpool2, maxpool2_backward, relu_backward_inplace, relu_inplace, softmax_backward, softmax_channels,
    BatchNorm2d, BnCache, Conv2d, Module, NamedMut, NamedRef, UpConv,
};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics; no state is touched.
    Eval,
}

fn check_finite<T: Real>(t: &Tensor<T>, layer: impl FnOnce() -> String) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: layer() })
    }
}

/// 3x3 convolution, batch normalization, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

#[derive(Clone, Debug)]
pub struct UnitCache<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    output: Tensor<T>,
}

impl<T: Real> ConvBnRelu<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(in_ch, out_ch, 3, false, rng),
            bn: BatchNorm2d::new(out_ch),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv: self.conv.zeros_like(),
            bn: self.bn.zeros_like(),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, UnitCache<T>) {
        let z = self.conv.forward(x);
        let (mut y, bn) = match mode {
            Mode::Train => {
                let (y, c) = self.bn.forward_train(&z);
                (y, Some(c))
            }
            Mode::Eval => (self.bn.forward_eval(&z), None),
        };
        relu_inplace(&mut y);
        let cache = UnitCache {
            input: x.clone(),
            bn,
            output: y.clone(),
        };
        (y, cache)
    }

    fn backward(&self, cache: &UnitCache<T>, dy: &Tensor<T>, grad: &mut Self, need_dx: bool) -> Option<Tensor<T>> {
        let mut d = dy.clone();
        relu_backward_inplace(&cache.output, &mut d);
        let bn_cache = cache.bn.as_ref().expect("backward needs a training-mode forward");
        let dz = self.bn.backward(bn_cache, &d, &mut grad.bn);
        self.conv.backward(&cache.input, &dz, &mut grad.conv, need_dx)
    }

    fn absorb(&mut self, cache: &UnitCache<T>, momentum: f64) {
        if let Some(c) = &cache.bn {
            self.bn.update_running(c, momentum);
        }
    }
}

impl<T: Real> Module<T> for ConvBnRelu<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        self.conv.collect(&join(prefix, "conv"), out);
        self.bn.collect(&join(prefix, "bn"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        self.conv.collect_mut(&join(prefix, "conv"), out);
        self.bn.collect_mut(&join(prefix, "bn"), out);
    }
}

/// Two conv-BN-ReLU units at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub first: ConvBnRelu<T>,
    pub second: ConvBnRelu<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    first: UnitCache<T>,
    second: UnitCache<T>,
}

impl<T: Real> Block<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            first: ConvBnRelu::new(in_ch, out_ch, rng),
            second: ConvBnRelu::new(out_ch, out_ch, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            first: self.first.zeros_like(),
            second: self.second.zeros_like(),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode, name: &str) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (a, first) = self.first.forward(x, mode);
        check_finite(&a, || format!("{name}.first"))?;
        let (b, second) = self.second.forward(&a, mode);
        check_finite(&b, || format!("{name}.second"))?;
        Ok((b, BlockCache { first, second }))
    }

    fn backward(&self, cache: &BlockCache<T>, dy: &Tensor<T>, grad: &mut Self, need_dx: bool) -> Option<Tensor<T>> {
        let da = self
            .second
            .backward(&cache.second, dy, &mut grad.second, true)
            .expect("inner gradient");
        self.first.backward(&cache.first, &da, &mut grad.first, need_dx)
    }

    fn absorb(&mut self, cache: &BlockCache<T>, momentum: f64) {
        self.first.absorb(&cache.first, momentum);
        self.second.absorb(&cache.second, momentum);
    }
}

impl<T: Real> Module<T> for Block<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        self.first.collect(&join(prefix, "0"), out);
        self.second.collect(&join(prefix, "1"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        self.first.collect_mut(&join(prefix, "0"), out);
        self.second.collect_mut(&join(prefix, "1"), out);
    }
}

/// Shared feature extractor: contracting path, bottleneck and expanding path
/// with skip connections, ending in `channels[0]` feature maps at input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub down: Vec<Block<T>>,
    pub up: Vec<UpConv<T>>,
    pub up_blocks: Vec<Block<T>>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    down: Vec<BlockCache<T>>,
    pool_idx: Vec<Vec<u8>>,
    up_in: Vec<Tensor<T>>,
    up_blocks: Vec<BlockCache<T>>,
    skip_ch: Vec<usize>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng>(channels: [usize; 4], rng: &mut R) -> Self {
        let mut down = Vec::with_capacity(4);
        let mut prev = 1;
        for &c in &channels {
            down.push(Block::new(prev, c, rng));
            prev = c;
        }
        let mut up = Vec::with_capacity(3);
        let mut up_blocks = Vec::with_capacity(3);
        for lvl in 0..3 {
            up.push(UpConv::new(channels[lvl + 1], channels[lvl], rng));
            up_blocks.push(Block::new(2 * channels[lvl], channels[lvl], rng));
        }
        Self { down, up, up_blocks }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            down: self.down.iter().map(Block::zeros_like).collect(),
            up: self.up.iter().map(UpConv::zeros_like).collect(),
            up_blocks: self.up_blocks.iter().map(Block::zeros_like).collect(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.up_blocks[0].second.conv.out_channels()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, EncoderCache<T>)> {
        let mut down = Vec::with_capacity(4);
        let mut pool_idx = Vec::with_capacity(3);
        let mut skips = Vec::with_capacity(3);
        let mut cur = x.clone();
        for (lvl, block) in self.down.iter().enumerate() {
            if lvl > 0 {
                let (p, idx) = maxpool2(&cur);
                pool_idx.push(idx);
                skips.push(std::mem::replace(&mut cur, p));
            }
            let (y, c) = block.forward(&cur, mode, &format!("encoder.down.{lvl}"))?;
            down.push(c);
            cur = y;
        }
        let mut up_in = vec![Tensor::zeros(&[0]); 3];
        let mut up_blocks: Vec<Option<BlockCache<T>>> = vec![None, None, None];
        let mut skip_ch = vec![0; 3];
        for lvl in (0..3).rev() {
            let u = self.up[lvl].forward(&cur);
            check_finite(&u, || format!("encoder.up.{lvl}"))?;
            up_in[lvl] = cur;
            let skip = &skips[lvl];
            skip_ch[lvl] = skip.dims4().1;
            let cat = Tensor::concat_channels(skip, &u);
            let (y, c) = self.up_blocks[lvl].forward(&cat, mode, &format!("encoder.up_blocks.{lvl}"))?;
            up_blocks[lvl] = Some(c);
            cur = y;
        }
        Ok((
            cur,
            EncoderCache {
                down,
                pool_idx,
                up_in,
                up_blocks: up_blocks.into_iter().map(|c| c.expect("filled")).collect(),
                skip_ch,
            },
        ))
    }

    pub fn backward(&self, cache: &EncoderCache<T>, dfeat: &Tensor<T>, grad: &mut Self) {
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None, None, None];
        let mut dcur = dfeat.clone();
        for lvl in 0..3 {
            let dcat = self.up_blocks[lvl]
                .backward(&cache.up_blocks[lvl], &dcur, &mut grad.up_blocks[lvl], true)
                .expect("inner gradient");
            let (dskip, du) = dcat.split_channels(cache.skip_ch[lvl]);
            dskips[lvl] = Some(dskip);
            dcur = self.up[lvl].backward(&cache.up_in[lvl], &du, &mut grad.up[lvl]);
        }
        for lvl in (0..4).rev() {
            let need_dx = lvl > 0;
            let dx = self.down[lvl].backward(&cache.down[lvl], &dcur, &mut grad.down[lvl], need_dx);
            if let Some(dx) = dx {
                let mut d = maxpool2_backward(&cache.pool_idx[lvl - 1], &dx);
                d.add_assign(dskips[lvl - 1].as_ref().expect("skip gradient"));
                dcur = d;
            }
        }
    }

    pub fn absorb(&mut self, cache: &EncoderCache<T>, momentum: f64) {
        for (b, c) in self.down.iter_mut().zip(&cache.down) {
            b.absorb(c, momentum);
        }
        for (b, c) in self.up_blocks.iter_mut().zip(&cache.up_blocks) {
            b.absorb(c, momentum);
        }
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        for (i, b) in self.down.iter().enumerate() {
            b.collect(&join(prefix, &format!("down.{i}")), out);
        }
        for (i, (u, b)) in self.up.iter().zip(&self.up_blocks).enumerate() {
            u.collect(&join(prefix, &format!("up.{i}")), out);
            b.collect(&join(prefix, &format!("up_blocks.{i}")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        for (i, b) in self.down.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("down.{i}")), out);
        }
        for (i, (u, b)) in self.up.iter_mut().zip(self.up_blocks.iter_mut()).enumerate() {
            u.collect_mut(&join(prefix, &format!("up.{i}")), out);
            b.collect_mut(&join(prefix, &format!("up_blocks.{i}")), out);
        }
    }
}

/// Prediction head: two 3x3 conv-BN-ReLU units, a 1x1 classifier and softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub body: Block<T>,
    pub classifier: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    body: BlockCache<T>,
    hidden: Tensor<T>,
    probs: Tensor<T>,
}

impl<T: Real> HeadCache<T> {
    /// Softmax output of the forward pass, `N x K x H x W`.
    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }
}

impl<T: Real> Head<T> {
    pub fn new<R: Rng>(in_ch: usize, width: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            body: Block::new(in_ch, width, rng),
            classifier: Conv2d::new(width, classes, 1, true, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            body: self.body.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classifier.out_channels()
    }

    pub fn forward(&self, feat: &Tensor<T>, mode: Mode, name: &str) -> Result<HeadCache<T>> {
        let (hidden, body) = self.body.forward(feat, mode, name)?;
        let logits = self.classifier.forward(&hidden);
        check_finite(&logits, || format!("{name}.classifier"))?;
        let probs = softmax_channels(&logits);
        Ok(HeadCache { body, hidden, probs })
    }

    /// Backpropagates `dL/dprobs`; returns `dL/dfeatures`.
    pub fn backward(&self, cache: &HeadCache<T>, dprobs: &Tensor<T>, grad: &mut Self) -> Tensor<T> {
        let dlogits = softmax_backward(&cache.probs, dprobs);
        let dhidden = self
            .classifier
            .backward(&cache.hidden, &dlogits, &mut grad.classifier, true)
            .expect("inner gradient");
        self.body
            .backward(&cache.body, &dhidden, &mut grad.body, true)
            .expect("inner gradient")
    }

    pub fn absorb(&mut self, cache: &HeadCache<T>, momentum: f64) {
        self.body.absorb(&cache.body, momentum);
    }
}

impl<T: Real> Module<T> for Head<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        self.body.collect(&join(prefix, "body"), out);
        self.classifier.collect(&join(prefix, "classifier"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        self.body.collect_mut(&join(prefix, "body"), out);
        self.classifier.collect_mut(&join(prefix, "classifier"), out);
    }
}
