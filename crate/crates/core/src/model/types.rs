use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Smallest side that survives three 2x2 poolings with room to spare.
pub const MIN_SIDE: usize = 16;
/// Spatial sizes fed to the network are padded to a multiple of this.
pub const SIZE_MULTIPLE: usize = 8;

/// Single-channel intensity image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Shape(format!(
                "image {height}x{width} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("image value at index {pos} is not finite")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Reflect-pads on the bottom/right edge up to the next multiple of 8
    /// and returns a `1 x 1 x H' x W'` batch.
    pub fn to_padded_batch<T: Real>(&self) -> Tensor<T> {
        let ph = self.height.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        let pw = self.width.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        let mut out = Vec::with_capacity(ph * pw);
        for y in 0..ph {
            let sy = reflect(y, self.height);
            for x in 0..pw {
                out.push(T::lit(self.data[sy * self.width + reflect(x, self.width)] as f64));
            }
        }
        Tensor::from_vec(&[1, 1, ph, pw], out)
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

/// Per-pixel class probabilities, stored class-planar: `data[k * H * W + z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T = f32> {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> ProbMap<T> {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "probability map {classes}x{height}x{width} needs {} values, got {}",
                classes * height * width,
                data.len()
            )));
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    /// Builds a map from per-pixel probability tuples in row-major pixel order.
    pub fn from_pixels(height: usize, width: usize, pixels: &[Vec<T>]) -> Result<Self> {
        let classes = pixels.first().map_or(0, Vec::len);
        let hw = height * width;
        if pixels.len() != hw || pixels.iter().any(|p| p.len() != classes) {
            return Err(Error::Shape("pixel list does not match map size".into()));
        }
        let mut data = vec![T::zero(); classes * hw];
        for (z, p) in pixels.iter().enumerate() {
            for (k, &v) in p.iter().enumerate() {
                data[k * hw + z] = v;
            }
        }
        Self::new(classes, height, width, data)
    }

    /// Image `i` of an NCHW probability batch, cropped to `height x width`.
    pub fn from_batch(batch: &Tensor<T>, i: usize, height: usize, width: usize) -> Self {
        let (_, k, h, w) = batch.dims4();
        let img = batch.image(i);
        if h == height && w == width {
            return Self {
                classes: k,
                height,
                width,
                data: img.to_vec(),
            };
        }
        let mut data = Vec::with_capacity(k * height * width);
        for c in 0..k {
            for y in 0..height {
                let row = c * h * w + y * w;
                data.extend_from_slice(&img[row..row + width]);
            }
        }
        Self {
            classes: k,
            height,
            width,
            data,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn prob(&self, z: usize, k: usize) -> T {
        self.data[k * self.pixels() + z]
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let hw = self.pixels();
        let labels = (0..hw)
            .map(|z| {
                let mut best = 0;
                for k in 1..self.classes {
                    if self.data[k * hw + z] > self.data[best * hw + z] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            data: labels,
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.classes, self.height, self.width) == (other.classes, other.height, other.width)
    }
}

/// Integer class id per pixel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
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

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        (self.height, self.width) == (other.height, other.width)
    }

    /// Rejects labels outside `0..classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= classes) {
            Some(z) => Err(Error::Shape(format!(
                "label {} at pixel {z} is outside 0..{classes}",
                self.data[z]
            ))),
            None => Ok(()),
        }
    }

    /// One-vs-rest view: pixels of `class` become 1, everything else 0.
    pub fn binary_for(&self, class: u8) -> LabelMap {
        LabelMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| u8::from(v == class)).collect(),
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}
