//! Pixel containers shared by the model, generator and metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image with values in `[0, 1]`, stored row-major `HWC`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Invalid(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Non-overlapping `patch x patch` tiles flattened to rows of
    /// `patch * patch * 3` values, tiles in row-major grid order.
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::Shape(format!(
                "image {}x{} is not divisible by patch size {patch}",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut out = Tensor::zeros(gh * gw, patch * patch * 3);
        for py in 0..gh {
            for px in 0..gw {
                let row = out.row_mut(py * gw + px);
                for dy in 0..patch {
                    let src = ((py * patch + dy) * self.width + px * patch) * 3;
                    row[dy * patch * 3..(dy + 1) * patch * 3].copy_from_slice(&self.data[src..src + patch * 3]);
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Self {
        self.remap(|y, x| (y, self.width - 1 - x), self.height, self.width)
    }

    pub fn flip_vertical(&self) -> Self {
        self.remap(|y, x| (self.height - 1 - y, x), self.height, self.width)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        self.remap(|y, x| (top + y, left + x), height, width)
    }

    fn remap(&self, src: impl Fn(usize, usize) -> (usize, usize), height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let (sy, sx) = src(y, x);
                data.extend_from_slice(&self.pixel(sy, sx));
            }
        }
        Self { height, width, data }
    }
}

/// Per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>, num_classes: usize) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Invalid(format!("class index {v} >= K = {num_classes}")));
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

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn indices(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v as usize).collect()
    }

    pub fn max_class(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    /// Nearest-neighbour resampling: output `(i, j)` reads source pixel
    /// `(floor((i + 0.5) * H / h), floor((j + 0.5) * W / w))`.
    pub fn downsample_nearest(&self, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            let sy = nearest_src(i, height, self.height);
            for j in 0..width {
                data.push(self.get(sy, nearest_src(j, width, self.width)));
            }
        }
        Self { height, width, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        self.remap(|y, x| (y, self.width - 1 - x), self.height, self.width)
    }

    pub fn flip_vertical(&self) -> Self {
        self.remap(|y, x| (self.height - 1 - y, x), self.height, self.width)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        self.remap(|y, x| (top + y, left + x), height, width)
    }

    fn remap(&self, src: impl Fn(usize, usize) -> (usize, usize), height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (sy, sx) = src(y, x);
                data.push(self.get(sy, sx));
            }
        }
        Self { height, width, data }
    }
}

#[inline]
pub(crate) fn nearest_src(i: usize, dst: usize, src: usize) -> usize {
    ((2 * i + 1) * src / (2 * dst)).min(src - 1)
}

/// Binary raster, e.g. a change mask or a building footprint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

/// Ground-truth or predicted change map; `true` means changed.
pub type ChangeMask = BinaryMask;

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).map(|(y, x)| f(y, x)).collect();
        Self { height, width, data }
    }

    /// Pixels equal to `class`.
    pub fn of_class(labels: &LabelMap, class: u8) -> Self {
        Self {
            height: labels.height,
            width: labels.width,
            data: labels.data.iter().map(|&v| v == class).collect(),
        }
    }

    /// 0 maps to false, anything else to true.
    pub fn from_luma8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b != 0).collect())
    }

    /// 0 for false, 255 for true.
    pub fn to_luma8(&self) -> Vec<u8> {
        self.data.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn not(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn xor(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a ^ b)
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a | b)
    }

    fn zip(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "mask dims {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn targets(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn downsample_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |i, j| {
            self.get(nearest_src(i, height, self.height), nearest_src(j, width, self.width))
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| self.get(top + y, left + x))
    }
}
