//! Dense per-pixel containers shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label id reserved for the background class.
pub const BACKGROUND_ID: u16 = 0;
/// Label id for unannotated pixels; skipped by losses and metrics.
pub const IGNORE_ID: u16 = 255;

/// Axis-aligned pixel box, `top`/`left` inclusive, `height`/`width` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        BBox {
            top,
            left,
            height,
            width,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        BBox::new(0, 0, height, width)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.height > 0
            && self.width > 0
            && self.top + self.height <= height
            && self.left + self.width <= width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// RGB image, row-major interleaved (`HWC`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * Self::CHANNELS],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Image::zeros(height, width);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::contract(format!(
                "image buffer has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Snap every value onto the 8-bit grid so PNG storage is lossless.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    /// Channel-major (`CHW`) copy converted to the requested float type.
    pub fn to_chw<T: num_traits::Float>(&self) -> Vec<T> {
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); plane * 3];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = T::from(px[c]).unwrap();
            }
        }
        out
    }
}

/// Per-pixel integer class assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, id: u16) -> Self {
        LabelMap {
            height,
            width,
            data: vec![id; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::contract(format!(
                "label buffer has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, id: u16) {
        self.data[y * self.width + x] = id;
    }

    /// Sorted set of ids present, ignore id excluded.
    pub fn ids(&self) -> Vec<u16> {
        let mut seen = [false; 1 << 16];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=u16::MAX)
            .filter(|&v| seen[v as usize] && v != IGNORE_ID)
            .collect()
    }

    pub fn count(&self, id: u16) -> usize {
        self.data.iter().filter(|&&v| v == id).count()
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let raw = self.data.iter().map(|&v| v.min(255) as u8).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn from_luma8(img: &image::GrayImage) -> Self {
        LabelMap {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| v as u16).collect(),
        }
    }
}

/// Per-pixel probability distribution over `n` classes, stored `HWN`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f32>,
}

impl ProbMap {
    pub fn from_vec(height: usize, width: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * classes {
            return Err(Error::contract(format!(
                "probability buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                classes
            )));
        }
        Ok(ProbMap {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        ProbMap {
            height,
            width,
            classes,
            data: vec![1.0 / classes as f32; height * width * classes],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Distribution at flat pixel index `p`.
    #[inline]
    pub fn row(&self, p: usize) -> &[f32] {
        &self.data[p * self.classes..(p + 1) * self.classes]
    }

    /// Per-pixel `(argmax, max)`; ties resolve to the lowest class id.
    pub fn argmax_max(&self) -> (Vec<u16>, Vec<f32>) {
        let pixels = self.height * self.width;
        let mut ids = Vec::with_capacity(pixels);
        let mut conf = Vec::with_capacity(pixels);
        for p in 0..pixels {
            let (best, val) = argmax(self.row(p));
            ids.push(best as u16);
            conf.push(val);
        }
        (ids, conf)
    }
}

/// Index and value of the first maximum.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> (usize, T) {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}
