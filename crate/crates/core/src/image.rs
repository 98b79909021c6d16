use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Result};

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Planar `channels x height x width` image with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(contract(format!("empty image {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(contract(format!(
                "image {channels}x{height}x{width} needs {} samples, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(1, height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { channels: 1, height, width, data: alloc::vec![value; height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Single-channel luminance. Gray images are returned unchanged; three
    /// channel images use [`LUMA_WEIGHTS`].
    pub fn to_luma(&self) -> Result<Image> {
        match self.channels {
            1 => Ok(self.clone()),
            3 => {
                let plane = self.height * self.width;
                let data = (0..plane)
                    .map(|i| LUMA_WEIGHTS.iter().enumerate().map(|(c, w)| w * self.data[c * plane + i]).sum())
                    .collect();
                Image::gray(self.height, self.width, data)
            }
            c => Err(contract(format!("cannot convert {c}-channel image to luminance"))),
        }
    }

    /// Window of a single-channel image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if self.channels != 1 || top + height > self.height || left + width > self.width {
            return Err(contract(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let data = (top..top + height)
            .flat_map(|y| (left..left + width).map(move |x| (y, x)))
            .map(|(y, x)| self.data[y * self.width + x])
            .collect();
        Image::gray(height, width, data)
    }

    /// Reflect-pads a single-channel image on the bottom and right edges to
    /// at least `height x width`.
    pub fn reflect_pad_to(&self, height: usize, width: usize) -> Result<Image> {
        if self.channels != 1 {
            return Err(contract("padding expects a single-channel image"));
        }
        let (h, w) = (height.max(self.height), width.max(self.width));
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.data[reflect(y, self.height) * self.width + reflect(x, self.width)])
            .collect();
        Image::gray(h, w, data)
    }
}

/// Mirror index `i` into `0..n` without repeating the edge sample
/// (`n, n+1, ...` map to `n-2, n-3, ...`).
pub fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}
