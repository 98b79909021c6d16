//! Synthetic quality dataset: smooth clean patterns degraded by white
//! Gaussian noise (at a signal-to-noise ratio) or Gaussian blur, labelled
//! with a MOS that decreases monotonically with distortion strength.

use alloc::vec::Vec;

use rand_distr::{Distribution, Uniform};

use crate::image::Image;
use crate::params::normal;
use crate::train::Sample;
use crate::Rng;

/// Noise SNRs of distortion levels 1..=7, in half-decade steps; level 0 is
/// the clean pattern.
pub const NOISE_SNR_LEVELS: [f64; 7] =
    [31.622_776_601_683_8, 10.0, 3.162_277_660_168_38, 1.0, 0.316_227_766_016_838, 0.1, 0.031_622_776_601_683_8];
/// Blur standard deviation per distortion level, in pixels.
pub const BLUR_SIGMA_STEP: f64 = 0.35;
/// Number of distortion levels including the clean one.
pub const LEVELS: usize = NOISE_SNR_LEVELS.len() + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distortion {
    Noise,
    Blur,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    /// Probability of blur instead of noise.
    pub blur_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { size: 48, blur_fraction: 0.0 }
    }
}

fn unit(rng: &mut Rng) -> f64 {
    Uniform::new(0.0, 1.0).expect("valid range").sample(rng)
}

/// Sum of a tilted ramp and a few low-frequency sinusoids, rescaled into
/// `[0.15, 0.85]`.
pub fn clean_pattern(size: usize, rng: &mut Rng) -> Image {
    use core::f64::consts::TAU;
    let (gx, gy) = (unit(rng) - 0.5, unit(rng) - 0.5);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let fx = (unit(rng) * 3.0 + 0.5) / size as f64;
            let fy = (unit(rng) * 3.0 + 0.5) / size as f64;
            (fx, fy, unit(rng) * TAU, 0.3 + unit(rng))
        })
        .collect();
    let mut data: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let ramp = gx * x / size as f64 + gy * y / size as f64;
            ramp + waves.iter().map(|(fx, fy, ph, a)| a * libm::sin(TAU * (fx * x + fy * y) + ph)).sum::<f64>()
        })
        .collect();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    data.iter_mut().for_each(|v| *v = 0.15 + 0.7 * (*v - lo) / span);
    Image::gray(size, size, data).expect("square image")
}

/// Adds white Gaussian noise with power `mean(x^2) / snr`, clamping to `[0, 1]`.
pub fn add_noise(img: &Image, snr: f64, rng: &mut Rng) -> Image {
    let power = img.data().iter().map(|v| v * v).sum::<f64>() / img.data().len() as f64;
    let sigma = libm::sqrt(power / snr);
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v = (*v + sigma * normal(rng)).clamp(0.0, 1.0));
    out
}

/// Separable Gaussian blur with reflected borders.
pub fn blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma))).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let (h, w) = (img.height(), img.width());
    let at = |i: isize, n: usize| crate::image::reflect(i.unsigned_abs(), n);
    let mut tmp = alloc::vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * img.get(0, y, at(x as isize + k as isize - radius, w)))
                .sum();
        }
    }
    let mut out = alloc::vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[at(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    Image::gray(h, w, out).expect("same size")
}

/// Ground-truth quality of a distortion level: 1 for clean down to 0 at the
/// strongest level.
pub fn mos_for_level(level: usize) -> f64 {
    1.0 - level as f64 / (LEVELS - 1) as f64
}

pub fn distort(img: &Image, kind: Distortion, level: usize, rng: &mut Rng) -> Image {
    match (kind, level) {
        (_, 0) => img.clone(),
        (Distortion::Noise, l) => add_noise(img, NOISE_SNR_LEVELS[l.min(LEVELS - 1) - 1], rng),
        (Distortion::Blur, l) => blur(img, BLUR_SIGMA_STEP * l.min(LEVELS - 1) as f64),
    }
}

/// `n` labelled images spread evenly over the distortion levels, each with
/// its own content.
pub fn synthetic_dataset(n: usize, cfg: &SynthConfig, seed: u64) -> Vec<Sample> {
    let mut rng = crate::seeded_rng(seed);
    (0..n)
        .map(|i| {
            let level = i * LEVELS / n.max(1);
            let clean = clean_pattern(cfg.size, &mut rng);
            let kind = if unit(&mut rng) < cfg.blur_fraction { Distortion::Blur } else { Distortion::Noise };
            Sample { image: distort(&clean, kind, level, &mut rng), mos: mos_for_level(level) }
        })
        .collect()
}

/// Undistorted patterns for sampling-matrix pretraining.
pub fn synthetic_corpus(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = crate::seeded_rng(seed);
    (0..n).map(|_| clean_pattern(size, &mut rng)).collect()
}
