//! Seeded weak and strong image augmentation.
//!
//! Weak: horizontal flip (p=0.5) then a random crop back to the original size
//! after 4-pixel zero padding. Strong: the weak pair, then color jitter on
//! brightness/contrast/saturation/hue (p=0.8 each), grayscale (p=0.2),
//! 3x3 Gaussian blur (p=0.5, sigma in [0.1, 2.0]) and solarize at threshold
//! 0.5 (p=0.2). Saturation and hue degrade to identity on 1-channel images.
//!
//! Determinism contract: every random decision is one `next_unit` draw from a
//! ChaCha8 stream, consumed in a fixed documented order (see [`AugmentRng`]),
//! so (image, seed) fully determines the output bit-for-bit. For transforms
//! that are skipped by their coin flip, the magnitude draw is skipped too.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

pub const PAD: usize = 4;
pub const JITTER_LO: f64 = 0.6;
pub const JITTER_HI: f64 = 1.4;
pub const HUE_MAX_SHIFT: f64 = 0.1;
pub const BLUR_SIGMA_LO: f64 = 0.1;
pub const BLUR_SIGMA_HI: f64 = 2.0;
pub const SOLARIZE_THRESHOLD: f64 = 0.5;

/// CHW image with values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(CoreError::InvalidSpec(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(CoreError::DimensionMismatch(format!(
                "image data length {} vs {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Seeded draw stream for augmentation decisions.
///
/// Weak draw order: flip coin, crop row offset, crop column offset.
/// Strong draw order: the weak draws, then per jitter channel
/// (brightness, contrast, saturation, hue): apply coin then, if applied, the
/// magnitude; then grayscale coin; blur coin then sigma; solarize coin.
pub struct AugmentRng {
    rng: ChaCha8Rng,
}

impl AugmentRng {
    pub fn from_seed(seed: u64) -> Self {
        AugmentRng {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One uniform draw in [0,1).
    pub fn next_unit(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_unit() * (hi - lo)
    }

    fn index(&mut self, n: usize) -> usize {
        ((self.next_unit() * n as f64) as usize).min(n - 1)
    }
}

/// splitmix64-style mixer for deriving per-image seeds from
/// (experiment seed, epoch, image index, view tag).
pub fn derive_seed(experiment_seed: u64, epoch: u64, image_index: u64, view: u64) -> u64 {
    let mut z = experiment_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(image_index.wrapping_mul(0x94d0_49bb_1331_11eb))
        .wrapping_add(view.wrapping_add(1));
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---- primitive transforms --------------------------------------------------

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                *out.at_mut(c, y, x) = img.at(c, y, img.width - 1 - x);
            }
        }
    }
    out
}

/// Crop back to the original size from a zero-padded frame; offset (PAD, PAD)
/// recovers the original image.
pub fn pad_crop(img: &Image, offset_y: usize, offset_x: usize) -> Image {
    let mut out = Image::zeros(img.channels, img.height, img.width);
    for c in 0..img.channels {
        for y in 0..img.height {
            let sy = (y + offset_y) as isize - PAD as isize;
            if sy < 0 || sy as usize >= img.height {
                continue;
            }
            for x in 0..img.width {
                let sx = (x + offset_x) as isize - PAD as isize;
                if sx < 0 || sx as usize >= img.width {
                    continue;
                }
                *out.at_mut(c, y, x) = img.at(c, sy as usize, sx as usize);
            }
        }
    }
    out
}

fn luminance(img: &Image, y: usize, x: usize) -> f64 {
    if img.channels == 1 {
        img.at(0, y, x)
    } else {
        0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x)
    }
}

pub fn adjust_brightness(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        *v *= factor;
    }
    out.clamp01();
    out
}

/// Blend toward the mean luminance of the whole image.
pub fn adjust_contrast(img: &Image, factor: f64) -> Image {
    let mut mean = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            mean += luminance(img, y, x);
        }
    }
    mean /= (img.height * img.width) as f64;
    let mut out = img.clone();
    for v in &mut out.data {
        *v = mean + factor * (*v - mean);
    }
    out.clamp01();
    out
}

/// Blend toward the per-pixel grayscale value. Identity on 1-channel images.
pub fn adjust_saturation(img: &Image, factor: f64) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let gray = luminance(img, y, x);
            for c in 0..3 {
                *out.at_mut(c, y, x) = gray + factor * (img.at(c, y, x) - gray);
            }
        }
    }
    out.clamp01();
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Rotate hue by `shift` (fraction of a full turn). Identity on 1-channel
/// images.
pub fn shift_hue(img: &Image, shift: f64) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (h, s, v) = rgb_to_hsv(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));
            let (r, g, b) = hsv_to_rgb(h + shift, s, v);
            *out.at_mut(0, y, x) = r;
            *out.at_mut(1, y, x) = g;
            *out.at_mut(2, y, x) = b;
        }
    }
    out.clamp01();
    out
}

pub fn grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let gray = luminance(img, y, x);
            for c in 0..3 {
                *out.at_mut(c, y, x) = gray;
            }
        }
    }
    out
}

/// Normalized 3x3 Gaussian weights for the given sigma.
pub fn blur_kernel(sigma: f64) -> [f64; 9] {
    let mut k = [0.0; 9];
    let mut sum = 0.0;
    for (i, kv) in k.iter_mut().enumerate() {
        let dy = (i / 3) as f64 - 1.0;
        let dx = (i % 3) as f64 - 1.0;
        *kv = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        sum += *kv;
    }
    for kv in &mut k {
        *kv /= sum;
    }
    k
}

/// 3x3 Gaussian blur with clamp-to-edge padding, so constant images are fixed
/// points.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = blur_kernel(sigma);
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sy = (y as isize + (i / 3) as isize - 1)
                        .clamp(0, img.height as isize - 1) as usize;
                    let sx = (x as isize + (i % 3) as isize - 1)
                        .clamp(0, img.width as isize - 1) as usize;
                    acc += kv * img.at(c, sy, sx);
                }
                *out.at_mut(c, y, x) = acc;
            }
        }
    }
    out.clamp01();
    out
}

/// Invert every pixel at or above the threshold.
pub fn solarize(img: &Image, threshold: f64) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
    out
}

// ---- pipelines -------------------------------------------------------------

fn flip_crop(img: &Image, rng: &mut AugmentRng) -> Image {
    let flipped = if rng.next_unit() < 0.5 {
        hflip(img)
    } else {
        img.clone()
    };
    let oy = rng.index(2 * PAD + 1);
    let ox = rng.index(2 * PAD + 1);
    pad_crop(&flipped, oy, ox)
}

pub fn weak_augment(img: &Image, rng: &mut AugmentRng) -> Image {
    flip_crop(img, rng)
}

pub fn strong_augment(img: &Image, rng: &mut AugmentRng) -> Image {
    let mut out = flip_crop(img, rng);
    if rng.next_unit() < 0.8 {
        let f = rng.uniform(JITTER_LO, JITTER_HI);
        out = adjust_brightness(&out, f);
    }
    if rng.next_unit() < 0.8 {
        let f = rng.uniform(JITTER_LO, JITTER_HI);
        out = adjust_contrast(&out, f);
    }
    if out.channels == 3 {
        if rng.next_unit() < 0.8 {
            let f = rng.uniform(JITTER_LO, JITTER_HI);
            out = adjust_saturation(&out, f);
        }
        if rng.next_unit() < 0.8 {
            let s = rng.uniform(-HUE_MAX_SHIFT, HUE_MAX_SHIFT);
            out = shift_hue(&out, s);
        }
    }
    if rng.next_unit() < 0.2 {
        out = grayscale(&out);
    }
    if rng.next_unit() < 0.5 {
        let sigma = rng.uniform(BLUR_SIGMA_LO, BLUR_SIGMA_HI);
        out = gaussian_blur(&out, sigma);
    }
    if rng.next_unit() < 0.2 {
        out = solarize(&out, SOLARIZE_THRESHOLD);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(channels: usize) -> Image {
        let mut img = Image::zeros(channels, 8, 8);
        for c in 0..channels {
            for y in 0..8 {
                for x in 0..8 {
                    *img.at_mut(c, y, x) = ((x + y + c) % 2) as f64 * 0.8 + 0.1;
                }
            }
        }
        img
    }

    #[test]
    fn hflip_reverses_columns() {
        let img = Image::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let f = hflip(&img);
        assert_eq!(f.data, vec![0.2, 0.1, 0.4, 0.3]);
    }

    #[test]
    fn centered_crop_is_identity() {
        let img = checker(3);
        assert_eq!(pad_crop(&img, PAD, PAD), img);
    }

    #[test]
    fn same_seed_same_output() {
        let img = checker(3);
        let a = strong_augment(&img, &mut AugmentRng::from_seed(7));
        let b = strong_augment(&img, &mut AugmentRng::from_seed(7));
        assert_eq!(a, b);
        let w1 = weak_augment(&img, &mut AugmentRng::from_seed(9));
        let w2 = weak_augment(&img, &mut AugmentRng::from_seed(9));
        assert_eq!(w1, w2);
    }

    #[test]
    fn solarize_flips_above_threshold_only() {
        let img = Image::new(1, 1, 2, vec![0.8, 0.3]).unwrap();
        let s = solarize(&img, 0.5);
        assert!((s.data[0] - 0.2).abs() < 1e-12);
        assert!((s.data[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn grayscale_of_gray_image_is_identity() {
        let mut img = Image::zeros(3, 4, 4);
        for c in 0..3 {
            for i in 0..16 {
                img.data[c * 16 + i] = (i as f64) / 16.0;
            }
        }
        let g = grayscale(&img);
        for (a, b) in g.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_of_constant_image_is_constant() {
        let img = Image::new(1, 4, 4, vec![0.42; 16]).unwrap();
        let b = gaussian_blur(&img, 1.3);
        for v in &b.data {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_kernel_sums_to_one() {
        for sigma in [0.1, 0.5, 1.0, 2.0] {
            let sum: f64 = blur_kernel(sigma).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn one_channel_saturation_hue_are_identity() {
        let img = checker(1);
        assert_eq!(adjust_saturation(&img, 1.3), img);
        assert_eq!(shift_hue(&img, 0.05), img);
    }

    #[test]
    fn outputs_stay_in_unit_range_and_keep_shape() {
        let img = checker(3);
        for seed in 0..50u64 {
            let s = strong_augment(&img, &mut AugmentRng::from_seed(seed));
            assert_eq!((s.channels, s.height, s.width), (3, 8, 8));
            assert!(s.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn derive_seed_varies_with_all_inputs() {
        let base = derive_seed(1, 2, 3, 0);
        assert_ne!(base, derive_seed(2, 2, 3, 0));
        assert_ne!(base, derive_seed(1, 3, 3, 0));
        assert_ne!(base, derive_seed(1, 2, 4, 0));
        assert_ne!(base, derive_seed(1, 2, 3, 1));
    }
}
