//! Training-time augmentation: flip, hue, brightness and CutDepth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::split::DepthSample;
use crate::head::DepthMap;
use crate::latent::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub p_flip: f64,
    pub p_hue: f64,
    /// Max hue shift as a fraction of the color wheel.
    pub hue_max: f64,
    pub p_brightness: f64,
    /// Brightness factor drawn from `[1 - b, 1 + b]`.
    pub brightness_max: f64,
    pub p_cut_depth: f64,
    pub cut_depth_alpha_max: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            p_flip: 0.5,
            p_hue: 0.5,
            hue_max: 0.1,
            p_brightness: 0.5,
            brightness_max: 0.2,
            p_cut_depth: 0.25,
            cut_depth_alpha_max: 0.75,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            p_flip: 0.0,
            p_hue: 0.0,
            hue_max: 0.0,
            p_brightness: 0.0,
            brightness_max: 0.0,
            p_cut_depth: 0.0,
            cut_depth_alpha_max: 0.0,
        }
    }
}

/// Per-sample generator keyed on the sample id and a caller seed.
pub fn sample_rng(id: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(id.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn chance(rng: &mut ChaCha8Rng, p: f64) -> bool {
    // always draw so later decisions do not depend on earlier probabilities
    let u: f64 = rng.gen();
    u < p.clamp(0.0, 1.0)
}

pub fn hflip_image(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    let w = img.width();
    for c in 0..3 {
        for y in 0..img.height() {
            for x in 0..w {
                out.set(c, y, x, img.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

fn hflip_rows<T: Copy>(data: &[T], width: usize) -> Vec<T> {
    data.chunks(width).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Mirror image, depth and mask together.
pub fn hflip_sample(s: &DepthSample) -> DepthSample {
    let w = s.image.width();
    let mut out = s.clone();
    out.image = hflip_image(&s.image);
    if let Some(g) = &s.gt_depth {
        out.gt_depth = Some(DepthMap {
            height: g.height,
            width: g.width,
            data: hflip_rows(&g.data, w),
        });
    }
    out.mask.data = hflip_rows(&s.mask.data, w);
    out
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

pub fn shift_hue(img: &mut ImageTensor, delta: f32) {
    img.map_pixels(|px| {
        let [h, s, v] = rgb_to_hsv(px);
        hsv_to_rgb([h + delta, s, v])
    });
}

pub fn scale_brightness(img: &mut ImageTensor, factor: f32) {
    img.map_pixels(|[r, g, b]| [r * factor, g * factor, b * factor]);
}

/// Half-open rectangle `(y0, x0, h, w)`.
pub type Rect = (usize, usize, usize, usize);

/// With probability `p`, draw a rectangle whose side fractions are at most
/// `alpha_max`. Every call consumes the same number of draws.
pub fn cut_depth_rect(height: usize, width: usize, p: f64, alpha_max: f64, rng: &mut ChaCha8Rng) -> Option<Rect> {
    let hit = chance(rng, p);
    let a = alpha_max.clamp(0.0, 1.0);
    let fh: f64 = rng.gen::<f64>() * a;
    let fw: f64 = rng.gen::<f64>() * a;
    let uy: f64 = rng.gen();
    let ux: f64 = rng.gen();
    if !hit || a == 0.0 || height == 0 || width == 0 {
        return None;
    }
    let h = ((fh * height as f64).round() as usize).clamp(1, height);
    let w = ((fw * width as f64).round() as usize).clamp(1, width);
    let y0 = ((uy * (height - h + 1) as f64) as usize).min(height - h);
    let x0 = ((ux * (width - w + 1) as f64) as usize).min(width - w);
    Some((y0, x0, h, w))
}

/// Replace the rectangle with depth min-max normalized over it, on all three
/// channels. A constant rectangle renders as 0.
pub fn paint_depth(img: &ImageTensor, depth: &DepthMap, rect: Rect) -> ImageTensor {
    let (y0, x0, h, w) = rect;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let d = depth.get(y, x);
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    let range = hi - lo;
    let mut out = img.clone();
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let v = if range > 0.0 {
                ((depth.get(y, x) - lo) / range) as f32
            } else {
                0.0
            };
            for c in 0..3 {
                out.set(c, y, x, v);
            }
        }
    }
    out
}

pub fn cut_depth(img: &ImageTensor, depth: &DepthMap, p: f64, alpha_max: f64, rng: &mut ChaCha8Rng) -> ImageTensor {
    match cut_depth_rect(img.height(), img.width(), p, alpha_max, rng) {
        Some(rect) => paint_depth(img, depth, rect),
        None => img.clone(),
    }
}

/// Apply the policy. Deterministic in `(sample.id, seed)`.
pub fn augment(sample: &DepthSample, seed: u64, policy: &AugmentPolicy) -> DepthSample {
    let mut rng = sample_rng(&sample.id, seed);
    let flip = chance(&mut rng, policy.p_flip);
    let hue = chance(&mut rng, policy.p_hue);
    let hue_delta = (rng.gen::<f64>() * 2.0 - 1.0) * policy.hue_max;
    let bright = chance(&mut rng, policy.p_brightness);
    let factor = 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * policy.brightness_max.clamp(0.0, 1.0);

    let mut out = if flip { hflip_sample(sample) } else { sample.clone() };
    if hue && hue_delta != 0.0 {
        shift_hue(&mut out.image, hue_delta as f32);
    }
    if bright && factor != 1.0 {
        scale_brightness(&mut out.image, factor as f32);
    }
    if let Some(gt) = &out.gt_depth {
        out.image = cut_depth(&out.image, gt, policy.p_cut_depth, policy.cut_depth_alpha_max, &mut rng);
    }
    out
}
