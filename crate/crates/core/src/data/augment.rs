//! Random crop, horizontal flip and colour jitter on `[−1, 1]` images.

use rand::Rng;
use serde::{Deserialize, Serialize};
use twingan_autograd::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_min_fraction: f32,
    pub crop_max_fraction: f32,
    pub flip: bool,
    /// Additive brightness delta bound, in `[0, 1]` pixel units.
    pub jitter_brightness: f32,
    /// Contrast factor drawn from `[1 − c, 1 + c]`.
    pub jitter_contrast: f32,
    /// Saturation factor drawn from `[1 − s, 1 + s]`.
    pub jitter_saturation: f32,
    /// Hue rotation bound, in turns.
    pub jitter_hue: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_min_fraction: 0.8,
            crop_max_fraction: 1.0,
            flip: true,
            jitter_brightness: 0.2,
            jitter_contrast: 0.2,
            jitter_saturation: 0.2,
            jitter_hue: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            crop_min_fraction: 1.0,
            crop_max_fraction: 1.0,
            flip: false,
            jitter_brightness: 0.0,
            jitter_contrast: 0.0,
            jitter_saturation: 0.0,
            jitter_hue: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.crop_min_fraction, self.crop_max_fraction);
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop fractions must satisfy 0 < {lo} <= {hi} <= 1")));
        }
        let j = [
            self.jitter_brightness,
            self.jitter_contrast,
            self.jitter_saturation,
            self.jitter_hue,
        ];
        if j.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("jitter ranges must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn has_jitter(&self) -> bool {
        self.jitter_brightness > 0.0
            || self.jitter_contrast > 0.0
            || self.jitter_saturation > 0.0
            || self.jitter_hue > 0.0
    }
}

/// What the random draws decided for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentTrace {
    pub crop_size: usize,
    pub crop_origin: (usize, usize),
    pub flipped: bool,
}

pub fn augment(image: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Tensor {
    augment_traced(image, cfg, rng).0
}

/// Augments a single `[1, 3, h, w]` image.
pub fn augment_traced(image: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Tensor, AugmentTrace) {
    let [_, c, h, w] = image.shape();
    let frac = if cfg.crop_max_fraction > cfg.crop_min_fraction {
        rng.gen_range(cfg.crop_min_fraction..=cfg.crop_max_fraction)
    } else {
        cfg.crop_min_fraction
    };
    let side = h.min(w);
    let s = ((frac * side as f32).round() as usize).clamp(1, side);
    let y0 = rng.gen_range(0..=h - s);
    let x0 = rng.gen_range(0..=w - s);
    let mut out = if s == h && s == w {
        image.clone()
    } else {
        let cropped = Tensor::from_fn([1, c, s, s], |i| {
            let (ch, y, x) = (i / (s * s), (i / s) % s, i % s);
            image.at(0, ch, y0 + y, x0 + x)
        });
        resize_bilinear(&cropped, h, w)
    };
    let flipped = cfg.flip && rng.gen_bool(0.5);
    if flipped {
        out = hflip(&out);
    }
    if cfg.has_jitter() && c == 3 {
        out = color_jitter(&out, cfg, rng);
    }
    let trace = AugmentTrace {
        crop_size: s,
        crop_origin: (y0, x0),
        flipped,
    };
    (out, trace)
}

pub fn hflip(image: &Tensor) -> Tensor {
    let [n, c, h, w] = image.shape();
    Tensor::from_fn([n, c, h, w], |i| {
        let x = i % w;
        image.data()[i - x + (w - 1 - x)]
    })
}

/// Half-pixel-centred bilinear resampling.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = image.shape();
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let src = image.data();
    Tensor::from_fn([n, c, out_h, out_w], |i| {
        let plane = i / (out_h * out_w);
        let (oy, ox) = ((i / out_w) % out_h, i % out_w);
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let p = &src[plane * h * w..(plane + 1) * h * w];
        let top = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
        let bot = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

fn color_jitter(image: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Tensor {
    let sym = |rng: &mut dyn rand::RngCore, b: f32| if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
    let brightness = sym(rng, cfg.jitter_brightness);
    let contrast = 1.0 + sym(rng, cfg.jitter_contrast);
    let saturation = 1.0 + sym(rng, cfg.jitter_saturation);
    let hue = sym(rng, cfg.jitter_hue);

    let [n, c, h, w] = image.shape();
    let hw = h * w;
    let mut px: Vec<f32> = image.data().iter().map(|v| (v + 1.0) * 0.5 + brightness).collect();
    for plane in px.chunks_mut(hw) {
        let mean = plane.iter().sum::<f32>() / hw as f32;
        for v in plane.iter_mut() {
            *v = (*v - mean) * contrast + mean;
        }
    }
    if saturation != 1.0 || hue != 0.0 {
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let (r, g, bl) = (px[base + p], px[base + hw + p], px[base + 2 * hw + p]);
                let (hh, s, v) = rgb_to_hsv(r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), bl.clamp(0.0, 1.0));
                let (r, g, bl) = hsv_to_rgb((hh + hue).rem_euclid(1.0), (s * saturation).clamp(0.0, 1.0), v);
                px[base + p] = r;
                px[base + hw + p] = g;
                px[base + 2 * hw + p] = bl;
            }
        }
    }
    Tensor::from_vec([n, c, h, w], px.into_iter().map(|v| v.clamp(0.0, 1.0) * 2.0 - 1.0).collect())
}

/// Hue in turns, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
