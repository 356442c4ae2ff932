//! Pixel-space augmentation pipelines.
//!
//! * weak: reflect-pad, random crop back to size, horizontal flip.
//! * strong: random resized crop, color jitter, random grayscale, horizontal
//!   flip, applied in exactly that order.
//!
//! Jitter factors are drawn as `U(1 - f, 1 + f)` for brightness, contrast and
//! saturation and `U(-h, h)` turns for hue, and are applied in the fixed order
//! brightness, contrast, saturation, hue. Resizing is bilinear with half-pixel
//! centers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Weak,
    Strong,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugPolicy {
    pub kind: AugKind,
    pub crop_scale: (f64, f64),
    pub aspect_ratio: (f64, f64),
    /// brightness, contrast, saturation, hue
    pub jitter: (f64, f64, f64, f64),
    pub jitter_prob: f64,
    pub gray_prob: f64,
    pub flip_prob: f64,
    pub pad: usize,
}

impl AugPolicy {
    pub fn weak() -> Self {
        AugPolicy {
            kind: AugKind::Weak,
            crop_scale: (1.0, 1.0),
            aspect_ratio: (1.0, 1.0),
            jitter: (0.0, 0.0, 0.0, 0.0),
            jitter_prob: 0.0,
            gray_prob: 0.0,
            flip_prob: 0.5,
            pad: 4,
        }
    }

    pub fn strong() -> Self {
        AugPolicy {
            kind: AugKind::Strong,
            crop_scale: (0.2, 1.0),
            aspect_ratio: (3.0 / 4.0, 4.0 / 3.0),
            jitter: (0.4, 0.4, 0.4, 0.1),
            jitter_prob: 0.8,
            gray_prob: 0.2,
            flip_prob: 0.5,
            pad: 0,
        }
    }

    pub fn none() -> Self {
        AugPolicy {
            kind: AugKind::None,
            ..Self::weak()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("jitter_prob", self.jitter_prob),
            ("gray_prob", self.gray_prob),
            ("flip_prob", self.flip_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, format!("probability {p} outside [0, 1]")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(
                "crop_scale",
                format!("need 0 < lo <= hi <= 1, got ({lo}, {hi})"),
            ));
        }
        let (alo, ahi) = self.aspect_ratio;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::config("aspect_ratio", "need 0 < lo <= hi"));
        }
        let (b, c, s, h) = self.jitter;
        if b < 0.0 || c < 0.0 || s < 0.0 || !(0.0..=0.5).contains(&h) {
            return Err(Error::config("jitter", "factors must be non-negative, hue at most 0.5"));
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, image: &Image, rng: &mut R) -> Result<Image> {
        match self.kind {
            AugKind::None => Ok(image.clone()),
            AugKind::Weak => weak_augment(image, self, rng),
            AugKind::Strong => strong_augment(image, self, rng, None),
        }
    }
}

/// Sub-transforms of the strong pipeline, recorded by [`strong_augment`] when
/// a trace is requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugStep {
    ResizedCrop,
    ColorJitter,
    Grayscale,
    HorizontalFlip,
}

/// Mirror padding that excludes the edge pixel (index `-1` maps to `1`).
pub fn reflect_pad(image: &Image, pad: usize) -> Result<Image> {
    if pad >= image.height || pad >= image.width {
        return Err(Error::invalid(format!(
            "reflect pad {pad} must be smaller than the image side ({}x{})",
            image.height, image.width
        )));
    }
    let (h, w) = (image.height as isize, image.width as isize);
    let reflect = |i: isize, n: isize| -> usize {
        let r = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        r as usize
    };
    let (ph, pw) = (image.height + 2 * pad, image.width + 2 * pad);
    let mut out = Image::filled(ph, pw, [0.0; 3]);
    for y in 0..ph {
        for x in 0..pw {
            let sy = reflect(y as isize - pad as isize, h);
            let sx = reflect(x as isize - pad as isize, w);
            out.set_pixel(y, x, image.pixel(sy, sx));
        }
    }
    Ok(out)
}

pub fn crop(image: &Image, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
    if top + height > image.height || left + width > image.width {
        return Err(Error::invalid("crop window outside image"));
    }
    let mut out = Image::filled(height, width, [0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            out.set_pixel(y, x, image.pixel(top + y, left + x));
        }
    }
    Ok(out)
}

pub fn hflip(image: &Image) -> Image {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            out.set_pixel(y, x, image.pixel(y, image.width - 1 - x));
        }
    }
    out
}

/// Weak pipeline with its random choices made explicit.
pub fn weak_with(image: &Image, pad: usize, offset: (usize, usize), flip: bool) -> Result<Image> {
    let padded = if pad > 0 {
        reflect_pad(image, pad)?
    } else {
        image.clone()
    };
    let cropped = crop(&padded, offset.0, offset.1, image.height, image.width)?;
    Ok(if flip { hflip(&cropped) } else { cropped })
}

pub fn weak_augment<R: Rng + ?Sized>(image: &Image, policy: &AugPolicy, rng: &mut R) -> Result<Image> {
    if image.height != image.width {
        return Err(Error::invalid("weak augmentation expects a square image"));
    }
    let pad = policy.pad;
    if pad > 0 && pad >= image.height {
        return Err(Error::invalid(format!(
            "pad {pad} must be smaller than the image side {}",
            image.height
        )));
    }
    let top = rng.gen_range(0..=2 * pad);
    let left = rng.gen_range(0..=2 * pad);
    let flip = rng.gen::<f64>() < policy.flip_prob;
    weak_with(image, pad, (top, left), flip)
}

/// Bilinear resize of the window `(top, left, height, width)` of `image` to
/// `out_h × out_w`, half-pixel centers, edge clamping inside the window.
pub fn resize_window(image: &Image, window: (usize, usize, usize, usize), out_h: usize, out_w: usize) -> Image {
    let (top, left, wh, ww) = window;
    let mut out = Image::filled(out_h, out_w, [0.0; 3]);
    let sy = wh as f64 / out_h as f64;
    let sx = ww as f64 / out_w as f64;
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (wh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(wh - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (ww - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(ww - 1);
            let tx = (fx - x0 as f64) as f32;
            let p00 = image.pixel(top + y0, left + x0);
            let p01 = image.pixel(top + y0, left + x1);
            let p10 = image.pixel(top + y1, left + x0);
            let p11 = image.pixel(top + y1, left + x1);
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                let a = p00[c] + (p01[c] - p00[c]) * tx;
                let b = p10[c] + (p11[c] - p10[c]) * tx;
                px[c] = a + (b - a) * ty;
            }
            out.set_pixel(y, x, px);
        }
    }
    out
}

/// Crop window for a random resized crop; falls back to the full frame after
/// ten rejected draws.
pub fn sample_crop_window<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    policy: &AugPolicy,
    rng: &mut R,
) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (lo, hi) = policy.crop_scale;
    let (alo, ahi) = policy.aspect_ratio;
    for _ in 0..10 {
        let target = area * if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let ratio = if ahi > alo { rng.gen_range(alo..=ahi) } else { alo };
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return (top, left, h, w);
        }
    }
    (0, 0, height, width)
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub fn adjust_brightness(image: &mut Image, factor: f32) {
    for v in &mut image.data {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
}

pub fn adjust_contrast(image: &mut Image, factor: f32) {
    let n = (image.height * image.width) as f32;
    let mean = image.pixels().map(luma).sum::<f32>() / n;
    for v in &mut image.data {
        *v = ((*v - mean) * factor + mean).clamp(0.0, 1.0);
    }
}

pub fn adjust_saturation(image: &mut Image, factor: f32) {
    for px in image.data.chunks_exact_mut(3) {
        let g = luma([px[0], px[1], px[2]]);
        for v in px {
            *v = ((*v - g) * factor + g).clamp(0.0, 1.0);
        }
    }
}

/// Rotates hue by `shift` turns in HSV space.
pub fn adjust_hue(image: &mut Image, shift: f32) {
    if shift == 0.0 {
        return;
    }
    for px in image.data.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
        let rgb = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        px.copy_from_slice(&rgb);
    }
}

fn rgb_to_hsv(p: [f32; 3]) -> (f32, f32, f32) {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == p[0] {
        ((p[1] - p[2]) / d).rem_euclid(6.0) / 6.0
    } else if max == p[1] {
        ((p[2] - p[0]) / d + 2.0) / 6.0
    } else {
        ((p[0] - p[1]) / d + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn to_grayscale(image: &mut Image) {
    for px in image.data.chunks_exact_mut(3) {
        let g = luma([px[0], px[1], px[2]]);
        px.fill(g);
    }
}

/// Color jitter with explicit factors: brightness, contrast, saturation, hue.
pub fn color_jitter_with(image: &mut Image, b: f32, c: f32, s: f32, h: f32) {
    adjust_brightness(image, b);
    adjust_contrast(image, c);
    adjust_saturation(image, s);
    adjust_hue(image, h);
}

fn factor<R: Rng + ?Sized>(rng: &mut R, f: f64) -> f32 {
    if f > 0.0 {
        rng.gen_range((1.0 - f).max(0.0)..=1.0 + f) as f32
    } else {
        1.0
    }
}

pub fn strong_augment<R: Rng + ?Sized>(
    image: &Image,
    policy: &AugPolicy,
    rng: &mut R,
    mut trace: Option<&mut Vec<AugStep>>,
) -> Result<Image> {
    let mut note = |s: AugStep| {
        if let Some(t) = trace.as_deref_mut() {
            t.push(s);
        }
    };
    let window = sample_crop_window(image.height, image.width, policy, rng);
    let mut out = resize_window(image, window, image.height, image.width);
    note(AugStep::ResizedCrop);

    if rng.gen::<f64>() < policy.jitter_prob {
        let (bf, cf, sf, hf) = policy.jitter;
        let b = factor(rng, bf);
        let c = factor(rng, cf);
        let s = factor(rng, sf);
        let h = if hf > 0.0 { rng.gen_range(-hf..=hf) as f32 } else { 0.0 };
        color_jitter_with(&mut out, b, c, s, h);
        note(AugStep::ColorJitter);
    }
    if rng.gen::<f64>() < policy.gray_prob {
        to_grayscale(&mut out);
        note(AugStep::Grayscale);
    }
    if rng.gen::<f64>() < policy.flip_prob {
        out = hflip(&out);
        note(AugStep::HorizontalFlip);
    }
    out.clamp01();
    Ok(out)
}
