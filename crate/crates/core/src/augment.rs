//! Two-view stochastic augmentation for contrastive pretraining.
//!
//! Each view applies a fixed number of distinct operations drawn without
//! replacement from the pool, with magnitudes drawn uniformly from the
//! range of the chosen strength preset. Images are `3 x H x W` RGB tensors
//! with values in `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    HorizontalFlip,
    /// Resolution round trip: resize to `s·H x s·W`, then back to `H x W`.
    Rescale,
    /// Center crop of `H/z x W/z` resized back to `H x W` (`z >= 1`).
    Zoom,
    Brightness,
    Contrast,
    /// Additive shift of HSV hue, as a fraction of the hue circle.
    Hue,
    /// Multiplicative factor on HSV saturation.
    Saturation,
}

impl AugmentOp {
    pub const POOL: [AugmentOp; 7] = [
        AugmentOp::HorizontalFlip,
        AugmentOp::Rescale,
        AugmentOp::Zoom,
        AugmentOp::Brightness,
        AugmentOp::Contrast,
        AugmentOp::Hue,
        AugmentOp::Saturation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::HorizontalFlip => "horizontal_flip",
            AugmentOp::Rescale => "rescale",
            AugmentOp::Zoom => "zoom",
            AugmentOp::Brightness => "brightness",
            AugmentOp::Contrast => "contrast",
            AugmentOp::Hue => "hue",
            AugmentOp::Saturation => "saturation",
        }
    }

    /// Magnitude at which the operation leaves an image untouched
    /// (none for the flip).
    pub fn identity_magnitude(self) -> Option<f32> {
        match self {
            AugmentOp::HorizontalFlip => None,
            AugmentOp::Hue => Some(0.0),
            _ => Some(1.0),
        }
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentOp::POOL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown augmentation op {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    Weak,
    Strong,
}

impl Strength {
    /// Closed magnitude range of `op` under this preset.
    pub fn range(self, op: AugmentOp) -> (f32, f32) {
        use AugmentOp::*;
        match (self, op) {
            (_, HorizontalFlip) => (1.0, 1.0),
            (Strength::Weak, Brightness | Contrast | Saturation) => (0.9, 1.1),
            (Strength::Strong, Brightness | Contrast | Saturation) => (0.6, 1.4),
            (Strength::Weak, Hue) => (-0.03, 0.03),
            (Strength::Strong, Hue) => (-0.1, 0.1),
            (Strength::Weak, Rescale) => (0.9, 1.1),
            (Strength::Strong, Rescale) => (0.7, 1.3),
            (Strength::Weak, Zoom) => (1.0, 1.1),
            (Strength::Strong, Zoom) => (1.0, 1.4),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub ops_pool: Vec<AugmentOp>,
    pub picks_per_view: usize,
    pub strength: Strength,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            ops_pool: AugmentOp::POOL.to_vec(),
            picks_per_view: 3,
            strength: Strength::Weak,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.picks_per_view > self.ops_pool.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot pick {} distinct ops from a pool of {}",
                self.picks_per_view,
                self.ops_pool.len()
            )));
        }
        for (i, op) in self.ops_pool.iter().enumerate() {
            if self.ops_pool[..i].contains(op) {
                return Err(Error::InvalidConfig(format!("{op} appears twice in the pool")));
            }
        }
        Ok(())
    }

    /// Draws the operations and magnitudes of one view.
    pub fn draw_view<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<(AugmentOp, f32)> {
        index::sample(rng, self.ops_pool.len(), self.picks_per_view)
            .into_iter()
            .map(|i| {
                let op = self.ops_pool[i];
                let (lo, hi) = self.strength.range(op);
                let m = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                (op, m)
            })
            .collect()
    }
}

/// Two independently augmented views of one image.
pub fn augment_pair<R: Rng + ?Sized>(
    img: &Tensor<f32>,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    spec.validate()?;
    let first = spec.draw_view(rng);
    let second = spec.draw_view(rng);
    Ok((apply_all(img, &first)?, apply_all(img, &second)?))
}

pub fn apply_all(img: &Tensor<f32>, ops: &[(AugmentOp, f32)]) -> Result<Tensor<f32>> {
    let mut out = img.clone();
    for &(op, m) in ops {
        out = apply_op(&out, op, m)?;
    }
    Ok(out)
}

fn image_dims(img: &Tensor<f32>) -> Result<(usize, usize)> {
    match *img.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(Error::shape("augment", format!("expected 3 x H x W image, got {s:?}"))),
    }
}

/// Applies one operation; the result is clamped to `[0, 1]` and keeps the input shape.
pub fn apply_op(img: &Tensor<f32>, op: AugmentOp, magnitude: f32) -> Result<Tensor<f32>> {
    let (h, w) = image_dims(img)?;
    if !magnitude.is_finite() {
        return Err(Error::InvalidArgument(format!("{op} magnitude {magnitude}")));
    }
    if op.identity_magnitude() == Some(magnitude) {
        return Ok(img.clone());
    }
    let src = img.data();
    let data: Vec<f32> = match op {
        AugmentOp::HorizontalFlip => src
            .chunks(w)
            .flat_map(|row| row.iter().rev().copied())
            .collect(),
        AugmentOp::Brightness => src.iter().map(|&v| v * magnitude).collect(),
        AugmentOp::Contrast => {
            let plane = h * w;
            let mean = (0..plane)
                .map(|i| luminance(src[i], src[plane + i], src[2 * plane + i]) as f64)
                .sum::<f64>()
                / plane as f64;
            let mean = mean as f32;
            src.iter().map(|&v| (v - mean) * magnitude + mean).collect()
        }
        AugmentOp::Hue | AugmentOp::Saturation => {
            let plane = h * w;
            let mut out = vec![0.0; src.len()];
            for i in 0..plane {
                let (hue, sat, val) = rgb_to_hsv(src[i], src[plane + i], src[2 * plane + i]);
                let (hue, sat) = match op {
                    AugmentOp::Hue => ((hue + magnitude).rem_euclid(1.0), sat),
                    _ => (hue, (sat * magnitude).clamp(0.0, 1.0)),
                };
                let (r, g, b) = hsv_to_rgb(hue, sat, val);
                out[i] = r;
                out[plane + i] = g;
                out[2 * plane + i] = b;
            }
            out
        }
        AugmentOp::Zoom => {
            if magnitude < 1.0 {
                return Err(Error::InvalidArgument(format!("zoom factor {magnitude} < 1")));
            }
            let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
            let mut out = Vec::with_capacity(src.len());
            for plane in src.chunks(h * w) {
                for i in 0..h {
                    for j in 0..w {
                        let y = cy + (i as f32 - cy) / magnitude;
                        let x = cx + (j as f32 - cx) / magnitude;
                        out.push(sample_bilinear(plane, h, w, y, x));
                    }
                }
            }
            out
        }
        AugmentOp::Rescale => {
            if magnitude <= 0.0 {
                return Err(Error::InvalidArgument(format!("rescale factor {magnitude}")));
            }
            let sh = ((h as f32 * magnitude).round() as usize).max(2);
            let sw = ((w as f32 * magnitude).round() as usize).max(2);
            let mut out = Vec::with_capacity(src.len());
            for plane in src.chunks(h * w) {
                let small = resize(plane, h, w, sh, sw);
                out.extend(resize(&small, sh, sw, h, w));
            }
            out
        }
    };
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(img.shape().to_vec(), data)
}

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Bilinear sample at fractional pixel coordinates, clamped to the border.
pub fn sample_bilinear(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Corner-aligned bilinear resize of one plane.
fn resize(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let sy = if oh > 1 { (h - 1) as f32 / (oh - 1) as f32 } else { 0.0 };
    let sx = if ow > 1 { (w - 1) as f32 / (ow - 1) as f32 } else { 0.0 };
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            out.push(sample_bilinear(plane, h, w, i as f32 * sy, j as f32 * sx));
        }
    }
    out
}

/// RGB to (hue in [0,1), saturation, value).
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue.rem_euclid(1.0), sat, max)
}

pub fn hsv_to_rgb(hue: f32, sat: f32, val: f32) -> (f32, f32, f32) {
    let h6 = hue.rem_euclid(1.0) * 6.0;
    let c = val * sat;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = val - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}
