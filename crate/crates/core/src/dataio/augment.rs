//! Stochastic augmentation built from the four standard contrastive ops.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::crop_resize;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    RandomResizedCrop {
        scale: (f64, f64),
        ratio: (f64, f64),
    },
    RandomHorizontalFlip {
        p: f64,
    },
    /// Brightness, contrast and saturation factors are drawn from
    /// `[max(0, 1 - s), 1 + s]`; the hue shift from `[-hue, hue]`. The whole
    /// jitter is applied with probability `p`, in a random order.
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
        p: f64,
    },
    RandomGrayScale {
        p: f64,
    },
}

impl AugOp {
    pub fn crop() -> Self {
        AugOp::RandomResizedCrop {
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }

    pub fn hflip() -> Self {
        AugOp::RandomHorizontalFlip { p: 0.5 }
    }

    pub fn jitter() -> Self {
        AugOp::ColorJitter {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            p: 0.8,
        }
    }

    /// Jitter at twice the default strength, used for pre-training views.
    pub fn strong_jitter() -> Self {
        AugOp::ColorJitter {
            brightness: 0.8,
            contrast: 0.8,
            saturation: 0.8,
            hue: 0.2,
            p: 0.8,
        }
    }

    pub fn gray() -> Self {
        AugOp::RandomGrayScale { p: 0.2 }
    }

    /// Position in the conventional ordering (crop, flip, jitter, gray).
    pub fn rank(&self) -> usize {
        match self {
            AugOp::RandomResizedCrop { .. } => 1,
            AugOp::RandomHorizontalFlip { .. } => 2,
            AugOp::ColorJitter { .. } => 3,
            AugOp::RandomGrayScale { .. } => 4,
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            AugOp::RandomResizedCrop { .. } => "crop",
            AugOp::RandomHorizontalFlip { .. } => "hflip",
            AugOp::ColorJitter { .. } => "jitter",
            AugOp::RandomGrayScale { .. } => "gray",
        }
    }

    fn apply(&self, image: Array3<f64>, rng: &mut impl Rng) -> Array3<f64> {
        match *self {
            AugOp::RandomResizedCrop { scale, ratio } => random_resized_crop(image, scale, ratio, rng),
            AugOp::RandomHorizontalFlip { p } => {
                if rng.gen::<f64>() < p {
                    hflip(image.view())
                } else {
                    image
                }
            }
            AugOp::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
                p,
            } => {
                if rng.gen::<f64>() >= p {
                    return image;
                }
                let mut order = [0usize, 1, 2, 3];
                order.shuffle(rng);
                let mut img = image;
                for step in order {
                    img = match step {
                        0 => adjust_brightness(img, factor(brightness, rng)),
                        1 => adjust_contrast(img, factor(contrast, rng)),
                        2 => adjust_saturation(img, factor(saturation, rng)),
                        _ => {
                            let shift = if hue > 0.0 { rng.gen_range(-hue..=hue) } else { 0.0 };
                            adjust_hue(img, shift)
                        }
                    };
                }
                img
            }
            AugOp::RandomGrayScale { p } => {
                if rng.gen::<f64>() < p {
                    grayscale(image)
                } else {
                    image
                }
            }
        }
    }
}

fn factor(strength: f64, rng: &mut impl Rng) -> f64 {
    if strength <= 0.0 {
        1.0
    } else {
        rng.gen_range((1.0 - strength).max(0.0)..=1.0 + strength)
    }
}

/// An ordered subset of the four augmentation ops.
///
/// Deserializes either from the full `{ ops = [...] }` form or from the
/// short string form accepted by [`FromStr`].
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AugmentationSpec {
    pub ops: Vec<AugOp>,
}

impl<'de> Deserialize<'de> for AugmentationSpec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Short(String),
            Full {
                ops: Vec<AugOp>,
            },
        }
        let spec = match Repr::deserialize(de)? {
            Repr::Short(s) => s.parse().map_err(serde::de::Error::custom)?,
            Repr::Full { ops } => AugmentationSpec::new(ops).map_err(serde::de::Error::custom)?,
        };
        Ok(spec)
    }
}

impl AugmentationSpec {
    pub fn new(ops: Vec<AugOp>) -> Result<Self> {
        let spec = AugmentationSpec { ops };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity() -> Self {
        AugmentationSpec { ops: Vec::new() }
    }

    /// All four ops, as used for contrastive pre-training.
    pub fn pretraining() -> Self {
        AugmentationSpec {
            ops: vec![AugOp::crop(), AugOp::hflip(), AugOp::strong_jitter(), AugOp::gray()],
        }
    }

    /// Flip, jitter and grayscale: the attacker's default composition.
    pub fn attack_default() -> Self {
        AugmentationSpec {
            ops: vec![AugOp::hflip(), AugOp::jitter(), AugOp::gray()],
        }
    }

    /// The 16 subsets of the four default ops, keyed like `"", "1", "12", …`.
    pub fn all_subsets() -> Vec<(String, AugmentationSpec)> {
        let base = [AugOp::crop(), AugOp::hflip(), AugOp::jitter(), AugOp::gray()];
        (0..16u32)
            .map(|mask| {
                let ops: Vec<AugOp> = (0..4)
                    .filter(|b| mask & (1 << b) != 0)
                    .map(|b| base[b].clone())
                    .collect();
                let key: String = ops.iter().map(|o| char::from(b'0' + o.rank() as u8)).collect();
                (key, AugmentationSpec { ops })
            })
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 5];
        for op in &self.ops {
            if std::mem::replace(&mut seen[op.rank()], true) {
                return Err(Error::config(format!("augmentation `{}` listed twice", op.short_name())));
            }
            let probability_ok = match *op {
                AugOp::RandomHorizontalFlip { p }
                | AugOp::RandomGrayScale { p }
                | AugOp::ColorJitter { p, .. } => (0.0..=1.0).contains(&p),
                AugOp::RandomResizedCrop { scale, ratio } => {
                    scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0 && ratio.0 > 0.0 && ratio.0 <= ratio.1
                }
            };
            if !probability_ok {
                return Err(Error::config(format!("invalid parameters for `{}`", op.short_name())));
            }
        }
        Ok(())
    }

    pub fn apply(&self, image: ArrayView3<'_, f64>, rng: &mut impl Rng) -> Array3<f64> {
        let mut img = image.to_owned();
        for op in &self.ops {
            img = op.apply(img, rng);
        }
        img
    }
}

impl fmt::Display for AugmentationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ops.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<_> = self.ops.iter().map(AugOp::short_name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for AugmentationSpec {
    type Err = Error;

    /// Parses comma-separated op names with default parameters.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(AugmentationSpec::identity());
        }
        let ops = s
            .split(',')
            .map(|name| match name.trim().to_ascii_lowercase().as_str() {
                "crop" | "rrc" | "randomresizedcrop" => Ok(AugOp::crop()),
                "hflip" | "flip" | "randomhorizontalflip" => Ok(AugOp::hflip()),
                "jitter" | "color" | "colorjitter" => Ok(AugOp::jitter()),
                "gray" | "grey" | "grayscale" | "randomgrayscale" => Ok(AugOp::gray()),
                other => Err(Error::config(format!("unknown augmentation `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        AugmentationSpec::new(ops)
    }
}

/// Applies `spec` to one image.
pub fn augment(image: ArrayView3<'_, f64>, spec: &AugmentationSpec, rng: &mut impl Rng) -> Array3<f64> {
    spec.apply(image, rng)
}

/// Augments a batch. Row `r` uses the stream keyed by
/// `(epoch, ids[r], view)`, so results do not depend on batch composition.
pub fn augment_batch(
    images: &Array4<f64>,
    ids: &[usize],
    spec: &AugmentationSpec,
    seed: u64,
    epoch: u64,
    view: u64,
) -> Array4<f64> {
    debug_assert_eq!(ids.len(), images.len_of(Axis(0)));
    if spec.is_identity() {
        return images.clone();
    }
    let mut out = Array4::<f64>::zeros(images.raw_dim());
    for (r, &id) in ids.iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::Augment, &[epoch, id as u64, view]);
        let img = spec.apply(images.index_axis(Axis(0), r), &mut rng);
        out.index_axis_mut(Axis(0), r).assign(&img);
    }
    out
}

pub fn hflip(image: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut out = image.to_owned();
    out.invert_axis(Axis(1));
    out.as_standard_layout().into_owned()
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn grayscale(mut image: Array3<f64>) -> Array3<f64> {
    if image.dim().2 != 3 {
        return image;
    }
    for mut px in image.lanes_mut(Axis(2)) {
        let y = luminance(px[0], px[1], px[2]);
        px.fill(y);
    }
    image
}

fn adjust_brightness(mut image: Array3<f64>, f: f64) -> Array3<f64> {
    image.mapv_inplace(|v| (v * f).clamp(0.0, 1.0));
    image
}

fn adjust_contrast(mut image: Array3<f64>, f: f64) -> Array3<f64> {
    let mean = if image.dim().2 == 3 {
        image
            .lanes(Axis(2))
            .into_iter()
            .map(|px| luminance(px[0], px[1], px[2]))
            .sum::<f64>()
            / (image.dim().0 * image.dim().1) as f64
    } else {
        image.mean().unwrap_or(0.0)
    };
    image.mapv_inplace(|v| (f * v + (1.0 - f) * mean).clamp(0.0, 1.0));
    image
}

fn adjust_saturation(mut image: Array3<f64>, f: f64) -> Array3<f64> {
    if image.dim().2 != 3 {
        return image;
    }
    for mut px in image.lanes_mut(Axis(2)) {
        let y = luminance(px[0], px[1], px[2]);
        px.mapv_inplace(|v| (f * v + (1.0 - f) * y).clamp(0.0, 1.0));
    }
    image
}

fn adjust_hue(mut image: Array3<f64>, shift: f64) -> Array3<f64> {
    if image.dim().2 != 3 || shift == 0.0 {
        return image;
    }
    for mut px in image.lanes_mut(Axis(2)) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        px[0] = r.clamp(0.0, 1.0);
        px[1] = g.clamp(0.0, 1.0);
        px[2] = b.clamp(0.0, 1.0);
    }
    image
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn random_resized_crop(image: Array3<f64>, scale: (f64, f64), ratio: (f64, f64), rng: &mut impl Rng) -> Array3<f64> {
    let (h, w, _) = image.dim();
    let area = (h * w) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(scale.0..=scale.1);
        let aspect = if lr0 < lr1 { rng.gen_range(lr0..lr1).exp() } else { ratio.0 };
        let cw = (target * aspect).sqrt().round();
        let ch = (target / aspect).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w as f64 && ch <= h as f64 {
            let top = rng.gen_range(0..=(h - ch as usize)) as f64;
            let left = rng.gen_range(0..=(w - cw as usize)) as f64;
            return crop_resize(image.view(), (top, left, ch, cw), h, w);
        }
    }
    // Fallback: central crop at the clamped aspect ratio.
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio.0 {
        ((w as f64 / ratio.0).round(), w as f64)
    } else if in_ratio > ratio.1 {
        (h as f64, (h as f64 * ratio.1).round())
    } else {
        (h as f64, w as f64)
    };
    let top = ((h as f64 - ch) / 2.0).floor();
    let left = ((w as f64 - cw) / 2.0).floor();
    crop_resize(image.view(), (top, left, ch, cw), h, w)
}
