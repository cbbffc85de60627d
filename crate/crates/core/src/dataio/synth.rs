//! Procedurally generated image datasets.
//!
//! These stand in for natural-image benchmarks when none are on disk. Each
//! family has a label-defining factor (a shape or glyph) and nuisance
//! factors (colour, position, scale, background, noise) of the kind the
//! contrastive augmentations are meant to factor out.

use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_dataset, ImageSet, Split};
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    /// Ten object shapes on flat palette backgrounds (pre-training).
    Objects,
    /// One large subject plus small clutter, unlabeled (surrogate source).
    Scenes,
    /// Seven-segment glyphs, one channel, 28×28.
    Digits,
    /// Outer sign shape × inner symbol, 12 classes.
    Signs,
}

impl SynthKind {
    pub fn dataset_name(self) -> &'static str {
        match self {
            SynthKind::Objects => "SynthObjects",
            SynthKind::Scenes => "SynthScenes",
            SynthKind::Digits => "SynthDigits",
            SynthKind::Signs => "SynthSigns",
        }
    }

    pub fn from_name(name: &str) -> Option<SynthKind> {
        [SynthKind::Objects, SynthKind::Scenes, SynthKind::Digits, SynthKind::Signs]
            .into_iter()
            .find(|k| k.dataset_name().eq_ignore_ascii_case(name))
    }

    pub fn num_classes(self) -> Option<usize> {
        match self {
            SynthKind::Objects | SynthKind::Digits => Some(10),
            SynthKind::Signs => Some(12),
            SynthKind::Scenes => None,
        }
    }

    fn native_shape(self) -> (usize, usize, usize) {
        match self {
            SynthKind::Digits => (28, 28, 1),
            _ => (32, 32, 3),
        }
    }

    fn split_code(split: Split) -> u64 {
        match split {
            Split::Train => 1,
            Split::Test => 2,
            Split::Unlabeled => 3,
        }
    }
}

/// Renders `count` images of `kind`. Labels cycle through the classes so
/// every split is class-balanced.
pub fn generate(kind: SynthKind, split: Split, count: usize, seed: u64) -> Result<ImageSet> {
    if kind == SynthKind::Scenes && split != Split::Unlabeled {
        return Err(Error::config("SynthScenes only has an unlabeled split"));
    }
    let (h, w, c) = kind.native_shape();
    let mut images = Array4::<f64>::zeros((count, h, w, c));
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = stream_rng(seed, Stream::Synth, &[kind as u64, SynthKind::split_code(split), i as u64]);
        let label = kind.num_classes().map_or(0, |k| i % k);
        let img = match kind {
            SynthKind::Objects => render_object(label, &mut rng),
            SynthKind::Scenes => render_scene(&mut rng),
            SynthKind::Digits => render_digit(label, &mut rng),
            SynthKind::Signs => render_sign(label, &mut rng),
        };
        images.index_axis_mut(Axis(0), i).assign(&img);
        labels.push(label);
    }
    let labels = kind.num_classes().map(|_| labels);
    ImageSet::new(kind.dataset_name(), split, images, labels, kind.num_classes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSizes {
    pub objects_train: usize,
    pub objects_test: usize,
    pub scenes: usize,
    pub digits_train: usize,
    pub digits_test: usize,
    pub signs_train: usize,
    pub signs_test: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        SuiteSizes {
            objects_train: 4_000,
            objects_test: 1_000,
            scenes: 2_000,
            digits_train: 2_000,
            digits_test: 1_000,
            signs_train: 2_000,
            signs_test: 1_000,
        }
    }
}

/// Writes all four synthetic datasets under `root` in the standard layout.
pub fn write_suite(root: &Path, sizes: &SuiteSizes, seed: u64) -> Result<()> {
    let pairs = [
        (SynthKind::Objects, sizes.objects_train, sizes.objects_test),
        (SynthKind::Digits, sizes.digits_train, sizes.digits_test),
        (SynthKind::Signs, sizes.signs_train, sizes.signs_test),
    ];
    for (kind, train, test) in pairs {
        let tr = generate(kind, Split::Train, train, seed)?;
        let te = generate(kind, Split::Test, test, seed)?;
        write_dataset(root, kind.dataset_name(), &[&tr, &te])?;
    }
    let scenes = generate(SynthKind::Scenes, Split::Unlabeled, sizes.scenes, seed)?;
    write_dataset(root, SynthKind::Scenes.dataset_name(), &[&scenes])?;
    Ok(())
}

type Rgb = [f64; 3];

fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn luma(c: &Rgb) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Linear two-colour gradient plus a low-amplitude sinusoidal texture.
fn background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> (Array3<f64>, Rgb) {
    let a = random_color(rng);
    let b = random_color(rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let freq = rng.gen_range(0.2..0.9);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.0..0.12);
    let mut img = Array3::<f64>::zeros((h, w, 3));
    let mut mean = [0.0; 3];
    for y in 0..h {
        for x in 0..w {
            let t = 0.5 + 0.5 * ((x as f64 / w as f64 - 0.5) * dx + (y as f64 / h as f64 - 0.5) * dy);
            let tex = amp * ((x as f64 * dy - y as f64 * dx) * freq + phase).sin();
            for k in 0..3 {
                let v = (a[k] * (1.0 - t) + b[k] * t + tex).clamp(0.0, 1.0);
                img[[y, x, k]] = v;
                mean[k] += v / (h * w) as f64;
            }
        }
    }
    (img, mean)
}

/// Membership test in shape-local coordinates where the shape roughly fills
/// the unit square `[-1, 1]²`.
fn object_mask(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r <= 0.95,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => v <= 0.75 && v >= -0.9 && u.abs() <= 0.95 * (v + 0.9) / 1.65,
        3 => (0.55..=0.98).contains(&r),
        4 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        5 => {
            let (a, b) = ((u + v) * std::f64::consts::FRAC_1_SQRT_2, (u - v) * std::f64::consts::FRAC_1_SQRT_2);
            (a.abs() <= 0.25 && b.abs() <= 1.0) || (b.abs() <= 0.25 && a.abs() <= 1.0)
        }
        6 => u.abs() + v.abs() <= 1.0,
        7 => u.abs() <= 0.9 && v.abs() <= 0.9 && (((v + 0.9) / 0.36).floor() as i64) % 2 == 0,
        8 => u.abs() <= 0.9 && v.abs() <= 0.9 && (((u + 0.9) / 0.36).floor() as i64) % 2 == 0,
        _ => {
            let du = u.abs() - 0.5;
            let dv = v.abs() - 0.5;
            du * du + dv * dv <= 0.35 * 0.35
        }
    }
}

/// Paints `color` wherever `mask` holds, with 3×3 supersampled coverage.
fn paint(
    img: &mut Array3<f64>,
    color: &Rgb,
    (cy, cx): (f64, f64),
    scale: f64,
    mask: impl Fn(f64, f64) -> bool,
) {
    let (h, w, c) = img.dim();
    let y0 = ((cy - scale - 1.0).floor().max(0.0)) as usize;
    let y1 = ((cy + scale + 1.0).ceil() as usize).min(h);
    let x0 = ((cx - scale - 1.0).floor().max(0.0)) as usize;
    let x1 = ((cx + scale + 1.0).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let py = y as f64 + (sy as f64 + 0.5) / 3.0;
                    let px = x as f64 + (sx as f64 + 0.5) / 3.0;
                    if mask((px - cx) / scale, (py - cy) / scale) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let a = hits as f64 / 9.0;
                for k in 0..c {
                    let col = if c == 1 { luma(color) } else { color[k] };
                    img[[y, x, k]] = img[[y, x, k]] * (1.0 - a) + col * a;
                }
            }
        }
    }
}

fn add_noise(img: &mut Array3<f64>, sigma: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    img.mapv_inplace(|v| (v + normal.sample(rng)).clamp(0.0, 1.0));
}

const PALETTE: [Rgb; 6] = [
    [0.85, 0.2, 0.2],
    [0.2, 0.7, 0.3],
    [0.2, 0.35, 0.85],
    [0.9, 0.85, 0.3],
    [0.15, 0.15, 0.15],
    [0.9, 0.9, 0.9],
];

/// Object colours come from a small shared palette so that colour alone
/// cannot tell images apart; shape, position and scale have to.
fn render_object(class: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let i = rng.gen_range(0..PALETTE.len());
    let j = (i + rng.gen_range(1..PALETTE.len())) % PALETTE.len();
    let mut img = Array3::<f64>::zeros((32, 32, 3));
    let shade = rng.gen_range(0.85..1.0);
    for ((_, _, k), v) in img.indexed_iter_mut() {
        *v = PALETTE[i][k] * shade;
    }
    let scale = rng.gen_range(7.0..12.5);
    let cy = 16.0 + rng.gen_range(-5.0..5.0);
    let cx = 16.0 + rng.gen_range(-5.0..5.0);
    paint(&mut img, &PALETTE[j], (cy, cx), scale, |u, v| object_mask(class, u, v));
    add_noise(&mut img, 0.02, rng);
    img
}

/// Unlabeled clutter built from the same primitives as the labeled sets
/// (palette shapes, glyph strokes, sign plates, lines): a main subject
/// plus clutter.
fn render_scene(rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut img = match [0, 0, 1, 2][rng.gen_range(0..4)] {
        0 => {
            let c = PALETTE[rng.gen_range(0..PALETTE.len())];
            let shade = rng.gen_range(0.7..1.0);
            Array3::from_shape_fn((32, 32, 3), |(_, _, k)| c[k] * shade)
        }
        1 => background(32, 32, rng).0,
        _ => {
            let (b0, b1): (f64, f64) = (rng.gen_range(0.0..0.4), rng.gen_range(0.0..0.4));
            Array3::from_shape_fn((32, 32, 3), |(_, x, _)| b0 + (b1 - b0) * x as f64 / 31.0)
        }
    };
    // One dominant subject near the centre, then small clutter.
    for item in 0..rng.gen_range(1..=3) {
        let (scale, cy, cx) = if item == 0 {
            (rng.gen_range(7.0..12.5), 16.0 + rng.gen_range(-6.0..6.0), 16.0 + rng.gen_range(-6.0..6.0))
        } else {
            (rng.gen_range(3.0..7.0), rng.gen_range(2.0..30.0), rng.gen_range(2.0..30.0))
        };
        let color = if rng.gen_bool(0.6) {
            PALETTE[rng.gen_range(0..PALETTE.len())]
        } else {
            [rng.gen_range(0.4..1.0); 3]
        };
        let kind = if item == 0 { [0, 0, 1, 2][rng.gen_range(0..4)] } else { rng.gen_range(0..4) };
        match kind {
            0 => {
                let class = rng.gen_range(0..10);
                paint(&mut img, &color, (cy, cx), scale, move |u, v| object_mask(class, u, v));
            }
            1 => {
                let (digit, stroke, slant) = (rng.gen_range(0..10), rng.gen_range(0.12..0.26), rng.gen_range(-0.3..0.3));
                paint(&mut img, &color, (cy, cx), scale, move |u, v| segment_hit(digit, u + slant * v, v, stroke));
            }
            2 => {
                let plate = rng.gen_range(0..4);
                let body = move |u: f64, v: f64| match plate {
                    0 => u * u + v * v <= 1.0,
                    1 => v <= 0.8 && v >= -0.95 && u.abs() <= (v + 0.95) / 1.75,
                    2 => u.abs() + v.abs() <= 1.0,
                    _ => u.abs().max(v.abs()) <= 0.85,
                };
                paint(&mut img, &color, (cy, cx), scale, body);
                paint(&mut img, &[0.92; 3], (cy, cx), scale * 0.7, body);
            }
            _ => {
                let t: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let (sn, cs) = t.sin_cos();
                let width = rng.gen_range(0.1..0.3);
                paint(&mut img, &color, (cy, cx), scale, move |u, v| {
                    (u * sn - v * cs).abs() <= width && (u * cs + v * sn).abs() <= 1.0
                });
            }
        }
    }
    if rng.gen_bool(0.25) {
        for mut px in img.lanes_mut(ndarray::Axis(2)) {
            let y = luma(&[px[0], px[1], px[2]]);
            px.fill(y);
        }
    }
    add_noise(&mut img, 0.03, rng);
    img
}

// Seven-segment layout: a top, b top-right, c bottom-right, d bottom,
// e bottom-left, f top-left, g middle.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn segment_hit(digit: usize, u: f64, v: f64, stroke: f64) -> bool {
    // Glyph box is u in [-0.6, 0.6], v in [-1, 1].
    let on = &SEGMENTS[digit];
    let horiz = |vy: f64| (v - vy).abs() <= stroke && u.abs() <= 0.6;
    let vert = |ux: f64, top: bool| {
        (u - ux).abs() <= stroke && if top { (-1.0..=0.0).contains(&v) } else { (0.0..=1.0).contains(&v) }
    };
    (on[0] && horiz(-1.0 + stroke))
        || (on[1] && vert(0.6 - stroke, true))
        || (on[2] && vert(0.6 - stroke, false))
        || (on[3] && horiz(1.0 - stroke))
        || (on[4] && vert(-0.6 + stroke, false))
        || (on[5] && vert(-0.6 + stroke, true))
        || (on[6] && horiz(0.0))
}

/// A glyph over a dim gradient with a few distractor strokes.
fn render_digit(digit: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut img = Array3::<f64>::zeros((28, 28, 1));
    let (b0, b1): (f64, f64) = (rng.gen_range(0.0..0.35), rng.gen_range(0.0..0.35));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    for ((y, x, _), v) in img.indexed_iter_mut() {
        let t = 0.5 + 0.5 * ((x as f64 / 28.0 - 0.5) * angle.cos() + (y as f64 / 28.0 - 0.5) * angle.sin());
        *v = b0 * (1.0 - t) + b1 * t;
    }
    for _ in 0..rng.gen_range(1..=3) {
        let t: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (sn, cs) = t.sin_cos();
        let level = rng.gen_range(0.3..0.7);
        let (cy, cx) = (rng.gen_range(0.0..28.0), rng.gen_range(0.0..28.0));
        paint(&mut img, &[level; 3], (cy, cx), rng.gen_range(3.0..7.0), move |u, v| {
            (u * sn - v * cs).abs() <= 0.25 && (u * cs + v * sn).abs() <= 1.0
        });
    }
    let scale = rng.gen_range(6.5..11.5);
    let cy = 14.0 + rng.gen_range(-4.0..4.0);
    let cx = 14.0 + rng.gen_range(-5.0..5.0);
    let stroke = rng.gen_range(0.12..0.26);
    let slant = rng.gen_range(-0.3..0.3);
    let ink = rng.gen_range(0.7..1.0);
    paint(&mut img, &[ink; 3], (cy, cx), scale, move |u, v| segment_hit(digit, u + slant * v, v, stroke));
    add_noise(&mut img, 0.06, rng);
    img
}

fn render_sign(class: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let outer = class / 3;
    let inner = class % 3;
    let (mut img, _) = background(32, 32, rng);
    let palette: [Rgb; 3] = [[0.85, 0.1, 0.1], [0.1, 0.25, 0.85], [0.95, 0.8, 0.1]];
    let rim = palette[rng.gen_range(0..3)];
    let brightness = rng.gen_range(0.6..1.0);
    let rim = [rim[0] * brightness, rim[1] * brightness, rim[2] * brightness];
    let face = [0.92 * brightness; 3];
    let scale = rng.gen_range(9.0..13.5);
    let cy = 16.0 + rng.gen_range(-3.5..3.5);
    let cx = 16.0 + rng.gen_range(-3.5..3.5);
    let body = move |u: f64, v: f64| match outer {
        0 => u * u + v * v <= 1.0,
        1 => v <= 0.8 && v >= -0.95 && u.abs() <= (v + 0.95) / 1.75,
        2 => u.abs() + v.abs() <= 1.0,
        _ => u.abs().max(v.abs()) <= 0.85,
    };
    paint(&mut img, &rim, (cy, cx), scale, body);
    paint(&mut img, &face, (cy, cx), scale * 0.7, body);
    let ink = [0.08, 0.08, 0.08];
    let symbol_scale = scale * 0.38;
    let sy = if outer == 1 { cy + scale * 0.2 } else { cy };
    match inner {
        0 => paint(&mut img, &ink, (sy, cx), symbol_scale, |u, v| v.abs() <= 0.3 && u.abs() <= 1.0),
        1 => paint(&mut img, &ink, (sy, cx), symbol_scale, |u, v| u.abs() <= 0.3 && v.abs() <= 1.0),
        _ => paint(&mut img, &ink, (sy, cx), symbol_scale, |u, v| u * u + v * v <= 0.45),
    }
    add_noise(&mut img, 0.02, rng);
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{load_dataset, ImageShape};

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate(SynthKind::Signs, Split::Train, 24, 5).unwrap();
        let b = generate(SynthKind::Signs, Split::Train, 24, 5).unwrap();
        assert_eq!(a, b);
        let labels = a.labels.unwrap();
        for k in 0..12 {
            assert_eq!(labels.iter().filter(|&&l| l == k).count(), 2);
        }
        let other = generate(SynthKind::Signs, Split::Test, 24, 5).unwrap();
        assert_ne!(other.images, b.images);
    }

    #[test]
    fn digits_are_single_channel() {
        let d = generate(SynthKind::Digits, Split::Test, 10, 0).unwrap();
        assert_eq!(d.shape(), ImageShape::new(28, 28, 1));
        // Ink must be present in every glyph.
        for i in 0..10 {
            assert!(d.image(i).iter().any(|&v| v > 0.5));
        }
    }

    #[test]
    fn scenes_are_unlabeled_only() {
        assert!(generate(SynthKind::Scenes, Split::Train, 1, 0).is_err());
        let s = generate(SynthKind::Scenes, Split::Unlabeled, 3, 0).unwrap();
        assert!(s.labels.is_none());
    }

    #[test]
    fn suite_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SuiteSizes {
            objects_train: 6,
            objects_test: 3,
            scenes: 4,
            digits_train: 5,
            digits_test: 2,
            signs_train: 4,
            signs_test: 2,
        };
        write_suite(dir.path(), &sizes, 1).unwrap();
        let digits = load_dataset("SynthDigits", Split::Train, dir.path()).unwrap();
        assert_eq!(digits.shape(), ImageShape::new(32, 32, 3));
        assert_eq!(digits.len(), 5);
        let scenes = load_dataset("SynthScenes", Split::Unlabeled, dir.path()).unwrap();
        assert_eq!(scenes.len(), 4);
    }
}
