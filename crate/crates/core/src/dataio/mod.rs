//! Image datasets: in-memory sets, the on-disk store, surrogate sampling,
//! stochastic augmentation and procedurally generated datasets.

pub mod augment;
pub mod store;
pub mod synth;

pub use augment::{augment, augment_batch, AugOp, AugmentationSpec};
pub use store::{known_dataset, load_dataset, load_dataset_with, write_dataset, DatasetInfo, Manifest};

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        ImageShape {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        ImageShape::new(32, 32, 3)
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unlabeled,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unlabeled" | "unlabelled" => Ok(Split::Unlabeled),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

/// Where a derived set's images came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub indices: Vec<usize>,
}

/// A set of equally shaped images, `(n, h, w, c)`, with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub name: String,
    pub split: Split,
    pub images: Array4<f64>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: Option<usize>,
    pub provenance: Option<Provenance>,
}

impl ImageSet {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        images: Array4<f64>,
        labels: Option<Vec<usize>>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let set = ImageSet {
            name: name.into(),
            split,
            images,
            labels,
            num_classes,
            provenance: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::Invariant(format!(
                    "{}: {} labels for {} images",
                    self.name,
                    labels.len(),
                    self.len()
                )));
            }
            if let Some(k) = self.num_classes {
                if let Some(bad) = labels.iter().find(|&&l| l >= k) {
                    return Err(Error::Invariant(format!(
                        "{}: label {bad} outside [0, {k})",
                        self.name
                    )));
                }
            }
        }
        if self.images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invariant(format!("{}: pixel outside [0, 1]", self.name)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> ImageShape {
        let (_, h, w, c) = self.images.dim();
        ImageShape::new(h, w, c)
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f64> {
        self.images.index_axis(Axis(0), i)
    }

    /// Copies out the images at `indices`, in order, as a new set.
    pub fn subset(&self, indices: &[usize]) -> Result<ImageSet> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::precondition(format!(
                "index {bad} out of range for {} images",
                self.len()
            )));
        }
        let images = gather(&self.images, indices);
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        let base = self
            .provenance
            .as_ref()
            .map(|p| indices.iter().map(|&i| p.indices[i]).collect())
            .unwrap_or_else(|| indices.to_vec());
        let source = self
            .provenance
            .as_ref()
            .map(|p| p.source.clone())
            .unwrap_or_else(|| format!("{}/{}", self.name, self.split));
        Ok(ImageSet {
            name: self.name.clone(),
            split: self.split,
            images,
            labels,
            num_classes: self.num_classes,
            provenance: Some(Provenance {
                source,
                indices: base,
            }),
        })
    }

    /// Content digest over name, split, shape, pixels and labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update(self.split.as_str().as_bytes());
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.images.iter() {
            h.update(v.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for &l in labels {
                h.update((l as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Leading `count` images (or all of them).
    pub fn head(&self, count: usize) -> Result<ImageSet> {
        let n = count.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }
}

pub(crate) fn gather(images: &Array4<f64>, indices: &[usize]) -> Array4<f64> {
    let (_, h, w, c) = images.dim();
    let mut out = Array4::<f64>::zeros((indices.len(), h, w, c));
    for (dst, &i) in indices.iter().enumerate() {
        out.index_axis_mut(Axis(0), dst).assign(&images.index_axis(Axis(0), i));
    }
    out
}

/// Draws `count` distinct images uniformly at random without replacement.
pub fn sample_surrogate(source: &ImageSet, count: usize, seed: u64) -> Result<ImageSet> {
    if count > source.len() {
        return Err(Error::precondition(format!(
            "cannot sample {count} images from {} ({} available)",
            source.name,
            source.len()
        )));
    }
    let mut rng = stream_rng(seed, Stream::Surrogate, &[source.len() as u64, count as u64]);
    let indices = index::sample(&mut rng, source.len(), count).into_vec();
    source.subset(&indices)
}

/// Replicates a single-channel image into three identical channels.
pub fn expand_channels(image: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    let (h, w, c) = image.dim();
    if c != 1 {
        return Err(Error::precondition(format!("expected 1 channel, got {c}")));
    }
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for ch in 0..3 {
        out.slice_mut(s![.., .., ch]).assign(&image.slice(s![.., .., 0]));
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(image: ArrayView3<'_, f64>, height: usize, width: usize) -> Array3<f64> {
    let (h, w, _) = image.dim();
    if h == height && w == width {
        return image.to_owned();
    }
    crop_resize(image, (0.0, 0.0, h as f64, w as f64), height, width)
}

/// Samples the region `(top, left, crop_h, crop_w)` (in source pixels) onto
/// a `height × width` grid by bilinear interpolation.
pub(crate) fn crop_resize(
    image: ArrayView3<'_, f64>,
    (top, left, ch, cw): (f64, f64, f64, f64),
    height: usize,
    width: usize,
) -> Array3<f64> {
    let (h, w, c) = image.dim();
    let mut out = Array3::<f64>::zeros((height, width, c));
    let sy = ch / height as f64;
    let sx = cw / width as f64;
    for y in 0..height {
        let fy = (top + (y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = (left + (x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for k in 0..c {
                let top_v = image[[y0, x0, k]] * (1.0 - tx) + image[[y0, x1, k]] * tx;
                let bot_v = image[[y1, x0, k]] * (1.0 - tx) + image[[y1, x1, k]] * tx;
                out[[y, x, k]] = (top_v * (1.0 - ty) + bot_v * ty).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Loads `name`/`split` from `root` when present there; otherwise falls back
/// to the generator for the synthetic datasets. `count` keeps the leading
/// images only. Images come back at the canonical 32×32×3 shape.
pub fn resolve_dataset(
    name: &str,
    split: Split,
    root: Option<&std::path::Path>,
    count: Option<usize>,
    seed: u64,
) -> Result<ImageSet> {
    let info = known_dataset(name).ok_or_else(|| Error::config(format!("unknown dataset `{name}`")))?;
    if let Some(root) = root {
        if root.join(info.name).join("manifest.json").exists() {
            let set = load_dataset(info.name, split, root)?;
            return match count {
                Some(n) if n < set.len() => set.head(n),
                _ => Ok(set),
            };
        }
    }
    let kind = synth::SynthKind::from_name(info.name).ok_or_else(|| {
        let place = root.map_or_else(|| "no data root set".to_string(), |r| r.display().to_string());
        Error::load(place, format!("dataset `{}` not found", info.name))
    })?;
    let default = match split {
        Split::Train => info.train,
        Split::Test => info.test,
        Split::Unlabeled => info.unlabeled,
    };
    let set = synth::generate(kind, split, count.unwrap_or(default), seed)?;
    let images = normalize_to(&set.images, ImageShape::default())?;
    ImageSet::new(set.name, split, images, set.labels, set.num_classes)
}

/// Resizes every image to `shape`, expanding grayscale sources first.
pub fn normalize_to(images: &Array4<f64>, shape: ImageShape) -> Result<Array4<f64>> {
    let (n, _, _, c) = images.dim();
    if c != 1 && c != shape.channels {
        return Err(Error::precondition(format!(
            "cannot map {c}-channel images onto {} channels",
            shape.channels
        )));
    }
    let mut out = Array4::<f64>::zeros((n, shape.height, shape.width, shape.channels));
    for i in 0..n {
        let src = images.index_axis(Axis(0), i);
        let resized = resize_bilinear(src, shape.height, shape.width);
        let img = if c == 1 && shape.channels == 3 {
            expand_channels(resized.view())?
        } else {
            resized
        };
        out.index_axis_mut(Axis(0), i).assign(&img);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_set(n: usize) -> ImageSet {
        let images = Array4::from_shape_fn((n, 4, 4, 3), |(i, y, x, c)| ((i + y + x + c) % 7) as f64 / 7.0);
        ImageSet::new("toy", Split::Train, images, Some((0..n).map(|i| i % 3).collect()), Some(3)).unwrap()
    }

    #[test]
    fn expand_zero_image() {
        let g = Array3::<f64>::zeros((32, 32, 1));
        let out = expand_channels(g.view()).unwrap();
        assert_eq!(out.dim(), (32, 32, 3));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expand_single_pixel() {
        let g = Array3::from_elem((1, 1, 1), 0.7);
        let out = expand_channels(g.view()).unwrap();
        assert_eq!(out.as_slice().unwrap(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn expand_random_image_copies_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Array3::from_shape_fn((28, 28, 1), |_| rng.gen::<f64>());
        let out = expand_channels(g.view()).unwrap();
        for c in 0..3 {
            assert_eq!(out.slice(s![.., .., c]), g.slice(s![.., .., 0]));
        }
    }

    #[test]
    fn expand_rejects_multichannel() {
        let g = Array3::<f64>::zeros((4, 4, 3));
        assert!(matches!(expand_channels(g.view()), Err(Error::Precondition(_))));
    }

    #[test]
    fn surrogate_sampling_is_distinct_and_deterministic() {
        let set = toy_set(50);
        let a = sample_surrogate(&set, 20, 0).unwrap();
        let b = sample_surrogate(&set, 20, 0).unwrap();
        let ia = &a.provenance.as_ref().unwrap().indices;
        assert_eq!(ia, &b.provenance.as_ref().unwrap().indices);
        let mut sorted = ia.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
        assert_eq!(a.provenance.unwrap().source, "toy/train");
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn surrogate_sampling_edges() {
        let set = toy_set(5);
        assert!(sample_surrogate(&set, 0, 9).unwrap().is_empty());
        assert!(matches!(sample_surrogate(&set, 6, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn subset_of_subset_tracks_original_indices() {
        let set = toy_set(10);
        let a = set.subset(&[9, 4, 2]).unwrap();
        let b = a.subset(&[2, 0]).unwrap();
        assert_eq!(b.provenance.unwrap().indices, vec![2, 9]);
        assert_eq!(b.labels.unwrap(), vec![2, 0]);
    }

    #[test]
    fn labels_checked_against_classes() {
        let images = Array4::<f64>::zeros((2, 2, 2, 3));
        assert!(ImageSet::new("x", Split::Train, images.clone(), Some(vec![0]), None).is_err());
        assert!(ImageSet::new("x", Split::Train, images, Some(vec![0, 5]), Some(3)).is_err());
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = Array3::from_elem((28, 28, 1), 0.25);
        let out = resize_bilinear(img.view(), 32, 32);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn normalize_expands_grayscale() {
        let images = Array4::from_elem((2, 28, 28, 1), 0.5);
        let out = normalize_to(&images, ImageShape::default()).unwrap();
        assert_eq!(out.dim(), (2, 32, 32, 3));
    }
}
