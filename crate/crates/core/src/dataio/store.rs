//! On-disk dataset layout.
//!
//! ```text
//! <root>/<name>/manifest.json
//! <root>/<name>/<split>_images.npy   (n, h, w, c) uint8 or float32
//! <root>/<name>/<split>_labels.npy   (n,) int64, absent for unlabeled splits
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array4};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use super::{normalize_to, ImageSet, ImageShape, Split};
use crate::util::atomic_write;
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Reference facts about a dataset the loader recognizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetInfo {
    pub name: &'static str,
    pub train: usize,
    pub test: usize,
    pub unlabeled: usize,
    pub classes: usize,
    pub channels: usize,
}

const REGISTRY: &[DatasetInfo] = &[
    DatasetInfo { name: "CIFAR10", train: 50_000, test: 10_000, unlabeled: 0, classes: 10, channels: 3 },
    DatasetInfo { name: "STL10", train: 5_000, test: 8_000, unlabeled: 100_000, classes: 10, channels: 3 },
    DatasetInfo { name: "Food101", train: 90_900, test: 10_100, unlabeled: 0, classes: 101, channels: 3 },
    DatasetInfo { name: "MNIST", train: 60_000, test: 10_000, unlabeled: 0, classes: 10, channels: 1 },
    DatasetInfo { name: "FashionMNIST", train: 60_000, test: 10_000, unlabeled: 0, classes: 10, channels: 1 },
    DatasetInfo { name: "SVHN", train: 73_257, test: 26_032, unlabeled: 0, classes: 10, channels: 3 },
    DatasetInfo { name: "GTSRB", train: 39_209, test: 12_630, unlabeled: 0, classes: 43, channels: 3 },
    DatasetInfo { name: "ImageNet", train: 1_281_167, test: 50_000, unlabeled: 0, classes: 1000, channels: 3 },
    // Procedurally generated stand-ins; sizes are generator defaults.
    DatasetInfo { name: "SynthObjects", train: 4_000, test: 1_000, unlabeled: 0, classes: 10, channels: 3 },
    DatasetInfo { name: "SynthScenes", train: 0, test: 0, unlabeled: 2_000, classes: 0, channels: 3 },
    DatasetInfo { name: "SynthDigits", train: 2_000, test: 1_000, unlabeled: 0, classes: 10, channels: 1 },
    DatasetInfo { name: "SynthSigns", train: 2_000, test: 1_000, unlabeled: 0, classes: 12, channels: 3 },
];

pub fn known_dataset(name: &str) -> Option<&'static DatasetInfo> {
    REGISTRY.iter().find(|d| d.name.eq_ignore_ascii_case(name))
}

pub fn known_datasets() -> &'static [DatasetInfo] {
    REGISTRY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub count: usize,
    pub images: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub image_shape: ImageShape,
    #[serde(default)]
    pub num_classes: Option<usize>,
    pub splits: BTreeMap<Split, SplitEntry>,
}

fn dataset_dir(root: &Path, info: &DatasetInfo) -> PathBuf {
    root.join(info.name)
}

/// Loads a split at the default 32×32×3 canonical shape.
pub fn load_dataset(name: &str, split: Split, root: &Path) -> Result<ImageSet> {
    load_dataset_with(name, split, root, ImageShape::default())
}

pub fn load_dataset_with(name: &str, split: Split, root: &Path, canonical: ImageShape) -> Result<ImageSet> {
    let info = known_dataset(name).ok_or_else(|| Error::config(format!("unknown dataset `{name}`")))?;
    let dir = dataset_dir(root, info);
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::load(&manifest_path, format!("bad manifest: {e}")))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::load(
            &manifest_path,
            format!("manifest version {} (expected {MANIFEST_VERSION})", manifest.format_version),
        ));
    }
    let entry = manifest
        .splits
        .get(&split)
        .ok_or_else(|| Error::load(&manifest_path, format!("no `{split}` split")))?;

    let image_path = dir.join(&entry.images);
    let raw = read_images(&image_path)?;
    let (n, h, w, c) = raw.dim();
    if n != entry.count {
        return Err(Error::load(&image_path, format!("manifest declares {} images, file has {n}", entry.count)));
    }
    let declared = manifest.image_shape;
    if (h, w, c) != declared.as_tuple() {
        return Err(Error::load(&image_path, format!("images are {h}x{w}x{c}, manifest says {declared}")));
    }

    let labels = match &entry.labels {
        Some(file) => {
            let path = dir.join(file);
            let arr: Array1<i64> = read_npy(&path).map_err(|e| Error::load(&path, e.to_string()))?;
            if arr.len() != n {
                return Err(Error::load(&path, format!("{} labels for {n} images", arr.len())));
            }
            let labels = arr
                .iter()
                .map(|&l| usize::try_from(l).map_err(|_| Error::load(&path, format!("negative label {l}"))))
                .collect::<Result<Vec<_>>>()?;
            Some(labels)
        }
        None => None,
    };

    let images = normalize_to(&raw, canonical)?;
    ImageSet::new(info.name, split, images, labels, manifest.num_classes)
}

fn read_images(path: &Path) -> Result<Array4<f64>> {
    if !path.exists() {
        return Err(Error::load(path, "file not found"));
    }
    match read_npy::<_, Array4<u8>>(path) {
        Ok(bytes) => Ok(bytes.mapv(|v| v as f64 / 255.0)),
        Err(_) => {
            let floats: Array4<f32> = read_npy(path).map_err(|e| Error::load(path, e.to_string()))?;
            Ok(floats.mapv(|v| (v as f64).clamp(0.0, 1.0)))
        }
    }
}

/// Writes `sets` as the splits of dataset `name` under `root`, quantizing
/// pixels to 8 bits. Returns the dataset directory.
pub fn write_dataset(root: &Path, name: &str, sets: &[&ImageSet]) -> Result<PathBuf> {
    let info = known_dataset(name).ok_or_else(|| Error::config(format!("unknown dataset `{name}`")))?;
    let first = sets
        .first()
        .ok_or_else(|| Error::precondition("write_dataset needs at least one split"))?;
    let shape = first.shape();
    let dir = dataset_dir(root, info);
    fs::create_dir_all(&dir)?;
    let mut splits = BTreeMap::new();
    for set in sets {
        if set.shape() != shape {
            return Err(Error::precondition("all splits must share one image shape"));
        }
        let images_file = format!("{}_images.npy", set.split);
        let bytes = set.images.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        let path = dir.join(&images_file);
        write_npy(&path, &bytes).map_err(|e| Error::load(&path, e.to_string()))?;
        let labels_file = match &set.labels {
            Some(labels) => {
                let file = format!("{}_labels.npy", set.split);
                let arr = Array1::from_iter(labels.iter().map(|&l| l as i64));
                let path = dir.join(&file);
                write_npy(&path, &arr).map_err(|e| Error::load(&path, e.to_string()))?;
                Some(file)
            }
            None => None,
        };
        splits.insert(
            set.split,
            SplitEntry {
                count: set.len(),
                images: images_file,
                labels: labels_file,
            },
        );
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        name: info.name.to_string(),
        image_shape: shape,
        num_classes: sets.iter().find_map(|s| s.num_classes),
        splits,
    };
    atomic_write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_set(n: usize, split: Split) -> ImageSet {
        let images = Array4::from_shape_fn((n, 28, 28, 1), |(i, y, x, _)| ((i * 3 + y + x) % 11) as f64 / 10.0);
        let labels = (split != Split::Unlabeled).then(|| (0..n).map(|i| i % 10).collect());
        ImageSet::new("SynthDigits", split, images, labels, Some(10)).unwrap()
    }

    #[test]
    fn registry_sizes() {
        assert_eq!(known_dataset("CIFAR10").unwrap().train, 50_000);
        assert_eq!(known_dataset("mnist").unwrap().test, 10_000);
        assert_eq!(known_dataset("GTSRB").unwrap().classes, 43);
        assert!(known_dataset("bogus").is_none());
    }

    #[test]
    fn grayscale_round_trip_expands_to_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let train = gray_set(12, Split::Train);
        let test = gray_set(5, Split::Test);
        write_dataset(dir.path(), "SynthDigits", &[&train, &test]).unwrap();
        let loaded = load_dataset("SynthDigits", Split::Test, dir.path()).unwrap();
        assert_eq!(loaded.len(), 5);
        assert_eq!(loaded.shape(), ImageShape::new(32, 32, 3));
        assert_eq!(loaded.labels.as_deref(), test.labels.as_deref());
        let raw = load_dataset_with("SynthDigits", Split::Train, dir.path(), ImageShape::new(28, 28, 1)).unwrap();
        let max_err = raw
            .images
            .iter()
            .zip(train.images.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn missing_directory_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset("STL10", Split::Unlabeled, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Load { .. }), "{err}");
    }

    #[test]
    fn unknown_name_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset("NotADataset", Split::Train, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn missing_split_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let train = gray_set(4, Split::Train);
        let path = write_dataset(dir.path(), "SynthDigits", &[&train]).unwrap();
        assert!(matches!(load_dataset("SynthDigits", Split::Test, dir.path()), Err(Error::Load { .. })));
        let manifest_path = path.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).unwrap().replace("\"count\": 4", "\"count\": 9");
        fs::write(&manifest_path, text).unwrap();
        assert!(matches!(load_dataset("SynthDigits", Split::Train, dir.path()), Err(Error::Load { .. })));
    }
}
