//! Content-addressed stage cache under `<output_dir>/cache`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use ndarray_npy::{read_npy, write_npy};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::encoder::{load_checkpoint, save_checkpoint, EncoderParams};
use crate::util::{atomic_write, sha256_hex};
use crate::{Error, Result};

/// Key for a stage from its config digest and upstream artifact digests.
pub fn stage_key(stage: &str, parts: &[&str]) -> String {
    let mut text = String::from(stage);
    for p in parts {
        text.push('\n');
        text.push_str(p);
    }
    sha256_hex(text.as_bytes())
}

#[derive(Clone, Debug)]
pub struct ArtifactCache {
    dir: PathBuf,
}

impl ArtifactCache {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ArtifactCache { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, kind: &str, key: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{kind}-{}.{ext}", &key[..key.len().min(24)]))
    }

    pub fn load_encoder(&self, kind: &str, key: &str) -> Result<Option<EncoderParams>> {
        let path = self.path(kind, key, "ckpt");
        if !path.exists() {
            return Ok(None);
        }
        load_checkpoint(&path).map(Some)
    }

    pub fn store_encoder(&self, kind: &str, key: &str, params: &EncoderParams) -> Result<PathBuf> {
        let path = self.path(kind, key, "ckpt");
        save_checkpoint(params, &path)?;
        Ok(path)
    }

    pub fn load_json<T: DeserializeOwned>(&self, kind: &str, key: &str) -> Result<Option<T>> {
        let path = self.path(kind, key, "json");
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::load(&path, e.to_string()))
    }

    pub fn store_json<T: Serialize>(&self, kind: &str, key: &str, value: &T) -> Result<()> {
        atomic_write(&self.path(kind, key, "json"), serde_json::to_string_pretty(value)?.as_bytes())
    }

    pub fn load_matrix(&self, kind: &str, key: &str) -> Result<Option<Array2<f64>>> {
        let path = self.path(kind, key, "npy");
        if !path.exists() {
            return Ok(None);
        }
        read_npy(&path).map(Some).map_err(|e| Error::load(&path, e.to_string()))
    }

    pub fn store_matrix(&self, kind: &str, key: &str, m: &Array2<f64>) -> Result<()> {
        let path = self.path(kind, key, "npy");
        let tmp = path.with_extension("npy.tmp");
        write_npy(&tmp, m).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }
}
