//! Versioned checkpoint container.
//!
//! ```text
//! magic "ENCSTEAL" | u32 version | u64 meta_len | meta (JSON)
//!   | u64 weight_count | weight_count × f64 | sha256 of everything before
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderParams, EncoderProvenance};
use crate::dataio::ImageShape;
use crate::nn::Layer;
use crate::util::atomic_write;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ENCSTEAL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch_id: String,
    pub feature_dim: usize,
    pub input_shape: ImageShape,
    pub init_seed: u64,
    pub provenance: EncoderProvenance,
    pub config_digest: Option<String>,
    pub param_count: usize,
    /// `(inputs, outputs)` of the final dense layer.
    pub head: (usize, usize),
}

fn head_of(params: &EncoderParams) -> (usize, usize) {
    match params.network().layers().last() {
        Some(Layer::Dense { cin, cout }) => (*cin, *cout),
        _ => (0, params.feature_dim),
    }
}

pub fn to_bytes(params: &EncoderParams) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        arch_id: params.arch_id.clone(),
        feature_dim: params.feature_dim,
        input_shape: params.input_shape,
        init_seed: params.init_seed,
        provenance: params.provenance,
        config_digest: params.config_digest.clone(),
        param_count: params.weights.len(),
        head: head_of(params),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(60 + meta_bytes.len() + 8 * params.weights.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(params.weights.len() as u64).to_le_bytes());
    for w in &params.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    atomic_write(path, &to_bytes(params)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::load(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<EncoderParams> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::load(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::load(
            path,
            format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let meta_len = r.u64()? as usize;
    let meta_bytes = r.take(meta_len)?;
    let count = r.u64()? as usize;
    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::load(path, "weight count overflow"))?)?;
    let body_end = r.pos;
    let stored = r.take(32)?;
    if r.pos != bytes.len() {
        return Err(Error::load(path, "trailing bytes after checksum"));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != stored {
        return Err(Error::load(path, "checksum mismatch (corrupted checkpoint)"));
    }
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| Error::load(path, format!("bad metadata: {e}")))?;
    if meta.format_version != version {
        return Err(Error::load(path, "metadata version disagrees with container"));
    }
    if meta.param_count != count {
        return Err(Error::load(
            path,
            format!("metadata lists {} weights, container holds {count}", meta.param_count),
        ));
    }
    if meta.head.1 != meta.feature_dim {
        return Err(Error::load(
            path,
            format!("feature_dim {} does not match stored head width {}", meta.feature_dim, meta.head.1),
        ));
    }
    let weights: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = EncoderParams::from_parts(
        &meta.arch_id,
        meta.feature_dim,
        meta.input_shape,
        meta.init_seed,
        meta.provenance,
        weights,
    )
    .map_err(|e| Error::load(path, e.to_string()))?;
    if head_of(&params) != meta.head {
        return Err(Error::load(path, "stored head shape does not match architecture"));
    }
    params.config_digest = meta.config_digest;
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> EncoderParams {
        let mut e = init_encoder("small-conv", 64, ImageShape::default(), 3, EncoderProvenance::Stolen).unwrap();
        e.config_digest = Some("abc".into());
        e
    }

    #[test]
    fn round_trip_preserves_outputs_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let enc = encoder();
        save_checkpoint(&enc, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, enc);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array4::from_shape_fn((3, 32, 32, 3), |_| rng.gen::<f64>());
        assert_eq!(enc.encode(x.view()).unwrap(), back.encode(x.view()).unwrap());
    }

    #[test]
    fn truncated_file_is_load_error() {
        let bytes = to_bytes(&encoder()).unwrap();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = from_bytes(&bytes[..cut], Path::new("t")).unwrap_err();
            assert!(matches!(err, Error::Load { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn flipped_bit_detected() {
        let mut bytes = to_bytes(&encoder()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(from_bytes(&bytes, Path::new("t")), Err(Error::Load { .. })));
    }

    #[test]
    fn version_mismatch_is_load_error() {
        let mut bytes = to_bytes(&encoder()).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = from_bytes(&bytes, Path::new("t")).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    /// Re-seals a container after editing its metadata.
    fn reseal(enc: &EncoderParams, edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
        let bytes = to_bytes(enc).unwrap();
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut meta: serde_json::Value = serde_json::from_slice(&bytes[20..20 + meta_len]).unwrap();
        edit(&mut meta);
        let meta_bytes = serde_json::to_vec(&meta).unwrap();
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta_bytes);
        out.extend_from_slice(&bytes[20 + meta_len..bytes.len() - 32]);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    #[test]
    fn feature_dim_disagreeing_with_head_is_load_error() {
        let enc = encoder();
        let bytes = reseal(&enc, |m| m["feature_dim"] = serde_json::json!(128));
        let err = from_bytes(&bytes, Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Load { .. }), "{err}");
        assert!(err.to_string().contains("head"), "{err}");
    }
}
