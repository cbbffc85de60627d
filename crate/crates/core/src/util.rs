use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Result;

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content digest of a value's canonical JSON serialization.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&bytes)
}

/// Digest of a float slice by its exact bit patterns.
pub fn digest_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Splits `order` into `⌊len/batch⌋` minibatches, folding the remainder into
/// the last one, so every element is visited exactly once. A set smaller than
/// `batch` yields a single short batch.
pub fn epoch_batches(order: &[usize], batch: usize) -> Vec<&[usize]> {
    assert!(batch > 0, "batch size must be positive");
    let n = order.len();
    if n == 0 {
        return Vec::new();
    }
    let steps = (n / batch).max(1);
    (0..steps)
        .map(|s| {
            let end = if s + 1 == steps { n } else { (s + 1) * batch };
            &order[s * batch..end]
        })
        .collect()
}

#[cfg(test)]
mod batch_tests {
    use super::epoch_batches;

    #[test]
    fn remainder_folds_into_last_batch() {
        let order: Vec<usize> = (0..10).collect();
        let b = epoch_batches(&order, 3);
        assert_eq!(b.len(), 3);
        assert_eq!(b[2], &[6, 7, 8, 9]);
        assert_eq!(epoch_batches(&order[..2], 3), vec![&[0usize, 1][..]]);
        assert!(epoch_batches(&[], 3).is_empty());
    }
}
