//! Image encoders: parameters, forward evaluation and persistence.

pub mod checkpoint;
pub mod registry;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};

use std::fmt;

use ndarray::{s, Array2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::ImageShape;
use crate::nn::{Act, Network};
use crate::rng::{stream_rng, Stream};
use crate::util::digest_f64;
use crate::{Error, Result};

/// Rows per forward call when encoding large batches.
pub const ENCODE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderProvenance {
    PretrainedTarget,
    Stolen,
    DefenderSurrogate,
    LocalBaseline,
}

impl fmt::Display for EncoderProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderProvenance::PretrainedTarget => "pretrained-target",
            EncoderProvenance::Stolen => "stolen",
            EncoderProvenance::DefenderSurrogate => "defender-surrogate",
            EncoderProvenance::LocalBaseline => "local-baseline",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureOrigin {
    Direct,
    Eaas,
}

/// Feature vectors, one row per input image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub vectors: Array2<f64>,
    pub source: FeatureOrigin,
    pub defense_applied: Option<String>,
}

impl FeatureBatch {
    pub fn new(vectors: Array2<f64>, source: FeatureOrigin, defense_applied: Option<String>) -> Result<Self> {
        if let Some((i, _)) = vectors.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Invariant(format!(
                "non-finite feature at row {}",
                i / vectors.ncols().max(1)
            )));
        }
        Ok(FeatureBatch {
            vectors,
            source,
            defense_applied,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Anything that maps a batch of images to feature vectors.
pub trait FeatureExtractor {
    fn extract(&self, images: ArrayView4<'_, f64>) -> Result<FeatureBatch>;

    fn feature_dim(&self) -> Option<usize> {
        None
    }
}

/// A parameterized image → feature-vector map.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub arch_id: String,
    pub feature_dim: usize,
    pub input_shape: ImageShape,
    pub init_seed: u64,
    pub provenance: EncoderProvenance,
    /// Digest of the training configuration that produced the weights.
    pub config_digest: Option<String>,
    pub weights: Vec<f64>,
    network: Network,
}

/// Random initialization; identical arguments give identical weights.
pub fn init_encoder(
    arch_id: &str,
    feature_dim: usize,
    input_shape: ImageShape,
    seed: u64,
    provenance: EncoderProvenance,
) -> Result<EncoderParams> {
    let network = registry::build(arch_id, feature_dim, input_shape)?;
    let mut rng = stream_rng(seed, Stream::Init, &[]);
    let weights = network.init_params(&mut rng);
    Ok(EncoderParams {
        arch_id: arch_id.to_string(),
        feature_dim,
        input_shape,
        init_seed: seed,
        provenance,
        config_digest: None,
        weights,
        network,
    })
}

impl EncoderParams {
    /// Reassembles an encoder from stored metadata and weights.
    pub fn from_parts(
        arch_id: &str,
        feature_dim: usize,
        input_shape: ImageShape,
        init_seed: u64,
        provenance: EncoderProvenance,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let network = registry::build(arch_id, feature_dim, input_shape)?;
        if network.param_count() != weights.len() {
            return Err(Error::Invariant(format!(
                "{arch_id} with feature_dim {feature_dim} needs {} weights, got {}",
                network.param_count(),
                weights.len()
            )));
        }
        Ok(EncoderParams {
            arch_id: arch_id.to_string(),
            feature_dim,
            input_shape,
            init_seed,
            provenance,
            config_digest: None,
            weights,
            network,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    /// Digest of the exact weight bits.
    pub fn checksum(&self) -> String {
        digest_f64(&self.weights)
    }

    pub fn same_architecture(&self, other: &EncoderParams) -> bool {
        self.arch_id == other.arch_id
            && self.feature_dim == other.feature_dim
            && self.input_shape == other.input_shape
            && self.weights.len() == other.weights.len()
    }

    pub fn check_batch(&self, images: &ArrayView4<'_, f64>) -> Result<()> {
        let (_, h, w, c) = images.dim();
        if ImageShape::new(h, w, c) != self.input_shape {
            return Err(Error::precondition(format!(
                "batch images are {h}x{w}x{c}, encoder expects {}",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Forward pass with explicit weights, chunked; no shape checks.
    pub fn forward_with(&self, weights: &[f64], images: ArrayView4<'_, f64>) -> Array2<f64> {
        let n = images.len_of(Axis(0));
        let mut out = Array2::<f64>::zeros((n, self.feature_dim));
        let mut start = 0;
        while start < n {
            let end = (start + ENCODE_CHUNK).min(n);
            let rows = self
                .network
                .forward(weights, Act::from_images(images.slice(s![start..end, .., .., ..])));
            out.slice_mut(s![start..end, ..]).assign(&rows);
            start = end;
        }
        out
    }

    /// Evaluates the encoder on a batch (evaluation mode).
    pub fn encode(&self, images: ArrayView4<'_, f64>) -> Result<FeatureBatch> {
        self.check_batch(&images)?;
        let out = self.forward_with(&self.weights, images);
        FeatureBatch::new(out, FeatureOrigin::Direct, None)
    }
}

impl FeatureExtractor for EncoderParams {
    fn extract(&self, images: ArrayView4<'_, f64>) -> Result<FeatureBatch> {
        self.encode(images)
    }

    fn feature_dim(&self) -> Option<usize> {
        Some(self.feature_dim)
    }
}

/// Free-function form of [`EncoderParams::encode`].
pub fn encode(params: &EncoderParams, images: ArrayView4<'_, f64>) -> Result<FeatureBatch> {
    params.encode(images)
}
