//! Encoder stealing: train a local copy from a service's feature vectors.
//!
//! The objective on a minibatch `B` is
//! `mean_B d(v(x), f_s(x)) + λ · mean_B d(t(x), f_s(A(x)))`, where `v(x)`
//! are cached service responses and `t(x)` is `v(x)` (default variant) or a
//! fresh service response for `A(x)` (query-augmentation variant).

pub mod metric;

pub use metric::{batch_distance_grad, distance_grad, feature_distance, Metric};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info, warn};
use ndarray::{concatenate, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::contrastive::{pretrain_as, PretrainConfig};
use crate::dataio::{augment_batch, gather, AugmentationSpec, ImageSet};
use crate::eaas::{EmbeddingApi, LedgerReport};
use crate::encoder::{init_encoder, EncoderParams, EncoderProvenance};
use crate::nn::{Act, OptimizerKind};
use crate::rng::permutation;
use crate::util::{atomic_write, digest_of, epoch_batches};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    StolenEncoder,
    /// Forces `λ = 0`.
    NoAug,
    /// Queries the service for every augmented view.
    QueryAug,
    /// Contrastive pre-training on the surrogate data; no queries.
    LocalPretrain,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::StolenEncoder, Variant::NoAug, Variant::QueryAug, Variant::LocalPretrain];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::StolenEncoder => "stolen_encoder",
            Variant::NoAug => "no_aug",
            Variant::QueryAug => "query_aug",
            Variant::LocalPretrain => "local_pretrain",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown attack variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub metric: Metric,
    pub augmentation: AugmentationSpec,
    pub stolen_arch: String,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Settings for the `local_pretrain` variant; its `arch` and `seed` are
    /// replaced by `stolen_arch` and `seed`.
    pub local_pretrain: PretrainConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            variant: Variant::StolenEncoder,
            lambda: 20.0,
            epochs: 100,
            lr: 1e-3,
            batch_size: 64,
            metric: Metric::L2,
            augmentation: AugmentationSpec::attack_default(),
            stolen_arch: "small-conv-wide".into(),
            seed: 0,
            optimizer: OptimizerKind::Adam,
            local_pretrain: PretrainConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::NoAug => 0.0,
            _ => self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("attack lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("attack batch_size must be positive"));
        }
        self.augmentation.validate()
    }

    /// Queries the run will issue against a surrogate of `n` images.
    pub fn expected_queries(&self, n: usize) -> u64 {
        let n = n as u64;
        match self.variant {
            Variant::LocalPretrain => 0,
            Variant::QueryAug if self.effective_lambda() > 0.0 => (self.epochs as u64 + 1) * n,
            _ => n,
        }
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }
}

/// Service responses for the surrogate images, indexed like the surrogate.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    vectors: Array2<f64>,
    pub defense_applied: Option<String>,
}

impl FeatureCache {
    /// One pass over `surrogate`.
    pub fn build(api: &dyn EmbeddingApi, surrogate: &ImageSet) -> Result<Self> {
        let batch = api.embed_all(surrogate.images.view())?;
        Ok(FeatureCache {
            vectors: batch.vectors,
            defense_applied: batch.defense_applied,
        })
    }

    pub fn from_vectors(vectors: Array2<f64>) -> Self {
        FeatureCache {
            vectors,
            defense_applied: None,
        }
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

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn rows(&self, indices: &[usize]) -> Result<Array2<f64>> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Invariant(format!("image {i} is not in the feature cache ({} entries)", self.len())));
        }
        Ok(self.vectors.select(Axis(0), indices))
    }
}

/// Targets for the augmented half of a minibatch.
pub struct AugmentedTerm<'a> {
    pub images: &'a Array4<f64>,
    pub targets: &'a Array2<f64>,
    pub lambda: f64,
}

/// `mean d(targets, f(x)) + λ·mean d(aug.targets, f(aug.images))` and,
/// when `grads` is given, its gradient w.r.t. `weights` (accumulated).
pub fn minibatch_objective(
    encoder: &EncoderParams,
    weights: &[f64],
    x: &Array4<f64>,
    targets: &Array2<f64>,
    aug: Option<AugmentedTerm<'_>>,
    metric: Metric,
    grads: Option<&mut [f64]>,
) -> Result<f64> {
    let n = x.len_of(Axis(0));
    if n == 0 {
        return Ok(0.0);
    }
    let (input, all_targets, lambda) = match &aug {
        Some(a) if a.lambda > 0.0 => (
            concatenate(Axis(0), &[x.view(), a.images.view()]).map_err(|e| Error::precondition(e.to_string()))?,
            concatenate(Axis(0), &[targets.view(), a.targets.view()]).map_err(|e| Error::precondition(e.to_string()))?,
            a.lambda,
        ),
        _ => (x.clone(), targets.clone(), 0.0),
    };
    let net = encoder.network();
    let weight_of = |r: usize| if r < n { 1.0 / n as f64 } else { lambda / n as f64 };
    match grads {
        None => {
            let out = encoder.forward_with(weights, input.view());
            let (d, _) = batch_distance_grad(metric, out.view(), all_targets.view())?;
            Ok(d.iter().enumerate().map(|(r, d)| weight_of(r) * d).sum())
        }
        Some(grads) => {
            let (out, tape) = net.forward_train(weights, Act::from_images(input.view()));
            let (d, mut g) = batch_distance_grad(metric, out.view(), all_targets.view())?;
            for (r, mut row) in g.rows_mut().into_iter().enumerate() {
                row *= weight_of(r);
            }
            net.backward(weights, tape, g, grads, false);
            Ok(d.iter().enumerate().map(|(r, d)| weight_of(r) * d).sum())
        }
    }
}

fn mean_distance(metric: Metric, pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.nrows() == 0 {
        return Ok(0.0);
    }
    let (d, _) = batch_distance_grad(metric, pred.view(), target.view())?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// `mean_B d(v(x), f_s(x))`.
pub fn loss_l1(cache: &FeatureCache, f_s: &EncoderParams, surrogate: &ImageSet, batch: &[usize], metric: Metric) -> Result<f64> {
    let v = cache.rows(batch)?;
    let x = gather(&surrogate.images, batch);
    mean_distance(metric, &v, &f_s.encode(x.view())?.vectors)
}

/// `mean_B d(v(x), f_s(A(x)))`; makes no queries.
pub fn loss_l2(
    cache: &FeatureCache,
    f_s: &EncoderParams,
    surrogate: &ImageSet,
    batch: &[usize],
    metric: Metric,
    aug: &AugmentationSpec,
    seed: u64,
    epoch: u64,
) -> Result<f64> {
    let v = cache.rows(batch)?;
    let a = augment_batch(&gather(&surrogate.images, batch), batch, aug, seed, epoch, 0);
    mean_distance(metric, &v, &f_s.encode(a.view())?.vectors)
}

/// `mean_B d(API(A(x)), f_s(A(x)))`; bills one query per image.
pub fn loss_l2_prime(
    api: &dyn EmbeddingApi,
    f_s: &EncoderParams,
    surrogate: &ImageSet,
    batch: &[usize],
    metric: Metric,
    aug: &AugmentationSpec,
    seed: u64,
    epoch: u64,
) -> Result<f64> {
    let a = augment_batch(&gather(&surrogate.images, batch), batch, aug, seed, epoch, 0);
    let t = api.embed_all(a.view())?.vectors;
    mean_distance(metric, &t, &f_s.encode(a.view())?.vectors)
}

/// `ℒ₁ + λ·ℒ₂` on a minibatch, with `λ` taken from the variant.
pub fn objective(
    cache: &FeatureCache,
    f_s: &EncoderParams,
    surrogate: &ImageSet,
    batch: &[usize],
    cfg: &AttackConfig,
    epoch: u64,
) -> Result<f64> {
    let lambda = cfg.effective_lambda();
    let l1 = loss_l1(cache, f_s, surrogate, batch, cfg.metric)?;
    if lambda == 0.0 {
        return Ok(l1);
    }
    Ok(l1 + lambda * loss_l2(cache, f_s, surrogate, batch, cfg.metric, &cfg.augmentation, cfg.seed, epoch)?)
}

#[derive(Debug)]
pub struct StealOutcome {
    pub encoder: EncoderParams,
    pub variant: Variant,
    /// Mean per-image objective of each completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Queries billed during this run.
    pub queries: u64,
    pub ledger: Option<LedgerReport>,
    pub completed_epochs: usize,
    /// Set when the run stopped early; the other fields are partial.
    pub abort: Option<Box<Error>>,
    pub config_digest: String,
}

impl StealOutcome {
    pub fn is_complete(&self) -> bool {
        self.abort.is_none()
    }

    pub fn ensure_complete(mut self) -> Result<Self> {
        match self.abort.take() {
            None => Ok(self),
            Some(e) => Err(Error::Partial {
                completed: self.completed_epochs,
                source: e,
            }),
        }
    }

    /// Writes `<stem>.loss.csv` and `<stem>.ledger.json` into `dir`.
    pub fn write_artifacts(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let mut csv = String::from("epoch,loss\n");
        for (e, l) in self.epoch_losses.iter().enumerate() {
            csv.push_str(&format!("{},{l}\n", e + 1));
        }
        let loss_path = dir.join(format!("{stem}.loss.csv"));
        atomic_write(&loss_path, csv.as_bytes())?;
        let ledger = serde_json::json!({
            "variant": self.variant,
            "queries": self.queries,
            "ledger": self.ledger,
            "completed_epochs": self.completed_epochs,
            "aborted": self.abort.as_ref().map(|e| e.to_string()),
            "config_digest": self.config_digest,
        });
        let ledger_path = dir.join(format!("{stem}.ledger.json"));
        atomic_write(&ledger_path, serde_json::to_string_pretty(&ledger)?.as_bytes())?;
        Ok(vec![loss_path, ledger_path])
    }
}

fn query_count(api: &dyn EmbeddingApi) -> Result<(u64, LedgerReport)> {
    let r = api.ledger()?;
    Ok((r.query_count, r))
}

/// Runs the attack against `api` with `surrogate` as the attacker's data.
pub fn steal(api: &dyn EmbeddingApi, surrogate: &ImageSet, cfg: &AttackConfig) -> Result<StealOutcome> {
    cfg.validate()?;
    if surrogate.len() < cfg.batch_size {
        return Err(Error::precondition(format!(
            "surrogate has {} images, fewer than the batch size {}",
            surrogate.len(),
            cfg.batch_size
        )));
    }
    let digest = cfg.digest();
    if cfg.variant == Variant::LocalPretrain {
        let pcfg = PretrainConfig {
            arch: cfg.stolen_arch.clone(),
            seed: cfg.seed,
            ..cfg.local_pretrain.clone()
        };
        let out = pretrain_as(surrogate, &pcfg, EncoderProvenance::LocalBaseline)?;
        return Ok(StealOutcome {
            completed_epochs: out.epoch_losses.len(),
            encoder: out.encoder,
            variant: cfg.variant,
            epoch_losses: out.epoch_losses,
            queries: 0,
            ledger: None,
            abort: None,
            config_digest: digest,
        });
    }

    let (before, _) = query_count(api)?;
    let cache = FeatureCache::build(api, surrogate)?;
    let mut encoder = init_encoder(
        &cfg.stolen_arch,
        cache.dim(),
        surrogate.shape(),
        cfg.seed,
        EncoderProvenance::Stolen,
    )?;
    encoder.config_digest = Some(digest.clone());
    info!(
        "stealing into {} ({} params), variant {}, {} surrogate images, {} epochs",
        cfg.stolen_arch,
        encoder.param_count(),
        cfg.variant,
        surrogate.len(),
        cfg.epochs
    );
    let lambda = cfg.effective_lambda();
    let mut opt = cfg.optimizer.build(cfg.lr, encoder.param_count());
    let mut grads = vec![0.0; encoder.param_count()];
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut abort = None;
    'epochs: for epoch in 0..cfg.epochs {
        let order = permutation(surrogate.len(), cfg.seed, &[0xa7, epoch as u64]);
        let mut total = 0.0;
        for batch in epoch_batches(&order, cfg.batch_size) {
            let x = gather(&surrogate.images, batch);
            let v = cache.rows(batch)?;
            let (a, t) = if lambda > 0.0 {
                let a = augment_batch(&x, batch, &cfg.augmentation, cfg.seed, epoch as u64, 0);
                let t = if cfg.variant == Variant::QueryAug {
                    match api.embed_all(a.view()) {
                        Ok(f) => f.vectors,
                        Err(e) => {
                            warn!("service query failed in epoch {}: {e}", epoch + 1);
                            abort = Some(Box::new(e));
                            break 'epochs;
                        }
                    }
                } else {
                    v.clone()
                };
                (Some(a), Some(t))
            } else {
                (None, None)
            };
            let aug = match (&a, &t) {
                (Some(images), Some(targets)) => Some(AugmentedTerm { images, targets, lambda }),
                _ => None,
            };
            grads.fill(0.0);
            let loss = minibatch_objective(&encoder, &encoder.weights, &x, &v, aug, cfg.metric, Some(&mut grads))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    detail: format!("stealing loss became {loss}"),
                });
            }
            opt.step(&mut encoder.weights, &grads);
            total += loss * batch.len() as f64;
        }
        let mean = total / surrogate.len() as f64;
        debug!("steal epoch {} loss {mean:.5}", epoch + 1);
        losses.push(mean);
    }
    let (after, ledger) = query_count(api)?;
    Ok(StealOutcome {
        encoder,
        variant: cfg.variant,
        completed_epochs: losses.len(),
        epoch_losses: losses,
        queries: after - before,
        ledger: Some(ledger),
        abort,
        config_digest: digest,
    })
}
