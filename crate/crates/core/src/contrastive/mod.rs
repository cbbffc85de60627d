//! Contrastive pre-training of target encoders (SimCLR and MoCo).

pub mod loss;

pub use loss::{moco_loss, moco_loss_grad, simclr_loss, simclr_loss_grad, two_view_pairing};

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info};
use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::{augment_batch, gather, AugmentationSpec, ImageSet};
use crate::encoder::{init_encoder, EncoderParams, EncoderProvenance};
use crate::nn::OptimizerKind;
use crate::nn::{Act, Layer, Network};
use crate::rng::{permutation, stream_rng, Stream};
use crate::util::{atomic_write, digest_of, epoch_batches};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Simclr,
    Moco,
}

impl Algo {
    pub fn default_temperature(self) -> f64 {
        match self {
            Algo::Simclr => 0.5,
            Algo::Moco => 0.07,
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Simclr => "simclr",
            Algo::Moco => "moco",
        })
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simclr" => Ok(Algo::Simclr),
            "moco" => Ok(Algo::Moco),
            other => Err(Error::config(format!("unknown contrastive algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub algo: Algo,
    pub arch: String,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Defaults to 0.5 for SimCLR and 0.07 for MoCo.
    pub temperature: Option<f64>,
    pub augmentation: AugmentationSpec,
    pub seed: u64,
    pub momentum: f64,
    pub queue_size: usize,
    pub proj_dim: usize,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            algo: Algo::Simclr,
            arch: "small-conv".into(),
            feature_dim: 512,
            epochs: 200,
            batch_size: 128,
            lr: 1e-3,
            temperature: None,
            augmentation: AugmentationSpec::pretraining(),
            seed: 0,
            momentum: 0.999,
            queue_size: 4096,
            proj_dim: 128,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl PretrainConfig {
    /// The full-length schedule: 1,000 epochs at batch 256.
    pub fn reference() -> Self {
        PretrainConfig {
            epochs: 1000,
            batch_size: 256,
            ..Default::default()
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature.unwrap_or_else(|| self.algo.default_temperature())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("pretrain batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("pretrain lr must be positive"));
        }
        if !(self.temperature() > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1]"));
        }
        if self.algo == Algo::Moco && self.queue_size == 0 {
            return Err(Error::config("MoCo queue_size must be positive"));
        }
        if self.proj_dim == 0 {
            return Err(Error::config("proj_dim must be positive"));
        }
        self.augmentation.validate()
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }
}

/// One-hidden-layer perceptron used only while pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub network: Network,
    pub weights: Vec<f64>,
}

impl ProjectionHead {
    pub fn new(feature_dim: usize, proj_dim: usize, seed: u64) -> Self {
        let layers = vec![
            Layer::Dense {
                cin: feature_dim,
                cout: feature_dim,
            },
            Layer::Relu,
            Layer::Dense {
                cin: feature_dim,
                cout: proj_dim,
            },
        ];
        let network = Network::new(layers, (1, 1, feature_dim)).expect("dense head always fits");
        let weights = network.init_params(&mut stream_rng(seed, Stream::Init, &[1]));
        ProjectionHead { network, weights }
    }

    pub fn project(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        self.network.forward(&self.weights, Act::from_rows(features.to_owned()))
    }
}

/// Bounded FIFO of key vectors; the oldest rows are evicted first.
#[derive(Clone, Debug)]
pub struct KeyQueue {
    capacity: usize,
    dim: usize,
    rows: VecDeque<Vec<f64>>,
}

impl KeyQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        KeyQueue {
            capacity,
            dim,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn enqueue(&mut self, keys: ArrayView2<'_, f64>) -> Result<()> {
        if keys.ncols() != self.dim {
            return Err(Error::precondition(format!(
                "key width {} differs from queue width {}",
                keys.ncols(),
                self.dim
            )));
        }
        for row in keys.rows() {
            self.rows.push_back(row.to_vec());
            if self.rows.len() > self.capacity {
                self.rows.pop_front();
            }
        }
        Ok(())
    }

    /// Oldest row first.
    pub fn to_matrix(&self) -> Array2<f64> {
        let flat: Vec<f64> = self.rows.iter().flatten().copied().collect();
        Array2::from_shape_vec((self.rows.len(), self.dim), flat).expect("queue rows share a width")
    }
}

/// Momentum encoder plus dictionary.
#[derive(Clone, Debug)]
pub struct MoCoState {
    pub momentum_encoder: EncoderParams,
    pub dictionary: KeyQueue,
    pub momentum: f64,
    pub temperature: f64,
}

impl MoCoState {
    pub fn new(query: &EncoderParams, capacity: usize, momentum: f64, temperature: f64) -> Self {
        MoCoState {
            momentum_encoder: query.clone(),
            dictionary: KeyQueue::new(capacity, query.feature_dim),
            momentum,
            temperature,
        }
    }
}

/// `m·momentum + (1 − m)·query`, elementwise.
pub fn momentum_update(query: &EncoderParams, momentum: &EncoderParams, m: f64) -> Result<EncoderParams> {
    if !query.same_architecture(momentum) {
        return Err(Error::precondition(format!(
            "momentum encoder `{}` does not match query encoder `{}`",
            momentum.arch_id, query.arch_id
        )));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::precondition(format!("momentum coefficient {m} outside [0, 1]")));
    }
    let mut out = momentum.clone();
    for (o, &q) in out.weights.iter_mut().zip(&query.weights) {
        *o = m * *o + (1.0 - m) * q;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: EncoderParams,
    /// Mean per-view loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl PretrainOutcome {
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut csv = String::from("epoch,loss\n");
        for (e, l) in self.epoch_losses.iter().enumerate() {
            csv.push_str(&format!("{},{l}\n", e + 1));
        }
        atomic_write(path, csv.as_bytes())
    }
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            detail: format!("loss became {loss}"),
        })
    }
}

/// Pre-trains an encoder on `dataset`.
///
/// Provenance is `pretrained-target`; pass the result through
/// [`pretrain_as`] to label a local baseline instead.
pub fn pretrain(dataset: &ImageSet, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    pretrain_as(dataset, cfg, EncoderProvenance::PretrainedTarget)
}

pub fn pretrain_as(dataset: &ImageSet, cfg: &PretrainConfig, provenance: EncoderProvenance) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::precondition("cannot pre-train on an empty dataset"));
    }
    let mut encoder = init_encoder(&cfg.arch, cfg.feature_dim, dataset.shape(), cfg.seed, provenance)?;
    encoder.config_digest = Some(cfg.digest());
    info!(
        "pre-training {} ({} params) with {} on {} images for {} epochs",
        cfg.arch,
        encoder.param_count(),
        cfg.algo,
        dataset.len(),
        cfg.epochs
    );
    let epoch_losses = match cfg.algo {
        Algo::Simclr => train_simclr(&mut encoder, dataset, cfg)?,
        Algo::Moco => train_moco(&mut encoder, dataset, cfg)?,
    };
    Ok(PretrainOutcome { encoder, epoch_losses })
}

fn train_simclr(encoder: &mut EncoderParams, data: &ImageSet, cfg: &PretrainConfig) -> Result<Vec<f64>> {
    let tau = cfg.temperature();
    let mut head = ProjectionHead::new(cfg.feature_dim, cfg.proj_dim, cfg.seed);
    let mut enc_opt = cfg.optimizer.build(cfg.lr, encoder.param_count());
    let mut head_opt = cfg.optimizer.build(cfg.lr, head.weights.len());
    let mut enc_grad = vec![0.0; encoder.param_count()];
    let mut head_grad = vec![0.0; head.weights.len()];
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = permutation(data.len(), cfg.seed, &[0x5c, epoch as u64]);
        let (mut total, mut views) = (0.0, 0usize);
        for batch in epoch_batches(&order, cfg.batch_size) {
            let n = batch.len();
            if n < 2 {
                continue;
            }
            let x = gather(&data.images, batch);
            let a = augment_batch(&x, batch, &cfg.augmentation, cfg.seed, epoch as u64, 0);
            let b = augment_batch(&x, batch, &cfg.augmentation, cfg.seed, epoch as u64, 1);
            let both = concatenate(Axis(0), &[a.view(), b.view()]).expect("views share a shape");
            let net = encoder.network().clone();
            let (h, enc_tape) = net.forward_train(&encoder.weights, Act::from_images(both.view()));
            let (z, head_tape) = head.network.forward_train(&head.weights, Act::from_rows(h));
            let (loss, gz) = simclr_loss_grad(z.view(), &two_view_pairing(n), tau)?;
            check_finite(loss, epoch + 1)?;
            let scale = 1.0 / (2 * n) as f64;
            enc_grad.fill(0.0);
            head_grad.fill(0.0);
            let gh = head
                .network
                .backward(&head.weights, head_tape, gz * scale, &mut head_grad, true)
                .expect("input gradient requested");
            net.backward(&encoder.weights, enc_tape, gh, &mut enc_grad, false);
            head_opt.step(&mut head.weights, &head_grad);
            enc_opt.step(&mut encoder.weights, &enc_grad);
            total += loss;
            views += 2 * n;
        }
        let mean = total / views.max(1) as f64;
        check_finite(mean, epoch + 1)?;
        debug!("simclr epoch {} loss {mean:.5}", epoch + 1);
        losses.push(mean);
    }
    Ok(losses)
}

fn train_moco(encoder: &mut EncoderParams, data: &ImageSet, cfg: &PretrainConfig) -> Result<Vec<f64>> {
    let mut state = MoCoState::new(encoder, cfg.queue_size, cfg.momentum, cfg.temperature());
    let mut opt = cfg.optimizer.build(cfg.lr, encoder.param_count());
    let mut grad = vec![0.0; encoder.param_count()];
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = permutation(data.len(), cfg.seed, &[0x3c, epoch as u64]);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in epoch_batches(&order, cfg.batch_size) {
            let x = gather(&data.images, batch);
            let a = augment_batch(&x, batch, &cfg.augmentation, cfg.seed, epoch as u64, 0);
            let b = augment_batch(&x, batch, &cfg.augmentation, cfg.seed, epoch as u64, 1);
            let keys = state.momentum_encoder.forward_with(&state.momentum_encoder.weights, b.view());
            state.dictionary.enqueue(keys.view())?;
            let dict = state.dictionary.to_matrix();
            let net = encoder.network().clone();
            let (q, tape) = net.forward_train(&encoder.weights, Act::from_images(a.view()));
            let (loss, gq) = moco_loss_grad(q.view(), keys.view(), dict.view(), state.temperature)?;
            check_finite(loss, epoch + 1)?;
            grad.fill(0.0);
            net.backward(&encoder.weights, tape, gq / batch.len() as f64, &mut grad, false);
            opt.step(&mut encoder.weights, &grad);
            state.momentum_encoder = momentum_update(encoder, &state.momentum_encoder, state.momentum)?;
            total += loss;
            count += batch.len();
        }
        let mean = total / count.max(1) as f64;
        check_finite(mean, epoch + 1)?;
        debug!("moco epoch {} loss {mean:.5}", epoch + 1);
        losses.push(mean);
    }
    Ok(losses)
}
