//! Downstream classifiers on frozen encoder features, and the TA/SA report.

pub mod report;

pub use report::{ratio_percent, EvalReport, SweepPoint, TaskResult, REPORT_SCHEMA_VERSION};

use std::path::Path;

use log::debug;
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::ImageSet;
use crate::encoder::{FeatureBatch, FeatureExtractor};
use crate::nn::{Act, Layer, Network, OptimizerKind};
use crate::rng::{permutation, stream_rng, Stream};
use crate::util::{atomic_write, digest_of, epoch_batches};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for ClassifierConfig {
    /// The reduced 100-epoch schedule.
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![512, 256],
            lr: 1e-4,
            batch_size: 256,
            epochs: 100,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl ClassifierConfig {
    /// The full 500-epoch schedule.
    pub fn reference() -> Self {
        ClassifierConfig {
            epochs: 500,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::config("classifier widths and batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("classifier lr must be positive"));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }
}

/// Fully connected ReLU network ending in class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub network: Network,
    pub weights: Vec<f64>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ClassifierParams {
    pub fn init(feature_dim: usize, num_classes: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::config("classifier needs positive feature and class counts"));
        }
        let mut layers = Vec::new();
        let mut width = feature_dim;
        for &h in hidden {
            layers.push(Layer::Dense { cin: width, cout: h });
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Dense {
            cin: width,
            cout: num_classes,
        });
        let network = Network::new(layers, (1, 1, feature_dim)).expect("dense stack always fits");
        let weights = network.init_params(&mut stream_rng(seed, Stream::Classifier, &[]));
        Ok(ClassifierParams {
            network,
            weights,
            feature_dim,
            num_classes,
        })
    }

    fn check(&self, features: &ArrayView2<'_, f64>) -> Result<()> {
        if features.ncols() != self.feature_dim {
            return Err(Error::precondition(format!(
                "classifier expects {} features, got {}",
                self.feature_dim,
                features.ncols()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(&features)?;
        Ok(self.network.forward(&self.weights, Act::from_rows(features.to_owned())))
    }

    pub fn probabilities(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut l = self.logits(features)?;
        for mut row in l.rows_mut() {
            let (_, p) = softmax_row(row.view());
            row.assign(&p);
        }
        Ok(l)
    }

    /// Argmax of the outputs; ties go to the lower class id.
    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(self.logits(features)?.rows().into_iter().map(|r| argmax(r.iter().copied())).collect())
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn softmax_row(row: ndarray::ArrayView1<'_, f64>) -> (f64, ndarray::Array1<f64>) {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = row.mapv(|v| (v - max).exp());
    let s = e.sum();
    (max + s.ln(), e / s)
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub params: ClassifierParams,
    /// Accuracy on the training minibatches seen in each epoch.
    pub train_accuracy: Vec<f64>,
}

impl TrainedClassifier {
    pub fn write_curve(&self, path: &Path) -> Result<()> {
        let mut csv = String::from("epoch,train_accuracy\n");
        for (e, a) in self.train_accuracy.iter().enumerate() {
            csv.push_str(&format!("{},{a}\n", e + 1));
        }
        atomic_write(path, csv.as_bytes())
    }
}

/// One feature row per image, in order.
pub fn extract_features(source: &dyn FeatureExtractor, dataset: &ImageSet) -> Result<FeatureBatch> {
    if dataset.is_empty() {
        return Err(Error::precondition(format!("dataset `{}` is empty", dataset.name)));
    }
    source.extract(dataset.images.view())
}

/// Cross-entropy training with the configured optimizer.
pub fn train_classifier(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    num_classes: usize,
    cfg: &ClassifierConfig,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if features.nrows() != labels.len() {
        return Err(Error::precondition(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::precondition(format!("label {bad} outside {num_classes} classes")));
    }
    let mut present = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::precondition("training labels contain fewer than two classes"));
    }
    let mut params = ClassifierParams::init(features.ncols(), num_classes, &cfg.hidden, cfg.seed)?;
    let mut opt = cfg.optimizer.build(cfg.lr, params.weights.len());
    let mut grads = vec![0.0; params.weights.len()];
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = permutation(labels.len(), cfg.seed, &[0xc1, epoch as u64]);
        let mut correct = 0usize;
        for batch in epoch_batches(&order, cfg.batch_size) {
            let x = features.select(Axis(0), batch);
            let (logits, tape) = params.network.forward_train(&params.weights, Act::from_rows(x));
            let mut g = Array2::<f64>::zeros(logits.raw_dim());
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in batch.iter().enumerate() {
                let row = logits.row(r);
                if argmax(row.iter().copied()) == labels[i] {
                    correct += 1;
                }
                let (_, p) = softmax_row(row);
                let mut gr = g.row_mut(r);
                gr.assign(&(p * scale));
                gr[labels[i]] -= scale;
            }
            grads.fill(0.0);
            params.network.backward(&params.weights, tape, g, &mut grads, false);
            opt.step(&mut params.weights, &grads);
        }
        let acc = correct as f64 / labels.len() as f64;
        debug!("classifier epoch {} train accuracy {acc:.4}", epoch + 1);
        curve.push(acc);
    }
    if params.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            detail: "classifier weights became non-finite".into(),
        });
    }
    Ok(TrainedClassifier {
        params,
        train_accuracy: curve,
    })
}

/// Fraction of rows whose prediction equals the label.
pub fn accuracy(classifier: &ClassifierParams, features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    if features.nrows() != labels.len() {
        return Err(Error::precondition("feature rows and labels differ in length"));
    }
    if labels.is_empty() {
        return Err(Error::precondition("cannot score an empty test set"));
    }
    let pred = classifier.predict(features)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy of `classifier ∘ source` on a labeled test set.
pub fn evaluate(classifier: &ClassifierParams, source: &dyn FeatureExtractor, test_set: &ImageSet) -> Result<f64> {
    let labels = test_set
        .labels
        .as_ref()
        .ok_or_else(|| Error::precondition(format!("test set `{}` has no labels", test_set.name)))?;
    let f = extract_features(source, test_set)?;
    accuracy(classifier, f.vectors.view(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{ImageShape, Split};
    use crate::eaas::EaasService;
    use crate::encoder::{init_encoder, EncoderProvenance};
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn separable(n: usize) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 6), |(i, j)| {
            let sign = if labels[i] == 0 { -1.0 } else { 1.0 };
            if j == 0 {
                sign * (1.0 + rng.gen::<f64>())
            } else {
                rng.gen_range(-1.0..1.0)
            }
        });
        (x, labels)
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let (x, y) = separable(200);
        let cfg = ClassifierConfig {
            epochs: 50,
            batch_size: 32,
            ..Default::default()
        };
        let t = train_classifier(x.view(), &y, 2, &cfg).unwrap();
        assert_eq!(accuracy(&t.params, x.view(), &y).unwrap(), 1.0);
        assert_eq!(t.train_accuracy.len(), 50);
    }

    #[test]
    fn deterministic_and_zero_epoch() {
        let (x, y) = separable(64);
        let cfg = ClassifierConfig {
            epochs: 3,
            ..Default::default()
        };
        let a = train_classifier(x.view(), &y, 2, &cfg).unwrap();
        let b = train_classifier(x.view(), &y, 2, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        let zero = ClassifierConfig { epochs: 0, ..cfg };
        let z = train_classifier(x.view(), &y, 2, &zero).unwrap();
        assert_eq!(z.params, ClassifierParams::init(6, 2, &[512, 256], 0).unwrap());
    }

    #[test]
    fn single_class_rejected() {
        let (x, _) = separable(10);
        let y = vec![1; 10];
        assert!(matches!(train_classifier(x.view(), &y, 2, &ClassifierConfig::default()), Err(Error::Precondition(_))));
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let mut clf = ClassifierParams::init(4, 10, &[], 0).unwrap();
        clf.weights.iter_mut().for_each(|w| *w = 0.0);
        let bias_start = 4 * 10;
        clf.weights[bias_start] = 1.0;
        let x = Array2::<f64>::ones((100, 4));
        let y: Vec<usize> = (0..100).map(|i| i % 10).collect();
        assert_eq!(accuracy(&clf, x.view(), &y).unwrap(), 0.1);
    }

    #[test]
    fn accuracy_equals_recount() {
        let (x, y) = separable(90);
        let clf = ClassifierParams::init(6, 3, &[8], 4).unwrap();
        let labels: Vec<usize> = y.iter().enumerate().map(|(i, l)| (l + i) % 3).collect();
        let logits = clf.logits(x.view()).unwrap();
        let mut hits = 0;
        for i in 0..90 {
            let row = logits.row(i);
            let mut best = 0;
            for c in 1..3 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == labels[i] {
                hits += 1;
            }
        }
        assert_eq!(accuracy(&clf, x.view(), &labels).unwrap(), hits as f64 / 90.0);
    }

    #[test]
    fn memorizes_its_training_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((40, 10), |_| rng.gen_range(-1.0..1.0));
        let y: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let cfg = ClassifierConfig {
            epochs: 300,
            lr: 3e-3,
            batch_size: 40,
            hidden: vec![64],
            ..Default::default()
        };
        let t = train_classifier(x.view(), &y, 4, &cfg).unwrap();
        assert_eq!(accuracy(&t.params, x.view(), &y).unwrap(), 1.0);
    }

    #[test]
    fn extraction_direct_and_via_service() {
        let shape = ImageShape::new(4, 4, 3);
        let enc = init_encoder("mlp", 5, shape, 0, EncoderProvenance::PretrainedTarget).unwrap();
        let svc = Arc::new(EaasService::undefended(enc.clone()));
        svc.open_account("u", None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imgs = Array4::from_shape_fn((7, 4, 4, 3), |_| rng.gen::<f64>());
        let set = ImageSet::new("t", Split::Test, imgs, Some(vec![0, 1, 0, 1, 0, 1, 0]), Some(2)).unwrap();
        let direct = extract_features(&enc, &set).unwrap();
        assert_eq!(direct.len(), 7);
        let api = svc.client("u");
        let via = extract_features(&api, &set).unwrap();
        assert_eq!(svc.ledger_report("u").unwrap().query_count, 7);
        assert_eq!(direct.vectors, via.vectors);
        let clf = ClassifierParams::init(5, 2, &[4], 0).unwrap();
        let unlabeled = ImageSet::new("u", Split::Unlabeled, set.images.clone(), None, None).unwrap();
        assert!(matches!(evaluate(&clf, &enc, &unlabeled), Err(Error::Precondition(_))));
        assert!(extract_features(&enc, &set.subset(&[]).unwrap()).is_err());
    }
}
