//! Manifest-driven experiment runs: pretrain, serve, steal every requested
//! variant, evaluate downstream, and write reports.
//!
//! Every stage is cached under `<output_dir>/cache` by a key built from its
//! config digest and the digests of its inputs, so reruns and sweeps that
//! share upstream stages skip straight to the first missing artifact.

pub mod cache;
pub mod manifest;
pub mod plot;

pub use cache::{stage_key, ArtifactCache};
pub use manifest::{
    DataConfig, ExperimentManifest, ServiceSection, SweepAxis, SweepConfig, SweepValue, DATA_ROOT_ENV,
};
pub use plot::{emit_plots, PlotKind, PlotOutput};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attack::{steal, AttackConfig, Variant};
use crate::contrastive::pretrain;
use crate::dataio::{known_dataset, resolve_dataset, sample_surrogate, ImageSet, Split};
use crate::defense::{build_defense, train_defender_surrogate};
use crate::downstream::{accuracy, extract_features, train_classifier, ClassifierConfig, EvalReport, SweepPoint, TaskResult};
use crate::eaas::{EaasService, LedgerReport, ServiceConfig};
use crate::encoder::{load_checkpoint, EncoderParams, FeatureExtractor};
use crate::util::{atomic_write, digest_of};
use crate::{Error, Result};

/// A downstream task: labeled train and test splits.
#[derive(Clone, Debug)]
pub struct Task {
    pub name: String,
    pub train: ImageSet,
    pub test: ImageSet,
}

/// Every dataset a manifest touches, resolved once.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub pretrain: ImageSet,
    /// The pool surrogate samples are drawn from.
    pub surrogate_pool: ImageSet,
    pub tasks: Vec<Task>,
}

impl Datasets {
    pub fn resolve(m: &ExperimentManifest) -> Result<Self> {
        let root = m.data.effective_root();
        let root = root.as_deref();
        let pretrain = resolve_dataset(&m.data.pretrain, Split::Train, root, m.data.pretrain_size, m.seed)?;
        let info = known_dataset(&m.data.surrogate).ok_or_else(|| Error::config("unknown surrogate dataset"))?;
        let split = if info.unlabeled > 0 { Split::Unlabeled } else { Split::Train };
        // Sweeps over the surrogate size draw from one pool large enough for
        // every point.
        let largest = m
            .points()?
            .iter()
            .map(|(_, p)| p.data.surrogate_size)
            .max()
            .unwrap_or(m.data.surrogate_size);
        let default_pool = match split {
            Split::Unlabeled => info.unlabeled,
            _ => info.train,
        };
        let surrogate_pool = resolve_dataset(&m.data.surrogate, split, root, Some(default_pool.max(largest)), m.seed)?;
        let tasks = m
            .data
            .downstream
            .iter()
            .map(|name| {
                Ok(Task {
                    name: name.clone(),
                    train: resolve_dataset(name, Split::Train, root, m.data.downstream_train, m.seed)?,
                    test: resolve_dataset(name, Split::Test, root, m.data.downstream_test, m.seed)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Datasets {
            pretrain,
            surrogate_pool,
            tasks,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub reports: Vec<EvalReport>,
    pub report_dir: PathBuf,
    /// One row per (report, task): the variant comparison table.
    pub comparison_csv: PathBuf,
    pub plots: Vec<PlotOutput>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FeatureMeta {
    queries: u64,
    defense_applied: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StealMeta {
    variant: Variant,
    queries: u64,
    epoch_losses: Vec<f64>,
    completed_epochs: usize,
    ledger: Option<LedgerReport>,
    config_digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EvalMeta {
    accuracy: f64,
    final_train_accuracy: Option<f64>,
}

/// Pipeline state shared by all points of one manifest.
struct Run<'a> {
    manifest: &'a ExperimentManifest,
    data: &'a Datasets,
    cache: ArtifactCache,
    out: PathBuf,
}

/// Runs the manifest end to end. Errors name the failing stage; artifacts of
/// completed stages stay on disk and are reused on the next run.
pub fn run_pipeline(m: &ExperimentManifest) -> Result<PipelineOutput> {
    m.validate()?;
    let data = Datasets::resolve(m).map_err(|e| e.in_stage("data"))?;
    run_pipeline_with(m, &data)
}

/// [`run_pipeline`] over already-resolved datasets.
pub fn run_pipeline_with(m: &ExperimentManifest, data: &Datasets) -> Result<PipelineOutput> {
    m.validate()?;
    let out = m.output_dir.clone();
    fs::create_dir_all(out.join("reports"))?;
    let run = Run {
        manifest: m,
        data,
        cache: ArtifactCache::open(&out.join("cache"))?,
        out: out.clone(),
    };
    atomic_write(&out.join("manifest.toml"), m.to_toml()?.as_bytes())?;
    atomic_write(&out.join("manifest.digest"), format!("{}\n", m.digest()).as_bytes())?;

    let target = run.target().map_err(|e| e.in_stage("pretrain"))?;
    let mut reports = Vec::new();
    for (point, pm) in m.points()? {
        let mut batch = run.point(&pm, point.as_ref(), &target)?;
        reports.append(&mut batch);
    }

    let report_dir = out.join("reports");
    let mut csv = String::from(EvalReport::csv_header());
    csv.push('\n');
    for r in &reports {
        r.write(&report_dir, &file_stem(&r.label))?;
        for row in r.csv_rows() {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    let comparison_csv = out.join("comparison.csv");
    atomic_write(&comparison_csv, csv.as_bytes())?;

    let mut plots = Vec::new();
    if let Some(sweep) = &m.sweep {
        if let Some(kind) = PlotKind::for_axis(sweep.axis) {
            plots.push(emit_plots(&reports, kind, &out, &format!("sweep-{}", sweep.axis)).map_err(|e| e.in_stage("plot"))?);
        }
    }
    Ok(PipelineOutput {
        reports,
        report_dir,
        comparison_csv,
        plots,
    })
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '=') { c } else { '_' })
        .collect()
}

impl Run<'_> {
    fn target(&self) -> Result<EncoderParams> {
        let m = self.manifest;
        if let Some(path) = &m.target_checkpoint {
            return load_checkpoint(path);
        }
        let key = stage_key("target", &[&m.pretrain.digest(), &self.data.pretrain.digest()]);
        if let Some(enc) = self.cache.load_encoder("target", &key)? {
            info!("target: cache hit {}", &key[..12]);
            return Ok(enc);
        }
        info!("pretraining target ({} epochs, {} images)", m.pretrain.epochs, self.data.pretrain.len());
        let outcome = pretrain(&self.data.pretrain, &m.pretrain)?;
        outcome.write_log(&self.out.join("target.loss.csv"))?;
        self.cache.store_encoder("target", &key, &outcome.encoder)?;
        Ok(outcome.encoder)
    }

    fn defender_surrogate(&self, pm: &ExperimentManifest, target: &EncoderParams) -> Result<EncoderParams> {
        let size = pm.data.surrogate_size.min(self.data.pretrain.len());
        let data = sample_surrogate(&self.data.pretrain, size, pm.seed ^ 0xdefe)?;
        let key = stage_key("defender", &[&target.checksum(), &pm.attack.digest(), &data.digest()]);
        if let Some(enc) = self.cache.load_encoder("defender", &key)? {
            return Ok(enc);
        }
        info!("training defender surrogate on {size} images");
        let enc = train_defender_surrogate(&data, target, &pm.attack)?;
        self.cache.store_encoder("defender", &key, &enc)?;
        Ok(enc)
    }

    /// Features from `source`, cached under `key`; also returns the number of
    /// queries the extraction billed when it first ran.
    fn features(&self, key: &str, source: &dyn FeatureExtractor, set: &ImageSet) -> Result<(Array2<f64>, FeatureMeta)> {
        if let (Some(m), Some(meta)) = (
            self.cache.load_matrix("features", key)?,
            self.cache.load_json::<FeatureMeta>("features", key)?,
        ) {
            return Ok((m, meta));
        }
        let batch = extract_features(source, set)?;
        let meta = FeatureMeta {
            queries: match batch.source {
                crate::encoder::FeatureOrigin::Eaas => set.len() as u64,
                crate::encoder::FeatureOrigin::Direct => 0,
            },
            defense_applied: batch.defense_applied.clone(),
        };
        self.cache.store_matrix("features", key, &batch.vectors)?;
        self.cache.store_json("features", key, &meta)?;
        Ok((batch.vectors, meta))
    }

    fn downstream_accuracy(
        &self,
        cfg: &ClassifierConfig,
        task: &Task,
        (train_key, train): (&str, &Array2<f64>),
        (test_key, test): (&str, &Array2<f64>),
        curve: &Path,
    ) -> Result<f64> {
        let key = stage_key("eval", &[train_key, test_key, &cfg.digest()]);
        if let Some(meta) = self.cache.load_json::<EvalMeta>("eval", &key)? {
            return Ok(meta.accuracy);
        }
        let labels = task
            .train
            .labels
            .as_ref()
            .ok_or_else(|| Error::precondition(format!("{} train split is unlabeled", task.name)))?;
        let classes = task
            .train
            .num_classes
            .ok_or_else(|| Error::precondition(format!("{} has no class count", task.name)))?;
        let test_labels = task
            .test
            .labels
            .as_ref()
            .ok_or_else(|| Error::precondition(format!("{} test split is unlabeled", task.name)))?;
        let clf = train_classifier(train.view(), labels, classes, cfg)?;
        clf.write_curve(curve)?;
        let acc = accuracy(&clf.params, test.view(), test_labels)?;
        self.cache.store_json(
            "eval",
            &key,
            &EvalMeta {
                accuracy: acc,
                final_train_accuracy: clf.train_accuracy.last().copied(),
            },
        )?;
        Ok(acc)
    }

    fn steal_variant(
        &self,
        service: &Arc<EaasService>,
        service_key: &str,
        surrogate: &ImageSet,
        cfg: &AttackConfig,
        stem: &str,
    ) -> Result<(EncoderParams, StealMeta)> {
        let key = stage_key("stolen", &[&cfg.digest(), service_key, &surrogate.digest()]);
        if let (Some(enc), Some(meta)) = (
            self.cache.load_encoder("stolen", &key)?,
            self.cache.load_json::<StealMeta>("stolen", &key)?,
        ) {
            info!("{stem}: cache hit {}", &key[..12]);
            return Ok((enc, meta));
        }
        let account = format!("attacker-{}", cfg.variant);
        service.open_account(&account, self.manifest.service.budget_cap)?;
        info!("{stem}: stealing ({} epochs)", cfg.epochs);
        let outcome = steal(&service.client(&account), surrogate, cfg)?;
        let steal_dir = self.out.join("steal");
        fs::create_dir_all(&steal_dir)?;
        outcome.write_artifacts(&steal_dir, stem)?;
        let outcome = outcome.ensure_complete()?;
        let meta = StealMeta {
            variant: outcome.variant,
            queries: outcome.queries,
            epoch_losses: outcome.epoch_losses.clone(),
            completed_epochs: outcome.completed_epochs,
            ledger: outcome.ledger.clone(),
            config_digest: outcome.config_digest.clone(),
        };
        self.cache.store_encoder("stolen", &key, &outcome.encoder)?;
        self.cache.store_json("stolen", &key, &meta)?;
        Ok((outcome.encoder, meta))
    }

    fn point(&self, pm: &ExperimentManifest, point: Option<&SweepPoint>, target: &EncoderParams) -> Result<Vec<EvalReport>> {
        let base_label = match point {
            Some(p) => format!("{}-{}={}", pm.name, p.axis, p.value),
            None => pm.name.clone(),
        };
        let surrogate = sample_surrogate(&self.data.surrogate_pool, pm.data.surrogate_size, pm.seed)
            .map_err(|e| e.in_stage("data"))?;

        let (service, service_key) = self.service(pm, target).map_err(|e| e.in_stage("serve"))?;
        let curves = self.out.join("curves");
        fs::create_dir_all(&curves)?;

        // Target side: features through the (possibly defended) API.
        service.open_account("downstream", None)?;
        let api = service.client("downstream");
        let mut target_side = Vec::new();
        for task in &self.data.tasks {
            let stage = format!("eval:{}:ta", task.name);
            let res: Result<(f64, u64)> = (|| {
                let tr_key = stage_key("features", &[service_key.as_str(), &task.train.digest()]);
                let te_key = stage_key("features", &[service_key.as_str(), &task.test.digest()]);
                let (tr, tr_meta) = self.features(&tr_key, &api, &task.train)?;
                let (te, te_meta) = self.features(&te_key, &api, &task.test)?;
                let curve = curves.join(format!("{}-{}-ta.csv", file_stem(&base_label), task.name));
                let ta = self.downstream_accuracy(&pm.downstream, task, (&tr_key, &tr), (&te_key, &te), &curve)?;
                Ok((ta, tr_meta.queries + te_meta.queries))
            })();
            target_side.push(res.map_err(|e| e.in_stage(stage))?);
        }

        let mut reports = Vec::new();
        for &variant in &pm.variants {
            let label = format!("{base_label}-{variant}");
            let cfg = AttackConfig {
                variant,
                ..pm.attack.clone()
            };
            let stage = format!("steal:{variant}");
            let (stolen, meta) = self
                .steal_variant(&service, &service_key, &surrogate, &cfg, &file_stem(&label))
                .map_err(|e| e.in_stage(stage))?;
            let mut tasks = Vec::new();
            for (task, &(ta, ta_queries)) in self.data.tasks.iter().zip(&target_side) {
                let stage = format!("eval:{}:sa:{variant}", task.name);
                let sa: Result<f64> = (|| {
                    let tr_key = stage_key("features", &[&stolen.checksum(), &task.train.digest()]);
                    let te_key = stage_key("features", &[&stolen.checksum(), &task.test.digest()]);
                    let (tr, _) = self.features(&tr_key, &stolen, &task.train)?;
                    let (te, _) = self.features(&te_key, &stolen, &task.test)?;
                    let curve = curves.join(format!("{}-{}-sa.csv", file_stem(&label), task.name));
                    self.downstream_accuracy(&pm.downstream, task, (&tr_key, &tr), (&te_key, &te), &curve)
                })();
                let sa = sa.map_err(|e| e.in_stage(stage))?;
                tasks.push(TaskResult::new(&task.name, ta, sa, ta_queries, task.test.len()));
            }
            let mut report = EvalReport::new(&label, &pm.defense.to_string(), tasks, meta.queries, pm.service.price_per_1000);
            report.variant = Some(variant.to_string());
            report.manifest_digest = Some(pm.digest());
            report.config_digests = vec![
                ("pretrain".into(), pm.pretrain.digest()),
                ("defense".into(), digest_of(&pm.defense)),
                ("attack".into(), cfg.digest()),
                ("downstream".into(), pm.downstream.digest()),
            ];
            report.encoder_digest = Some(stolen.checksum());
            report.sweep = point.cloned();
            info!(
                "{label}: {}",
                report
                    .tasks
                    .iter()
                    .map(|t| format!("{} TA {:.3} SA {:.3}", t.task, t.ta, t.sa))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            reports.push(report);
        }
        Ok(reports)
    }

    /// The service for one point and a key identifying what it returns.
    fn service(&self, pm: &ExperimentManifest, target: &EncoderParams) -> Result<(Arc<EaasService>, String)> {
        let mut parts = vec![target.checksum(), digest_of(&pm.defense)];
        let defense = if pm.defense.needs_surrogate() {
            let sur = self.defender_surrogate(pm, target)?;
            parts.push(sur.checksum());
            build_defense(&pm.defense, Some(Arc::new(sur)))?
        } else {
            build_defense(&pm.defense, None)?
        };
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        let key = stage_key("service", &refs);
        let cfg = ServiceConfig {
            price_per_1000: pm.service.price_per_1000,
            accounts: Vec::new(),
        };
        Ok((Arc::new(EaasService::new(target.clone(), defense, cfg)), key))
    }
}
