//! End-to-end pipeline behaviour on a tiny manifest: caching, determinism,
//! stage-tagged errors and defended target features.

use std::path::Path;

use encsteal::pipeline::{run_pipeline, run_pipeline_with, Datasets, ExperimentManifest};
use encsteal::Error;

const TINY: &str = r#"
name = "tiny"
variants = ["stolen_encoder", "no_aug"]

[data]
pretrain_size = 48
surrogate_size = 32
downstream = ["SynthDigits"]
downstream_train = 60
downstream_test = 40

[pretrain]
arch = "mlp"
feature_dim = 16
epochs = 2
batch_size = 16

[attack]
stolen_arch = "mlp"
epochs = 2
batch_size = 16

[downstream]
hidden = [16]
epochs = 5
lr = 1e-3
"#;

fn tiny(dir: &Path, extra: &str) -> ExperimentManifest {
    let mut m = ExperimentManifest::from_toml_str(&format!("{extra}\n{TINY}")).unwrap();
    m.output_dir = dir.to_path_buf();
    m
}

fn digests(out: &encsteal::pipeline::PipelineOutput) -> Vec<String> {
    out.reports.iter().map(|r| r.digest()).collect()
}

fn mtimes(dir: &Path) -> Vec<(String, std::time::SystemTime)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), e.metadata().unwrap().modified().unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn rerun_hits_the_cache_and_reproduces_reports() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny(dir.path(), "deterministic = true");
    let first = run_pipeline(&m).unwrap();
    assert_eq!(first.reports.len(), 2);
    let cached = mtimes(&dir.path().join("cache"));
    let second = run_pipeline(&m).unwrap();
    assert_eq!(digests(&first), digests(&second));
    // Nothing was recomputed: no cache file was added or rewritten.
    assert_eq!(cached, mtimes(&dir.path().join("cache")));
    assert!(first.comparison_csv.exists());
    assert!(first.report_dir.join("tiny-stolen_encoder.json").exists());
}

#[test]
fn fresh_directories_give_identical_digests() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_pipeline(&tiny(a.path(), "deterministic = true")).unwrap();
    let rb = run_pipeline(&tiny(b.path(), "deterministic = true")).unwrap();
    assert_eq!(digests(&ra), digests(&rb));
    for (x, y) in ra.reports.iter().zip(&rb.reports) {
        assert_eq!(x.encoder_digest, y.encoder_digest);
    }
    // A different seed is a different experiment.
    let c = tempfile::tempdir().unwrap();
    let rc = run_pipeline(&tiny(c.path(), "deterministic = true\nseed = 9")).unwrap();
    assert_ne!(digests(&ra), digests(&rc));
}

#[test]
fn errors_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny(dir.path(), "");
    m.target_checkpoint = Some(dir.path().join("missing.ckpt"));
    match run_pipeline(&m) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "pretrain");
            assert!(matches!(*source, Error::Load { .. }));
        }
        other => panic!("expected a pretrain stage error, got {other:?}"),
    }

    // A budget cap below |D| stops the attack at its first query pass.
    let mut m = tiny(dir.path(), "");
    m.service.budget_cap = Some(10);
    match run_pipeline(&m) {
        Err(e @ Error::Stage { .. }) => {
            assert!(e.to_string().contains("steal:stolen_encoder"), "{e}");
            assert!(matches!(e.root(), Error::Quota { .. }));
        }
        other => panic!("expected a steal stage error, got {other:?}"),
    }
}

#[test]
fn target_accuracy_is_measured_through_the_defended_api() {
    let dir = tempfile::tempdir().unwrap();
    let plain = tiny(dir.path(), "");
    let data = Datasets::resolve(&plain).unwrap();
    let undefended = run_pipeline_with(&plain, &data).unwrap();
    let mut defended = plain.clone();
    defended.name = "topk".into();
    defended.defense = "top_k:k=1".parse().unwrap();
    let out = run_pipeline_with(&defended, &data).unwrap();
    let (r0, r1) = (&undefended.reports[0], &out.reports[0]);
    assert_eq!(r0.defense, "none");
    assert_eq!(r1.defense, "top_k:k=1");
    assert_ne!(r0.tasks[0].ta, r1.tasks[0].ta, "TA must see the defended features");
    assert_eq!(r0.tasks[0].queries_downstream, 100);
}
