//! Trains downstream classifiers on target (via the API) and stolen features
//! and assembles a TA/SA report.

use std::sync::Arc;

use encsteal::attack::{steal, AttackConfig};
use encsteal::dataio::{resolve_dataset, sample_surrogate, Split};
use encsteal::downstream::{accuracy, extract_features, train_classifier, ClassifierConfig, EvalReport, TaskResult};
use encsteal::eaas::EaasService;
use encsteal::encoder::{init_encoder, EncoderProvenance, FeatureExtractor};

fn score(source: &dyn FeatureExtractor, task: &str, cfg: &ClassifierConfig) -> encsteal::Result<(f64, usize)> {
    let train = resolve_dataset(task, Split::Train, None, Some(240), 0)?;
    let test = resolve_dataset(task, Split::Test, None, Some(120), 0)?;
    let f = extract_features(source, &train)?;
    let clf = train_classifier(f.vectors.view(), train.labels.as_deref().unwrap(), train.num_classes.unwrap(), cfg)?;
    let g = extract_features(source, &test)?;
    Ok((accuracy(&clf.params, g.vectors.view(), test.labels.as_deref().unwrap())?, test.len()))
}

fn main() -> encsteal::Result<()> {
    let target = init_encoder("small-conv", 64, Default::default(), 5, EncoderProvenance::PretrainedTarget)?;
    let service = Arc::new(EaasService::undefended(target));
    service.open_account("attacker", None)?;
    service.open_account("downstream", None)?;
    let pool = resolve_dataset("SynthScenes", Split::Unlabeled, None, Some(256), 0)?;
    let surrogate = sample_surrogate(&pool, 128, 0)?;
    let stolen = steal(&service.client("attacker"), &surrogate, &AttackConfig { epochs: 5, ..Default::default() })?
        .ensure_complete()?;

    let cfg = ClassifierConfig {
        epochs: 30,
        lr: 1e-3,
        ..Default::default()
    };
    let mut tasks = Vec::new();
    for task in ["SynthDigits", "SynthSigns"] {
        let before = service.ledger_report("downstream")?.query_count;
        let (ta, n) = score(&service.client("downstream"), task, &cfg)?;
        let spent = service.ledger_report("downstream")?.query_count - before;
        let (sa, _) = score(&stolen.encoder, task, &cfg)?;
        tasks.push(TaskResult::new(task, ta, sa, spent, n));
    }
    let report = EvalReport::new("example", "none", tasks, stolen.queries, 3.2);
    print!("{}", report.to_csv());
    Ok(())
}
