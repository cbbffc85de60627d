//! Runs a small λ sweep from a manifest and plots SA against λ.

use encsteal::pipeline::{run_pipeline, ExperimentManifest};

const MANIFEST: &str = r#"
name = "lambda"
variants = ["stolen_encoder"]

[data]
pretrain_size = 256
surrogate_size = 128
downstream = ["SynthDigits"]
downstream_train = 200
downstream_test = 100

[pretrain]
feature_dim = 64
epochs = 3
batch_size = 64
temperature = 0.1

[attack]
epochs = 4

[downstream]
epochs = 30
lr = 1e-3

[sweep]
axis = "lambda"
values = [0, 1, 20]
"#;

fn main() -> encsteal::Result<()> {
    let mut m = ExperimentManifest::from_toml_str(MANIFEST)?;
    m.output_dir = std::env::temp_dir().join("encsteal-lambda-sweep");
    let out = run_pipeline(&m)?;
    for r in &out.reports {
        let t = &r.tasks[0];
        println!("{:<40} TA {:.3} SA {:.3}", r.label, t.ta, t.sa);
    }
    for p in &out.plots {
        println!("csv {} svg {:?}", p.csv.display(), p.svg);
    }
    // A second run is served entirely from the stage cache.
    let again = run_pipeline(&m)?;
    assert_eq!(
        again.reports.iter().map(|r| r.digest()).collect::<Vec<_>>(),
        out.reports.iter().map(|r| r.digest()).collect::<Vec<_>>()
    );
    println!("rerun reproduced {} reports", again.reports.len());
    Ok(())
}
