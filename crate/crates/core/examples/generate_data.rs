//! Writes the synthetic dataset suite to disk and loads it back.
//!
//! ```text
//! cargo run --release --example generate_data -- /tmp/encsteal-data
//! ```

use std::path::PathBuf;

use encsteal::dataio::synth::{write_suite, SuiteSizes};
use encsteal::dataio::{load_dataset, Split};

fn main() -> encsteal::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("encsteal-data"));
    let sizes = SuiteSizes {
        objects_train: 400,
        objects_test: 100,
        scenes: 200,
        digits_train: 200,
        digits_test: 100,
        signs_train: 240,
        signs_test: 120,
    };
    write_suite(&root, &sizes, 0)?;
    for (name, split) in [
        ("SynthObjects", Split::Train),
        ("SynthScenes", Split::Unlabeled),
        ("SynthDigits", Split::Test),
        ("SynthSigns", Split::Train),
    ] {
        let set = load_dataset(name, split, &root)?;
        println!(
            "{name}/{split}: {} images at {}, {} classes, digest {}",
            set.len(),
            set.shape(),
            set.num_classes.map_or("no".into(), |k| k.to_string()),
            &set.digest()[..12]
        );
    }
    println!("dataset root: {}", root.display());
    Ok(())
}
