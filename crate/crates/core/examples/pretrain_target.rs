//! Pre-trains a small target encoder with SimCLR and with MoCo, then saves
//! and reloads the SimCLR checkpoint.

use encsteal::contrastive::{pretrain, Algo, PretrainConfig};
use encsteal::dataio::{resolve_dataset, Split};
use encsteal::encoder::{load_checkpoint, save_checkpoint};

fn main() -> encsteal::Result<()> {
    let data = resolve_dataset("SynthObjects", Split::Train, None, Some(256), 0)?;
    for algo in [Algo::Simclr, Algo::Moco] {
        let cfg = PretrainConfig {
            algo,
            feature_dim: 128,
            epochs: 3,
            batch_size: 64,
            queue_size: 256,
            momentum: 0.99,
            ..Default::default()
        };
        let out = pretrain(&data, &cfg)?;
        println!("{algo}: per-epoch loss {:.4?}", out.epoch_losses);
        if algo == Algo::Simclr {
            let path = std::env::temp_dir().join("encsteal-target.ckpt");
            save_checkpoint(&out.encoder, &path)?;
            let back = load_checkpoint(&path)?;
            assert_eq!(back.checksum(), out.encoder.checksum());
            println!("checkpoint {} ({} parameters)", path.display(), back.param_count());
        }
    }
    Ok(())
}
