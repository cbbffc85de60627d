//! Steals a target encoder with each attack variant and prints the query bill.

use std::sync::Arc;

use encsteal::attack::{steal, AttackConfig, Variant};
use encsteal::contrastive::PretrainConfig;
use encsteal::dataio::{resolve_dataset, sample_surrogate, Split};
use encsteal::eaas::EaasService;
use encsteal::encoder::{init_encoder, EncoderProvenance};

fn main() -> encsteal::Result<()> {
    // An untrained target is enough to show the mechanics.
    let target = init_encoder("small-conv", 64, Default::default(), 1, EncoderProvenance::PretrainedTarget)?;
    let service = Arc::new(EaasService::undefended(target));
    let pool = resolve_dataset("SynthScenes", Split::Unlabeled, None, Some(400), 0)?;
    let surrogate = sample_surrogate(&pool, 128, 0)?;
    for variant in Variant::ALL {
        let account = format!("attacker-{variant}");
        service.open_account(&account, None)?;
        let cfg = AttackConfig {
            variant,
            epochs: 3,
            local_pretrain: PretrainConfig {
                epochs: 3,
                batch_size: 64,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = steal(&service.client(&account), &surrogate, &cfg)?.ensure_complete()?;
        println!(
            "{:<15} queries {:>4} (expected {:>4})  loss {:.4?}",
            variant.as_str(),
            out.queries,
            cfg.expected_queries(surrogate.len()),
            out.epoch_losses
        );
    }
    Ok(())
}
