//! Serves an encoder over HTTP with a budget-capped account and steals it
//! through the wire client.

use std::sync::Arc;

use encsteal::attack::{steal, AttackConfig};
use encsteal::dataio::{resolve_dataset, sample_surrogate, Split};
use encsteal::defense::{build_defense, DefenseConfig};
use encsteal::eaas::{serve, EaasService, EmbeddingApi, HttpClient, ServiceConfig};
use encsteal::encoder::{init_encoder, EncoderProvenance};

fn main() -> encsteal::Result<()> {
    let target = init_encoder("small-conv", 64, Default::default(), 7, EncoderProvenance::PretrainedTarget)?;
    let defense = build_defense(&"round:m=3".parse::<DefenseConfig>()?, None)?;
    let service = Arc::new(EaasService::new(target, defense, ServiceConfig::default()));
    service.open_account("attacker", Some(500))?;
    let server = serve(service, "127.0.0.1:0", 2)?;
    println!("listening on {}", server.url());

    let client = HttpClient::new(&server.url(), "attacker");
    println!("service: {:?}", client.info()?);
    let pool = resolve_dataset("SynthScenes", Split::Unlabeled, None, Some(256), 0)?;
    let surrogate = sample_surrogate(&pool, 128, 0)?;
    let out = steal(&client, &surrogate, &AttackConfig { epochs: 3, ..Default::default() })?.ensure_complete()?;
    println!("stole in {} epochs; {}", out.completed_epochs, client.ledger()?);

    // A query_aug run needs (e+1)·|D| = 512 queries; 372 remain under the cap.
    let mut greedy = AttackConfig { epochs: 3, ..Default::default() };
    greedy.variant = encsteal::attack::Variant::QueryAug;
    let partial = steal(&client, &surrogate, &greedy)?;
    println!(
        "query_aug stopped after {} epochs: {}",
        partial.completed_epochs,
        partial.abort.map(|e| e.to_string()).unwrap_or_default()
    );
    server.shutdown();
    Ok(())
}
