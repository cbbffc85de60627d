//! The three output-perturbation defenses applied to one feature vector.

use std::sync::Arc;

use encsteal::dataio::{resolve_dataset, Split};
use encsteal::defense::poison::{norm_of, poison_vector};
use encsteal::defense::{build_defense, round_features, top_k, DefenseConfig, Norm, PoisonConfig};
use encsteal::encoder::{init_encoder, EncoderProvenance};
use ndarray::s;

fn main() -> encsteal::Result<()> {
    let target = init_encoder("small-conv", 8, Default::default(), 3, EncoderProvenance::PretrainedTarget)?;
    let images = resolve_dataset("SynthObjects", Split::Test, None, Some(4), 0)?.images;
    let clean = target.encode(images.view())?.vectors;
    let v = clean.row(0);
    println!("clean      {:.3?}", v.slice(s![..6]).to_vec());
    println!("top_k(4)   {:.3?}", top_k(v, 4)?.to_vec());
    println!("round(1)   {:.3?}", round_features(v, 1).slice(s![..6]).to_vec());

    // Poisoning pushes the returned vector away from what a surrogate of the
    // defender's would predict, within an ℓ2 ball.
    let surrogate = init_encoder("small-conv", 8, Default::default(), 4, EncoderProvenance::DefenderSurrogate)?;
    let cfg = PoisonConfig {
        eps: 0.5,
        norm: Norm::L2,
        ..Default::default()
    };
    let a = surrogate.encode(images.view())?.vectors;
    let r = poison_vector(v, a.row(0), a.row(1), &cfg)?;
    println!(
        "poison     ‖δ‖₂ = {:.4} ≤ {}, objective {:.4} → {:.4}",
        norm_of(Norm::L2, r.delta.view()),
        cfg.eps,
        r.objective_zero,
        r.objective
    );

    let defense = build_defense(&DefenseConfig::Poisoning(cfg), Some(Arc::new(surrogate)))?;
    let out = defense.apply(images.view(), clean.clone())?;
    println!("{} applied to {} rows", defense.descriptor(), out.nrows());
    Ok(())
}
