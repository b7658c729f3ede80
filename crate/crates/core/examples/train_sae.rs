//! Train a small sparse autoencoder, save it, and clamp one concept.
//!
//!     cargo run --release --example train_sae

use concept_kernel::activation::ToyEmbedderConfig;
use concept_kernel::sae::{active_concepts, export_params, import_params, train, SaeTrainConfig};
use concept_kernel::synth::{ambiguity_bench, AmbiguityBenchConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bench = ambiguity_bench(&AmbiguityBenchConfig {
        per_class: 60,
        embedder: ToyEmbedderConfig::default(),
        ..Default::default()
    })?;
    let corpus = &bench.corpus;
    let out = train(corpus, 64, &SaeTrainConfig::default())?;
    println!(
        "{} sentences, loss {:.4} -> {:.4}, {} path snapshots",
        corpus.len(),
        out.initial_loss,
        out.epoch_losses.last().unwrap(),
        out.path.len()
    );

    let h = corpus.records()[0].vector();
    let f = out.params.encode(h)?;
    let active = active_concepts(&f, 0.0);
    println!(
        "'{}' activates {} concepts",
        corpus.records()[0].text,
        active.len()
    );

    let off = (0..64).find(|&i| !active.contains(i)).unwrap();
    let (clamped, recon) = out.params.clamp(h, off, 5.0)?;
    let shift: f64 = recon
        .iter()
        .zip(out.params.reconstruct(h)?)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    println!(
        "clamp concept {off} to {} moves the reconstruction by {shift:.3}",
        clamped.values()[off]
    );

    let dir = tempfile::tempdir()?;
    let p = dir.path().join("sae.saek");
    export_params(&out.params, &p)?;
    assert_eq!(import_params(&p)?, out.params);
    Ok(())
}
