//! Embed a handful of sentences with the hashed n-gram embedder, write them
//! as an activation file and read it back.
//!
//!     cargo run --example embed_corpus

use concept_kernel::activation::{ActivationCorpus, SentenceRecord, ToyEmbedderConfig};
use concept_kernel::linalg::cosine_distance;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ToyEmbedderConfig::default();
    let texts = [
        ("s0", "list the flights leaving boston"),
        ("s1", "show flights that leave boston"),
        ("s2", "which hotels have a pool"),
    ];
    let records = texts
        .iter()
        .map(|(id, t)| SentenceRecord::embed(*id, t, &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let corpus = ActivationCorpus::from_records(records)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("corpus.jsonl");
    corpus.persist(&path)?;
    let back = ActivationCorpus::ingest(&path, Some(cfg.dim))?;
    assert_eq!(back, corpus);

    println!("{} records, dim {}", back.len(), back.dim());
    for a in back.records() {
        for b in back.records() {
            if a.id < b.id {
                let d = cosine_distance(a.vector(), b.vector()).unwrap_or(f64::NAN);
                println!("cos-dist({}, {}) = {d:.3}", a.id, b.id);
            }
        }
    }
    Ok(())
}
