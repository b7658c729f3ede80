//! Semantic entropy of sampled outputs against the exact value.
//!
//!     cargo run --release --example semantic_entropy

use concept_kernel::entropy::{cluster, entropy_oracle, semantic_entropy, MassMode};
use concept_kernel::synth::{entropy_bench, EntropyBenchConfig};

fn main() -> concept_kernel::Result<()> {
    let b = entropy_bench(&EntropyBenchConfig::default())?;
    let exact = entropy_oracle(&b.sequence_probs, &b.partition, 2.0)?;
    println!(
        "exact entropy over {} meanings: {exact:.4} bits",
        b.partition.len()
    );

    for m in [20, 200, 2000] {
        let s = b.pool.sample(m, 11, &b.embedder)?;
        let counts = semantic_entropy(&s, 0.3, MassMode::Counts, 2.0)?;
        let weighted = semantic_entropy(&s, 0.3, MassMode::Weighted, 2.0)?;
        println!(
            "m = {m:>4}: {} clusters, counts {:.4}, weighted {:.4}",
            counts.clustering.k, counts.entropy, weighted.entropy
        );
    }

    let s = b.pool.sample(12, 3, &b.embedder)?;
    let c = cluster(s.embeddings(), 0.3)?;
    for (t, l) in s.texts().iter().zip(&c.labels) {
        println!("  [{l}] {t}");
    }
    Ok(())
}
