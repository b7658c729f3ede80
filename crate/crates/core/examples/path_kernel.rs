//! Masked path kernel between sentences: kernel values, both distances, a
//! concept mask and a Gram matrix spectrum.
//!
//!     cargo run --release --example path_kernel

use concept_kernel::activation::{ActivationCorpus, SentenceRecord, ToyEmbedderConfig};
use concept_kernel::path_kernel::{
    build_mask, gram, interpolate, ConceptMask, PathKernel, Quadrature,
};
use concept_kernel::sae::{train, SaeTrainConfig};
use concept_kernel::synth::{ambiguity_bench, AmbiguityBenchConfig};

fn main() -> concept_kernel::Result<()> {
    let cfg = ToyEmbedderConfig::default();
    let bench = ambiguity_bench(&AmbiguityBenchConfig {
        per_class: 60,
        ..Default::default()
    })?;
    let params = train(&bench.corpus, 64, &SaeTrainConfig::default())?.params;
    let states = interpolate(&params, 32)?;

    let probe = ActivationCorpus::from_records(vec![
        SentenceRecord::embed("a", "book a table for two tonight", &cfg)?,
        SentenceRecord::embed("b", "reserve a table for two tonight", &cfg)?,
        SentenceRecord::embed("c", "what is the weather in paris", &cfg)?,
    ])?;

    let all = ConceptMask::all(64);
    let k = PathKernel::new(&states, &all, Quadrature::Trapezoid)?;
    for (x, y) in [("a", "b"), ("a", "c"), ("b", "c")] {
        let (hx, hy) = (probe.require(x)?.vector(), probe.require(y)?.vector());
        println!(
            "{x}-{y}: K = {:.4}, D1 = {:.4}, D2 = {:.4}",
            k.kernel(hx, hy)?,
            k.distance_d1(hx, hy)?,
            k.distance_d2(hx, hy)?
        );
    }

    let pairs = bench
        .mask_examples
        .iter()
        .enumerate()
        .map(|(i, t)| SentenceRecord::embed(format!("m{i}"), t, &cfg))
        .collect::<concept_kernel::Result<Vec<_>>>()?;
    let examples: Vec<&SentenceRecord> = pairs.iter().collect();
    let mask = build_mask(&examples, &params, 0.0)?;
    println!(
        "concepts carried by word order in {:?}...: {:?}",
        &bench.mask_examples[..2],
        mask.valid.indices()
    );
    let km = PathKernel::new(&states, &mask, Quadrature::Trapezoid)?;
    let (ha, hb) = (probe.require("a")?.vector(), probe.require("b")?.vector());
    match km.distance_d1(ha, hb) {
        Ok(d) => println!("masked a-b: D1 = {d:.4}"),
        Err(e) => println!("masked a-b: {e}"),
    }

    let vecs: Vec<&[f64]> = bench.corpus.records()[..10]
        .iter()
        .map(|r| r.vector())
        .collect();
    let g = gram(&vecs, &k)?;
    println!(
        "Gram over 10 sentences: eigenvalues in [{:.3e}, {:.3e}], psd = {}",
        g.min_eigenvalue,
        g.max_eigenvalue,
        g.is_psd()
    );
    Ok(())
}
