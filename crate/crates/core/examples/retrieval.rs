//! Concept-based API retrieval with missing-concept prediction on the
//! planted benchmark.
//!
//!     cargo run --release --example retrieval

use concept_kernel::activation::Embedder;
use concept_kernel::retrieval::{
    embed_examples, index_corpus, rank, train_predictors, BoostConfig, PredictorSet, RankConfig,
};
use concept_kernel::synth::{retrieval_bench, RetrievalBenchConfig};

fn main() -> concept_kernel::Result<()> {
    let b = retrieval_bench(&RetrievalBenchConfig::default())?;
    let corpus = index_corpus(b.docs.clone(), &b.sae, &b.embedder, 0.0)?;
    let train = embed_examples(&b.train, &b.embedder)?;
    let predictors = train_predictors(&train, &corpus, &b.sae, &BoostConfig::default())?;
    println!(
        "{} docs, {} predictors",
        corpus.len(),
        predictors.predictors.len()
    );

    let q = &b.test[0];
    let v = b.embedder.embed(&q.question_text)?;
    let cfg = RankConfig::default();
    let with = rank(&v, &corpus, &b.sae, &predictors, &cfg)?;
    let without = rank(
        &v,
        &corpus,
        &b.sae,
        &PredictorSet::empty(0.0),
        &RankConfig {
            predict: false,
            ..cfg
        },
    )?;
    println!("question: {} (gold {})", q.question_text, q.gold_api);
    for (a, n) in with.iter().zip(&without) {
        println!("  {:<8} {:.3}    {:<8} {:.3}", a.id, a.score, n.id, n.score);
    }

    let report = concept_kernel::bench::run_retrieval(&Default::default())?.report;
    print!("\n{}", report.to_csv());
    Ok(())
}
