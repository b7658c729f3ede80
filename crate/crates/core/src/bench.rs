//! End-to-end runs over the synthetic benchmarks.

use serde::{Deserialize, Serialize};

use crate::activation::SentenceRecord;
use crate::ambiguity::{
    baseline_stats, calibrate, classify, evaluate, triplet_stats, EvalReport, Label, Prediction,
    ThresholdModel,
};
use crate::entropy::{
    cluster_masses, entropy_oracle, semantic_entropy, MassMode, DEFAULT_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::path_kernel::{build_mask, interpolate, ConceptMask, KernelConfig, PathKernel};
use crate::retrieval::{
    embed_examples, evaluate_retrieval, index_corpus, predict_missing, train_predictors,
    BoostConfig, RankConfig, RetrievalReport,
};
use crate::sae::{train, SaeTrainConfig};
use crate::synth::{
    ambiguity_bench, clamp_bench, entropy_bench, retrieval_bench, sub_seed, AmbiguityBenchConfig,
    ClampBenchConfig, EntropyBenchConfig, RetrievalBenchConfig,
};

/// Which concepts the ambiguity kernel keeps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskChoice {
    /// Every concept.
    #[default]
    All,
    /// Sentence-only concepts of the generator's pair examples.
    PairExamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmbiguityRunConfig {
    pub bench: AmbiguityBenchConfig,
    pub n_concepts: usize,
    pub train: SaeTrainConfig,
    pub kernel: KernelConfig,
    pub mask: MaskChoice,
}

impl Default for AmbiguityRunConfig {
    fn default() -> Self {
        Self {
            bench: AmbiguityBenchConfig::default(),
            n_concepts: 64,
            train: SaeTrainConfig::default(),
            kernel: KernelConfig::default(),
            mask: MaskChoice::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityRunReport {
    pub n_calibration: usize,
    pub n_test: usize,
    /// Triplets dropped because a sentence had a zero self-kernel.
    pub skipped: usize,
    pub mask_size: usize,
    pub model: ThresholdModel,
    pub test: EvalReport,
    pub baseline_threshold: f64,
    pub baseline_test: EvalReport,
}

fn calibrate_and_test(scored: &[(f64, Label)]) -> Result<(ThresholdModel, EvalReport)> {
    let half = scored.len() / 2;
    let (cal, test) = scored.split_at(half);
    let model = calibrate(cal)?;
    let preds: Vec<Prediction> = test
        .iter()
        .map(|&(score, truth)| Prediction {
            score,
            predicted: classify(score, &model),
            truth,
        })
        .collect();
    let report = evaluate(&preds)?;
    Ok((model, report))
}

/// Generates triplets, trains an SAE on all their sentences, calibrates on
/// the first half of the triplets and classifies the second half.
pub fn run_ambiguity(cfg: &AmbiguityRunConfig) -> Result<AmbiguityRunReport> {
    cfg.kernel.validate()?;
    let bench = ambiguity_bench(&cfg.bench)?;
    let outcome = train(&bench.corpus, cfg.n_concepts, &cfg.train)?;
    let params = &outcome.params;
    let mask = match cfg.mask {
        MaskChoice::All => ConceptMask::all(cfg.n_concepts),
        MaskChoice::PairExamples => {
            let ex = bench
                .mask_examples
                .iter()
                .enumerate()
                .map(|(k, t)| SentenceRecord::embed(format!("mask{k}"), t, &cfg.bench.embedder))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SentenceRecord> = ex.iter().collect();
            build_mask(&refs, params, cfg.kernel.activation_threshold)?
        }
    };
    let states = interpolate(params, cfg.kernel.n_steps)?;
    let kernel = PathKernel::new(&states, &mask, cfg.kernel.quadrature)?;
    let mut scored = Vec::new();
    let mut base = Vec::new();
    let mut skipped = 0;
    for t in &bench.triplets {
        let label = t
            .label
            .ok_or_else(|| Error::invalid("benchmark triplet without label"))?;
        match triplet_stats(t, &bench.corpus, &kernel) {
            Ok(s) => scored.push((s.mean_d1, label)),
            Err(Error::ZeroSelfKernel) => skipped += 1,
            Err(e) => return Err(e),
        }
        base.push((baseline_stats(t, &bench.corpus)?.mean_d1, label));
    }
    let (model, test) = calibrate_and_test(&scored)?;
    let (bmodel, baseline_test) = calibrate_and_test(&base)?;
    Ok(AmbiguityRunReport {
        n_calibration: scored.len() / 2,
        n_test: scored.len() - scored.len() / 2,
        skipped,
        mask_size: mask.valid.len(),
        model,
        test,
        baseline_threshold: bmodel.threshold,
        baseline_test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyRunConfig {
    pub bench: EntropyBenchConfig,
    pub samples: usize,
    pub threshold: f64,
    pub base: f64,
}

impl Default for EntropyRunConfig {
    fn default() -> Self {
        Self {
            bench: EntropyBenchConfig::default(),
            samples: 2000,
            threshold: DEFAULT_THRESHOLD,
            base: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRunReport {
    pub estimate: f64,
    pub oracle: f64,
    pub abs_error: f64,
    pub clusters: usize,
    pub masses: Vec<f64>,
    /// Largest change in a weighted mass when every log-probability is
    /// shifted by +100.
    pub shift_max_diff: f64,
}

pub fn run_entropy(cfg: &EntropyRunConfig) -> Result<EntropyRunReport> {
    let b = entropy_bench(&cfg.bench)?;
    let samples = b.pool.sample(
        cfg.samples,
        sub_seed(cfg.bench.seed, "entropy-draws"),
        &b.embedder,
    )?;
    let se = semantic_entropy(&samples, cfg.threshold, MassMode::Counts, cfg.base)?;
    let oracle = entropy_oracle(&b.sequence_probs, &b.partition, cfg.base)?;
    let lp = samples.log_probs().expect("pool samples carry log-probs");
    let shifted: Vec<f64> = lp.iter().map(|x| x + 100.0).collect();
    let p = cluster_masses(&se.clustering, MassMode::Weighted, Some(lp))?;
    let q = cluster_masses(&se.clustering, MassMode::Weighted, Some(&shifted))?;
    let shift_max_diff = p
        .iter()
        .zip(&q)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(EntropyRunReport {
        estimate: se.entropy,
        oracle,
        abs_error: (se.entropy - oracle).abs(),
        clusters: se.clustering.k,
        masses: se.masses,
        shift_max_diff,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClampRunConfig {
    pub bench: ClampBenchConfig,
    pub threshold: f64,
    pub base: f64,
}

impl Default for ClampRunConfig {
    fn default() -> Self {
        Self {
            bench: ClampBenchConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            base: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampRunReport {
    /// Per question: entropy with no clamp, a random clamp, a targeted clamp.
    pub per_question: Vec<[f64; 3]>,
    pub mean_none: f64,
    pub mean_random: f64,
    pub mean_targeted: f64,
}

/// Samples answers from the reconstruction under each clamp level and
/// measures their semantic entropy.
pub fn run_clamp(cfg: &ClampRunConfig) -> Result<ClampRunReport> {
    let b = clamp_bench(&cfg.bench)?;
    let value = cfg.bench.clamp_value;
    let mut per_question = Vec::with_capacity(b.questions.len());
    for (qi, q) in b.questions.iter().enumerate() {
        let recons = [
            b.sae.reconstruct(&q.vector)?,
            b.sae.clamp(&q.vector, q.random, value)?.1,
            b.sae.clamp(&q.vector, q.missing, value)?.1,
        ];
        let mut row = [0.0; 3];
        for (level, r) in recons.iter().enumerate() {
            let pool = q.generator.pool(r)?;
            let seed = sub_seed(cfg.bench.seed, &format!("clamp-draws-{qi}-{level}"));
            let s = pool.sample(cfg.bench.samples_per_question, seed, &b.embedder)?;
            row[level] = semantic_entropy(&s, cfg.threshold, MassMode::Counts, cfg.base)?.entropy;
        }
        per_question.push(row);
    }
    let mean =
        |k: usize| per_question.iter().map(|r| r[k]).sum::<f64>() / per_question.len() as f64;
    Ok(ClampRunReport {
        mean_none: mean(0),
        mean_random: mean(1),
        mean_targeted: mean(2),
        per_question,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalRunConfig {
    pub bench: RetrievalBenchConfig,
    pub boost: BoostConfig,
    pub rank: RankConfig,
    pub rhos: Vec<f64>,
    pub activation_threshold: f64,
}

impl Default for RetrievalRunConfig {
    fn default() -> Self {
        Self {
            bench: RetrievalBenchConfig::default(),
            boost: BoostConfig::default(),
            rank: RankConfig::default(),
            rhos: vec![0.5, 0.3, 0.2],
            activation_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRunReport {
    pub n_predictors: usize,
    /// Fraction of test questions whose lacking concept is predicted.
    pub planted_recall: f64,
    pub report: RetrievalReport,
}

pub fn run_retrieval(cfg: &RetrievalRunConfig) -> Result<RetrievalRunReport> {
    let b = retrieval_bench(&cfg.bench)?;
    let corpus = index_corpus(b.docs, &b.sae, &b.embedder, cfg.activation_threshold)?;
    let train_set = embed_examples(&b.train, &b.embedder)?;
    let test_set = embed_examples(&b.test, &b.embedder)?;
    let predictors = train_predictors(&train_set, &corpus, &b.sae, &cfg.boost)?;
    let mut hits = 0;
    for (ex, &c) in test_set.iter().zip(&b.planted) {
        let f = b.sae.encode(ex.question.vector())?;
        if predict_missing(&f, &predictors, cfg.rank.prob_threshold).contains(c) {
            hits += 1;
        }
    }
    let report = evaluate_retrieval(
        &test_set,
        &corpus,
        &b.sae,
        &predictors,
        &cfg.rhos,
        &cfg.rank,
    )?;
    Ok(RetrievalRunReport {
        n_predictors: predictors.predictors.len(),
        planted_recall: hits as f64 / test_set.len() as f64,
        report,
    })
}
