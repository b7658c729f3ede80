//! The `concept-kernel` command-line driver.
//!
//! Every subcommand reads one [`RunConfig`], assembled from an optional JSON
//! file (`--config`) with flags layered on top, validates all of it, and
//! writes its outputs plus a JSON report under `--out-dir`. Reports carry
//! the resolved config and the tool version. Failures print one JSON line
//! `{"error": <code>, "message": <text>}` on stderr.

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::activation::{
    tokenize, ActivationCorpus, Embedder, LookupEmbedder, SentenceRecord, ToyEmbedder,
    ToyEmbedderConfig,
};
use crate::ambiguity::{
    calibrate, classify, evaluate, read_triplets, triplet_stats, write_triplets, EvalReport, Label,
    Prediction, ThresholdModel, TripletStats,
};
use crate::bench::{
    run_ambiguity, run_clamp, run_entropy, run_retrieval, AmbiguityRunConfig, AmbiguityRunReport,
    ClampRunConfig, ClampRunReport, EntropyRunConfig, EntropyRunReport, RetrievalRunConfig,
    RetrievalRunReport,
};
use crate::entropy::{semantic_entropy, MassMode, SampleSet};
use crate::error::{Error, Result};
use crate::path_kernel::{
    build_mask, interpolate, ConceptMask, KernelConfig, PathKernel, PathStates, Quadrature,
};
use crate::retrieval::{
    embed_examples, evaluate_retrieval, index_corpus, rank, read_api_docs, read_examples,
    train_predictors, write_api_docs, write_examples, BoostConfig, IndexedCorpus, PredictorSet,
    RankConfig, Ranked, RetrievalReport,
};
use crate::sae::{
    export_params, export_with_path, import_with_path, train, Precision, SaeTrainConfig,
};
use crate::synth::{ambiguity_bench, entropy_bench, retrieval_bench, sub_seed};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const TOOL: &str = "concept-kernel";

pub const SUBCOMMANDS: &[&str] = &[
    "ingest",
    "embed",
    "sae-train",
    "sae-import",
    "kernel",
    "mask",
    "ambiguity-calibrate",
    "ambiguity-classify",
    "entropy",
    "retrieval-index",
    "retrieval-train",
    "retrieval-rank",
    "retrieval-eval",
    "synth-bench",
];

/// First words that may be written apart from their action (`sae train`).
const GROUPS: &[&str] = &["sae", "ambiguity", "retrieval"];
const GLOBAL_VALUE_FLAGS: &[&str] = &["--config", "--seed", "--out-dir"];

// Config --------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderConfig {
    Toy(ToyEmbedderConfig),
    /// JSONL table of `{text, vector}` lines.
    Lookup {
        path: PathBuf,
    },
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Toy(ToyEmbedderConfig::default())
    }
}

/// Input and output locations. Unset outputs default to fixed names under
/// `out_dir`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub texts: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub sae: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub api_corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub predictors: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSection {
    pub n_concepts: usize,
    pub train: SaeTrainConfig,
    pub precision: Precision,
}

impl Default for SaeSection {
    fn default() -> Self {
        Self {
            n_concepts: 64,
            train: SaeTrainConfig::default(),
            precision: Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    D1,
    D2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub n_steps: usize,
    pub activation_threshold: f64,
    pub quadrature: Quadrature,
    pub metric: Metric,
    /// Corpus ids whose sentence-only concepts form the mask; empty keeps
    /// every concept.
    pub mask_from: Vec<String>,
    /// Use the snapshots stored in the parameter file instead of
    /// interpolating from zero.
    pub recorded_path: bool,
}

impl Default for KernelSection {
    fn default() -> Self {
        let k = KernelConfig::default();
        Self {
            n_steps: k.n_steps,
            activation_threshold: k.activation_threshold,
            quadrature: k.quadrature,
            metric: Metric::D1,
            mask_from: Vec::new(),
            recorded_path: false,
        }
    }
}

impl KernelSection {
    pub fn kernel_config(&self) -> KernelConfig {
        KernelConfig {
            n_steps: self.n_steps,
            activation_threshold: self.activation_threshold,
            quadrature: self.quadrature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropySection {
    pub threshold: f64,
    pub mode: MassMode,
    pub base: f64,
}

impl Default for EntropySection {
    fn default() -> Self {
        Self {
            threshold: crate::entropy::DEFAULT_THRESHOLD,
            mode: MassMode::Counts,
            base: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub activation_threshold: f64,
    pub boost: BoostConfig,
    pub rank: RankConfig,
    pub rhos: Vec<f64>,
    pub question: Option<String>,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            activation_threshold: 0.0,
            boost: BoostConfig::default(),
            rank: RankConfig::default(),
            rhos: vec![0.5, 0.3, 0.2],
            question: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Also run the four benchmarks and report their metrics.
    pub run: bool,
    pub ambiguity: AmbiguityRunConfig,
    pub entropy: EntropyRunConfig,
    pub clamp: ClampRunConfig,
    pub retrieval: RetrievalRunConfig,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            run: true,
            ambiguity: AmbiguityRunConfig::default(),
            entropy: EntropyRunConfig::default(),
            clamp: ClampRunConfig::default(),
            retrieval: RetrievalRunConfig::default(),
        }
    }
}

/// Everything a run needs. Module seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub paths: Paths,
    pub embedder: EmbedderConfig,
    /// Pins the activation dimension on ingest.
    pub dim: Option<usize>,
    pub sae: SaeSection,
    pub kernel: KernelSection,
    pub entropy: EntropySection,
    pub retrieval: RetrievalSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("out"),
            paths: Paths::default(),
            embedder: EmbedderConfig::default(),
            dim: None,
            sae: SaeSection::default(),
            kernel: KernelSection::default(),
            entropy: EntropySection::default(),
            retrieval: RetrievalSection::default(),
            bench: BenchSection::default(),
        }
    }
}

fn field_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Prefixes the field named by a module's own validation error.
fn scoped(prefix: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { field, reason } => field_err(format!("{prefix}.{field}"), reason),
        Error::TooFewSteps(n) => field_err(format!("{prefix}.n_steps"), format!("{n} is below 2")),
        other => field_err(prefix, other.to_string()),
    })
}

fn check(ok: bool, field: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(field_err(field, reason))
    }
}

fn validate_rank(prefix: &str, r: &RankConfig) -> Result<()> {
    check(
        r.rho > 0.0 && r.rho <= 1.0,
        &format!("{prefix}.rho"),
        "must be in (0, 1]",
    )?;
    check(r.top_k >= 1, &format!("{prefix}.top_k"), "must be >= 1")?;
    check(
        (0.0..=1.0).contains(&r.prob_threshold),
        &format!("{prefix}.prob_threshold"),
        "must be in [0, 1]",
    )
}

fn validate_entropy(prefix: &str, threshold: f64, base: f64) -> Result<()> {
    check(
        threshold > 0.0 && threshold <= 2.0,
        &format!("{prefix}.threshold"),
        "must be in (0, 2]",
    )?;
    check(
        base > 0.0 && base != 1.0 && base.is_finite(),
        &format!("{prefix}.base"),
        "must be positive and not 1",
    )
}

impl RunConfig {
    /// Overwrites every module seed with one derived from `self.seed`.
    pub fn resolve_seeds(&mut self) {
        let s = self.seed;
        self.sae.train.seed = sub_seed(s, "sae-train");
        self.bench.ambiguity.bench.seed = s;
        self.bench.ambiguity.train.seed = sub_seed(s, "sae-train");
        self.bench.entropy.bench.seed = s;
        self.bench.clamp.bench.seed = s;
        self.bench.retrieval.bench.seed = s;
    }

    pub fn validate(&self) -> Result<()> {
        check(
            !self.out_dir.as_os_str().is_empty(),
            "out_dir",
            "must not be empty",
        )?;
        if let EmbedderConfig::Toy(t) = &self.embedder {
            scoped("embedder", t.validate())?;
        }
        if let Some(d) = self.dim {
            check(d >= 1, "dim", "must be >= 1")?;
        }
        check(self.sae.n_concepts >= 1, "sae.n_concepts", "must be >= 1")?;
        scoped("sae.train", self.sae.train.validate())?;
        scoped("kernel", self.kernel.kernel_config().validate())?;
        validate_entropy("entropy", self.entropy.threshold, self.entropy.base)?;
        check(
            self.retrieval.activation_threshold >= 0.0
                && self.retrieval.activation_threshold.is_finite(),
            "retrieval.activation_threshold",
            "must be finite and >= 0",
        )?;
        scoped("retrieval.boost", self.retrieval.boost.validate())?;
        validate_rank("retrieval.rank", &self.retrieval.rank)?;
        check(
            !self.retrieval.rhos.is_empty(),
            "retrieval.rhos",
            "must not be empty",
        )?;
        for r in &self.retrieval.rhos {
            check(
                *r > 0.0 && *r <= 1.0,
                "retrieval.rhos",
                "every rho must be in (0, 1]",
            )?;
        }

        let b = &self.bench;
        scoped(
            "bench.ambiguity.bench.embedder",
            b.ambiguity.bench.embedder.validate(),
        )?;
        check(
            b.ambiguity.bench.per_class >= 2,
            "bench.ambiguity.bench.per_class",
            "must be >= 2",
        )?;
        check(
            (0.0..=1.0).contains(&b.ambiguity.bench.filler_rate),
            "bench.ambiguity.bench.filler_rate",
            "must be in [0, 1]",
        )?;
        check(
            b.ambiguity.n_concepts >= 1,
            "bench.ambiguity.n_concepts",
            "must be >= 1",
        )?;
        scoped("bench.ambiguity.train", b.ambiguity.train.validate())?;
        scoped("bench.ambiguity.kernel", b.ambiguity.kernel.validate())?;
        check(
            b.entropy.samples >= 1,
            "bench.entropy.samples",
            "must be >= 1",
        )?;
        validate_entropy("bench.entropy", b.entropy.threshold, b.entropy.base)?;
        validate_entropy("bench.clamp", b.clamp.threshold, b.clamp.base)?;
        check(
            b.clamp.bench.n_questions >= 1 && b.clamp.bench.samples_per_question >= 1,
            "bench.clamp.bench",
            "needs at least one question and one sample",
        )?;
        scoped("bench.retrieval.boost", b.retrieval.boost.validate())?;
        validate_rank("bench.retrieval.rank", &b.retrieval.rank)?;
        for r in &b.retrieval.rhos {
            check(
                *r > 0.0 && *r <= 1.0,
                "bench.retrieval.rhos",
                "every rho must be in (0, 1]",
            )?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| field_err("config", e.to_string()))
    }

    fn embedder(&self) -> Result<Box<dyn Embedder + Sync>> {
        Ok(match &self.embedder {
            EmbedderConfig::Toy(t) => Box::new(ToyEmbedder::new(t.clone())?),
            EmbedderConfig::Lookup { path } => Box::new(LookupEmbedder::load(path)?),
        })
    }

    fn require<'a>(&self, field: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| field_err(format!("paths.{field}"), "required by this subcommand"))
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.paths
            .out
            .clone()
            .unwrap_or_else(|| self.out_dir.join(default))
    }

    fn report_or(&self, default: &str) -> PathBuf {
        self.paths
            .report
            .clone()
            .unwrap_or_else(|| self.out_dir.join(default))
    }
}

// Command line --------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "concept-kernel",
    version,
    about = "Concept-space ambiguity, entropy and retrieval toolkit"
)]
struct Cli {
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct OutFlags {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate an activation file and write it back normalized.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[command(flatten)]
        o: OutFlags,
    },
    /// Embed `{id, text}` lines into an activation file.
    Embed {
        #[arg(long)]
        texts: Option<PathBuf>,
        #[command(flatten)]
        o: OutFlags,
    },
    /// Train a sparse autoencoder on a corpus.
    SaeTrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        n_concepts: Option<usize>,
        #[arg(long)]
        l1: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[command(flatten)]
        o: OutFlags,
    },
    /// Check an externally produced parameter file and re-export it.
    SaeImport {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        o: OutFlags,
    },
    /// Kernel values and distances for listed id pairs.
    Kernel {
        #[arg(long)]
        sae: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        n_steps: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        mask_from: Option<Vec<String>>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum)]
        metric: Option<Metric>,
        #[command(flatten)]
        o: OutFlags,
    },
    /// Build a concept mask from example sentences.
    Mask {
        #[arg(long)]
        sae: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        examples: Option<Vec<String>>,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        o: OutFlags,
    },
    /// Fit the ambiguity threshold on labeled triplets.
    AmbiguityCalibrate {
        #[command(flatten)]
        k: AmbiguityFlags,
        #[command(flatten)]
        o: OutFlags,
    },
    /// Classify triplets with a calibrated model.
    AmbiguityClassify {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        k: AmbiguityFlags,
        #[command(flatten)]
        o: OutFlags,
    },
    /// Semantic entropy of a sample file.
    Entropy {
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        base: Option<f64>,
        #[command(flatten)]
        o: OutFlags,
    },
    /// Attach concept sets to an API corpus.
    RetrievalIndex {
        #[arg(long)]
        sae: Option<PathBuf>,
        #[arg(long, alias = "corpus")]
        api_corpus: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        o: OutFlags,
    },
    /// Train missing-concept predictors.
    RetrievalTrain {
        #[arg(long)]
        sae: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[command(flatten)]
        o: OutFlags,
    },
    /// Rank API documents for questions.
    RetrievalRank {
        #[command(flatten)]
        r: RankFlags,
        #[arg(long)]
        question: Option<String>,
        #[arg(long)]
        questions: Option<PathBuf>,
        #[command(flatten)]
        o: OutFlags,
    },
    /// Top-1 accuracy per rho, with and without predicted concepts.
    RetrievalEval {
        #[command(flatten)]
        r: RankFlags,
        #[arg(long)]
        test: Option<PathBuf>,
        #[command(flatten)]
        o: OutFlags,
    },
    /// Write the synthetic benchmark datasets and, by default, run them.
    SynthBench {
        /// Only write the datasets.
        #[arg(long)]
        no_run: bool,
        #[command(flatten)]
        o: OutFlags,
    },
}

#[derive(Debug, Args, Default)]
struct AmbiguityFlags {
    #[arg(long)]
    sae: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    triplets: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    n_steps: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct RankFlags {
    #[arg(long)]
    sae: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    predictors: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    rho: Option<Vec<f64>>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    no_predict: bool,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

impl OutFlags {
    fn apply(self, c: &mut RunConfig) {
        set_path(&mut c.paths.out, self.out);
        set_path(&mut c.paths.report, self.report);
    }
}

impl AmbiguityFlags {
    fn apply(self, c: &mut RunConfig) {
        set_path(&mut c.paths.sae, self.sae);
        set_path(&mut c.paths.corpus, self.corpus);
        set_path(&mut c.paths.triplets, self.triplets);
        set_path(&mut c.paths.mask, self.mask);
        set(&mut c.kernel.n_steps, self.n_steps);
    }
}

impl RankFlags {
    fn apply(self, c: &mut RunConfig) {
        set_path(&mut c.paths.sae, self.sae);
        set_path(&mut c.paths.index, self.index);
        set_path(&mut c.paths.predictors, self.predictors);
        if let Some(r) = self.rho {
            if let Some(&first) = r.first() {
                c.retrieval.rank.rho = first;
            }
            c.retrieval.rhos = r;
        }
        set(&mut c.retrieval.rank.top_k, self.top_k);
        if self.no_predict {
            c.retrieval.rank.predict = false;
        }
    }
}

/// Layers the subcommand's flags over `c`. Returns the canonical
/// subcommand name.
fn apply_flags(cmd: Command, c: &mut RunConfig) -> Result<(&'static str, bool)> {
    let mut no_run = false;
    let name = match cmd {
        Command::Ingest { input, dim, o } => {
            set_path(&mut c.paths.input, input);
            if dim.is_some() {
                c.dim = dim;
            }
            o.apply(c);
            "ingest"
        }
        Command::Embed { texts, o } => {
            set_path(&mut c.paths.texts, texts);
            o.apply(c);
            "embed"
        }
        Command::SaeTrain {
            corpus,
            n_concepts,
            l1,
            epochs,
            lr,
            batch_size,
            o,
        } => {
            set_path(&mut c.paths.corpus, corpus);
            set(&mut c.sae.n_concepts, n_concepts);
            set(&mut c.sae.train.l1_weight, l1);
            set(&mut c.sae.train.epochs, epochs);
            set(&mut c.sae.train.learning_rate, lr);
            set(&mut c.sae.train.batch_size, batch_size);
            o.apply(c);
            "sae-train"
        }
        Command::SaeImport { params, corpus, o } => {
            set_path(&mut c.paths.sae, params);
            set_path(&mut c.paths.corpus, corpus);
            o.apply(c);
            "sae-import"
        }
        Command::Kernel {
            sae,
            corpus,
            pairs,
            n_steps,
            mask_from,
            threshold,
            metric,
            o,
        } => {
            set_path(&mut c.paths.sae, sae);
            set_path(&mut c.paths.corpus, corpus);
            set_path(&mut c.paths.pairs, pairs);
            set(&mut c.kernel.n_steps, n_steps);
            set(&mut c.kernel.mask_from, mask_from);
            set(&mut c.kernel.activation_threshold, threshold);
            set(&mut c.kernel.metric, metric);
            o.apply(c);
            "kernel"
        }
        Command::Mask {
            sae,
            corpus,
            examples,
            threshold,
            o,
        } => {
            set_path(&mut c.paths.sae, sae);
            set_path(&mut c.paths.corpus, corpus);
            set(&mut c.kernel.mask_from, examples);
            set(&mut c.kernel.activation_threshold, threshold);
            o.apply(c);
            "mask"
        }
        Command::AmbiguityCalibrate { k, o } => {
            k.apply(c);
            o.apply(c);
            "ambiguity-calibrate"
        }
        Command::AmbiguityClassify { model, k, o } => {
            set_path(&mut c.paths.model, model);
            k.apply(c);
            o.apply(c);
            "ambiguity-classify"
        }
        Command::Entropy {
            samples,
            threshold,
            mode,
            base,
            o,
        } => {
            set_path(&mut c.paths.samples, samples);
            set(&mut c.entropy.threshold, threshold);
            if let Some(m) = mode {
                c.entropy.mode = match m.as_str() {
                    "counts" => MassMode::Counts,
                    "weighted" => MassMode::Weighted,
                    other => {
                        return Err(field_err(
                            "entropy.mode",
                            format!("`{other}` is not counts or weighted"),
                        ))
                    }
                };
            }
            set(&mut c.entropy.base, base);
            o.apply(c);
            "entropy"
        }
        Command::RetrievalIndex {
            sae,
            api_corpus,
            threshold,
            o,
        } => {
            set_path(&mut c.paths.sae, sae);
            set_path(&mut c.paths.api_corpus, api_corpus);
            set(&mut c.retrieval.activation_threshold, threshold);
            o.apply(c);
            "retrieval-index"
        }
        Command::RetrievalTrain {
            sae,
            index,
            train,
            rounds,
            eta,
            o,
        } => {
            set_path(&mut c.paths.sae, sae);
            set_path(&mut c.paths.index, index);
            set_path(&mut c.paths.train, train);
            set(&mut c.retrieval.boost.rounds, rounds);
            set(&mut c.retrieval.boost.eta, eta);
            o.apply(c);
            "retrieval-train"
        }
        Command::RetrievalRank {
            r,
            question,
            questions,
            o,
        } => {
            r.apply(c);
            if question.is_some() {
                c.retrieval.question = question;
            }
            set_path(&mut c.paths.questions, questions);
            o.apply(c);
            "retrieval-rank"
        }
        Command::RetrievalEval { r, test, o } => {
            r.apply(c);
            set_path(&mut c.paths.test, test);
            o.apply(c);
            "retrieval-eval"
        }
        Command::SynthBench { no_run: nr, o } => {
            no_run = nr;
            o.apply(c);
            "synth-bench"
        }
    };
    Ok((name, no_run))
}

// Errors --------------------------------------------------------------------

/// A failed invocation: a short code, the process exit status and a
/// message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: &'static str,
    pub exit: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let line = serde_json::json!({ "error": self.code, "message": self.message });
        write!(f, "{line}")
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => CliError {
                code: "config",
                exit: 2,
                message: e.to_string(),
            },
            other => CliError {
                code: "runtime",
                exit: 1,
                message: other.to_string(),
            },
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: "usage",
        exit: 2,
        message: message.into(),
    }
}

// Argument handling -----------------------------------------------------------

/// Joins `sae train`-style pairs into one subcommand word and rejects
/// unknown subcommands before clap sees them.
fn normalize_args(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, CliError> {
    let mut args = args;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy().into_owned();
        if GLOBAL_VALUE_FLAGS.contains(&a.as_str()) {
            i += 2;
            continue;
        }
        if a.starts_with('-') {
            i += 1;
            continue;
        }
        if GROUPS.contains(&a.as_str()) {
            if let Some(next) = args.get(i + 1).map(|s| s.to_string_lossy().into_owned()) {
                if !next.starts_with('-') {
                    args[i] = format!("{a}-{next}").into();
                    args.remove(i + 1);
                }
            }
        }
        let word = args[i].to_string_lossy().into_owned();
        if word != "help" && !SUBCOMMANDS.contains(&word.as_str()) {
            return Err(CliError {
                code: "unknown_subcommand",
                exit: 2,
                message: format!("unknown subcommand `{word}`"),
            });
        }
        break;
    }
    Ok(args)
}

/// What a successful run produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub subcommand: &'static str,
    pub written: Vec<PathBuf>,
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn execute<I, T>(args: I) -> std::result::Result<RunOutcome, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = normalize_args(args.into_iter().map(Into::into).collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(RunOutcome {
                    subcommand: "help",
                    written: Vec::new(),
                });
            }
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ")
                .to_string();
            return Err(usage(first));
        }
    };
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.out_dir, cli.out_dir);
    let (name, no_run) = apply_flags(cli.command, &mut cfg)?;
    if no_run {
        cfg.bench.run = false;
    }
    cfg.resolve_seeds();
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let written = dispatch(name, &cfg)?;
    Ok(RunOutcome {
        subcommand: name,
        written,
    })
}

/// Runs `args` and returns the process exit status, printing any error as
/// a single JSON line on stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    match execute(args) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit
        }
    }
}

// Reports ---------------------------------------------------------------------

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    config: &'a RunConfig,
    result: T,
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn report<T: Serialize>(cfg: &RunConfig, name: &'static str, path: &Path, result: T) -> Result<()> {
    write_json(
        path,
        &Envelope {
            tool: TOOL,
            version: VERSION,
            subcommand: name,
            config: cfg,
            result,
        },
    )
}

fn dispatch(name: &'static str, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    match name {
        "ingest" => cmd_ingest(cfg),
        "embed" => cmd_embed(cfg),
        "sae-train" => cmd_sae_train(cfg),
        "sae-import" => cmd_sae_import(cfg),
        "kernel" => cmd_kernel(cfg),
        "mask" => cmd_mask(cfg),
        "ambiguity-calibrate" => cmd_calibrate(cfg),
        "ambiguity-classify" => cmd_classify(cfg),
        "entropy" => cmd_entropy(cfg),
        "retrieval-index" => cmd_index(cfg),
        "retrieval-train" => cmd_retrieval_train(cfg),
        "retrieval-rank" => cmd_rank(cfg),
        "retrieval-eval" => cmd_retrieval_eval(cfg),
        "synth-bench" => cmd_synth_bench(cfg),
        other => Err(Error::invalid(format!("unhandled subcommand {other}"))),
    }
}

// Subcommands -----------------------------------------------------------------

#[derive(Serialize)]
struct CorpusSummary {
    records: usize,
    dim: usize,
    with_token_vectors: usize,
    output: PathBuf,
}

fn summarize(corpus: &ActivationCorpus, output: &Path) -> CorpusSummary {
    CorpusSummary {
        records: corpus.len(),
        dim: corpus.dim(),
        with_token_vectors: corpus
            .records()
            .iter()
            .filter(|r| r.token_vectors().is_some())
            .count(),
        output: output.to_path_buf(),
    }
}

fn cmd_ingest(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let input = cfg.require("input", &cfg.paths.input)?;
    let corpus = ActivationCorpus::ingest(input, cfg.dim)?;
    let out = cfg.out_or("corpus.jsonl");
    corpus.persist(&out)?;
    let rep = cfg.report_or("ingest.json");
    report(cfg, "ingest", &rep, summarize(&corpus, &out))?;
    Ok(vec![out, rep])
}

#[derive(Deserialize)]
struct TextLine {
    id: String,
    text: String,
}

fn read_text_lines(path: &Path) -> Result<Vec<TextLine>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: k + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

fn cmd_embed(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let texts = read_text_lines(cfg.require("texts", &cfg.paths.texts)?)?;
    let records = match &cfg.embedder {
        EmbedderConfig::Toy(t) => texts
            .iter()
            .map(|l| SentenceRecord::embed(l.id.clone(), &l.text, t))
            .collect::<Result<Vec<_>>>()?,
        EmbedderConfig::Lookup { .. } => {
            let e = cfg.embedder()?;
            texts
                .iter()
                .map(|l| {
                    SentenceRecord::new(
                        l.id.clone(),
                        l.text.clone(),
                        tokenize(&l.text),
                        e.embed(&l.text)?,
                        None,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let corpus = ActivationCorpus::from_records(records)?;
    let out = cfg.out_or("corpus.jsonl");
    corpus.persist(&out)?;
    let rep = cfg.report_or("embed.json");
    report(cfg, "embed", &rep, summarize(&corpus, &out))?;
    Ok(vec![out, rep])
}

#[derive(Serialize)]
struct TrainSummary {
    n_concepts: usize,
    dim: usize,
    snapshots: usize,
    initial_loss: f64,
    final_loss: f64,
    epoch_losses: Vec<f64>,
}

fn cmd_sae_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let corpus = ActivationCorpus::load(cfg.require("corpus", &cfg.paths.corpus)?)?;
    let outcome = train(&corpus, cfg.sae.n_concepts, &cfg.sae.train)?;
    let out = cfg.out_or("sae.saek");
    export_with_path(
        &outcome.params,
        Some(&outcome.path),
        &out,
        cfg.sae.precision,
    )?;
    let rep = cfg.report_or("sae-train.json");
    let summary = TrainSummary {
        n_concepts: outcome.params.n_concepts,
        dim: outcome.params.dim,
        snapshots: outcome.path.len(),
        initial_loss: outcome.initial_loss,
        final_loss: *outcome.epoch_losses.last().unwrap_or(&outcome.initial_loss),
        epoch_losses: outcome.epoch_losses,
    };
    report(cfg, "sae-train", &rep, summary)?;
    Ok(vec![out, rep])
}

#[derive(Serialize)]
struct ImportSummary {
    n_concepts: usize,
    dim: usize,
    snapshots: usize,
    path_source: Option<crate::path_kernel::PathSource>,
    max_dictionary_norm_error: f64,
    corpus_reconstruction_mse: Option<f64>,
}

fn cmd_sae_import(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (params, states) = import_with_path(cfg.require("sae", &cfg.paths.sae)?)?;
    let norm_err = (0..params.n_concepts)
        .map(|i| (crate::linalg::norm(params.decoder_row(i)) - 1.0).abs())
        .fold(0.0, f64::max);
    let mse = match &cfg.paths.corpus {
        Some(p) => {
            let corpus = ActivationCorpus::load(p)?;
            if corpus.dim() != params.dim {
                return Err(Error::DimensionMismatch {
                    expected: params.dim,
                    found: corpus.dim(),
                });
            }
            let mut total = 0.0;
            for r in corpus.records() {
                let rec = params.reconstruct(r.vector())?;
                total += rec
                    .iter()
                    .zip(r.vector())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    / params.dim as f64;
            }
            Some(total / corpus.len() as f64)
        }
        None => None,
    };
    let out = cfg.out_or("sae.saek");
    export_with_path(&params, states.as_ref(), &out, cfg.sae.precision)?;
    let rep = cfg.report_or("sae-import.json");
    let summary = ImportSummary {
        n_concepts: params.n_concepts,
        dim: params.dim,
        snapshots: states.as_ref().map_or(0, PathStates::len),
        path_source: states.as_ref().map(PathStates::source),
        max_dictionary_norm_error: norm_err,
        corpus_reconstruction_mse: mse,
    };
    report(cfg, "sae-import", &rep, summary)?;
    Ok(vec![out, rep])
}

/// Loads the parameter file and the path states the kernel integrates over.
fn load_path(cfg: &RunConfig, path: &Path) -> Result<PathStates> {
    let (params, stored) = import_with_path(path)?;
    match stored {
        Some(s) if cfg.kernel.recorded_path => Ok(s),
        None if cfg.kernel.recorded_path => Err(field_err(
            "kernel.recorded_path",
            "the parameter file stores no path snapshots",
        )),
        _ => interpolate(&params, cfg.kernel.n_steps),
    }
}

fn mask_for(
    cfg: &RunConfig,
    states: &PathStates,
    corpus: &ActivationCorpus,
) -> Result<ConceptMask> {
    if let Some(p) = &cfg.paths.mask {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let mask: ConceptMask = serde_json::from_str(&text)?;
        if mask.n_concepts != states.n_concepts() {
            return Err(Error::DimensionMismatch {
                expected: states.n_concepts(),
                found: mask.n_concepts,
            });
        }
        return ConceptMask::new(mask.n_concepts, mask.valid);
    }
    if cfg.kernel.mask_from.is_empty() {
        return Ok(ConceptMask::all(states.n_concepts()));
    }
    let examples = cfg
        .kernel
        .mask_from
        .iter()
        .map(|id| corpus.require(id))
        .collect::<Result<Vec<_>>>()?;
    build_mask(
        &examples,
        states.final_params(),
        cfg.kernel.activation_threshold,
    )
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                out.push((a.to_string(), b.to_string()))
            }
            _ => {
                return Err(Error::MalformedLine {
                    line: k + 1,
                    reason: "expected `id_a,id_b`".into(),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct KernelSummary {
    pairs: usize,
    mask_size: usize,
    snapshots: usize,
    metric: Metric,
    mean: Option<f64>,
    min: Option<f64>,
    max: Option<f64>,
    csv: PathBuf,
}

fn cmd_kernel(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let states = load_path(cfg, cfg.require("sae", &cfg.paths.sae)?)?;
    let corpus = ActivationCorpus::load(cfg.require("corpus", &cfg.paths.corpus)?)?;
    let pairs = read_pairs(cfg.require("pairs", &cfg.paths.pairs)?)?;
    let mask = mask_for(cfg, &states, &corpus)?;
    let kernel = PathKernel::new(&states, &mask, cfg.kernel.quadrature)?;
    let mut csv = String::from("id_a,id_b,kernel,d1,d2\n");
    let mut chosen = Vec::with_capacity(pairs.len());
    for (a, b) in &pairs {
        let fa = kernel.features(corpus.require(a)?.vector())?;
        let fb = kernel.features(corpus.require(b)?.vector())?;
        let (kab, kaa, kbb) = (
            kernel.eval(&fa, &fb),
            kernel.eval(&fa, &fa),
            kernel.eval(&fb, &fb),
        );
        let d1 = crate::path_kernel::d1_from(kab, kaa, kbb)?;
        let d2 = crate::path_kernel::d2_from(kab, kaa, kbb);
        csv.push_str(&format!("{a},{b},{kab},{d1},{d2}\n"));
        chosen.push(match cfg.kernel.metric {
            Metric::D1 => d1,
            Metric::D2 => d2,
        });
    }
    let out = cfg.out_or("kernel.csv");
    write_text(&out, &csv)?;
    let rep = cfg.report_or("kernel.json");
    let summary = KernelSummary {
        pairs: pairs.len(),
        mask_size: mask.valid.len(),
        snapshots: states.len(),
        metric: cfg.kernel.metric,
        mean: (!chosen.is_empty()).then(|| chosen.iter().sum::<f64>() / chosen.len() as f64),
        min: chosen.iter().copied().reduce(f64::min),
        max: chosen.iter().copied().reduce(f64::max),
        csv: out.clone(),
    };
    report(cfg, "kernel", &rep, summary)?;
    Ok(vec![out, rep])
}

fn cmd_mask(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let states = load_path(cfg, cfg.require("sae", &cfg.paths.sae)?)?;
    let corpus = ActivationCorpus::load(cfg.require("corpus", &cfg.paths.corpus)?)?;
    if cfg.kernel.mask_from.is_empty() {
        return Err(field_err(
            "kernel.mask_from",
            "needs at least one example id",
        ));
    }
    let mask = mask_for(cfg, &states, &corpus)?;
    let out = cfg.out_or("mask.json");
    write_json(&out, &mask)?;
    let rep = cfg.report_or("mask.json.report.json");
    report(cfg, "mask", &rep, &mask)?;
    Ok(vec![out, rep])
}

/// What `ambiguity-classify` needs to reproduce calibration's distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityModelFile {
    pub threshold_model: ThresholdModel,
    pub kernel: KernelSection,
    pub mask: ConceptMask,
}

#[derive(Serialize)]
struct ScoredTriplet {
    q: String,
    i1: String,
    i2: String,
    label: Option<Label>,
    predicted: Option<Label>,
    stats: TripletStats,
}

const KDE_POINTS: usize = 200;

#[derive(Serialize)]
struct KdeSample {
    x: f64,
    ambiguous: f64,
    unambiguous: f64,
}

fn kde_samples(model: &ThresholdModel) -> Vec<KdeSample> {
    model
        .density_curves(KDE_POINTS)
        .into_iter()
        .map(|[x, a, u]| KdeSample {
            x,
            ambiguous: a,
            unambiguous: u,
        })
        .collect()
}

#[derive(Serialize)]
struct CalibrationSummary {
    threshold: f64,
    fallback_midpoint: bool,
    class_means: [f64; 2],
    bandwidths: [f64; 2],
    histogram_edges: Vec<f64>,
    histogram_counts: [Vec<usize>; 2],
    kde_samples: Vec<KdeSample>,
    calibration_fit: EvalReport,
    skipped: Vec<String>,
    triplets: Vec<ScoredTriplet>,
}

/// Scores every triplet; those touching a zero self-kernel are skipped by
/// their question id.
fn score_triplets(
    cfg: &RunConfig,
    states: &PathStates,
    mask: &ConceptMask,
    corpus: &ActivationCorpus,
) -> Result<(Vec<(crate::ambiguity::Triplet, TripletStats)>, Vec<String>)> {
    let triplets = read_triplets(cfg.require("triplets", &cfg.paths.triplets)?)?;
    let kernel = PathKernel::new(states, mask, cfg.kernel.quadrature)?;
    let mut scored = Vec::with_capacity(triplets.len());
    let mut skipped = Vec::new();
    for t in triplets {
        match triplet_stats(&t, corpus, &kernel) {
            Ok(s) => scored.push((t, s)),
            Err(Error::ZeroSelfKernel) => skipped.push(t.q.clone()),
            Err(e) => return Err(e),
        }
    }
    Ok((scored, skipped))
}

fn cmd_calibrate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let states = load_path(cfg, cfg.require("sae", &cfg.paths.sae)?)?;
    let corpus = ActivationCorpus::load(cfg.require("corpus", &cfg.paths.corpus)?)?;
    let mask = mask_for(cfg, &states, &corpus)?;
    let (scored, skipped) = score_triplets(cfg, &states, &mask, &corpus)?;
    let mut labeled = Vec::with_capacity(scored.len());
    for (t, s) in &scored {
        let l = t
            .label
            .ok_or_else(|| Error::invalid(format!("triplet `{}` has no label", t.q)))?;
        labeled.push((s.mean_d1, l));
    }
    let model = calibrate(&labeled)?;
    let fit = evaluate(
        &labeled
            .iter()
            .map(|&(score, truth)| Prediction {
                score,
                predicted: classify(score, &model),
                truth,
            })
            .collect::<Vec<_>>(),
    )?;
    let file = AmbiguityModelFile {
        threshold_model: model.clone(),
        kernel: cfg.kernel.clone(),
        mask,
    };
    let out = cfg.out_or("model.json");
    write_json(&out, &file)?;
    let summary = CalibrationSummary {
        threshold: model.threshold,
        fallback_midpoint: model.fallback_midpoint,
        class_means: model.class_means,
        bandwidths: model.bandwidths(),
        histogram_edges: model.bins.edges.clone(),
        histogram_counts: model.counts.clone(),
        kde_samples: kde_samples(&model),
        calibration_fit: fit,
        skipped,
        triplets: scored
            .into_iter()
            .map(|(t, s)| ScoredTriplet {
                predicted: Some(classify(s.mean_d1, &model)),
                q: t.q,
                i1: t.i1,
                i2: t.i2,
                label: t.label,
                stats: s,
            })
            .collect(),
    };
    let rep = cfg.report_or("ambiguity-calibrate.json");
    report(cfg, "ambiguity-calibrate", &rep, summary)?;
    Ok(vec![out, rep])
}

#[derive(Serialize)]
struct ClassifySummary {
    threshold: f64,
    accuracy: Option<f64>,
    overlap_fraction: Option<f64>,
    evaluation: Option<EvalReport>,
    kde_samples: Vec<KdeSample>,
    skipped: Vec<String>,
    triplets: Vec<ScoredTriplet>,
}

fn cmd_classify(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model_path = cfg.require("model", &cfg.paths.model)?;
    let text = fs::read_to_string(model_path).map_err(|e| Error::io(model_path, e))?;
    let file: AmbiguityModelFile = serde_json::from_str(&text)?;
    let mut local = cfg.clone();
    local.kernel = file.kernel.clone();
    let states = load_path(&local, cfg.require("sae", &cfg.paths.sae)?)?;
    let corpus = ActivationCorpus::load(cfg.require("corpus", &cfg.paths.corpus)?)?;
    if file.mask.n_concepts != states.n_concepts() {
        return Err(Error::DimensionMismatch {
            expected: states.n_concepts(),
            found: file.mask.n_concepts,
        });
    }
    let (scored, skipped) = score_triplets(&local, &states, &file.mask, &corpus)?;
    let model = &file.threshold_model;
    let triplets: Vec<ScoredTriplet> = scored
        .into_iter()
        .map(|(t, s)| ScoredTriplet {
            predicted: Some(classify(s.mean_d1, model)),
            q: t.q,
            i1: t.i1,
            i2: t.i2,
            label: t.label,
            stats: s,
        })
        .collect();
    let evaluation = if !triplets.is_empty() && triplets.iter().all(|t| t.label.is_some()) {
        let preds: Vec<Prediction> = triplets
            .iter()
            .map(|t| Prediction {
                score: t.stats.mean_d1,
                predicted: t.predicted.unwrap_or(Label::Unambiguous),
                truth: t.label.unwrap_or(Label::Unambiguous),
            })
            .collect();
        Some(evaluate(&preds)?)
    } else {
        None
    };
    let summary = ClassifySummary {
        threshold: model.threshold,
        accuracy: evaluation.as_ref().map(|e| e.accuracy),
        overlap_fraction: evaluation.as_ref().map(|e| e.overlap_fraction),
        evaluation,
        kde_samples: kde_samples(model),
        skipped,
        triplets,
    };
    let rep = cfg.report_or("ambiguity-classify.json");
    report(cfg, "ambiguity-classify", &rep, summary)?;
    Ok(vec![rep])
}

#[derive(Serialize)]
struct EntropySummary {
    entropy: f64,
    clusters: usize,
    masses: Vec<f64>,
    sizes: Vec<usize>,
    labels: Vec<usize>,
}

fn cmd_entropy(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let samples = SampleSet::read_jsonl(cfg.require("samples", &cfg.paths.samples)?)?;
    let se = semantic_entropy(
        &samples,
        cfg.entropy.threshold,
        cfg.entropy.mode,
        cfg.entropy.base,
    )?;
    let summary = EntropySummary {
        entropy: se.entropy,
        clusters: se.clustering.k,
        sizes: se.clustering.sizes(),
        masses: se.masses,
        labels: se.clustering.labels,
    };
    let rep = cfg.report_or("entropy.json");
    report(cfg, "entropy", &rep, summary)?;
    Ok(vec![rep])
}

fn load_sae(cfg: &RunConfig) -> Result<crate::sae::SaeParams> {
    crate::sae::import_params(cfg.require("sae", &cfg.paths.sae)?)
}

#[derive(Serialize)]
struct IndexSummary {
    docs: usize,
    mean_concepts: f64,
    output: PathBuf,
}

fn cmd_index(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let sae = load_sae(cfg)?;
    let docs = read_api_docs(cfg.require("api_corpus", &cfg.paths.api_corpus)?)?;
    let embedder = cfg.embedder()?;
    let index = index_corpus(
        docs,
        &sae,
        embedder.as_ref(),
        cfg.retrieval.activation_threshold,
    )?;
    let out = cfg.out_or("index.json");
    index.save(&out)?;
    let rep = cfg.report_or("retrieval-index.json");
    let summary = IndexSummary {
        docs: index.len(),
        mean_concepts: index.docs.iter().map(|d| d.concepts.len()).sum::<usize>() as f64
            / index.len() as f64,
        output: out.clone(),
    };
    report(cfg, "retrieval-index", &rep, summary)?;
    Ok(vec![out, rep])
}

#[derive(Serialize)]
struct PredictorSummary {
    predictors: usize,
    no_targets: bool,
    targets: Vec<usize>,
    final_losses: Vec<f64>,
}

fn cmd_retrieval_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let sae = load_sae(cfg)?;
    let index = IndexedCorpus::load(cfg.require("index", &cfg.paths.index)?)?;
    let lines = read_examples(cfg.require("train", &cfg.paths.train)?)?;
    let embedder = cfg.embedder()?;
    let train_set = embed_examples(&lines, embedder.as_ref())?;
    let set = train_predictors(&train_set, &index, &sae, &cfg.retrieval.boost)?;
    let out = cfg.out_or("predictors.json");
    set.save(&out)?;
    let summary = PredictorSummary {
        predictors: set.predictors.len(),
        no_targets: set.no_targets,
        targets: set.predictors.iter().map(|p| p.target_concept).collect(),
        final_losses: set
            .predictors
            .iter()
            .map(|p| p.loss_history.last().copied().unwrap_or(f64::NAN))
            .collect(),
    };
    let rep = cfg.report_or("retrieval-train.json");
    report(cfg, "retrieval-train", &rep, summary)?;
    Ok(vec![out, rep])
}

fn load_predictors(cfg: &RunConfig, index: &IndexedCorpus) -> Result<PredictorSet> {
    match &cfg.paths.predictors {
        Some(p) => PredictorSet::load(p),
        None if !cfg.retrieval.rank.predict => Ok(PredictorSet::empty(index.threshold)),
        None => Err(field_err(
            "paths.predictors",
            "required unless prediction is disabled",
        )),
    }
}

#[derive(Serialize)]
struct RankedQuestion {
    question: String,
    ranked: Vec<Ranked>,
}

fn cmd_rank(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let sae = load_sae(cfg)?;
    let index = IndexedCorpus::load(cfg.require("index", &cfg.paths.index)?)?;
    let predictors = load_predictors(cfg, &index)?;
    let mut questions: Vec<String> = cfg.retrieval.question.iter().cloned().collect();
    if let Some(p) = &cfg.paths.questions {
        questions.extend(read_examples(p)?.into_iter().map(|l| l.question_text));
    }
    if questions.is_empty() {
        return Err(field_err(
            "retrieval.question",
            "give a question or a questions file",
        ));
    }
    let embedder = cfg.embedder()?;
    let results = questions
        .into_iter()
        .map(|q| {
            let v = embedder.embed(&q)?;
            Ok(RankedQuestion {
                ranked: rank(&v, &index, &sae, &predictors, &cfg.retrieval.rank)?,
                question: q,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rep = cfg.report_or("retrieval-rank.json");
    report(cfg, "retrieval-rank", &rep, results)?;
    Ok(vec![rep])
}

fn cmd_retrieval_eval(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let sae = load_sae(cfg)?;
    let index = IndexedCorpus::load(cfg.require("index", &cfg.paths.index)?)?;
    let predictors = load_predictors(cfg, &index)?;
    let lines = read_examples(cfg.require("test", &cfg.paths.test)?)?;
    let embedder = cfg.embedder()?;
    let test = embed_examples(&lines, embedder.as_ref())?;
    let rep_data: RetrievalReport = evaluate_retrieval(
        &test,
        &index,
        &sae,
        &predictors,
        &cfg.retrieval.rhos,
        &cfg.retrieval.rank,
    )?;
    let csv = cfg.out_or("retrieval-eval.csv");
    write_text(&csv, &rep_data.to_csv())?;
    let rep = cfg.report_or("retrieval-eval.json");
    report(cfg, "retrieval-eval", &rep, &rep_data)?;
    Ok(vec![csv, rep])
}

#[derive(Serialize)]
struct EntropyOracleFile<'a> {
    sequence_probs: &'a [(String, f64)],
    partition: &'a [Vec<String>],
}

#[derive(Serialize)]
struct BenchResults {
    datasets: Vec<PathBuf>,
    ambiguity: Option<AmbiguityRunReport>,
    entropy: Option<EntropyRunReport>,
    clamp: Option<ClampRunReport>,
    retrieval: Option<RetrievalRunReport>,
}

fn cmd_synth_bench(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg
        .paths
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("bench"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();
    let b = &cfg.bench;

    let amb = ambiguity_bench(&b.ambiguity.bench)?;
    let p = dir.join("ambiguity_corpus.jsonl");
    amb.corpus.persist(&p)?;
    files.push(p);
    let half = amb.triplets.len() / 2;
    for (name, ts) in [
        ("ambiguity_triplets.jsonl", &amb.triplets[..]),
        ("ambiguity_calibration.jsonl", &amb.triplets[..half]),
        ("ambiguity_test.jsonl", &amb.triplets[half..]),
    ] {
        let p = dir.join(name);
        write_triplets(ts, &p)?;
        files.push(p);
    }

    let ent = entropy_bench(&b.entropy.bench)?;
    let samples = ent.pool.sample(
        b.entropy.samples,
        sub_seed(b.entropy.bench.seed, "entropy-draws"),
        &ent.embedder,
    )?;
    let p = dir.join("entropy_samples.jsonl");
    samples.write_jsonl(&p)?;
    files.push(p);
    let p = dir.join("entropy_oracle.json");
    write_json(
        &p,
        &EntropyOracleFile {
            sequence_probs: &ent.sequence_probs,
            partition: &ent.partition,
        },
    )?;
    files.push(p);

    let ret = retrieval_bench(&b.retrieval.bench)?;
    let p = dir.join("api_corpus.jsonl");
    write_api_docs(&ret.docs, &p)?;
    files.push(p);
    for (name, lines) in [
        ("retrieval_train.jsonl", &ret.train),
        ("retrieval_test.jsonl", &ret.test),
    ] {
        let p = dir.join(name);
        write_examples(lines, &p)?;
        files.push(p);
    }
    let p = dir.join("retrieval_vectors.jsonl");
    ret.embedder.save(&p)?;
    files.push(p);
    let p = dir.join("retrieval_sae.saek");
    export_params(&ret.sae, &p)?;
    files.push(p);

    let results = if b.run {
        BenchResults {
            datasets: files.clone(),
            ambiguity: Some(run_ambiguity(&b.ambiguity)?),
            entropy: Some(run_entropy(&b.entropy)?),
            clamp: Some(run_clamp(&b.clamp)?),
            retrieval: Some(run_retrieval(&b.retrieval)?),
        }
    } else {
        BenchResults {
            datasets: files.clone(),
            ambiguity: None,
            entropy: None,
            clamp: None,
            retrieval: None,
        }
    };
    let rep = cfg.report_or("synth-bench.json");
    report(cfg, "synth-bench", &rep, results)?;
    files.push(rep);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &[&str]) -> Vec<OsString> {
        std::iter::once("concept-kernel")
            .chain(s.iter().copied())
            .map(OsString::from)
            .collect()
    }

    #[test]
    fn grouped_words_join() {
        let a = normalize_args(args(&["--seed", "3", "sae", "train", "--epochs", "2"])).unwrap();
        assert_eq!(a[3], OsString::from("sae-train"));
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn unknown_subcommand_is_named() {
        let e = normalize_args(args(&["frobnicate"])).unwrap_err();
        assert_eq!(e.exit, 2);
        assert!(e.message.contains("frobnicate"));
        assert_eq!(e.to_string().lines().count(), 1);
    }

    #[test]
    fn default_config_validates() {
        let mut c = RunConfig::default();
        c.resolve_seeds();
        c.validate().unwrap();
    }

    #[test]
    fn validation_names_nested_field() {
        let mut c = RunConfig::default();
        c.sae.train.learning_rate = -1.0;
        match c.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "sae.train.learning_rate"),
            e => panic!("{e}"),
        }
        let mut c = RunConfig::default();
        c.kernel.n_steps = 1;
        match c.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "kernel.n_steps"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = RunConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig =
            serde_json::from_str(r#"{"seed": 3, "embedder": {"kind": "toy", "dim": 16}}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(
            partial.embedder,
            EmbedderConfig::Toy(ToyEmbedderConfig {
                dim: 16,
                ..Default::default()
            })
        );
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 3}"#).is_err());
    }
}
