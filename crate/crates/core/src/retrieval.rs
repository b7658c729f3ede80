//! Concept-based API retrieval.
//!
//! Questions and API documents are reduced to sets of active concepts. For
//! each concept that tends to be missing from questions but present in the
//! matching documents, a boosted-stump classifier predicts from the question's
//! activations whether it should be added. Documents are then ranked by set
//! similarity against the augmented question set.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{tokenize, Embedder, SentenceRecord};
use crate::error::{Error, Result};
use crate::sae::{active_concepts, ConceptActivations, ConceptSet, SaeParams};

/// Probabilities are clipped to `[EPS, 1 - EPS]` before taking log-odds.
const EPS: f64 = 1e-6;
/// L2 penalty in the Newton leaf values.
const LEAF_L2: f64 = 1.0;
const MAX_BACKTRACK: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiDoc {
    pub id: String,
    pub domain: String,
    pub call_template: String,
    pub text: String,
    #[serde(default)]
    pub concepts: ConceptSet,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
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

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_api_docs(path: impl AsRef<Path>) -> Result<Vec<ApiDoc>> {
    read_jsonl(path.as_ref())
}

pub fn write_api_docs(docs: &[ApiDoc], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(docs, path.as_ref())
}

/// API documents with their concept sets filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedCorpus {
    pub threshold: f64,
    pub docs: Vec<ApiDoc>,
}

impl IndexedCorpus {
    pub fn get(&self, id: &str) -> Option<&ApiDoc> {
        self.docs.iter().find(|d| d.id == id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

pub fn index_corpus(
    docs: Vec<ApiDoc>,
    sae: &SaeParams,
    embedder: &(dyn Embedder + Sync),
    threshold: f64,
) -> Result<IndexedCorpus> {
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for (k, d) in docs.iter().enumerate() {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::DuplicateId {
                line: k + 1,
                id: d.id.clone(),
            });
        }
        if d.text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
    }
    let docs = docs
        .into_par_iter()
        .map(|mut d| {
            let f = sae.encode(&embedder.embed(&d.text)?)?;
            d.concepts = active_concepts(&f, threshold);
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IndexedCorpus { threshold, docs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalExample {
    pub question: SentenceRecord,
    pub gold_api: String,
    pub gold_domain: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleLine {
    pub question_text: String,
    pub gold_api: String,
    pub gold_domain: String,
}

impl RetrievalExample {
    pub fn embed(
        id: impl Into<String>,
        line: &ExampleLine,
        embedder: &dyn Embedder,
    ) -> Result<Self> {
        let v = embedder.embed(&line.question_text)?;
        Ok(Self {
            question: SentenceRecord::new(
                id,
                line.question_text.clone(),
                tokenize(&line.question_text),
                v,
                None,
            )?,
            gold_api: line.gold_api.clone(),
            gold_domain: line.gold_domain.clone(),
        })
    }
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<ExampleLine>> {
    read_jsonl(path.as_ref())
}

pub fn write_examples(lines: &[ExampleLine], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(lines, path.as_ref())
}

pub fn embed_examples(
    lines: &[ExampleLine],
    embedder: &dyn Embedder,
) -> Result<Vec<RetrievalExample>> {
    lines
        .iter()
        .enumerate()
        .map(|(k, l)| RetrievalExample::embed(format!("q{k}"), l, embedder))
        .collect()
}

/// How the predictor sees a question's activations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    #[default]
    Raw,
    /// 1 for active concepts, 0 otherwise.
    Binary,
}

/// One regression stump: `left` when `x[feature] <= split`, else `right`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub split: f64,
    pub left: f64,
    pub right: f64,
}

impl Stump {
    pub fn eval(&self, x: &[f64]) -> f64 {
        if x[self.feature] <= self.split {
            self.left
        } else {
            self.right
        }
    }
}

/// Logistic function, kept strictly inside (0, 1) for every finite input.
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Mean logistic loss of raw scores `f` against labels.
pub fn logistic_loss(f: &[f64], y: &[bool]) -> f64 {
    // log(1 + e^{-z}) with z = +-f, stable for large |f|
    let softplus = |z: f64| z.max(0.0) + (-z.abs()).exp().ln_1p();
    f.iter()
        .zip(y)
        .map(|(&fi, &yi)| if yi { softplus(-fi) } else { softplus(fi) })
        .sum::<f64>()
        / f.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedPredictor {
    pub target_concept: usize,
    pub bias: f64,
    pub eta: f64,
    pub stumps: Vec<Stump>,
    pub features: FeatureMode,
    /// Training loss before the first round and after each round.
    pub loss_history: Vec<f64>,
}

impl BoostedPredictor {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.bias + self.eta * self.stumps.iter().map(|s| s.eval(x)).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.score(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostConfig {
    pub rounds: usize,
    pub eta: f64,
    pub max_targets: usize,
    pub features: FeatureMode,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            eta: 0.1,
            max_targets: 256,
            features: FeatureMode::Raw,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config {
                field: "rounds".into(),
                reason: "must be >= 1".into(),
            });
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config {
                field: "eta".into(),
                reason: "must be finite and > 0".into(),
            });
        }
        if self.max_targets == 0 {
            return Err(Error::Config {
                field: "max_targets".into(),
                reason: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Fits `rounds` Newton stumps to the logistic loss. A round whose step
/// would raise the training loss has its leaves halved until it does not.
pub fn fit_boosted(
    x: &[Vec<f64>],
    y: &[bool],
    target_concept: usize,
    cfg: &BoostConfig,
) -> Result<BoostedPredictor> {
    cfg.validate()?;
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(Error::invalid(
            "boosting needs matching non-empty features and labels",
        ));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("feature rows differ in length"));
    }
    let pos = y.iter().filter(|&&v| v).count() as f64 / n as f64;
    let pos = pos.clamp(EPS, 1.0 - EPS);
    let bias = (pos / (1.0 - pos)).ln();

    let order: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[a][j].total_cmp(&x[b][j]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let mut f = vec![bias; n];
    let mut loss = logistic_loss(&f, y);
    let mut history = vec![loss];
    let mut stumps = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let (g, h): (Vec<f64>, Vec<f64>) = f
            .iter()
            .zip(y)
            .map(|(&fi, &yi)| {
                let p = sigmoid(fi);
                (p - if yi { 1.0 } else { 0.0 }, p * (1.0 - p))
            })
            .unzip();
        let mut stump = best_stump(x, &order, &g, &h);
        let mut next: Vec<f64>;
        let mut next_loss;
        let mut tries = 0;
        loop {
            next = f
                .iter()
                .zip(x)
                .map(|(fi, xi)| fi + cfg.eta * stump.eval(xi))
                .collect();
            next_loss = logistic_loss(&next, y);
            if next_loss <= loss || tries == MAX_BACKTRACK {
                break;
            }
            stump.left *= 0.5;
            stump.right *= 0.5;
            tries += 1;
        }
        if next_loss > loss {
            stump.left = 0.0;
            stump.right = 0.0;
            next_loss = loss;
        } else {
            f = next;
        }
        loss = next_loss;
        history.push(loss);
        stumps.push(stump);
    }
    Ok(BoostedPredictor {
        target_concept,
        bias,
        eta: cfg.eta,
        stumps,
        features: cfg.features,
        loss_history: history,
    })
}

/// Exhaustive split search over every feature and every midpoint between
/// consecutive distinct values. Ties keep the earliest feature and split.
fn best_stump(x: &[Vec<f64>], order: &[Vec<usize>], g: &[f64], h: &[f64]) -> Stump {
    let gt: f64 = g.iter().sum();
    let ht: f64 = h.iter().sum();
    let score = |gs: f64, hs: f64| gs * gs / (hs + LEAF_L2);
    let parent = score(gt, ht);
    let leaf = |gs: f64, hs: f64| -gs / (hs + LEAF_L2);
    let mut best = Stump {
        feature: 0,
        split: f64::MAX,
        left: leaf(gt, ht),
        right: leaf(gt, ht),
    };
    let mut best_gain = 0.0;
    for (j, idx) in order.iter().enumerate() {
        let (mut gl, mut hl) = (0.0, 0.0);
        for w in 0..idx.len() - 1 {
            let (a, b) = (idx[w], idx[w + 1]);
            gl += g[a];
            hl += h[a];
            let (va, vb) = (x[a][j], x[b][j]);
            if va == vb {
                continue;
            }
            let gain = score(gl, hl) + score(gt - gl, ht - hl) - parent;
            if gain > best_gain {
                best_gain = gain;
                best = Stump {
                    feature: j,
                    split: 0.5 * (va + vb),
                    left: leaf(gl, hl),
                    right: leaf(gt - gl, ht - hl),
                };
            }
        }
    }
    best
}

fn feature_vector(f: &ConceptActivations, mode: FeatureMode, threshold: f64) -> Vec<f64> {
    match mode {
        FeatureMode::Raw => f.values().to_vec(),
        FeatureMode::Binary => f
            .values()
            .iter()
            .map(|&v| if v > threshold { 1.0 } else { 0.0 })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSet {
    pub threshold: f64,
    pub predictors: Vec<BoostedPredictor>,
    /// Set when no concept was ever missing from a training question.
    pub no_targets: bool,
}

impl PredictorSet {
    pub fn empty(threshold: f64) -> Self {
        Self {
            threshold,
            predictors: Vec::new(),
            no_targets: true,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Trains one predictor per candidate missing concept, capped at the
/// `max_targets` most frequently missing ones.
pub fn train_predictors(
    train: &[RetrievalExample],
    corpus: &IndexedCorpus,
    sae: &SaeParams,
    cfg: &BoostConfig,
) -> Result<PredictorSet> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let threshold = corpus.threshold;
    let mut acts = Vec::with_capacity(train.len());
    let mut gold_sets = Vec::with_capacity(train.len());
    for ex in train {
        let gold = corpus
            .get(&ex.gold_api)
            .ok_or_else(|| Error::UnknownId(ex.gold_api.clone()))?;
        acts.push(sae.encode(ex.question.vector())?);
        gold_sets.push(&gold.concepts);
    }
    let q_sets: Vec<ConceptSet> = acts.iter().map(|f| active_concepts(f, threshold)).collect();

    let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
    for (q, gold) in q_sets.iter().zip(&gold_sets) {
        for c in gold.difference(q).iter() {
            *freq.entry(c).or_default() += 1;
        }
    }
    if freq.is_empty() {
        return Ok(PredictorSet::empty(threshold));
    }
    let mut targets: Vec<(usize, usize)> = freq.into_iter().collect();
    targets.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    targets.truncate(cfg.max_targets);
    targets.sort_by_key(|t| t.0);

    let x: Vec<Vec<f64>> = acts
        .iter()
        .map(|f| feature_vector(f, cfg.features, threshold))
        .collect();
    let predictors = targets
        .par_iter()
        .map(|&(c, _)| {
            let y: Vec<bool> = q_sets
                .iter()
                .zip(&gold_sets)
                .map(|(q, gold)| gold.contains(c) && !q.contains(c))
                .collect();
            fit_boosted(&x, &y, c, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictorSet {
        threshold,
        predictors,
        no_targets: false,
    })
}

/// Target concepts predicted with probability above `prob_threshold`,
/// excluding those already active in the question.
pub fn predict_missing(
    activations: &ConceptActivations,
    predictors: &PredictorSet,
    prob_threshold: f64,
) -> ConceptSet {
    let active = active_concepts(activations, predictors.threshold);
    let mut out = ConceptSet::new();
    let mut cache: HashMap<FeatureMode, Vec<f64>> = HashMap::new();
    for p in &predictors.predictors {
        if active.contains(p.target_concept) {
            continue;
        }
        let x = cache
            .entry(p.features)
            .or_insert_with(|| feature_vector(activations, p.features, predictors.threshold));
        if p.predict_proba(x) > prob_threshold {
            out.insert(p.target_concept);
        }
    }
    out
}

/// The `ceil(rho * count)` largest strictly positive activations; equal
/// values prefer the smaller index.
pub fn top_fraction(activations: &ConceptActivations, rho: f64) -> Result<ConceptSet> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config {
            field: "rho".into(),
            reason: format!("must lie in (0, 1], got {rho}"),
        });
    }
    let mut active: Vec<(usize, f64)> = activations
        .values()
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, v)| *v > 0.0)
        .collect();
    let keep = (rho * active.len() as f64).ceil() as usize;
    active.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(active.into_iter().take(keep).map(|(i, _)| i).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetSimilarity {
    #[default]
    Jaccard,
    /// `|A n B| / min(|A|, |B|)`.
    Overlap,
}

/// Similarity of `question ∪ predicted` to the document's concepts; 0 when
/// either side is empty.
pub fn union_joint_score(
    question: &ConceptSet,
    predicted: &ConceptSet,
    doc: &ConceptSet,
    similarity: SetSimilarity,
) -> f64 {
    let q = question.union(predicted);
    let inter = q.intersection_len(doc) as f64;
    let denom = match similarity {
        SetSimilarity::Jaccard => (q.len() + doc.len()) as f64 - inter,
        SetSimilarity::Overlap => q.len().min(doc.len()) as f64,
    };
    if denom == 0.0 {
        0.0
    } else {
        inter / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    pub rho: f64,
    pub top_k: usize,
    pub predict: bool,
    pub prob_threshold: f64,
    pub similarity: SetSimilarity,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            top_k: 5,
            predict: true,
            prob_threshold: 0.5,
            similarity: SetSimilarity::Jaccard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
}

/// Scores every document and returns the best `top_k`, by score descending
/// and then by id.
pub fn rank(
    question: &[f64],
    corpus: &IndexedCorpus,
    sae: &SaeParams,
    predictors: &PredictorSet,
    cfg: &RankConfig,
) -> Result<Vec<Ranked>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let f = sae.encode(question)?;
    let q = top_fraction(&f, cfg.rho)?;
    let predicted = if cfg.predict {
        predict_missing(&f, predictors, cfg.prob_threshold)
    } else {
        ConceptSet::new()
    };
    let mut scored: Vec<Ranked> = corpus
        .docs
        .iter()
        .map(|d| Ranked {
            id: d.id.clone(),
            score: union_joint_score(&q, &predicted, &d.concepts, cfg.similarity),
        })
        .collect();
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    scored.truncate(cfg.top_k.max(1));
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoRow {
    pub rho: f64,
    pub api_top1_accuracy: f64,
    pub domain_top1_accuracy: f64,
    pub baseline_api_top1_accuracy: f64,
    pub baseline_domain_top1_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub n_questions: usize,
    pub rows: Vec<RhoRow>,
}

impl RetrievalReport {
    pub fn row(&self, rho: f64) -> Option<&RhoRow> {
        self.rows.iter().find(|r| r.rho == rho)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "rho,api_top1_accuracy,domain_top1_accuracy,baseline_api_top1_accuracy,baseline_domain_top1_accuracy\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.rho,
                r.api_top1_accuracy,
                r.domain_top1_accuracy,
                r.baseline_api_top1_accuracy,
                r.baseline_domain_top1_accuracy
            ));
        }
        s
    }
}

/// Top-1 API and domain accuracy for each `rho`, with and without predicted
/// concepts.
pub fn evaluate_retrieval(
    test: &[RetrievalExample],
    corpus: &IndexedCorpus,
    sae: &SaeParams,
    predictors: &PredictorSet,
    rhos: &[f64],
    base: &RankConfig,
) -> Result<RetrievalReport> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    for ex in test {
        corpus
            .get(&ex.gold_api)
            .ok_or_else(|| Error::UnknownId(ex.gold_api.clone()))?;
    }
    let accuracy = |rho: f64, predict: bool| -> Result<(f64, f64)> {
        let cfg = RankConfig {
            rho,
            top_k: 1,
            predict,
            ..base.clone()
        };
        let hits = test
            .par_iter()
            .map(|ex| {
                let top = rank(ex.question.vector(), corpus, sae, predictors, &cfg)?;
                let doc = corpus.get(&top[0].id).expect("ranked id is in the corpus");
                Ok((
                    (doc.id == ex.gold_api) as usize,
                    (doc.domain == ex.gold_domain) as usize,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = test.len() as f64;
        let api = hits.iter().map(|h| h.0).sum::<usize>() as f64 / n;
        let dom = hits.iter().map(|h| h.1).sum::<usize>() as f64 / n;
        Ok((api, dom))
    };
    let rows = rhos
        .iter()
        .map(|&rho| {
            let (api, dom) = accuracy(rho, true)?;
            let (bapi, bdom) = accuracy(rho, false)?;
            Ok(RhoRow {
                rho,
                api_top1_accuracy: api,
                domain_top1_accuracy: dom,
                baseline_api_top1_accuracy: bapi,
                baseline_domain_top1_accuracy: bdom,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalReport {
        n_questions: test.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> ConceptSet {
        v.iter().copied().collect()
    }

    fn acts(v: &[f64]) -> ConceptActivations {
        ConceptActivations::new(v.to_vec()).unwrap()
    }

    #[test]
    fn top_fraction_cases() {
        let ten: Vec<f64> = (1..=10).map(|k| k as f64).collect();
        assert_eq!(
            top_fraction(&acts(&ten), 0.5).unwrap(),
            set(&[5, 6, 7, 8, 9])
        );
        assert_eq!(top_fraction(&acts(&ten), 1.0).unwrap().len(), 10);
        assert_eq!(
            top_fraction(&acts(&[0.9, 0.9, 0.1]), 0.34).unwrap(),
            set(&[0, 1])
        );
        assert!(top_fraction(&acts(&[0.0, 0.0]), 0.5).unwrap().is_empty());
        assert!(top_fraction(&acts(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn union_joint_cases() {
        let j = SetSimilarity::Jaccard;
        let e = ConceptSet::new();
        assert_eq!(union_joint_score(&set(&[1, 2]), &e, &set(&[1, 2]), j), 1.0);
        assert_eq!(union_joint_score(&set(&[1]), &e, &set(&[2]), j), 0.0);
        assert_eq!(
            union_joint_score(&set(&[1, 2]), &set(&[3]), &set(&[2, 3, 4]), j),
            0.5
        );
        assert_eq!(union_joint_score(&e, &e, &e, j), 0.0);
        assert_eq!(
            union_joint_score(&set(&[1]), &e, &set(&[1, 2, 3]), SetSimilarity::Overlap),
            1.0
        );
    }

    #[test]
    fn sigmoid_and_loss() {
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        let l = logistic_loss(&[0.0, 0.0], &[true, false]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(logistic_loss(&[1000.0], &[false]).is_finite());
    }

    #[test]
    fn separable_labels_halve_the_loss() {
        let x: Vec<Vec<f64>> = (0..40)
            .map(|k| vec![k as f64, (k * 7 % 5) as f64])
            .collect();
        let y: Vec<bool> = (0..40).map(|k| k >= 20).collect();
        let p = fit_boosted(&x, &y, 0, &BoostConfig::default()).unwrap();
        assert_eq!(p.stumps.len(), 50);
        assert!(p.loss_history[50] <= 0.5 * p.loss_history[0]);
        for w in p.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert_eq!(p.stumps[0].feature, 0);
        assert_eq!(p.stumps[0].split, 19.5);
        assert!(p.predict_proba(&[35.0, 0.0]) > 0.9);
    }

    #[test]
    fn all_positive_labels_are_captured_by_bias() {
        let x: Vec<Vec<f64>> = (0..10).map(|k| vec![k as f64]).collect();
        let p = fit_boosted(&x, &[true; 10], 0, &BoostConfig::default()).unwrap();
        for k in -5..20 {
            assert!(p.predict_proba(&[k as f64]) > 0.5);
        }
        let q = fit_boosted(&x, &[true; 10], 0, &BoostConfig::default()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn predict_missing_cases() {
        let f = acts(&[0.0, 0.7, 0.0]);
        assert!(predict_missing(&f, &PredictorSet::empty(0.0), 0.5).is_empty());
        let saturated = |c| BoostedPredictor {
            target_concept: c,
            bias: 10.0,
            eta: 0.1,
            stumps: vec![],
            features: FeatureMode::Raw,
            loss_history: vec![],
        };
        let ps = PredictorSet {
            threshold: 0.0,
            predictors: vec![saturated(0), saturated(1)],
            no_targets: false,
        };
        assert_eq!(predict_missing(&f, &ps, 0.5), set(&[0]));
    }

    fn diag_sae(n: usize) -> SaeParams {
        let mut p = SaeParams::zeros(n, n);
        for i in 0..n {
            p.w_enc[i * n + i] = 1.0;
            p.dict[i * n + i] = 1.0;
        }
        p
    }

    struct Table(Vec<(&'static str, Vec<f64>)>);

    impl Embedder for Table {
        fn dim(&self) -> usize {
            self.0[0].1.len()
        }
        fn embed(&self, text: &str) -> Result<Vec<f64>> {
            self.0
                .iter()
                .find(|(t, _)| *t == text)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::UnknownId(text.into()))
        }
    }

    fn doc(id: &str, text: &str) -> ApiDoc {
        ApiDoc {
            id: id.into(),
            domain: "d".into(),
            call_template: format!("{id}()"),
            text: text.into(),
            concepts: ConceptSet::new(),
        }
    }

    #[test]
    fn index_and_rank() {
        let emb = Table(vec![
            ("alpha", vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            ("beta", vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        ]);
        let sae = diag_sae(8);
        let c = index_corpus(vec![doc("a", "alpha"), doc("b", "beta")], &sae, &emb, 0.0).unwrap();
        assert_eq!(c.docs[0].concepts, set(&[3, 7]));
        let again = index_corpus(c.docs.clone(), &sae, &emb, 0.0).unwrap();
        assert_eq!(again, c);

        let q = [0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.4];
        let r = rank(
            &q,
            &c,
            &sae,
            &PredictorSet::empty(0.0),
            &RankConfig {
                rho: 1.0,
                ..RankConfig::default()
            },
        )
        .unwrap();
        assert_eq!(
            r[0],
            Ranked {
                id: "a".into(),
                score: 1.0
            }
        );

        let one = index_corpus(vec![doc("b", "beta")], &sae, &emb, 0.0).unwrap();
        let r = rank(
            &q,
            &one,
            &sae,
            &PredictorSet::empty(0.0),
            &RankConfig::default(),
        )
        .unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].id, "b");

        assert!(matches!(
            index_corpus(vec![doc("a", " ")], &sae, &emb, 0.0),
            Err(Error::EmptyText)
        ));
    }
}
