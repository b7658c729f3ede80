//! Activation vectors for sentences and tokens.
//!
//! Records come either from a JSONL dump produced by some language model
//! (`id`, `text`, `tokens`, `vector`, optional `token_vectors`) or from the
//! built-in [`ToyEmbedder`], a deterministic hashed n-gram embedder that
//! stands in for hidden states when no model is available.
//!
//! Components are kept at 32-bit precision (widened to `f64` for all
//! arithmetic), which is what the file format stores. Persisting and
//! loading a corpus is therefore bit-exact.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Lowercased whitespace tokenization shared by the embedder and mask builder.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceRecord {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    vector: Vec<f64>,
    token_vectors: Option<Vec<Vec<f64>>>,
}

impl SentenceRecord {
    /// Builds a validated record. Components are rounded to `f32` precision.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        tokens: Vec<String>,
        vector: Vec<f64>,
        token_vectors: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let vector = quantize(&vector);
        if vector.is_empty() {
            return Err(Error::invalid("record vector is empty"));
        }
        if !linalg::all_finite(&vector) {
            return Err(Error::NonFinite("vector"));
        }
        let token_vectors = match token_vectors {
            None => None,
            Some(tvs) => {
                if tvs.len() != tokens.len() {
                    return Err(Error::invalid(format!(
                        "{} token vectors for {} tokens",
                        tvs.len(),
                        tokens.len()
                    )));
                }
                let mut out = Vec::with_capacity(tvs.len());
                for tv in tvs {
                    if tv.len() != vector.len() {
                        return Err(Error::DimensionMismatch {
                            expected: vector.len(),
                            found: tv.len(),
                        });
                    }
                    let tv = quantize(&tv);
                    if !linalg::all_finite(&tv) {
                        return Err(Error::NonFinite("token_vectors"));
                    }
                    out.push(tv);
                }
                Some(out)
            }
        };
        Ok(Self {
            id: id.into(),
            text: text.into(),
            tokens,
            vector,
            token_vectors,
        })
    }

    /// Embeds `text` with the toy embedder, including per-token vectors.
    pub fn embed(id: impl Into<String>, text: &str, config: &ToyEmbedderConfig) -> Result<Self> {
        let vector = toy_embed(text, config)?;
        let tvs = token_vectors(text, config)?;
        Self::new(id, text, tokenize(text), vector, Some(tvs))
    }

    /// A record with only a sentence vector.
    pub fn from_vector(id: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        Self::new(id, String::new(), Vec::new(), vector, None)
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn token_vectors(&self) -> Option<&[Vec<f64>]> {
        self.token_vectors.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    id: String,
    text: String,
    tokens: Vec<String>,
    vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_vectors: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct RecordLineOut<'a> {
    id: &'a str,
    text: &'a str,
    tokens: &'a [String],
    vector: Vec<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    token_vectors: Option<Vec<Vec<f32>>>,
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// An ordered, id-indexed collection of records sharing one dimension.
#[derive(Debug, Clone, Default)]
pub struct ActivationCorpus {
    dim: usize,
    records: Vec<SentenceRecord>,
    index: HashMap<String, usize>,
}

impl PartialEq for ActivationCorpus {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.records == other.records
    }
}

impl ActivationCorpus {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_records(records: Vec<SentenceRecord>) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyCorpus)?;
        let mut corpus = Self::new(first.dim());
        for r in records {
            corpus.push(r)?;
        }
        Ok(corpus)
    }

    pub fn push(&mut self, record: SentenceRecord) -> Result<()> {
        if record.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: record.dim(),
            });
        }
        if self.index.contains_key(&record.id) {
            return Err(Error::invalid(format!("duplicate id `{}`", record.id)));
        }
        self.index.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SentenceRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&SentenceRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn require(&self, id: &str) -> Result<&SentenceRecord> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// Reads an activation JSONL file. `expect_dim` pins the dimension,
    /// otherwise the first record decides it.
    pub fn ingest(path: impl AsRef<Path>, expect_dim: Option<usize>) -> Result<Self> {
        read_jsonl(path.as_ref(), expect_dim, false)
    }

    /// Loads a corpus written by [`ActivationCorpus::persist`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_jsonl(path.as_ref(), None, true)
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let line = RecordLineOut {
                id: &r.id,
                text: &r.text,
                tokens: &r.tokens,
                vector: to_f32(&r.vector),
                token_vectors: r
                    .token_vectors
                    .as_ref()
                    .map(|tvs| tvs.iter().map(|v| to_f32(v)).collect()),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn read_jsonl(path: &Path, expect_dim: Option<usize>, strict: bool) -> Result<ActivationCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut corpus: Option<ActivationCorpus> = expect_dim.map(ActivationCorpus::new);
    let bad = |line: usize, reason: String| {
        if strict {
            Error::CorruptRecord { line, reason }
        } else {
            Error::MalformedLine { line, reason }
        }
    };
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| bad(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordLine =
            serde_json::from_str(&line).map_err(|e| bad(lineno, e.to_string()))?;
        let dim = corpus.as_ref().map_or(raw.vector.len(), |c| c.dim);
        if raw.vector.len() != dim {
            return Err(Error::LineDimension {
                line: lineno,
                expected: dim,
                found: raw.vector.len(),
            });
        }
        if let Some(tvs) = &raw.token_vectors {
            if let Some(tv) = tvs.iter().find(|tv| tv.len() != dim) {
                return Err(Error::LineDimension {
                    line: lineno,
                    expected: dim,
                    found: tv.len(),
                });
            }
        }
        let c = corpus.get_or_insert_with(|| ActivationCorpus::new(dim));
        if c.index.contains_key(&raw.id) {
            return Err(Error::DuplicateId {
                line: lineno,
                id: raw.id,
            });
        }
        let record =
            SentenceRecord::new(raw.id, raw.text, raw.tokens, raw.vector, raw.token_vectors)
                .map_err(|e| match e {
                    Error::NonFinite(field) => Error::NonFiniteLine {
                        line: lineno,
                        field: field.to_string(),
                    },
                    other => bad(lineno, other.to_string()),
                })?;
        c.push(record)?;
    }
    match corpus {
        Some(c) if !c.is_empty() => Ok(c),
        _ => Err(Error::EmptyCorpus),
    }
}

/// Anything that maps text to a fixed-dimension activation vector.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEmbedderConfig {
    pub dim: usize,
    pub seed: u64,
    pub ngram_orders: Vec<usize>,
    pub hash_buckets: usize,
}

impl Default for ToyEmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            seed: 0,
            ngram_orders: vec![1, 2],
            hash_buckets: 4096,
        }
    }
}

impl ToyEmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::invalid("embedder dim must be >= 8"));
        }
        if self.hash_buckets < self.dim {
            return Err(Error::invalid("hash_buckets must be >= dim"));
        }
        if self.ngram_orders.is_empty() || self.ngram_orders.contains(&0) {
            return Err(Error::invalid(
                "ngram_orders must be non-empty positive integers",
            ));
        }
        Ok(())
    }
}

fn bucket_of(gram: &[String], buckets: usize) -> usize {
    let mut h = FnvHasher::default();
    h.write(&(gram.len() as u32).to_le_bytes());
    for (i, tok) in gram.iter().enumerate() {
        if i > 0 {
            h.write(&[0x1f]);
        }
        h.write(tok.as_bytes());
    }
    (h.finish() % buckets as u64) as usize
}

/// Hashed n-gram counts projected through a seeded Gaussian matrix and
/// scaled to unit norm. Texts shorter than every configured order hash
/// their whole token sequence as a single gram.
pub fn toy_embed(text: &str, config: &ToyEmbedderConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for &n in &config.ngram_orders {
        for gram in tokens.windows(n) {
            *counts
                .entry(bucket_of(gram, config.hash_buckets))
                .or_default() += 1.0;
        }
    }
    if counts.is_empty() {
        counts.insert(bucket_of(&tokens, config.hash_buckets), 1.0);
    }
    let mut out = vec![0.0; config.dim];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for (&bucket, &count) in &counts {
        rng.set_stream(bucket as u64);
        rng.set_word_pos(0);
        for o in out.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *o += count * g;
        }
    }
    let norm = linalg::norm(&out);
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    out.iter_mut().for_each(|x| *x /= norm);
    Ok(out)
}

/// One toy embedding per whitespace token.
pub fn token_vectors(text: &str, config: &ToyEmbedderConfig) -> Result<Vec<Vec<f64>>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    tokens.iter().map(|t| toy_embed(t, config)).collect()
}

#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    config: ToyEmbedderConfig,
}

impl ToyEmbedder {
    pub fn new(config: ToyEmbedderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ToyEmbedderConfig {
        &self.config
    }
}

impl Embedder for ToyEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        toy_embed(text, &self.config)
    }
}

/// Fixed text-to-vector table, for activations produced elsewhere.
#[derive(Debug, Clone, Default)]
pub struct LookupEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl LookupEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: HashMap::new(),
        }
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if !linalg::all_finite(&vector) {
            return Err(Error::NonFinite("vector"));
        }
        self.table.insert(text.into(), vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Reads JSONL lines `{text, vector}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table: Option<LookupEmbedder> = None;
        for (k, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LookupLine =
                serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                    line: k + 1,
                    reason: e.to_string(),
                })?;
            let t = table.get_or_insert_with(|| LookupEmbedder::new(entry.vector.len()));
            t.insert(entry.text, entry.vector)
                .map_err(|e| Error::MalformedLine {
                    line: k + 1,
                    reason: e.to_string(),
                })?;
        }
        table.filter(|t| !t.is_empty()).ok_or(Error::EmptyCorpus)
    }

    /// Writes the table sorted by text.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut keys: Vec<&String> = self.table.keys().collect();
        keys.sort();
        for text in keys {
            let line = LookupLine {
                text: text.clone(),
                vector: self.table[text].clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct LookupLine {
    text: String,
    vector: Vec<f64>,
}

impl Embedder for LookupEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::UnknownId(text.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ToyEmbedderConfig {
        ToyEmbedderConfig {
            dim: 16,
            seed: 3,
            ngram_orders: vec![1, 2],
            hash_buckets: 512,
        }
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn line(id: &str, dim: usize) -> String {
        let v: Vec<f64> = (0..dim).map(|i| i as f64 * 0.25).collect();
        serde_json::json!({"id": id, "text": "a b", "tokens": ["a", "b"], "vector": v}).to_string()
    }

    #[test]
    fn ingest_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let body = [line("a", 16), line("b", 16), line("c", 16)].join("\n");
        let p = write(&dir, "c.jsonl", &body);
        let c = ActivationCorpus::ingest(&p, None).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.dim(), 16);
        assert!(c.get("b").is_some());
    }

    #[test]
    fn ingest_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.jsonl", "");
        let err = ActivationCorpus::ingest(&p, None).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn ingest_reports_line_of_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let body = [line("a", 16), line("b", 15)].join("\n");
        let p = write(&dir, "d.jsonl", &body);
        match ActivationCorpus::ingest(&p, None).unwrap_err() {
            Error::LineDimension {
                line,
                expected,
                found,
            } => {
                assert_eq!((line, expected, found), (2, 16, 15));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn ingest_expect_dim_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "x.jsonl", &line("a", 16));
        assert!(matches!(
            ActivationCorpus::ingest(&p, Some(8)),
            Err(Error::LineDimension { line: 1, .. })
        ));
        let p = write(&dir, "y.jsonl", &[line("a", 4), line("a", 4)].join("\n"));
        assert!(matches!(
            ActivationCorpus::ingest(&p, None),
            Err(Error::DuplicateId { line: 2, .. })
        ));
        let p = write(&dir, "z.jsonl", "{not json");
        assert!(matches!(
            ActivationCorpus::ingest(&p, None),
            Err(Error::MalformedLine { line: 1, .. })
        ));
        let p = write(
            &dir,
            "n.jsonl",
            r#"{"id":"a","text":"","tokens":[],"vector":[1e300, 1.0]}"#,
        );
        assert!(matches!(
            ActivationCorpus::ingest(&p, None),
            Err(Error::NonFiniteLine { line: 1, .. })
        ));
    }

    #[test]
    fn toy_embed_is_deterministic_and_unit_norm() {
        let a = toy_embed("Find restaurants near me", &cfg()).unwrap();
        let b = toy_embed("Find restaurants near me", &cfg()).unwrap();
        assert_eq!(a, b);
        assert!((linalg::norm(&a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bigram_order_matters() {
        let c = ToyEmbedderConfig {
            ngram_orders: vec![2],
            ..cfg()
        };
        assert_ne!(toy_embed("a b", &c).unwrap(), toy_embed("b a", &c).unwrap());
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(toy_embed("   ", &cfg()), Err(Error::EmptyText)));
        assert!(matches!(token_vectors("", &cfg()), Err(Error::EmptyText)));
    }

    #[test]
    fn token_vectors_cases() {
        let tv = token_vectors("find restaurants", &cfg()).unwrap();
        assert_eq!(tv.len(), 2);
        for v in &tv {
            assert!((linalg::norm(v) - 1.0).abs() < 1e-9);
        }
        let single = token_vectors("hello", &cfg()).unwrap();
        assert_eq!(single, vec![toy_embed("hello", &cfg()).unwrap()]);
        let rep = token_vectors("go go", &cfg()).unwrap();
        assert_eq!(rep[0], rep[1]);
    }

    #[test]
    fn persist_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ActivationCorpus::new(16);
        for i in 0..10 {
            c.push(
                SentenceRecord::embed(
                    format!("r{i}"),
                    &format!("sentence number {i} here"),
                    &cfg(),
                )
                .unwrap(),
            )
            .unwrap();
        }
        let p = dir.path().join("c.jsonl");
        c.persist(&p).unwrap();
        let back = ActivationCorpus::load(&p).unwrap();
        assert_eq!(back, c);
        let ids: Vec<_> = back.records().iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids, (0..10).map(|i| format!("r{i}")).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ActivationCorpus::new(16);
        for i in 0..3 {
            c.push(SentenceRecord::embed(format!("r{i}"), "some words", &cfg()).unwrap())
                .unwrap();
        }
        let p = dir.path().join("c.jsonl");
        c.persist(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 40]).unwrap();
        let err = ActivationCorpus::load(&p).unwrap_err();
        assert!(err.to_string().contains("corrupt record"), "{err}");
    }
}
