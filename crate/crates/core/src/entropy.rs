//! Monte-Carlo semantic entropy.
//!
//! Sampled outputs are grouped into meaning classes by average-linkage
//! agglomerative clustering of their embeddings under cosine distance.
//! Class masses come from counts or from length-normalized sequence
//! log-probabilities, and the entropy is taken over those masses.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Embedder;
use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_THRESHOLD: f64 = 0.3;
pub const MASS_FLOOR: f64 = 1e-12;
const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    texts: Vec<String>,
    log_probs: Option<Vec<f64>>,
    embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleLine {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_prob: Option<f64>,
    vector: Vec<f64>,
}

impl SampleSet {
    pub fn new(
        texts: Vec<String>,
        log_probs: Option<Vec<f64>>,
        embeddings: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let m = texts.len();
        if m == 0 {
            return Err(Error::invalid("sample set needs at least one sample"));
        }
        if embeddings.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: embeddings.len(),
            });
        }
        if let Some(lp) = &log_probs {
            if lp.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: lp.len(),
                });
            }
            if !linalg::all_finite(lp) {
                return Err(Error::NonFinite("log_probs"));
            }
        }
        let d = embeddings[0].len();
        for e in &embeddings {
            if e.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: e.len(),
                });
            }
            if !linalg::all_finite(e) {
                return Err(Error::NonFinite("embedding"));
            }
            if linalg::norm(e) == 0.0 {
                return Err(Error::ZeroNorm);
            }
        }
        Ok(Self {
            texts,
            log_probs,
            embeddings,
        })
    }

    /// Reads `{text, log_prob?, vector}` lines. `log_prob` must be present on
    /// every line or on none.
    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut texts = Vec::new();
        let mut lps = Vec::new();
        let mut embeddings = Vec::new();
        for (k, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: SampleLine = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: k + 1,
                reason: e.to_string(),
            })?;
            texts.push(s.text);
            lps.push(s.log_prob);
            embeddings.push(s.vector);
        }
        let log_probs = if lps.iter().all(Option::is_some) && !lps.is_empty() {
            Some(lps.into_iter().flatten().collect())
        } else if lps.iter().all(Option::is_none) {
            None
        } else {
            return Err(Error::invalid(
                "log_prob present on some samples but not all",
            ));
        };
        Self::new(texts, log_probs, embeddings)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (k, text) in self.texts.iter().enumerate() {
            let line = SampleLine {
                text: text.clone(),
                log_prob: self.log_probs.as_ref().map(|lp| lp[k]),
                vector: self.embeddings[k].clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn log_probs(&self) -> Option<&[f64]> {
        self.log_probs.as_deref()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster of each sample; clusters are numbered by first appearance.
    pub labels: Vec<usize>,
    pub k: usize,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

/// Average-linkage agglomerative clustering under cosine distance. Pairs
/// merge while their linkage is at most `threshold`; among equal linkages
/// the pair with the smallest `(min index of A, min index of B)` goes first.
pub fn cluster(embeddings: &[Vec<f64>], threshold: f64) -> Result<Clustering> {
    let m = embeddings.len();
    if m == 0 {
        return Err(Error::invalid("cluster needs at least one embedding"));
    }
    if !(threshold > 0.0 && threshold <= 2.0) {
        return Err(Error::Config {
            field: "threshold".into(),
            reason: format!("must lie in (0, 2], got {threshold}"),
        });
    }
    let units: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            let n = linalg::norm(e);
            if n == 0.0 || !n.is_finite() {
                Err(Error::ZeroNorm)
            } else {
                Ok(e.iter().map(|x| x / n).collect())
            }
        })
        .collect::<Result<_>>()?;

    // Clusters are keyed by their smallest member index.
    let mut dist = vec![0.0; m * m];
    for a in 0..m {
        for b in a + 1..m {
            let c = (1.0 - linalg::dot(&units[a], &units[b])).clamp(0.0, 2.0);
            dist[a * m + b] = c;
            dist[b * m + a] = c;
        }
    }
    let mut alive = vec![true; m];
    let mut size = vec![1usize; m];
    let mut parent: Vec<usize> = (0..m).collect();
    // best partner with a larger key: (distance, key)
    let mut best: Vec<Option<(f64, usize)>> = vec![None; m];
    let scan = |a: usize, dist: &[f64], alive: &[bool]| -> Option<(f64, usize)> {
        let mut out: Option<(f64, usize)> = None;
        for b in a + 1..m {
            if alive[b] && out.is_none_or(|(d, _)| dist[a * m + b] < d) {
                out = Some((dist[a * m + b], b));
            }
        }
        out
    };
    for a in 0..m {
        best[a] = scan(a, &dist, &alive);
    }

    loop {
        let mut pick: Option<(f64, usize, usize)> = None;
        for a in 0..m {
            if let (true, Some((d, b))) = (alive[a], best[a]) {
                if pick.is_none_or(|(pd, _, _)| d < pd) {
                    pick = Some((d, a, b));
                }
            }
        }
        let Some((d, a, b)) = pick else { break };
        if d > threshold {
            break;
        }
        let (na, nb) = (size[a] as f64, size[b] as f64);
        alive[b] = false;
        parent[b] = a;
        size[a] += size[b];
        for c in 0..m {
            if alive[c] && c != a {
                let v = (na * dist[a * m + c] + nb * dist[b * m + c]) / (na + nb);
                dist[a * m + c] = v;
                dist[c * m + a] = v;
            }
        }
        for c in 0..m {
            if !alive[c] {
                continue;
            }
            let stale = c == a || matches!(best[c], Some((_, p)) if p == a || p == b);
            if stale {
                best[c] = scan(c, &dist, &alive);
            } else if c < a {
                let v = dist[c * m + a];
                if let Some((bd, bk)) = best[c] {
                    if v < bd || (v == bd && a < bk) {
                        best[c] = Some((v, a));
                    }
                }
            }
        }
    }

    let root = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };
    let mut ids: HashMap<usize, usize> = HashMap::new();
    let labels: Vec<usize> = (0..m)
        .map(|i| {
            let n = ids.len();
            *ids.entry(root(i)).or_insert(n)
        })
        .collect();
    Ok(Clustering {
        labels,
        k: ids.len(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MassMode {
    #[default]
    Counts,
    Weighted,
}

/// Class masses, floored at `1e-12` and renormalized.
pub fn cluster_masses(
    clustering: &Clustering,
    mode: MassMode,
    log_probs: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let m = clustering.labels.len();
    let mut p = vec![0.0; clustering.k];
    match mode {
        MassMode::Counts => {
            for &l in &clustering.labels {
                p[l] += 1.0;
            }
            p.iter_mut().for_each(|x| *x /= m as f64);
        }
        MassMode::Weighted => {
            let s = log_probs.ok_or_else(|| Error::invalid("weighted masses need log_probs"))?;
            if s.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: s.len(),
                });
            }
            if !linalg::all_finite(s) {
                return Err(Error::NonFinite("log_probs"));
            }
            let top = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = s.iter().map(|x| (x - top).exp()).collect();
            let z: f64 = w.iter().sum();
            for (&l, wi) in clustering.labels.iter().zip(&w) {
                p[l] += wi;
            }
            p.iter_mut().for_each(|x| *x /= z);
        }
    }
    p.iter_mut().for_each(|x| *x = x.max(MASS_FLOOR));
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// `-sum p log_b p`.
pub fn entropy(p: &[f64], base: f64) -> Result<f64> {
    if !(base > 1.0 && base.is_finite()) {
        return Err(Error::Config {
            field: "base".into(),
            reason: format!("must be finite and > 1, got {base}"),
        });
    }
    if p.is_empty() || p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::invalid(
            "probabilities must be finite and non-negative",
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::NotNormalized(sum));
    }
    let ln_b = base.ln();
    Ok(p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln() / ln_b)
        .sum::<f64>()
        .max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticEntropy {
    pub entropy: f64,
    pub masses: Vec<f64>,
    pub clustering: Clustering,
}

pub fn semantic_entropy(
    samples: &SampleSet,
    threshold: f64,
    mode: MassMode,
    base: f64,
) -> Result<SemanticEntropy> {
    let clustering = cluster(samples.embeddings(), threshold)?;
    let masses = cluster_masses(&clustering, mode, samples.log_probs())?;
    let entropy = entropy(&masses, base)?;
    Ok(SemanticEntropy {
        entropy,
        masses,
        clustering,
    })
}

/// Exact entropy of the meaning distribution obtained by summing sequence
/// probabilities within each class of `partition`.
pub fn entropy_oracle(
    sequence_probs: &[(String, f64)],
    partition: &[Vec<String>],
    base: f64,
) -> Result<f64> {
    let mut class_of: HashMap<&str, usize> = HashMap::new();
    for (c, members) in partition.iter().enumerate() {
        for s in members {
            if class_of.insert(s, c).is_some() {
                return Err(Error::invalid(format!(
                    "sequence `{s}` in more than one class"
                )));
            }
        }
    }
    let mut mass = vec![0.0; partition.len()];
    for (id, p) in sequence_probs {
        if !(p.is_finite() && (0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!(
                "probability of `{id}` out of range: {p}"
            )));
        }
        let c = class_of
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownId(id.clone()))?;
        mass[*c] += p;
    }
    entropy(&mass, base)
}

/// One entry of a finite candidate pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub prob: f64,
}

/// Draws outputs from a fixed candidate pool. Each draw carries
/// `ln(prob)` as its sequence log-probability.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    candidates: Vec<Candidate>,
    index: WeightedIndex<f64>,
}

impl CandidatePool {
    pub fn new(candidates: Vec<Candidate>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::invalid("candidate pool is empty"));
        }
        let sum: f64 = candidates.iter().map(|c| c.prob).sum();
        if candidates
            .iter()
            .any(|c| !(c.prob.is_finite() && c.prob >= 0.0))
        {
            return Err(Error::invalid(
                "candidate probabilities must be non-negative",
            ));
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::NotNormalized(sum));
        }
        let index = WeightedIndex::new(candidates.iter().map(|c| c.prob))
            .map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Self { candidates, index })
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn sample(&self, m: usize, seed: u64, embedder: &dyn Embedder) -> Result<SampleSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cache: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut texts = Vec::with_capacity(m);
        let mut lps = Vec::with_capacity(m);
        let mut embs = Vec::with_capacity(m);
        for _ in 0..m {
            let k = self.index.sample(&mut rng);
            let c = &self.candidates[k];
            let e = match cache.get(&k) {
                Some(e) => e.clone(),
                None => {
                    let e = embedder.embed(&c.text)?;
                    cache.insert(k, e.clone());
                    e
                }
            };
            texts.push(c.text.clone());
            lps.push(c.prob.ln());
            embs.push(e);
        }
        SampleSet::new(texts, Some(lps), embs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::LookupEmbedder;

    fn basis(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn cluster_small_cases() {
        let one = cluster(&[vec![1.0, 2.0]], 0.3).unwrap();
        assert_eq!(
            one,
            Clustering {
                labels: vec![0],
                k: 1
            }
        );

        let e = vec![basis(2, 0), basis(2, 0), basis(2, 1)];
        let c = cluster(&e, 0.5).unwrap();
        assert_eq!(c.labels, vec![0, 0, 1]);

        let e = vec![basis(3, 0), basis(3, 1), vec![-1.0, 0.0, 0.0]];
        assert_eq!(cluster(&e, 2.0).unwrap().k, 1);

        assert!(matches!(
            cluster(&[vec![0.0, 0.0]], 0.3),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn average_linkage_differs_from_single() {
        // a-b close, c near b but far from a: single linkage would chain
        let a = vec![1.0, 0.0];
        let b = vec![(0.6f64).cos(), (0.6f64).sin()];
        let c = vec![(1.2f64).cos(), (1.2f64).sin()];
        let t = 1.0 - (0.6f64).cos() + 1e-9;
        let r = cluster(&[a, b, c], t).unwrap();
        assert_eq!(r.labels, vec![0, 0, 1]);
    }

    #[test]
    fn equal_linkage_ties_merge_lowest_pair_first() {
        // three points at 120 degrees: every pair has distance 1.5
        let pts: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let a = k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let r = cluster(&pts, 1.5 + 1e-9).unwrap();
        // (0,1) merges first at 1.5; the merged cluster then sits at 1.5 from 2
        assert_eq!(r.k, 1);
        let r = cluster(&pts, 1.4).unwrap();
        assert_eq!(r.labels, vec![0, 1, 2]);
    }

    #[test]
    fn masses_counts_and_weighted() {
        let c = Clustering {
            labels: vec![0, 0, 1, 1],
            k: 2,
        };
        assert_eq!(
            cluster_masses(&c, MassMode::Counts, None).unwrap(),
            vec![0.5, 0.5]
        );
        let equal = [-1.3; 4];
        assert_eq!(
            cluster_masses(&c, MassMode::Weighted, Some(&equal)).unwrap(),
            cluster_masses(&c, MassMode::Counts, None).unwrap()
        );
        let s = [-1.0, -2.0, -0.5, -3.0];
        let shifted: Vec<f64> = s.iter().map(|x| x + 100.0).collect();
        let p = cluster_masses(&c, MassMode::Weighted, Some(&s)).unwrap();
        let q = cluster_masses(&c, MassMode::Weighted, Some(&shifted)).unwrap();
        for (x, y) in p.iter().zip(&q) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert!(cluster_masses(&c, MassMode::Weighted, None).is_err());
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[1.0], 2.0).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5], 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((entropy(&[0.125; 8], 2.0).unwrap() - 3.0).abs() < 1e-12);
        assert!(matches!(
            entropy(&[0.5, 0.4], 2.0),
            Err(Error::NotNormalized(_))
        ));
        assert!(entropy(&[1.0], 1.0).is_err());
    }

    #[test]
    fn oracle_values() {
        let probs = vec![("a".to_string(), 0.25), ("b".to_string(), 0.75)];
        let h = entropy_oracle(&probs, &[vec!["a".into()], vec!["b".into()]], 2.0).unwrap();
        let direct = -(0.25 * 0.25f64.log2() + 0.75 * 0.75f64.log2());
        assert!((h - direct).abs() < 1e-12);
        assert!((h - 0.8113).abs() < 1e-4);

        let h = entropy_oracle(&probs, &[vec!["a".into(), "b".into()]], 2.0).unwrap();
        assert_eq!(h, 0.0);

        let uni: Vec<(String, f64)> = (0..8).map(|k| (format!("s{k}"), 0.125)).collect();
        let part: Vec<Vec<String>> = uni.iter().map(|(s, _)| vec![s.clone()]).collect();
        assert!((entropy_oracle(&uni, &part, 2.0).unwrap() - 3.0).abs() < 1e-12);

        let bad = vec![("a".to_string(), 1.5)];
        assert!(entropy_oracle(&bad, &[vec!["a".into()]], 2.0).is_err());
    }

    #[test]
    fn semantic_entropy_of_two_groups() {
        let mut texts = Vec::new();
        let mut embs = Vec::new();
        for k in 0..6 {
            texts.push(format!("t{k}"));
            embs.push(if k < 3 { basis(4, 0) } else { basis(4, 2) });
        }
        let s = SampleSet::new(texts.clone(), None, embs).unwrap();
        let r = semantic_entropy(&s, DEFAULT_THRESHOLD, MassMode::Counts, 2.0).unwrap();
        assert!((r.entropy - 1.0).abs() < 1e-9);

        let same = SampleSet::new(texts, None, vec![basis(4, 1); 6]).unwrap();
        let r = semantic_entropy(&same, DEFAULT_THRESHOLD, MassMode::Counts, 2.0).unwrap();
        assert_eq!(r.entropy, 0.0);
    }

    #[test]
    fn pool_sampling_is_seeded() {
        let mut emb = LookupEmbedder::new(3);
        emb.insert("x", basis(3, 0)).unwrap();
        emb.insert("y", basis(3, 1)).unwrap();
        let pool = CandidatePool::new(vec![
            Candidate {
                text: "x".into(),
                prob: 0.3,
            },
            Candidate {
                text: "y".into(),
                prob: 0.7,
            },
        ])
        .unwrap();
        let a = pool.sample(50, 9, &emb).unwrap();
        let b = pool.sample(50, 9, &emb).unwrap();
        assert_eq!(a, b);
        assert!(a.texts().iter().any(|t| t == "x") && a.texts().iter().any(|t| t == "y"));
    }

    #[test]
    fn read_sample_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        std::fs::write(
            &p,
            "{\"text\":\"a\",\"log_prob\":-1.0,\"vector\":[1,0]}\n{\"text\":\"b\",\"log_prob\":-2.0,\"vector\":[0,1]}\n",
        )
        .unwrap();
        let s = SampleSet::read_jsonl(&p).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.log_probs(), Some(&[-1.0, -2.0][..]));
    }
}
