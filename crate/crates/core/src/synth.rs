//! Seeded synthetic benchmarks.
//!
//! Each generator is a pure function of its config, so two runs with the
//! same seed produce identical data.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::{ActivationCorpus, LookupEmbedder, SentenceRecord, ToyEmbedderConfig};
use crate::ambiguity::{Label, Triplet};
use crate::entropy::{Candidate, CandidatePool};
use crate::error::{Error, Result};
use crate::linalg;
use crate::retrieval::{ApiDoc, ExampleLine};
use crate::sae::{ConceptSet, SaeParams};

/// Derives an independent stream seed for a named stage.
pub fn sub_seed(seed: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes().chain(seed.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = linalg::norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// `k` orthonormal vectors in dimension `d >= k` (Gram-Schmidt on Gaussians).
pub fn orthonormal(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    assert!(
        k <= d,
        "cannot fit {k} orthonormal vectors in dimension {d}"
    );
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut v = gaussian_vec(rng, d);
        for u in &out {
            let p = linalg::dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        if linalg::norm(&v) > 1e-6 {
            out.push(unit(v));
        }
    }
    out
}

/// `prototype + sigma * noise`, normalized.
fn jitter(rng: &mut ChaCha8Rng, proto: &[f64], sigma: f64) -> Vec<f64> {
    let noise = gaussian_vec(rng, proto.len());
    unit(
        proto
            .iter()
            .zip(noise)
            .map(|(p, e)| p + sigma * e)
            .collect(),
    )
}

// Ambiguity triplets -------------------------------------------------------

const VERBS: &[&str] = &[
    "list", "show", "count", "find", "return", "select", "report", "give", "display", "fetch",
];
const ADJECTIVES: &[&str] = &[
    "active", "senior", "local", "new", "former", "annual", "public", "small", "large", "remote",
    "premium", "daily",
];
const NOUNS: &[&str] = &[
    "customers",
    "orders",
    "flights",
    "students",
    "courses",
    "hotels",
    "invoices",
    "players",
    "teams",
    "doctors",
    "patients",
    "books",
    "authors",
    "songs",
    "albums",
    "stores",
    "products",
    "employees",
    "projects",
    "cities",
    "airports",
    "movies",
    "actors",
    "ships",
    "ports",
    "schools",
    "teachers",
    "devices",
    "sensors",
    "accounts",
];
/// Concept-bearing word pairs: the meaning lives in the adjacency.
const BIGRAMS: &[(&str, &str)] = &[
    ("each", "branch"),
    ("per", "region"),
    ("both", "sides"),
    ("every", "quarter"),
    ("all", "together"),
    ("same", "day"),
    ("top", "ranked"),
    ("in", "total"),
];
/// Words that pick one reading of an ambiguous request.
const READINGS: &[(&str, &str)] = &[
    ("separately", "combined"),
    ("individually", "jointly"),
    ("distinct", "overall"),
    ("respectively", "collectively"),
    ("grouped", "pooled"),
];
const FILLERS: &[&str] = &["please", "now", "quickly", "also", "here", "again"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmbiguityBenchConfig {
    pub seed: u64,
    pub per_class: usize,
    pub embedder: ToyEmbedderConfig,
    /// Probability of inserting a filler word into each sentence.
    pub filler_rate: f64,
}

impl Default for AmbiguityBenchConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            per_class: 200,
            embedder: ToyEmbedderConfig {
                dim: 32,
                seed: 0,
                ngram_orders: vec![1, 2],
                hash_buckets: 4096,
            },
            filler_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityBench {
    pub corpus: ActivationCorpus,
    pub triplets: Vec<Triplet>,
    /// Sentences that contain every concept-bearing pair, for mask building.
    pub mask_examples: Vec<String>,
}

fn with_filler(rng: &mut ChaCha8Rng, mut words: Vec<String>, rate: f64) -> String {
    if rng.random_bool(rate) {
        let pos = rng.random_range(0..=words.len());
        words.insert(pos, FILLERS.choose(rng).unwrap().to_string());
    }
    words.join(" ")
}

/// Ambiguous questions split a concept-bearing pair that both of their
/// interpretations keep adjacent; the interpretations then differ by a
/// reading word. Unambiguous questions keep the pair, and their two
/// interpretations add the same reading word.
pub fn ambiguity_bench(cfg: &AmbiguityBenchConfig) -> Result<AmbiguityBench> {
    cfg.embedder.validate()?;
    if cfg.per_class == 0 {
        return Err(Error::invalid("per_class must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "ambiguity"));
    let mut records = Vec::new();
    let mut triplets = Vec::new();
    let push = |id: String, text: String, records: &mut Vec<SentenceRecord>| -> Result<String> {
        records.push(SentenceRecord::embed(id.clone(), &text, &cfg.embedder)?);
        Ok(id)
    };
    for k in 0..2 * cfg.per_class {
        let ambiguous = k % 2 == 0;
        let verb = *VERBS.choose(&mut rng).unwrap();
        let adj = *ADJECTIVES.choose(&mut rng).unwrap();
        let two: Vec<&str> = NOUNS.choose_multiple(&mut rng, 2).copied().collect();
        let (a, b) = *BIGRAMS.choose(&mut rng).unwrap();
        let (r1, r2) = *READINGS.choose(&mut rng).unwrap();
        let kept: Vec<String> = [verb, adj, two[0], a, b, two[1]].map(String::from).to_vec();
        let q_words = if ambiguous {
            // same words, pair broken apart
            [verb, b, adj, two[0], a, two[1]].map(String::from).to_vec()
        } else {
            kept.clone()
        };
        let (w1, w2) = if ambiguous { (r1, r2) } else { (r1, r1) };
        let mut i1 = kept.clone();
        i1.push(w1.to_string());
        let mut i2 = kept.clone();
        i2.push(w2.to_string());
        if !ambiguous {
            // paraphrase: the reading word leads instead of trailing
            i2.rotate_right(1);
        }
        let q = with_filler(&mut rng, q_words, cfg.filler_rate);
        let i1 = with_filler(&mut rng, i1, cfg.filler_rate);
        let i2 = with_filler(&mut rng, i2, cfg.filler_rate);
        let tag = format!("t{k:04}");
        let q = push(format!("{tag}_q"), q, &mut records)?;
        let i1 = push(format!("{tag}_i1"), i1, &mut records)?;
        let i2 = push(format!("{tag}_i2"), i2, &mut records)?;
        let label = if ambiguous {
            Label::Ambiguous
        } else {
            Label::Unambiguous
        };
        triplets.push(Triplet::new(q, i1, i2, Some(label))?);
    }
    let mask_examples = BIGRAMS
        .iter()
        .map(|(a, b)| format!("{} the {} {} {}", VERBS[0], NOUNS[0], a, b))
        .collect();
    Ok(AmbiguityBench {
        corpus: ActivationCorpus::from_records(records)?,
        triplets,
        mask_examples,
    })
}

// Entropy oracle -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyBenchConfig {
    pub seed: u64,
    pub class_probs: Vec<f64>,
    pub paraphrases_per_class: usize,
    pub dim: usize,
    /// Paraphrase spread around each meaning prototype.
    pub sigma: f64,
}

impl Default for EntropyBenchConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            class_probs: vec![0.5, 0.3, 0.2],
            paraphrases_per_class: 4,
            dim: 16,
            sigma: 0.05,
        }
    }
}

pub struct EntropyBench {
    pub pool: CandidatePool,
    pub embedder: LookupEmbedder,
    /// Candidate texts grouped by meaning.
    pub partition: Vec<Vec<String>>,
    pub sequence_probs: Vec<(String, f64)>,
}

/// A candidate pool whose meanings sit on orthogonal prototypes and whose
/// paraphrases are small perturbations of them.
pub fn entropy_bench(cfg: &EntropyBenchConfig) -> Result<EntropyBench> {
    let k = cfg.class_probs.len();
    if k == 0 || k > cfg.dim || cfg.paraphrases_per_class == 0 {
        return Err(Error::invalid("need 1..=dim classes and >= 1 paraphrase"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "entropy"));
    let protos = orthonormal(&mut rng, k, cfg.dim);
    let mut embedder = LookupEmbedder::new(cfg.dim);
    let mut candidates = Vec::new();
    let mut partition = Vec::new();
    for (c, (&pc, proto)) in cfg.class_probs.iter().zip(&protos).enumerate() {
        // uneven split of the class mass across its paraphrases
        let raw: Vec<f64> = (0..cfg.paraphrases_per_class)
            .map(|_| rng.random_range(0.5..1.5))
            .collect();
        let z: f64 = raw.iter().sum();
        let mut members = Vec::new();
        for (p, r) in raw.iter().enumerate() {
            let text = format!("meaning {c} paraphrase {p}");
            embedder.insert(text.clone(), jitter(&mut rng, proto, cfg.sigma))?;
            candidates.push(Candidate {
                text: text.clone(),
                prob: pc * r / z,
            });
            members.push(text);
        }
        partition.push(members);
    }
    let sequence_probs = candidates
        .iter()
        .map(|c| (c.text.clone(), c.prob))
        .collect();
    Ok(EntropyBench {
        pool: CandidatePool::new(candidates)?,
        embedder,
        partition,
        sequence_probs,
    })
}

// Clamp-then-sample --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClampBenchConfig {
    pub seed: u64,
    pub n_questions: usize,
    pub n_concepts: usize,
    pub dim: usize,
    /// Concepts active in each question.
    pub active_per_question: usize,
    pub clamp_value: f64,
    pub samples_per_question: usize,
    /// Logit gained per unit of the targeted concept's decoder direction.
    pub target_gain: f64,
    /// Logit gained per unit of any other concept's direction.
    pub other_gain: f64,
    pub sigma: f64,
}

impl Default for ClampBenchConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_questions: 20,
            n_concepts: 24,
            dim: 24,
            active_per_question: 4,
            clamp_value: 10.0,
            samples_per_question: 200,
            target_gain: 1.0,
            other_gain: 0.78,
            sigma: 0.05,
        }
    }
}

/// An answer generator that reads the SAE reconstruction. Meaning 0 is the
/// default reading; meaning `1 + j` is the reading carried by concept `j`,
/// whose logit grows with the reconstruction's component along `d_j`.
#[derive(Debug, Clone)]
pub struct ReadoutGenerator {
    pub directions: Vec<Vec<f64>>,
    pub gains: Vec<f64>,
    pub offset: f64,
    pub answers_per_meaning: usize,
}

impl ReadoutGenerator {
    /// Answer distribution given a reconstruction. Texts are
    /// `"m{meaning} a{k}"`.
    pub fn pool(&self, recon: &[f64]) -> Result<CandidatePool> {
        let mut logits = vec![0.0];
        for (dir, g) in self.directions.iter().zip(&self.gains) {
            logits.push(g * linalg::dot(dir, recon) - self.offset);
        }
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        let per = self.answers_per_meaning as f64;
        let mut cands = Vec::new();
        for (m, wm) in w.iter().enumerate() {
            for a in 0..self.answers_per_meaning {
                cands.push(Candidate {
                    text: format!("m{m} a{a}"),
                    prob: wm / z / per,
                });
            }
        }
        // absorb round-off so the pool sums to one
        let s: f64 = cands.iter().map(|c| c.prob).sum();
        cands.iter_mut().for_each(|c| c.prob /= s);
        CandidatePool::new(cands)
    }
}

pub struct ClampQuestion {
    pub vector: Vec<f64>,
    pub missing: usize,
    /// A concept that is neither active nor the missing one.
    pub random: usize,
    pub generator: ReadoutGenerator,
}

pub struct ClampBench {
    pub sae: SaeParams,
    pub embedder: LookupEmbedder,
    pub questions: Vec<ClampQuestion>,
}

/// An SAE with an orthonormal dictionary, questions built from a few active
/// concepts, and a readout in which the missing concept opens a second,
/// equally likely reading once clamped.
pub fn clamp_bench(cfg: &ClampBenchConfig) -> Result<ClampBench> {
    let (n, d) = (cfg.n_concepts, cfg.dim);
    if n > d || cfg.active_per_question + 2 > n {
        return Err(Error::invalid(
            "clamp bench needs n_concepts <= dim and room for targets",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "clamp"));
    let dict = orthonormal(&mut rng, n, d);
    let mut sae = SaeParams::zeros(n, d);
    for (i, row) in dict.iter().enumerate() {
        sae.w_enc[i * d..(i + 1) * d].copy_from_slice(row);
        sae.dict[i * d..(i + 1) * d].copy_from_slice(row);
    }
    // Clamping the missing concept to `v` balances its reading with the
    // default one; any other concept reaches only part of the way.
    let offset = cfg.target_gain * cfg.clamp_value;
    let answers_per_meaning = 3;
    let mut questions = Vec::with_capacity(cfg.n_questions);
    let level = Normal::new(1.0, 0.2).map_err(|e| Error::invalid(e.to_string()))?;
    for _ in 0..cfg.n_questions {
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let active = &ids[..cfg.active_per_question];
        let missing = ids[cfg.active_per_question];
        let random = ids[cfg.active_per_question + 1];
        let mut gains = vec![cfg.other_gain; n];
        gains[missing] = cfg.target_gain;
        let mut v = vec![0.0; d];
        for &c in active {
            let a: f64 = level.sample(&mut rng);
            v.iter_mut()
                .zip(&dict[c])
                .for_each(|(x, y)| *x += a.abs() * y);
        }
        questions.push(ClampQuestion {
            vector: v,
            missing,
            random,
            generator: ReadoutGenerator {
                directions: dict.clone(),
                gains,
                offset,
                answers_per_meaning,
            },
        });
    }
    let protos = orthonormal(&mut rng, n + 1, d + 1);
    let mut embedder = LookupEmbedder::new(d + 1);
    for (m, proto) in protos.iter().enumerate() {
        for a in 0..answers_per_meaning {
            embedder.insert(format!("m{m} a{a}"), jitter(&mut rng, proto, cfg.sigma))?;
        }
    }
    Ok(ClampBench {
        sae,
        embedder,
        questions,
    })
}

// Retrieval ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalBenchConfig {
    pub seed: u64,
    pub n_domains: usize,
    pub docs_per_domain: usize,
    pub train_per_doc: usize,
    pub test_per_doc: usize,
    /// Probability that a question carries its doc's hint concept.
    pub hint_rate: f64,
    pub noise_concepts: usize,
}

impl Default for RetrievalBenchConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_domains: 5,
            docs_per_domain: 10,
            train_per_doc: 4,
            test_per_doc: 2,
            hint_rate: 0.9,
            noise_concepts: 2,
        }
    }
}

pub struct RetrievalBench {
    pub sae: SaeParams,
    pub embedder: LookupEmbedder,
    pub docs: Vec<ApiDoc>,
    pub train: Vec<ExampleLine>,
    pub test: Vec<ExampleLine>,
    /// The concept each test question lacks, in test order.
    pub planted: Vec<usize>,
}

/// Documents come in pairs that share a domain and a pair concept and differ
/// by one unique concept. Questions carry the domain, the pair concept and a
/// hint concept, and never the unique one, so a question alone cannot pick
/// between the two documents of a pair.
pub fn retrieval_bench(cfg: &RetrievalBenchConfig) -> Result<RetrievalBench> {
    if !cfg.docs_per_domain.is_multiple_of(2) || cfg.n_domains == 0 || cfg.docs_per_domain == 0 {
        return Err(Error::invalid("docs_per_domain must be even and positive"));
    }
    let n_docs = cfg.n_domains * cfg.docs_per_domain;
    let n_pairs = n_docs / 2;
    // concept layout: domains | pairs | unique | hints | free noise
    let dom0 = 0;
    let pair0 = dom0 + cfg.n_domains;
    let uniq0 = pair0 + n_pairs;
    let hint0 = uniq0 + n_docs;
    let noise0 = hint0 + n_docs;
    let n = noise0 + 8;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "retrieval"));

    let mut sae = SaeParams::zeros(n, n);
    for i in 0..n {
        sae.w_enc[i * n + i] = 1.0;
        sae.dict[i * n + i] = 1.0;
    }
    let mut embedder = LookupEmbedder::new(n);
    let embed = |text: &str, conc: &[(usize, f64)], embedder: &mut LookupEmbedder| -> Result<()> {
        let mut v = vec![0.0; n];
        for &(c, a) in conc {
            v[c] += a;
        }
        embedder.insert(text, v)
    };

    let mut docs = Vec::with_capacity(n_docs);
    for k in 0..n_docs {
        let dom = k / cfg.docs_per_domain;
        let pair = k / 2;
        let id = format!("api_{k:03}");
        let text = format!("doc {k}: domain {dom} family {pair} variant {}", k % 2);
        embed(
            &text,
            &[(dom0 + dom, 1.0), (pair0 + pair, 0.9), (uniq0 + k, 0.8)],
            &mut embedder,
        )?;
        docs.push(ApiDoc {
            id: id.clone(),
            domain: format!("domain_{dom}"),
            call_template: format!("{id}(input)"),
            text,
            concepts: ConceptSet::new(),
        });
    }

    let make = |split: &str,
                per: usize,
                rng: &mut ChaCha8Rng,
                embedder: &mut LookupEmbedder|
     -> Result<(Vec<ExampleLine>, Vec<usize>)> {
        let mut lines = Vec::new();
        let mut planted = Vec::new();
        for r in 0..per {
            for k in 0..n_docs {
                let dom = k / cfg.docs_per_domain;
                let pair = k / 2;
                let text = format!("{split} question {r} about doc {k}");
                let mut conc = vec![
                    (dom0 + dom, rng.random_range(0.9..1.1)),
                    (pair0 + pair, rng.random_range(0.7..0.85)),
                ];
                if rng.random_bool(cfg.hint_rate) {
                    conc.push((hint0 + k, rng.random_range(0.5..0.65)));
                }
                for _ in 0..cfg.noise_concepts {
                    conc.push((noise0 + rng.random_range(0..8), rng.random_range(0.05..0.3)));
                }
                embed(&text, &conc, embedder)?;
                lines.push(ExampleLine {
                    question_text: text,
                    gold_api: docs[k].id.clone(),
                    gold_domain: docs[k].domain.clone(),
                });
                planted.push(uniq0 + k);
            }
        }
        Ok((lines, planted))
    };
    let (train, _) = make("train", cfg.train_per_doc, &mut rng, &mut embedder)?;
    let (test, planted) = make("test", cfg.test_per_doc, &mut rng, &mut embedder)?;
    Ok(RetrievalBench {
        sae,
        embedder,
        docs,
        train,
        test,
        planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Embedder;

    #[test]
    fn sub_seeds_differ_by_stage() {
        assert_ne!(sub_seed(7, "a"), sub_seed(7, "b"));
        assert_eq!(sub_seed(7, "a"), sub_seed(7, "a"));
    }

    #[test]
    fn orthonormal_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = orthonormal(&mut rng, 5, 8);
        for (i, a) in q.iter().enumerate() {
            for (j, b) in q.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((linalg::dot(a, b) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ambiguity_bench_shape() {
        let cfg = AmbiguityBenchConfig {
            per_class: 10,
            ..Default::default()
        };
        let b = ambiguity_bench(&cfg).unwrap();
        assert_eq!(b.triplets.len(), 20);
        assert_eq!(b.corpus.len(), 60);
        let amb = b
            .triplets
            .iter()
            .filter(|t| t.label == Some(Label::Ambiguous))
            .count();
        assert_eq!(amb, 10);
        assert_eq!(ambiguity_bench(&cfg).unwrap(), b);
        // an ambiguous question keeps the pair's words but not the pair
        let t = &b.triplets[0];
        let q = &b.corpus.require(&t.q).unwrap().text;
        let i1 = &b.corpus.require(&t.i1).unwrap().text;
        let (a, c) = BIGRAMS
            .iter()
            .find(|(a, c)| i1.contains(&format!("{a} {c}")))
            .unwrap();
        assert!(!q.contains(&format!("{a} {c}")));
        assert!(q.split(' ').any(|w| w == *a) && q.split(' ').any(|w| w == *c));
    }

    #[test]
    fn entropy_bench_probabilities() {
        let b = entropy_bench(&EntropyBenchConfig::default()).unwrap();
        let s: f64 = b.sequence_probs.iter().map(|(_, p)| p).sum();
        assert!((s - 1.0).abs() < 1e-12);
        let class0: f64 = b.sequence_probs[..4].iter().map(|(_, p)| p).sum();
        assert!((class0 - 0.5).abs() < 1e-12);
        assert_eq!(b.partition.len(), 3);
    }

    #[test]
    fn retrieval_bench_shape() {
        let b = retrieval_bench(&RetrievalBenchConfig::default()).unwrap();
        assert_eq!(b.docs.len(), 50);
        assert_eq!(b.test.len(), 100);
        assert_eq!(b.planted.len(), 100);
        let v = b.embedder.embed(&b.test[0].question_text).unwrap();
        assert_eq!(v[b.planted[0]], 0.0);
    }
}
