//! Sparse autoencoder over activation vectors.
//!
//! The encoder gate is `f(h) = ReLU(W_e (h - b_d) + b_e)` and the decoder
//! reconstructs `b_d + sum_i f_i d_i`; the pre-encoder bias doubles as the
//! decoder output bias.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationCorpus;
use crate::error::{Error, Result};
use crate::linalg;
use crate::path_kernel::{PathSource, PathStates};

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub n_concepts: usize,
    pub dim: usize,
    /// Encoder matrix, `n_concepts x dim`, row-major.
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    /// Pre-encoder bias, tied to the decoder output bias.
    pub b_dec: Vec<f64>,
    /// Decoder dictionary, `n_concepts x dim`, row-major.
    pub dict: Vec<f64>,
}

impl SaeParams {
    pub fn zeros(n_concepts: usize, dim: usize) -> Self {
        Self {
            n_concepts,
            dim,
            w_enc: vec![0.0; n_concepts * dim],
            b_enc: vec![0.0; n_concepts],
            b_dec: vec![0.0; dim],
            dict: vec![0.0; n_concepts * dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.n_concepts, self.dim);
        if n == 0 || d == 0 {
            return Err(Error::invalid("n_concepts and dim must be positive"));
        }
        let shapes = [
            (self.w_enc.len(), n * d),
            (self.b_enc.len(), n),
            (self.b_dec.len(), d),
            (self.dict.len(), n * d),
        ];
        for (found, expected) in shapes {
            if found != expected {
                return Err(Error::DimensionMismatch { expected, found });
            }
        }
        if !(linalg::all_finite(&self.w_enc)
            && linalg::all_finite(&self.b_enc)
            && linalg::all_finite(&self.b_dec)
            && linalg::all_finite(&self.dict))
        {
            return Err(Error::NonFinite("SAE parameters"));
        }
        Ok(())
    }

    pub fn encoder_row(&self, i: usize) -> &[f64] {
        &self.w_enc[i * self.dim..(i + 1) * self.dim]
    }

    pub fn decoder_row(&self, i: usize) -> &[f64] {
        &self.dict[i * self.dim..(i + 1) * self.dim]
    }

    fn check_input(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: h.len(),
            });
        }
        if !linalg::all_finite(h) {
            return Err(Error::NonFinite("input vector"));
        }
        Ok(())
    }

    /// Pre-activations `W_e (h - b_d) + b_e`.
    pub fn pre_activations(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_input(h)?;
        let centered = linalg::sub(h, &self.b_dec);
        Ok((0..self.n_concepts)
            .map(|i| linalg::dot(self.encoder_row(i), &centered) + self.b_enc[i])
            .collect())
    }

    pub fn encode(&self, h: &[f64]) -> Result<ConceptActivations> {
        let z = self.pre_activations(h)?;
        Ok(ConceptActivations(
            z.into_iter().map(|x| x.max(0.0)).collect(),
        ))
    }

    pub fn decode(&self, f: &ConceptActivations) -> Result<Vec<f64>> {
        if f.len() != self.n_concepts {
            return Err(Error::DimensionMismatch {
                expected: self.n_concepts,
                found: f.len(),
            });
        }
        let mut out = self.b_dec.clone();
        for (i, &fi) in f.values().iter().enumerate() {
            if fi != 0.0 {
                for (o, &d) in out.iter_mut().zip(self.decoder_row(i)) {
                    *o += fi * d;
                }
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode(h)?)
    }

    /// Overwrites one concept's activation before decoding.
    pub fn clamp(
        &self,
        h: &[f64],
        concept: usize,
        value: f64,
    ) -> Result<(ConceptActivations, Vec<f64>)> {
        if concept >= self.n_concepts {
            return Err(Error::ConceptOutOfRange {
                index: concept,
                n_concepts: self.n_concepts,
            });
        }
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::invalid(
                "clamp value must be finite and non-negative",
            ));
        }
        let mut f = self.encode(h)?;
        f.0[concept] = value;
        let recon = self.decode(&f)?;
        Ok((f, recon))
    }

    /// Elementwise `(1 - t) * a + t * b`.
    pub fn lerp(a: &SaeParams, b: &SaeParams, t: f64) -> SaeParams {
        let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
            x.iter()
                .zip(y)
                .map(|(p, q)| (1.0 - t) * p + t * q)
                .collect()
        };
        SaeParams {
            n_concepts: a.n_concepts,
            dim: a.dim,
            w_enc: mix(&a.w_enc, &b.w_enc),
            b_enc: mix(&a.b_enc, &b.b_enc),
            b_dec: mix(&a.b_dec, &b.b_dec),
            dict: mix(&a.dict, &b.dict),
        }
    }

    fn normalize_decoder(&mut self) {
        let d = self.dim;
        for row in self.dict.chunks_mut(d) {
            let n = linalg::norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
    }

    fn blocks(&self) -> [&[f64]; 4] {
        [&self.w_enc, &self.b_enc, &self.b_dec, &self.dict]
    }
}

/// Gate values `f_i(h)`; every component is non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptActivations(Vec<f64>);

impl ConceptActivations {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(
                "concept activations must be finite and non-negative",
            ));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Strictly increasing set of concept indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptSet(Vec<usize>);

impl ConceptSet {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn insert(&mut self, i: usize) {
        if let Err(pos) = self.0.binary_search(&i) {
            self.0.insert(pos, i);
        }
    }

    pub fn union(&self, other: &ConceptSet) -> ConceptSet {
        self.iter().chain(other.iter()).collect()
    }

    pub fn difference(&self, other: &ConceptSet) -> ConceptSet {
        ConceptSet(self.iter().filter(|&i| !other.contains(i)).collect())
    }

    pub fn intersection_len(&self, other: &ConceptSet) -> usize {
        self.iter().filter(|&i| other.contains(i)).count()
    }

    pub fn is_subset(&self, other: &ConceptSet) -> bool {
        self.iter().all(|i| other.contains(i))
    }

    pub fn max_index(&self) -> Option<usize> {
        self.0.last().copied()
    }
}

impl FromIterator<usize> for ConceptSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut v: Vec<usize> = iter.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        ConceptSet(v)
    }
}

/// Indices whose activation exceeds `threshold`.
pub fn active_concepts(f: &ConceptActivations, threshold: f64) -> ConceptSet {
    ConceptSet(
        f.values()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > threshold)
            .map(|(i, _)| i)
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeTrainConfig {
    pub l1_weight: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub snapshot_stride: usize,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            l1_weight: 1e-3,
            epochs: 50,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
            snapshot_stride: 50,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Error::Config {
            field: field.into(),
            reason: reason.into(),
        };
        if !(self.l1_weight >= 0.0 && self.l1_weight.is_finite()) {
            return Err(bad("l1_weight", "must be finite and >= 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", "must be > 0"));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive"));
        }
        if self.snapshot_stride == 0 {
            return Err(bad("snapshot_stride", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: SaeParams,
    pub path: PathStates,
    /// Mean corpus loss of the initialization.
    pub initial_loss: f64,
    /// Mean corpus loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

fn init_params(n: usize, d: usize, seed: u64) -> SaeParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let mut p = SaeParams::zeros(n, d);
    for x in p.w_enc.iter_mut() {
        *x = rng.random_range(-scale..scale);
    }
    for x in p.dict.iter_mut() {
        *x = rng.random_range(-scale..scale);
    }
    p.normalize_decoder();
    p
}

fn sample_loss(p: &SaeParams, h: &[f64], l1: f64) -> f64 {
    let f = p.encode(h).expect("dimension checked");
    let r = p.decode(&f).expect("dimension checked");
    let err: f64 = r.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum();
    err + l1 * f.values().iter().sum::<f64>()
}

/// Mean of `||h - decode(encode(h))||^2 + l1 * ||encode(h)||_1` over a corpus.
pub fn corpus_loss(p: &SaeParams, corpus: &ActivationCorpus, l1: f64) -> f64 {
    let total: f64 = corpus
        .records()
        .iter()
        .map(|r| sample_loss(p, r.vector(), l1))
        .sum();
    total / corpus.len() as f64
}

/// Accumulates the batch-summed gradient of the loss for one sample.
fn accumulate_grad(p: &SaeParams, h: &[f64], l1: f64, g: &mut SaeParams) -> f64 {
    let d = p.dim;
    let u = linalg::sub(h, &p.b_dec);
    let z: Vec<f64> = (0..p.n_concepts)
        .map(|i| linalg::dot(p.encoder_row(i), &u) + p.b_enc[i])
        .collect();
    let mut r = p.b_dec.clone();
    for (i, &zi) in z.iter().enumerate() {
        if zi > 0.0 {
            for (o, &dk) in r.iter_mut().zip(p.decoder_row(i)) {
                *o += zi * dk;
            }
        }
    }
    let e: Vec<f64> = r.iter().zip(h).map(|(a, b)| a - b).collect();
    let mut loss: f64 = e.iter().map(|x| x * x).sum();
    for (k, &ek) in e.iter().enumerate() {
        g.b_dec[k] += 2.0 * ek;
    }
    for (i, &zi) in z.iter().enumerate() {
        if zi <= 0.0 {
            continue;
        }
        loss += l1 * zi;
        let di = p.decoder_row(i);
        let delta = 2.0 * linalg::dot(&e, di) + l1;
        let wi = p.encoder_row(i);
        for k in 0..d {
            g.dict[i * d + k] += 2.0 * zi * e[k];
            g.w_enc[i * d + k] += delta * u[k];
            g.b_dec[k] -= delta * wi[k];
        }
        g.b_enc[i] += delta;
    }
    loss
}

/// Mini-batch gradient descent on squared reconstruction error plus an L1
/// penalty on the gates. Decoder rows are renormalized after every step and
/// a snapshot is kept every `snapshot_stride` steps (plus the initial and
/// final states).
pub fn train(
    corpus: &ActivationCorpus,
    n_concepts: usize,
    config: &SaeTrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if n_concepts == 0 {
        return Err(Error::invalid("n_concepts must be >= 1"));
    }
    let d = corpus.dim();
    let mut params = init_params(n_concepts, d, config.seed);
    let initial_loss = corpus_loss(&params, corpus, config.l1_weight);
    let mut snapshots = vec![params.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut grad = SaeParams::zeros(n_concepts, d);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad.w_enc.iter_mut().for_each(|x| *x = 0.0);
            grad.b_enc.iter_mut().for_each(|x| *x = 0.0);
            grad.b_dec.iter_mut().for_each(|x| *x = 0.0);
            grad.dict.iter_mut().for_each(|x| *x = 0.0);
            let mut batch_loss = 0.0;
            for &idx in batch {
                batch_loss += accumulate_grad(
                    &params,
                    corpus.records()[idx].vector(),
                    config.l1_weight,
                    &mut grad,
                );
            }
            step += 1;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let scale = config.learning_rate / batch.len() as f64;
            let apply = |p: &mut [f64], g: &[f64]| {
                p.iter_mut().zip(g).for_each(|(x, gx)| *x -= scale * gx);
            };
            apply(&mut params.w_enc, &grad.w_enc);
            apply(&mut params.b_enc, &grad.b_enc);
            apply(&mut params.b_dec, &grad.b_dec);
            apply(&mut params.dict, &grad.dict);
            params.normalize_decoder();
            if step.is_multiple_of(config.snapshot_stride) {
                snapshots.push(params.clone());
            }
        }
        let loss = corpus_loss(&params, corpus, config.l1_weight);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        epoch_losses.push(loss);
    }
    if !step.is_multiple_of(config.snapshot_stride) {
        snapshots.push(params.clone());
    }
    let path = PathStates::new(snapshots, PathSource::RecordedFromTraining)?;
    Ok(TrainOutcome {
        params,
        path,
        initial_loss,
        epoch_losses,
    })
}

const MAGIC: &[u8; 4] = b"SAEK";
const FORMAT_VERSION: u32 = 1;

/// Storage width of parameter values in a `SAEK` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn width(self) -> u32 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

fn write_block(w: &mut impl Write, p: &SaeParams, prec: Precision) -> std::io::Result<()> {
    for block in p.blocks() {
        for &x in block {
            match prec {
                Precision::F32 => w.write_all(&(x as f32).to_le_bytes())?,
                Precision::F64 => w.write_all(&x.to_le_bytes())?,
            }
        }
    }
    Ok(())
}

/// Writes `params` (and optionally a path) in the `SAEK` binary layout:
/// magic, then little-endian `u32` version, value width, N, d, snapshot
/// count and path source, followed by row-major matrices `W_e`, `b_e`,
/// `b_d`, `D` for the final parameters and then for each snapshot.
pub fn export_with_path(
    params: &SaeParams,
    path_states: Option<&PathStates>,
    path: impl AsRef<Path>,
    precision: Precision,
) -> Result<()> {
    params.validate()?;
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (count, source) = match path_states {
        Some(ps) => (ps.len() as u32, ps.source().tag()),
        None => (0, 0),
    };
    let header = [
        FORMAT_VERSION,
        precision.width(),
        params.n_concepts as u32,
        params.dim as u32,
        count,
        source,
    ];
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    for h in header {
        w.write_all(&h.to_le_bytes()).map_err(io)?;
    }
    write_block(&mut w, params, precision).map_err(io)?;
    if let Some(ps) = path_states {
        for s in ps.snapshots() {
            if (s.n_concepts, s.dim) != (params.n_concepts, params.dim) {
                return Err(Error::invalid(
                    "snapshot shape differs from final parameters",
                ));
            }
            write_block(&mut w, s, precision).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Lossless export of the final parameters only.
pub fn export_params(params: &SaeParams, path: impl AsRef<Path>) -> Result<()> {
    export_with_path(params, None, path, Precision::F64)
}

fn read_block(bytes: &[u8], n: usize, d: usize, width: usize) -> SaeParams {
    let mut vals = bytes.chunks_exact(width).map(|c| match width {
        4 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
        _ => f64::from_le_bytes(c.try_into().unwrap()),
    });
    let mut take = |k: usize| -> Vec<f64> { (&mut vals).take(k).collect() };
    SaeParams {
        n_concepts: n,
        dim: d,
        w_enc: take(n * d),
        b_enc: take(n),
        b_dec: take(d),
        dict: take(n * d),
    }
}

/// Reads a `SAEK` file, returning the final parameters and any stored path.
pub fn import_with_path(path: impl AsRef<Path>) -> Result<(SaeParams, Option<PathStates>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::UnrecognizedFormat("missing SAEK magic bytes".into()));
    }
    if bytes.len() < 28 {
        return Err(Error::CorruptParams("truncated header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, width, n, d, count, source) = (
        word(0),
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
        word(5),
    );
    if version != FORMAT_VERSION {
        return Err(Error::UnrecognizedFormat(format!("version {version}")));
    }
    if width != 4 && width != 8 {
        return Err(Error::CorruptParams(format!("value width {width}")));
    }
    if n == 0 || d == 0 {
        return Err(Error::CorruptParams("zero dimension in header".into()));
    }
    let block_len = (2 * n * d + n + d) * width;
    let body = &bytes[28..];
    if body.len() != block_len * (1 + count) {
        return Err(Error::CorruptParams(format!(
            "dimension header mismatch: header N={n}, d={d}, snapshots={count} implies {} bytes, found {}",
            block_len * (1 + count),
            body.len()
        )));
    }
    let params = read_block(&body[..block_len], n, d, width);
    params
        .validate()
        .map_err(|e| Error::CorruptParams(e.to_string()))?;
    let states = if count > 0 {
        let snaps: Vec<SaeParams> = body[block_len..]
            .chunks_exact(block_len)
            .map(|b| read_block(b, n, d, width))
            .collect();
        let source = PathSource::from_tag(source)
            .ok_or_else(|| Error::CorruptParams(format!("path source tag {source}")))?;
        Some(PathStates::new(snaps, source)?)
    } else {
        None
    };
    Ok((params, states))
}

pub fn import_params(path: impl AsRef<Path>) -> Result<SaeParams> {
    import_with_path(path).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::SentenceRecord;

    fn random_params(n: usize, d: usize, seed: u64) -> SaeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |k: usize| {
            (0..k)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        SaeParams {
            n_concepts: n,
            dim: d,
            w_enc: g(n * d),
            b_enc: g(n),
            b_dec: g(d),
            dict: g(n * d),
        }
    }

    fn scalar(w: f64) -> SaeParams {
        SaeParams {
            n_concepts: 1,
            dim: 1,
            w_enc: vec![w],
            b_enc: vec![0.0],
            b_dec: vec![0.0],
            dict: vec![1.0],
        }
    }

    #[test]
    fn encode_pass_through_and_relu() {
        let p = scalar(1.0);
        assert_eq!(p.encode(&[2.0]).unwrap().values(), &[2.0]);
        assert_eq!(p.encode(&[-2.0]).unwrap().values(), &[0.0]);
    }

    #[test]
    fn encode_matches_scalar_loop() {
        let p = random_params(4, 3, 11);
        let h = [0.3, -0.7, 1.1];
        let got = p.encode(&h).unwrap();
        for i in 0..4 {
            let mut z = p.b_enc[i];
            for k in 0..3 {
                z += p.w_enc[i * 3 + k] * (h[k] - p.b_dec[k]);
            }
            let want = if z > 0.0 { z } else { 0.0 };
            assert!((got.values()[i] - want).abs() <= 1e-15 * want.abs().max(1.0));
        }
    }

    #[test]
    fn encode_errors() {
        let p = random_params(4, 3, 1);
        assert!(matches!(
            p.encode(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            p.encode(&[1.0, f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn decode_cases() {
        let p = random_params(4, 3, 2);
        let zero = ConceptActivations::new(vec![0.0; 4]).unwrap();
        assert_eq!(p.decode(&zero).unwrap(), p.b_dec);
        let one = ConceptActivations::new(vec![0.0, 2.5, 0.0, 0.0]).unwrap();
        let got = p.decode(&one).unwrap();
        for k in 0..3 {
            assert_eq!(got[k], p.b_dec[k] + 2.5 * p.dict[3 + k]);
        }
        let f = ConceptActivations::new(vec![0.4, 1.3, 0.0, 2.2]).unwrap();
        let got = p.decode(&f).unwrap();
        for k in 0..3 {
            let mut want = p.b_dec[k];
            for i in 0..4 {
                want += f.values()[i] * p.dict[i * 3 + k];
            }
            assert!((got[k] - want).abs() <= 1e-12 * want.abs().max(1e-300));
        }
        assert!(p
            .decode(&ConceptActivations::new(vec![0.0; 3]).unwrap())
            .is_err());
    }

    #[test]
    fn clamp_cases() {
        let p = random_params(6, 4, 5);
        let h = [0.5, -0.2, 0.9, 0.1];
        let f = p.encode(&h).unwrap();
        let base = p.decode(&f).unwrap();
        for i in 0..6 {
            let (_, same) = p.clamp(&h, i, f.values()[i]).unwrap();
            assert_eq!(same, base);
        }
        let active = f.values().iter().position(|&v| v > 0.0).unwrap();
        let (f2, shifted) = p.clamp(&h, active, f.values()[active] + 10.0).unwrap();
        assert_eq!(f2.values()[active], f.values()[active] + 10.0);
        for k in 0..4 {
            let want = base[k] + 10.0 * p.decoder_row(active)[k];
            assert!((shifted[k] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
        if let Some(dead) = f.values().iter().position(|&v| v == 0.0) {
            assert_eq!(p.clamp(&h, dead, 0.0).unwrap().1, base);
        }
        assert!(matches!(
            p.clamp(&h, 6, 1.0),
            Err(Error::ConceptOutOfRange { .. })
        ));
    }

    #[test]
    fn active_concepts_cases() {
        let f = |v: Vec<f64>| ConceptActivations::new(v).unwrap();
        assert_eq!(
            active_concepts(&f(vec![0.0, 0.5, 0.0]), 0.0).indices(),
            &[1]
        );
        assert!(active_concepts(&f(vec![0.0; 4]), 0.0).is_empty());
        assert_eq!(
            active_concepts(&f(vec![0.1, 0.2, 0.3]), 0.15).indices(),
            &[1, 2]
        );
    }

    fn subspace_corpus(n: usize, seed: u64) -> ActivationCorpus {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = ActivationCorpus::new(d);
        for i in 0..n {
            let (s, t): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let v: Vec<f64> = (0..d).map(|k| s * a[k] + t * b[k]).collect();
            c.push(SentenceRecord::from_vector(format!("v{i}"), v).unwrap())
                .unwrap();
        }
        c
    }

    #[test]
    fn training_reduces_loss_and_keeps_unit_decoder() {
        let c = subspace_corpus(200, 4);
        let cfg = SaeTrainConfig {
            l1_weight: 1e-3,
            epochs: 60,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 9,
            snapshot_stride: 100,
        };
        let out = train(&c, 8, &cfg).unwrap();
        assert!(out.epoch_losses.last().unwrap() <= &out.epoch_losses[0]);
        for i in 0..8 {
            assert!((linalg::norm(out.params.decoder_row(i)) - 1.0).abs() < 1e-9);
        }
        let (mut err, mut norm) = (0.0, 0.0);
        for r in c.records() {
            let rec = out.params.reconstruct(r.vector()).unwrap();
            err += linalg::norm(&linalg::sub(&rec, r.vector()));
            norm += linalg::norm(r.vector());
        }
        assert!(
            err < 0.1 * norm,
            "relative reconstruction error {}",
            err / norm
        );
        assert_eq!(out.path.snapshots()[0], init_params(8, 8, 9));
        assert_eq!(out.path.snapshots().last().unwrap(), &out.params);
    }

    #[test]
    fn training_is_deterministic() {
        let c = subspace_corpus(50, 1);
        let cfg = SaeTrainConfig {
            epochs: 5,
            ..Default::default()
        };
        let a = train(&c, 6, &cfg).unwrap();
        let b = train(&c, 6, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.path, b.path);
    }

    #[test]
    fn training_rejects_divergence_and_empty() {
        let c = subspace_corpus(20, 2);
        let cfg = SaeTrainConfig {
            learning_rate: 1e12,
            epochs: 20,
            ..Default::default()
        };
        assert!(matches!(
            train(&c, 4, &cfg),
            Err(Error::NonFiniteLoss { .. })
        ));
        assert!(matches!(
            train(&ActivationCorpus::new(4), 4, &SaeTrainConfig::default()),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = random_params(5, 3, 8);
        let file = dir.path().join("p.saek");
        export_params(&p, &file).unwrap();
        assert_eq!(import_params(&file).unwrap(), p);

        let bad = dir.path().join("bad.saek");
        std::fs::write(&bad, b"NOPE0000000000000000000000000000").unwrap();
        let err = import_params(&bad).unwrap_err();
        assert!(err.to_string().contains("unrecognized format"));

        let bytes = std::fs::read(&file).unwrap();
        std::fs::write(&bad, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(import_params(&bad), Err(Error::CorruptParams(_))));
    }

    #[test]
    fn imported_params_encode_external_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ActivationCorpus::new(16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..40 {
            let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            c.push(SentenceRecord::from_vector(format!("x{i}"), v).unwrap())
                .unwrap();
        }
        let cfg = SaeTrainConfig {
            epochs: 3,
            snapshot_stride: 2,
            ..Default::default()
        };
        let out = train(&c, 64, &cfg).unwrap();
        let file = dir.path().join("sae.saek");
        export_with_path(&out.params, Some(&out.path), &file, Precision::F32).unwrap();
        let (p, path) = import_with_path(&file).unwrap();
        assert_eq!((p.n_concepts, p.dim), (64, 16));
        assert_eq!(path.unwrap().len(), out.path.len());
        for r in c.records() {
            assert_eq!(p.encode(r.vector()).unwrap().len(), 64);
        }
    }
}
