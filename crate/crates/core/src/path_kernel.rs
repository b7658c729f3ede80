//! The SAE encoder read as a kernel machine.
//!
//! For a concept mask `M`, the kernel between two inputs is the integral
//! along the parameter path of the Frobenius inner product of the masked
//! encoder Jacobians. The Jacobian row of concept `i` with respect to
//! `(w_i, b_e_i, b_d)` is `g_i * (h - b_d, 1, -w_i)` where `g_i` is the
//! ReLU gate, so the per-snapshot term reduces to
//!
//! ```text
//! sum_{i in M} g_i(x) g_i(y) * (<x - b_d, y - b_d> + 1 + |w_i|^2)
//! ```
//!
//! The path is either recorded during training or the straight line from
//! the zero state to the final parameters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::SentenceRecord;
use crate::error::{Error, Result};
use crate::linalg;
use crate::sae::{active_concepts, ConceptSet, SaeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathSource {
    RecordedFromTraining,
    LinearInterpolation,
}

impl PathSource {
    pub(crate) fn tag(self) -> u32 {
        match self {
            PathSource::RecordedFromTraining => 1,
            PathSource::LinearInterpolation => 2,
        }
    }

    pub(crate) fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(PathSource::RecordedFromTraining),
            2 => Some(PathSource::LinearInterpolation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathStates {
    snapshots: Vec<SaeParams>,
    source: PathSource,
}

impl PathStates {
    pub fn new(snapshots: Vec<SaeParams>, source: PathSource) -> Result<Self> {
        if snapshots.len() < 2 {
            return Err(Error::TooFewSteps(snapshots.len()));
        }
        let (n, d) = (snapshots[0].n_concepts, snapshots[0].dim);
        for s in &snapshots {
            s.validate()?;
            if (s.n_concepts, s.dim) != (n, d) {
                return Err(Error::invalid("snapshots disagree on (N, d)"));
            }
        }
        Ok(Self { snapshots, source })
    }

    pub fn snapshots(&self) -> &[SaeParams] {
        &self.snapshots
    }

    pub fn source(&self) -> PathSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn n_concepts(&self) -> usize {
        self.snapshots[0].n_concepts
    }

    pub fn dim(&self) -> usize {
        self.snapshots[0].dim
    }

    pub fn final_params(&self) -> &SaeParams {
        self.snapshots.last().expect("at least two snapshots")
    }
}

/// Straight-line path `alpha_j * final` for `alpha_j = j / (n - 1)`.
pub fn interpolate(final_params: &SaeParams, n: usize) -> Result<PathStates> {
    if n < 2 {
        return Err(Error::TooFewSteps(n));
    }
    final_params.validate()?;
    let zero = SaeParams::zeros(final_params.n_concepts, final_params.dim);
    let snapshots = (0..n)
        .map(|j| SaeParams::lerp(&zero, final_params, j as f64 / (n - 1) as f64))
        .collect();
    PathStates::new(snapshots, PathSource::LinearInterpolation)
}

/// The set of target concepts kept in gradient computation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptMask {
    pub n_concepts: usize,
    pub valid: ConceptSet,
}

impl ConceptMask {
    pub fn new(n_concepts: usize, valid: ConceptSet) -> Result<Self> {
        if let Some(m) = valid.max_index() {
            if m >= n_concepts {
                return Err(Error::ConceptOutOfRange {
                    index: m,
                    n_concepts,
                });
            }
        }
        Ok(Self { n_concepts, valid })
    }

    pub fn all(n_concepts: usize) -> Self {
        Self {
            n_concepts,
            valid: (0..n_concepts).collect(),
        }
    }

    pub fn empty(n_concepts: usize) -> Self {
        Self {
            n_concepts,
            valid: ConceptSet::new(),
        }
    }
}

/// How snapshot terms are weighted into the path integral.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    /// Trapezoid weights over the snapshots. On an interpolated path the
    /// zero-state endpoint is evaluated by its limit along the path, where
    /// the gate of concept `i` is the sign of `<w_i*, h> + b_e_i*`.
    #[default]
    Trapezoid,
    /// Uniform `1/n` average with the zero state evaluated literally: every
    /// pre-activation is 0 there, so it contributes nothing.
    Riemann,
}

impl Quadrature {
    pub fn weights(self, n: usize) -> Vec<f64> {
        match self {
            Quadrature::Riemann => vec![1.0 / n as f64; n],
            Quadrature::Trapezoid => {
                let h = 1.0 / (n - 1) as f64;
                (0..n)
                    .map(|j| if j == 0 || j == n - 1 { 0.5 * h } else { h })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub n_steps: usize,
    pub activation_threshold: f64,
    pub quadrature: Quadrature,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            n_steps: 32,
            activation_threshold: 0.0,
            quadrature: Quadrature::Trapezoid,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::TooFewSteps(self.n_steps));
        }
        if !(self.activation_threshold >= 0.0 && self.activation_threshold.is_finite()) {
            return Err(Error::Config {
                field: "activation_threshold".into(),
                reason: "must be finite and >= 0".into(),
            });
        }
        Ok(())
    }
}

/// Gradient of one gate with respect to the encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptGradient {
    pub concept: usize,
    pub d_w: Vec<f64>,
    pub d_b_enc: f64,
    pub d_b_dec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedGradient {
    pub n_concepts: usize,
    pub dim: usize,
    /// One entry per valid concept, in increasing concept order.
    pub rows: Vec<ConceptGradient>,
}

impl MaskedGradient {
    pub fn is_zero(&self) -> bool {
        self.rows.iter().all(|r| {
            r.d_b_enc == 0.0
                && r.d_w.iter().all(|&x| x == 0.0)
                && r.d_b_dec.iter().all(|&x| x == 0.0)
        })
    }

    /// The row of concept `i` over the flat parameter vector
    /// `[W_e (row-major), b_e, b_d]`.
    pub fn dense_row(&self, row: &ConceptGradient) -> Vec<f64> {
        let (n, d) = (self.n_concepts, self.dim);
        let mut out = vec![0.0; n * d + n + d];
        let i = row.concept;
        out[i * d..(i + 1) * d].copy_from_slice(&row.d_w);
        out[n * d + i] = row.d_b_enc;
        out[n * d + n..].copy_from_slice(&row.d_b_dec);
        out
    }
}

/// Analytic gradient of the masked gates with respect to `(W_e, b_e, b_d)`.
/// The ReLU subgradient at exactly zero is taken as 0.
pub fn masked_grad(params: &SaeParams, h: &[f64], mask: &ConceptMask) -> Result<MaskedGradient> {
    if mask.n_concepts != params.n_concepts {
        return Err(Error::DimensionMismatch {
            expected: params.n_concepts,
            found: mask.n_concepts,
        });
    }
    let z = params.pre_activations(h)?;
    let u = linalg::sub(h, &params.b_dec);
    let rows = mask
        .valid
        .iter()
        .map(|i| {
            if z[i] > 0.0 {
                ConceptGradient {
                    concept: i,
                    d_w: u.clone(),
                    d_b_enc: 1.0,
                    d_b_dec: params.encoder_row(i).iter().map(|w| -w).collect(),
                }
            } else {
                ConceptGradient {
                    concept: i,
                    d_w: vec![0.0; params.dim],
                    d_b_enc: 0.0,
                    d_b_dec: vec![0.0; params.dim],
                }
            }
        })
        .collect();
    Ok(MaskedGradient {
        n_concepts: params.n_concepts,
        dim: params.dim,
        rows,
    })
}

/// Per-input quantities the kernel needs at every snapshot.
#[derive(Debug, Clone)]
pub struct PathFeatures {
    centered: Vec<Vec<f64>>,
    gates: Vec<Vec<bool>>,
}

/// A path kernel bound to one path, mask and quadrature rule.
#[derive(Debug, Clone)]
pub struct PathKernel<'a> {
    states: &'a PathStates,
    valid: Vec<usize>,
    weights: Vec<f64>,
    /// `1 + |w_i|^2` per snapshot, per valid concept.
    offsets: Vec<Vec<f64>>,
    limit_at_zero: bool,
}

impl<'a> PathKernel<'a> {
    pub fn new(states: &'a PathStates, mask: &ConceptMask, quadrature: Quadrature) -> Result<Self> {
        if mask.n_concepts != states.n_concepts() {
            return Err(Error::DimensionMismatch {
                expected: states.n_concepts(),
                found: mask.n_concepts,
            });
        }
        let valid: Vec<usize> = mask.valid.iter().collect();
        let offsets = states
            .snapshots()
            .iter()
            .map(|s| {
                valid
                    .iter()
                    .map(|&i| {
                        let w = s.encoder_row(i);
                        1.0 + linalg::dot(w, w)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            states,
            valid,
            weights: quadrature.weights(states.len()),
            offsets,
            limit_at_zero: quadrature == Quadrature::Trapezoid
                && states.source() == PathSource::LinearInterpolation,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn features(&self, h: &[f64]) -> Result<PathFeatures> {
        let snaps = self.states.snapshots();
        let mut centered = Vec::with_capacity(snaps.len());
        let mut gates = Vec::with_capacity(snaps.len());
        for (j, s) in snaps.iter().enumerate() {
            let z = s.pre_activations(h)?;
            let g = if j == 0 && self.limit_at_zero {
                let fin = self.states.final_params();
                let zf = fin.pre_activations(h)?;
                self.valid
                    .iter()
                    .map(|&i| {
                        // first-order term of z_i(alpha), then the second-order one
                        let slope = zf[i] + linalg::dot(fin.encoder_row(i), &fin.b_dec);
                        if slope != 0.0 {
                            slope > 0.0
                        } else {
                            -linalg::dot(fin.encoder_row(i), &fin.b_dec) > 0.0
                        }
                    })
                    .collect()
            } else {
                self.valid.iter().map(|&i| z[i] > 0.0).collect()
            };
            centered.push(linalg::sub(h, &s.b_dec));
            gates.push(g);
        }
        Ok(PathFeatures { centered, gates })
    }

    pub fn eval(&self, a: &PathFeatures, b: &PathFeatures) -> f64 {
        let mut total = 0.0;
        for (j, &wj) in self.weights.iter().enumerate() {
            let (ga, gb) = (&a.gates[j], &b.gates[j]);
            let mut term = 0.0;
            let mut inner = None;
            for (k, off) in self.offsets[j].iter().enumerate() {
                if ga[k] && gb[k] {
                    let ip =
                        *inner.get_or_insert_with(|| linalg::dot(&a.centered[j], &b.centered[j]));
                    term += ip + off;
                }
            }
            total += wj * term;
        }
        total
    }

    pub fn kernel(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.eval(&self.features(x)?, &self.features(y)?))
    }

    pub fn distance_d1(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let (fx, fy) = (self.features(x)?, self.features(y)?);
        d1_from(
            self.eval(&fx, &fy),
            self.eval(&fx, &fx),
            self.eval(&fy, &fy),
        )
    }

    pub fn distance_d2(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let (fx, fy) = (self.features(x)?, self.features(y)?);
        Ok(d2_from(
            self.eval(&fx, &fy),
            self.eval(&fx, &fx),
            self.eval(&fy, &fy),
        ))
    }
}

/// Cosine-normalized kernel distance.
pub fn d1_from(kxy: f64, kxx: f64, kyy: f64) -> Result<f64> {
    if kxx <= 0.0 || kyy <= 0.0 {
        return Err(Error::ZeroSelfKernel);
    }
    Ok((1.0 - kxy / (kxx * kyy).sqrt()).clamp(0.0, 2.0))
}

/// Kernel-induced distance; the radicand is clipped at 0.
pub fn d2_from(kxy: f64, kxx: f64, kyy: f64) -> f64 {
    (kxx + kyy - 2.0 * kxy).max(0.0).sqrt()
}

pub fn path_kernel(x: &[f64], y: &[f64], states: &PathStates, mask: &ConceptMask) -> Result<f64> {
    PathKernel::new(states, mask, Quadrature::default())?.kernel(x, y)
}

pub fn distance_d1(x: &[f64], y: &[f64], states: &PathStates, mask: &ConceptMask) -> Result<f64> {
    PathKernel::new(states, mask, Quadrature::default())?.distance_d1(x, y)
}

pub fn distance_d2(x: &[f64], y: &[f64], states: &PathStates, mask: &ConceptMask) -> Result<f64> {
    PathKernel::new(states, mask, Quadrature::default())?.distance_d2(x, y)
}

/// Concepts a sentence activates that none of its tokens activate alone,
/// unioned over the example sentences.
pub fn build_mask(
    examples: &[&SentenceRecord],
    params: &SaeParams,
    threshold: f64,
) -> Result<ConceptMask> {
    let mut valid = ConceptSet::new();
    for ex in examples {
        let tvs = ex
            .token_vectors()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| Error::MissingTokenVectors(ex.id.clone()))?;
        let sentence = active_concepts(&params.encode(ex.vector())?, threshold);
        let mut token_union = ConceptSet::new();
        for tv in tvs {
            token_union = token_union.union(&active_concepts(&params.encode(tv)?, threshold));
        }
        valid = valid.union(&sentence.difference(&token_union));
    }
    ConceptMask::new(params.n_concepts, valid)
}

#[derive(Debug, Clone)]
pub struct Gram {
    pub matrix: Vec<Vec<f64>>,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

impl Gram {
    /// `min_eig >= -1e-8 * max_eig` (or an all-zero matrix).
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue >= -1e-8 * self.max_eigenvalue.abs().max(f64::MIN_POSITIVE)
    }
}

/// Gram matrix over all pairs, evaluated in parallel, with its spectrum
/// extremes.
pub fn gram(vectors: &[&[f64]], kernel: &PathKernel<'_>) -> Result<Gram> {
    if vectors.is_empty() {
        return Err(Error::invalid("gram needs at least one record"));
    }
    let feats: Vec<PathFeatures> = vectors
        .par_iter()
        .map(|v| kernel.features(v))
        .collect::<Result<_>>()?;
    let m = feats.len();
    let upper: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| (i..m).map(|j| kernel.eval(&feats[i], &feats[j])).collect())
        .collect();
    let mut matrix = vec![vec![0.0; m]; m];
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            matrix[i][i + off] = v;
            matrix[i + off][i] = v;
        }
    }
    let dm = nalgebra::DMatrix::from_fn(m, m, |i, j| matrix[i][j]);
    let eig = nalgebra::SymmetricEigen::new(dm).eigenvalues;
    let min_eigenvalue = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_eigenvalue = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(Gram {
        matrix,
        min_eigenvalue,
        max_eigenvalue,
    })
}
