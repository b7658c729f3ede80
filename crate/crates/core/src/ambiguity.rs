//! Ambiguity detection from path-kernel distances within a triplet of a
//! question and two interpretations.
//!
//! A triplet is scored by the average of its three pairwise `D1` distances.
//! A threshold is calibrated from labeled scores at the crossing of the two
//! class densities, and a triplet is called ambiguous when its score lies
//! strictly above it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationCorpus;
use crate::error::{Error, Result};
use crate::linalg;
use crate::path_kernel::{d1_from, d2_from, PathKernel};

pub const N_BINS: usize = 40;
pub const GRID_POINTS: usize = 1000;
pub const MIN_CLASS_SAMPLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Ambiguous,
    Unambiguous,
}

impl Label {
    fn class_name(self) -> &'static str {
        match self {
            Label::Ambiguous => "ambiguous",
            Label::Unambiguous => "unambiguous",
        }
    }
}

/// A question `q` with two interpretations `i1`, `i2`, given by record ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub q: String,
    pub i1: String,
    pub i2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl Triplet {
    pub fn new(
        q: impl Into<String>,
        i1: impl Into<String>,
        i2: impl Into<String>,
        label: Option<Label>,
    ) -> Result<Self> {
        let t = Self {
            q: q.into(),
            i1: i1.into(),
            i2: i2.into(),
            label,
        };
        t.check_distinct()?;
        Ok(t)
    }

    fn check_distinct(&self) -> Result<()> {
        if self.q == self.i1 || self.q == self.i2 || self.i1 == self.i2 {
            return Err(Error::invalid(format!(
                "triplet ids must be distinct: ({}, {}, {})",
                self.q, self.i1, self.i2
            )));
        }
        Ok(())
    }
}

/// Reads a triplet file, one JSON object per line.
pub fn read_triplets(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Triplet = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: k + 1,
            reason: e.to_string(),
        })?;
        t.check_distinct().map_err(|e| Error::MalformedLine {
            line: k + 1,
            reason: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_triplets(triplets: &[Triplet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triplets {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pairwise distances inside one triplet. `d_*` are `D1` values; the ratios
/// divide `D2` distances and are `None` when `D2(i1, i2) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletStats {
    pub d_q_i1: f64,
    pub d_q_i2: f64,
    pub d_i1_i2: f64,
    pub d2_q_i1: f64,
    pub d2_q_i2: f64,
    pub d2_i1_i2: f64,
    pub mean_d1: f64,
    pub ratio_1: Option<f64>,
    pub ratio_2: Option<f64>,
}

impl TripletStats {
    pub fn ratios_defined(&self) -> bool {
        self.ratio_1.is_some()
    }

    fn from_distances(d1: [f64; 3], d2: [f64; 3]) -> Self {
        let [d_q_i1, d_q_i2, d_i1_i2] = d1;
        let [d2_q_i1, d2_q_i2, d2_i1_i2] = d2;
        let (ratio_1, ratio_2) = if d2_i1_i2 > 0.0 {
            (Some(d2_q_i1 / d2_i1_i2), Some(d2_q_i2 / d2_i1_i2))
        } else {
            (None, None)
        };
        Self {
            d_q_i1,
            d_q_i2,
            d_i1_i2,
            d2_q_i1,
            d2_q_i2,
            d2_i1_i2,
            mean_d1: (d_q_i1 + d_q_i2 + d_i1_i2) / 3.0,
            ratio_1,
            ratio_2,
        }
    }
}

pub fn triplet_stats(
    t: &Triplet,
    corpus: &ActivationCorpus,
    kernel: &PathKernel<'_>,
) -> Result<TripletStats> {
    let q = kernel.features(corpus.require(&t.q)?.vector())?;
    let a = kernel.features(corpus.require(&t.i1)?.vector())?;
    let b = kernel.features(corpus.require(&t.i2)?.vector())?;
    let (kqq, kaa, kbb) = (
        kernel.eval(&q, &q),
        kernel.eval(&a, &a),
        kernel.eval(&b, &b),
    );
    let (kqa, kqb, kab) = (
        kernel.eval(&q, &a),
        kernel.eval(&q, &b),
        kernel.eval(&a, &b),
    );
    let d1 = [
        d1_from(kqa, kqq, kaa)?,
        d1_from(kqb, kqq, kbb)?,
        d1_from(kab, kaa, kbb)?,
    ];
    let d2 = [
        d2_from(kqa, kqq, kaa),
        d2_from(kqb, kqq, kbb),
        d2_from(kab, kaa, kbb),
    ];
    Ok(TripletStats::from_distances(d1, d2))
}

/// Stats for many triplets, evaluated in parallel, in input order.
pub fn triplet_stats_all(
    triplets: &[Triplet],
    corpus: &ActivationCorpus,
    kernel: &PathKernel<'_>,
) -> Result<Vec<TripletStats>> {
    triplets
        .par_iter()
        .map(|t| triplet_stats(t, corpus, kernel))
        .collect()
}

/// `1 - cos(x, y)` on the raw vectors.
pub fn baseline_cosine_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    linalg::cosine_distance(x, y).ok_or(Error::ZeroNorm)
}

/// The same statistics with cosine distance on the dense vectors in place of
/// both kernel distances.
pub fn baseline_stats(t: &Triplet, corpus: &ActivationCorpus) -> Result<TripletStats> {
    let q = corpus.require(&t.q)?.vector();
    let a = corpus.require(&t.i1)?.vector();
    let b = corpus.require(&t.i2)?.vector();
    let d = [
        baseline_cosine_distance(q, a)?,
        baseline_cosine_distance(q, b)?,
        baseline_cosine_distance(a, b)?,
    ];
    Ok(TripletStats::from_distances(d, d))
}

/// Equal-width bins over a closed range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub edges: Vec<f64>,
}

impl Bins {
    pub fn over(values: &[f64], n: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        let w = (hi - lo) / n as f64;
        let mut edges: Vec<f64> = (0..=n).map(|k| lo + k as f64 * w).collect();
        edges[n] = hi;
        Self { edges }
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Out-of-range values fall into the nearest end bin.
    pub fn index(&self, x: f64) -> usize {
        let n = self.len();
        let (lo, hi) = (self.edges[0], self.edges[n]);
        let k = ((x - lo) / (hi - lo) * n as f64).floor();
        if k < 0.0 {
            0
        } else {
            (k as usize).min(n - 1)
        }
    }

    pub fn counts(&self, values: &[f64]) -> Vec<usize> {
        let mut c = vec![0; self.len()];
        for &x in values {
            c[self.index(x)] += 1;
        }
        c
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// `0.9 * min(sd, IQR / 1.34) * m^(-1/5)`; falls back to `sd` when the IQR
/// vanishes and to a tiny positive width for constant samples.
pub fn silverman_bandwidth(x: &[f64]) -> f64 {
    let m = x.len() as f64;
    let mu = mean(x);
    let sd = if x.len() > 1 {
        (x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let mut spread = sd.min(iqr / 1.34);
    if spread <= 0.0 {
        spread = sd;
    }
    if spread <= 0.0 {
        spread = 1e-6 * mu.abs().max(1.0);
    }
    0.9 * spread * m.powf(-0.2)
}

/// Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub samples: Vec<f64>,
    pub bandwidth: f64,
}

impl Kde {
    pub fn fit(samples: &[f64]) -> Self {
        Self {
            samples: samples.to_vec(),
            bandwidth: silverman_bandwidth(samples),
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (self.samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        norm * self
            .samples
            .iter()
            .map(|s| (-0.5 * ((x - s) / h).powi(2)).exp())
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub threshold: f64,
    pub bins: Bins,
    /// Histogram counts over `bins` for the ambiguous, then unambiguous class.
    pub counts: [Vec<usize>; 2],
    pub kde: [Kde; 2],
    pub class_means: [f64; 2],
    /// Set when the densities do not cross between the class means and the
    /// midpoint of the means is used instead.
    pub fallback_midpoint: bool,
}

impl ThresholdModel {
    pub fn bandwidths(&self) -> [f64; 2] {
        [self.kde[0].bandwidth, self.kde[1].bandwidth]
    }

    /// Density curves on an even grid over the histogram range, each scaled
    /// so its peak matches its class's tallest bar.
    pub fn density_curves(&self, points: usize) -> Vec<[f64; 3]> {
        let (lo, hi) = (self.bins.edges[0], self.bins.edges[self.bins.len()]);
        let xs: Vec<f64> = (0..points)
            .map(|k| lo + (hi - lo) * k as f64 / (points.max(2) - 1) as f64)
            .collect();
        let raw: Vec<[f64; 2]> = xs
            .iter()
            .map(|&x| [self.kde[0].density(x), self.kde[1].density(x)])
            .collect();
        let scale = |c: usize| {
            let peak = raw.iter().map(|r| r[c]).fold(0.0, f64::max);
            let bar = *self.counts[c].iter().max().unwrap_or(&0) as f64;
            if peak > 0.0 {
                bar / peak
            } else {
                0.0
            }
        };
        let (sa, su) = (scale(0), scale(1));
        xs.iter()
            .zip(&raw)
            .map(|(&x, r)| [x, r[0] * sa, r[1] * su])
            .collect()
    }
}

fn split_by_label(labeled: &[(f64, Label)]) -> [Vec<f64>; 2] {
    let pick = |l: Label| {
        labeled
            .iter()
            .filter(|(_, y)| *y == l)
            .map(|(x, _)| *x)
            .collect::<Vec<_>>()
    };
    [pick(Label::Ambiguous), pick(Label::Unambiguous)]
}

pub fn calibrate(labeled: &[(f64, Label)]) -> Result<ThresholdModel> {
    if labeled.iter().any(|(x, _)| !x.is_finite()) {
        return Err(Error::NonFinite("calibration scores"));
    }
    let classes = split_by_label(labeled);
    for (c, l) in classes.iter().zip([Label::Ambiguous, Label::Unambiguous]) {
        if c.len() < MIN_CLASS_SAMPLES {
            return Err(Error::TooFewSamples {
                class: l.class_name(),
                count: c.len(),
                required: MIN_CLASS_SAMPLES,
            });
        }
    }
    let pooled: Vec<f64> = labeled.iter().map(|(x, _)| *x).collect();
    let bins = Bins::over(&pooled, N_BINS);
    let counts = [bins.counts(&classes[0]), bins.counts(&classes[1])];
    let kde = [Kde::fit(&classes[0]), Kde::fit(&classes[1])];
    let class_means = [mean(&classes[0]), mean(&classes[1])];

    let lo = class_means[0].min(class_means[1]);
    let hi = class_means[0].max(class_means[1]);
    let mid = 0.5 * (lo + hi);
    let crossing = if hi > lo {
        find_crossing(&kde, lo, hi, mid)
    } else {
        None
    };
    let (threshold, fallback_midpoint) = match crossing {
        Some(t) => (t, false),
        None => (mid, true),
    };
    Ok(ThresholdModel {
        threshold,
        bins,
        counts,
        kde,
        class_means,
        fallback_midpoint,
    })
}

/// Scans cell centers strictly inside `(lo, hi)` for sign changes of the
/// density difference and returns the one nearest `mid`.
fn find_crossing(kde: &[Kde; 2], lo: f64, hi: f64, mid: f64) -> Option<f64> {
    let xs: Vec<f64> = (0..GRID_POINTS)
        .map(|k| lo + (hi - lo) * (k as f64 + 0.5) / GRID_POINTS as f64)
        .collect();
    let diff: Vec<f64> = xs
        .iter()
        .map(|&x| kde[0].density(x) - kde[1].density(x))
        .collect();
    let mut best: Option<f64> = None;
    for k in 0..GRID_POINTS - 1 {
        let (a, b) = (diff[k], diff[k + 1]);
        if a == 0.0 || ((a > 0.0) != (b > 0.0) && b != 0.0) {
            let x = if a.abs() <= b.abs() { xs[k] } else { xs[k + 1] };
            if best.is_none_or(|t| (x - mid).abs() < (t - mid).abs()) {
                best = Some(x);
            }
        }
    }
    best
}

/// Ambiguous iff `mean_d1 > threshold`; equality is unambiguous.
pub fn classify(mean_d1: f64, model: &ThresholdModel) -> Label {
    if mean_d1 > model.threshold {
        Label::Ambiguous
    } else {
        Label::Unambiguous
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub score: f64,
    pub predicted: Label,
    pub truth: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub accuracy: f64,
    pub ambiguous_count: usize,
    pub unambiguous_count: usize,
    pub ambiguous_accuracy: Option<f64>,
    pub unambiguous_accuracy: Option<f64>,
    /// Shared mass of the two class-normalized score histograms.
    pub overlap_fraction: f64,
    pub bins: Bins,
    pub counts: [Vec<usize>; 2],
}

pub fn evaluate(predictions: &[Prediction]) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::invalid("evaluate needs at least one prediction"));
    }
    let total = predictions.len();
    let correct = predictions
        .iter()
        .filter(|p| p.predicted == p.truth)
        .count();
    let per_class = |l: Label| {
        let of: Vec<_> = predictions.iter().filter(|p| p.truth == l).collect();
        let ok = of.iter().filter(|p| p.predicted == l).count();
        (
            of.len(),
            (!of.is_empty()).then(|| ok as f64 / of.len() as f64),
        )
    };
    let (na, acc_a) = per_class(Label::Ambiguous);
    let (nu, acc_u) = per_class(Label::Unambiguous);

    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    let bins = Bins::over(&scores, N_BINS);
    let labeled: Vec<(f64, Label)> = predictions.iter().map(|p| (p.score, p.truth)).collect();
    let classes = split_by_label(&labeled);
    let counts = [bins.counts(&classes[0]), bins.counts(&classes[1])];
    let overlap_fraction = if na == 0 || nu == 0 {
        0.0
    } else {
        counts[0]
            .iter()
            .zip(&counts[1])
            .map(|(&a, &u)| (a as f64 / na as f64).min(u as f64 / nu as f64))
            .sum()
    };
    Ok(EvalReport {
        total,
        accuracy: correct as f64 / total as f64,
        ambiguous_count: na,
        unambiguous_count: nu,
        ambiguous_accuracy: acc_a,
        unambiguous_accuracy: acc_u,
        overlap_fraction,
        bins,
        counts,
    })
}
