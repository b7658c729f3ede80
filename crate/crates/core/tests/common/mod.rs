//! Helpers shared by the integration tests: random parameters and paths,
//! plus slow reference implementations written independently of the
//! library.

#![allow(dead_code)]

use concept_kernel::path_kernel::{ConceptMask, PathSource, PathStates};
use concept_kernel::sae::{ConceptSet, SaeParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_params(rng: &mut ChaCha8Rng, n: usize, d: usize) -> SaeParams {
    SaeParams {
        n_concepts: n,
        dim: d,
        w_enc: uniform(rng, n * d, 1.0),
        b_enc: uniform(rng, n, 0.5),
        b_dec: uniform(rng, d, 0.5),
        dict: uniform(rng, n * d, 1.0),
    }
}

/// Parameters as the trainer initializes them (`W_e` uniform in
/// `+-1/sqrt(d)`, `b_d = 0`) but with a random encoder bias.
pub fn init_like_params(rng: &mut ChaCha8Rng, n: usize, d: usize) -> SaeParams {
    let s = 1.0 / (d as f64).sqrt();
    SaeParams {
        n_concepts: n,
        dim: d,
        w_enc: uniform(rng, n * d, s),
        b_enc: uniform(rng, n, 0.5),
        b_dec: vec![0.0; d],
        dict: uniform(rng, n * d, s),
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> ConceptMask {
    let valid: ConceptSet = (0..n).filter(|_| rng.random_bool(0.6)).collect();
    ConceptMask::new(n, valid).unwrap()
}

/// A recorded path of `len` independent random snapshots.
pub fn random_path(rng: &mut ChaCha8Rng, n: usize, d: usize, len: usize) -> PathStates {
    let snaps = (0..len).map(|_| random_params(rng, n, d)).collect();
    PathStates::new(snaps, PathSource::RecordedFromTraining).unwrap()
}

pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = uniform(rng, d, 1.0);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Gate `i` of `p` at input `h`, written out directly.
pub fn gate(p: &SaeParams, h: &[f64], i: usize) -> f64 {
    let mut z = p.b_enc[i];
    for k in 0..p.dim {
        z += p.w_enc[i * p.dim + k] * (h[k] - p.b_dec[k]);
    }
    z.max(0.0)
}

/// Central differences of gate `i` over `[W_e, b_e, b_d]`.
pub fn fd_gate_grad(p: &SaeParams, h: &[f64], i: usize, step: f64) -> Vec<f64> {
    let (n, d) = (p.n_concepts, p.dim);
    let mut out = vec![0.0; n * d + n + d];
    for k in 0..out.len() {
        let mut plus = p.clone();
        let mut minus = p.clone();
        let (pp, mm) = if k < n * d {
            (&mut plus.w_enc[k], &mut minus.w_enc[k])
        } else if k < n * d + n {
            (&mut plus.b_enc[k - n * d], &mut minus.b_enc[k - n * d])
        } else {
            (
                &mut plus.b_dec[k - n * d - n],
                &mut minus.b_dec[k - n * d - n],
            )
        };
        *pp += step;
        *mm -= step;
        out[k] = (gate(&plus, h, i) - gate(&minus, h, i)) / (2.0 * step);
    }
    out
}

/// Dense gradient of gate `i` over `[W_e, b_e, b_d]`, from the chain rule.
pub fn dense_gate_grad(p: &SaeParams, h: &[f64], i: usize, on: bool) -> Vec<f64> {
    let (n, d) = (p.n_concepts, p.dim);
    let mut g = vec![0.0; n * d + n + d];
    if on {
        for k in 0..d {
            g[i * d + k] = h[k] - p.b_dec[k];
            g[n * d + n + k] = -p.w_enc[i * d + k];
        }
        g[n * d + i] = 1.0;
    }
    g
}

/// Sum over snapshots, masked concepts and every parameter coordinate,
/// weighted by `weights`. Gates are read from `p` unless `gates_at` supplies
/// the parameters that decide them.
pub fn triple_loop_kernel(
    x: &[f64],
    y: &[f64],
    snaps: &[SaeParams],
    gates_at: &[&SaeParams],
    mask: &ConceptMask,
    weights: &[f64],
) -> f64 {
    let mut total = 0.0;
    for (j, p) in snaps.iter().enumerate() {
        let gp = gates_at[j];
        let mut term = 0.0;
        for i in mask.valid.iter() {
            let gx = dense_gate_grad(p, x, i, on(gp, x, i));
            let gy = dense_gate_grad(p, y, i, on(gp, y, i));
            let mut ip = 0.0;
            for k in 0..gx.len() {
                ip += gx[k] * gy[k];
            }
            term += ip;
        }
        total += weights[j] * term;
    }
    total
}

fn on(p: &SaeParams, h: &[f64], i: usize) -> bool {
    gate(p, h, i) > 0.0
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}
