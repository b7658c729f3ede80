//! Library results against slow reference computations.

mod common;

use approx::assert_relative_eq;
use common::*;
use concept_kernel::ambiguity::{silverman_bandwidth, Kde};
use concept_kernel::entropy::{cluster, entropy, entropy_oracle};
use concept_kernel::path_kernel::{
    gram, interpolate, masked_grad, ConceptMask, PathKernel, Quadrature,
};
use concept_kernel::retrieval::{fit_boosted, logistic_loss, top_fraction, BoostConfig};
use concept_kernel::sae::{ConceptActivations, SaeParams};
use rand::Rng;

#[test]
fn masked_grad_matches_central_differences() {
    let mut r = rng(101);
    for _ in 0..20 {
        let (n, d) = (r.random_range(1..7), r.random_range(1..7));
        let p = random_params(&mut r, n, d);
        let h = uniform(&mut r, d, 1.0);
        let mask = random_mask(&mut r, n);
        let g = masked_grad(&p, &h, &mask).unwrap();
        assert_eq!(g.rows.len(), mask.valid.len());
        for row in &g.rows {
            let z = gate(&p, &h, row.concept);
            let num = fd_gate_grad(&p, &h, row.concept, 1e-5);
            let ana = g.dense_row(row);
            if z > 0.0 && z < 1e-4 {
                continue;
            }
            let err: f64 = num
                .iter()
                .zip(&ana)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt().max(1.0);
            assert!(err <= 1e-4 * scale, "err {err}");
        }
    }
}

#[test]
fn kernel_matches_triple_loop_on_recorded_paths() {
    let mut r = rng(202);
    for q in [Quadrature::Trapezoid, Quadrature::Riemann] {
        for _ in 0..10 {
            let (n, d, len) = (
                r.random_range(1..9),
                r.random_range(1..9),
                r.random_range(2..9),
            );
            let path = random_path(&mut r, n, d, len);
            let mask = random_mask(&mut r, n);
            let (x, y) = (uniform(&mut r, d, 1.0), uniform(&mut r, d, 1.0));
            let k = PathKernel::new(&path, &mask, q).unwrap();
            let gates: Vec<&SaeParams> = path.snapshots().iter().collect();
            let want = triple_loop_kernel(&x, &y, path.snapshots(), &gates, &mask, &q.weights(len));
            let got = k.kernel(&x, &y).unwrap();
            assert_relative_eq!(got, want, max_relative = 1e-10, epsilon = 1e-300);
        }
    }
}

#[test]
fn interpolated_zero_state_uses_limit_gates() {
    let mut r = rng(303);
    for _ in 0..10 {
        let (n, d, steps) = (
            r.random_range(1..9),
            r.random_range(1..9),
            r.random_range(2..9),
        );
        let fin = random_params(&mut r, n, d);
        let path = interpolate(&fin, steps).unwrap();
        let mask = random_mask(&mut r, n);
        let (x, y) = (uniform(&mut r, d, 1.0), uniform(&mut r, d, 1.0));
        // just after the start the gates already have their limiting sign
        let near_zero = SaeParams::lerp(&SaeParams::zeros(n, d), &fin, 1e-6);
        let mut gates: Vec<&SaeParams> = path.snapshots().iter().collect();
        gates[0] = &near_zero;
        let w = Quadrature::Trapezoid.weights(steps);
        let want = triple_loop_kernel(&x, &y, path.snapshots(), &gates, &mask, &w);
        let got = PathKernel::new(&path, &mask, Quadrature::Trapezoid)
            .unwrap()
            .kernel(&x, &y)
            .unwrap();
        assert_relative_eq!(got, want, max_relative = 1e-10, epsilon = 1e-300);

        let literal: Vec<&SaeParams> = path.snapshots().iter().collect();
        let want_r = triple_loop_kernel(
            &x,
            &y,
            path.snapshots(),
            &literal,
            &mask,
            &Quadrature::Riemann.weights(steps),
        );
        let got_r = PathKernel::new(&path, &mask, Quadrature::Riemann)
            .unwrap()
            .kernel(&x, &y)
            .unwrap();
        assert_relative_eq!(got_r, want_r, max_relative = 1e-10, epsilon = 1e-300);
    }
}

#[test]
fn distances_follow_from_kernel_values() {
    let mut r = rng(404);
    let path = random_path(&mut r, 6, 5, 4);
    let mask = ConceptMask::all(6);
    let k = PathKernel::new(&path, &mask, Quadrature::Trapezoid).unwrap();
    for _ in 0..20 {
        let (x, y) = (uniform(&mut r, 5, 1.0), uniform(&mut r, 5, 1.0));
        let (kxy, kxx, kyy) = (
            k.kernel(&x, &y).unwrap(),
            k.kernel(&x, &x).unwrap(),
            k.kernel(&y, &y).unwrap(),
        );
        if kxx == 0.0 || kyy == 0.0 {
            continue;
        }
        let d1 = (1.0 - kxy / (kxx * kyy).sqrt()).clamp(0.0, 2.0);
        let d2 = (kxx + kyy - 2.0 * kxy).max(0.0).sqrt();
        assert_relative_eq!(k.distance_d1(&x, &y).unwrap(), d1, epsilon = 1e-12);
        assert_relative_eq!(k.distance_d2(&x, &y).unwrap(), d2, epsilon = 1e-9);
    }
}

#[test]
fn gram_spectrum_matches_jacobi() {
    let mut r = rng(505);
    for _ in 0..5 {
        let path = random_path(&mut r, 5, 6, 3);
        let mask = ConceptMask::all(5);
        let k = PathKernel::new(&path, &mask, Quadrature::Trapezoid).unwrap();
        let xs: Vec<Vec<f64>> = (0..8).map(|_| uniform(&mut r, 6, 1.0)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let g = gram(&refs, &k).unwrap();
        let eig = jacobi_eigenvalues(&g.matrix);
        let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(g.max_eigenvalue, hi, max_relative = 1e-9);
        assert!((g.min_eigenvalue - lo).abs() <= 1e-9 * hi);
    }
}

/// Average linkage recomputed from the original distances at every step.
fn naive_average_linkage(e: &[Vec<f64>], threshold: f64) -> Vec<usize> {
    let m = e.len();
    let unit: Vec<Vec<f64>> = e
        .iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let d = |a: usize, b: usize| -> f64 {
        let c: f64 = unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum();
        (1.0 - c).clamp(0.0, 2.0)
    };
    let mut clusters: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut s = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        s += d(i, j);
                    }
                }
                let link = s / (clusters[a].len() * clusters[b].len()) as f64;
                if best.is_none_or(|(bd, _, _)| link < bd) {
                    best = Some((link, a, b));
                }
            }
        }
        match best {
            Some((link, a, b)) if link <= threshold => {
                let moved = clusters.remove(b);
                clusters[a].extend(moved);
            }
            _ => break,
        }
    }
    let mut label = vec![0; m];
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by_key(|&c| *clusters[c].iter().min().unwrap());
    for (new, &c) in order.iter().enumerate() {
        for &i in &clusters[c] {
            label[i] = new;
        }
    }
    label
}

#[test]
fn clustering_matches_naive_average_linkage() {
    let mut r = rng(606);
    for _ in 0..30 {
        let m = r.random_range(1..25);
        let d = r.random_range(2..6);
        let e: Vec<Vec<f64>> = (0..m).map(|_| uniform(&mut r, d, 1.0)).collect();
        let t = r.random_range(0.05..1.2);
        let got = cluster(&e, t).unwrap();
        assert_eq!(got.labels, naive_average_linkage(&e, t));
    }
}

#[test]
fn entropy_oracle_is_entropy_of_summed_class_probabilities() {
    let seqs = vec![
        ("a".to_string(), 0.1),
        ("b".to_string(), 0.2),
        ("c".to_string(), 0.3),
        ("d".to_string(), 0.4),
    ];
    let part = vec![vec!["a".into(), "d".into()], vec!["b".into(), "c".into()]];
    let h = entropy_oracle(&seqs, &part, 2.0).unwrap();
    assert_relative_eq!(h, 1.0, epsilon = 1e-12);
    let part3 = vec![
        vec!["a".into()],
        vec!["b".into(), "c".into()],
        vec!["d".into()],
    ];
    let want = -(0.1f64 * 0.1f64.log2() + 0.5 * 0.5f64.log2() + 0.4 * 0.4f64.log2());
    assert_relative_eq!(
        entropy_oracle(&seqs, &part3, 2.0).unwrap(),
        want,
        epsilon = 1e-12
    );
    assert_relative_eq!(
        entropy(&[0.1, 0.5, 0.4], std::f64::consts::E).unwrap(),
        want * 2f64.ln(),
        epsilon = 1e-12
    );
}

#[test]
fn top_fraction_matches_sorting() {
    let mut r = rng(707);
    for _ in 0..50 {
        let n = r.random_range(1..30);
        let v: Vec<f64> = (0..n)
            .map(|_| {
                if r.random_bool(0.4) {
                    0.0
                } else {
                    (r.random_range(0..5) as f64) * 0.5
                }
            })
            .collect();
        let rho = r.random_range(0.05..1.0);
        let got = top_fraction(&ConceptActivations::new(v.clone()).unwrap(), rho).unwrap();
        let mut pos: Vec<usize> = (0..n).filter(|&i| v[i] > 0.0).collect();
        pos.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        let k = (rho * pos.len() as f64).ceil() as usize;
        let mut want: Vec<usize> = pos[..k].to_vec();
        want.sort();
        assert_eq!(got.indices(), &want[..]);
    }
}

#[test]
fn boosting_separates_a_threshold_rule() {
    let mut r = rng(808);
    let x: Vec<Vec<f64>> = (0..80).map(|_| uniform(&mut r, 3, 1.0)).collect();
    let y: Vec<bool> = x.iter().map(|v| v[1] > 0.2).collect();
    let p = fit_boosted(&x, &y, 0, &BoostConfig::default()).unwrap();
    for w in p.loss_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
    let f: Vec<f64> = x.iter().map(|v| p.score(v)).collect();
    assert_relative_eq!(
        *p.loss_history.last().unwrap(),
        logistic_loss(&f, &y),
        max_relative = 1e-9
    );
    let correct = x
        .iter()
        .zip(&y)
        .filter(|(v, &t)| (p.predict_proba(v) > 0.5) == t)
        .count();
    assert_eq!(correct, x.len());
    assert!(p.stumps.iter().all(|s| s.feature == 1));
}

#[test]
fn kde_integrates_to_one_with_silverman_bandwidth() {
    let mut r = rng(909);
    let xs: Vec<f64> = (0..200)
        .map(|_| r.random_range(0.0..1.0) + r.random_range(0.0..1.0))
        .collect();
    let kde = Kde::fit(&xs);
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut s = xs.clone();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1.0);
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
    };
    let want = 0.9 * sd.min((q(0.75) - q(0.25)) / 1.34) * n.powf(-0.2);
    assert_relative_eq!(silverman_bandwidth(&xs), want, max_relative = 1e-12);
    let (a, b, steps) = (-1.0, 3.0, 4000);
    let h = (b - a) / steps as f64;
    let area: f64 = (0..steps)
        .map(|k| kde.density(a + (k as f64 + 0.5) * h) * h)
        .sum();
    assert_relative_eq!(area, 1.0, epsilon = 1e-6);
}
