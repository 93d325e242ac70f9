//! Frozen-value and invariant checks for the decodability metrics: coherence,
//! margin reports, the per-star max-min solver, Chebyshev bounds, and the
//! softmax scale.

use factmlp_core::decodability::{
    chebyshev_star_bounds, coherence, optimal_outputs, rho, rho_min_given, softmax_lambda,
    SolverCfg,
};
use factmlp_core::embeddings::{gen_embeddings, gen_p_hot_padded, EmbedKind};
use factmlp_core::{EmbeddingSet, FactError};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn set(rows: &[&[f64]]) -> EmbeddingSet {
    let n = rows.len();
    let d = rows[0].len();
    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    EmbeddingSet::from_matrix(m, "test").unwrap()
}

fn cfg() -> SolverCfg {
    SolverCfg::default()
}

#[test]
fn coherence_frozen_values() {
    let v = set(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
    assert!(coherence(&v).unwrap().abs() <= 1e-12);

    let v = set(&[&[1.0, 0.0], &[1.0, 0.0]]);
    assert!((coherence(&v).unwrap() - 1.0).abs() <= 1e-12);

    let v = gen_p_hot_padded(2, 4, 2, 100).unwrap();
    assert!(coherence(&v).unwrap() >= 100.0 / 101.0 - 1e-12);
}

#[test]
fn coherence_rejects_bad_input() {
    let v = set(&[&[1.0, 0.0]]);
    assert!(matches!(coherence(&v), Err(FactError::InvalidArgument(_))));
    let v = set(&[&[1.0, 0.0], &[0.0, 0.0]]);
    assert!(matches!(coherence(&v), Err(FactError::DegenerateInput(_))));
}

#[test]
fn margin_report_frozen_values() {
    let s = 1.0 / 2.0_f64.sqrt();
    let v = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let u = set(&[&[s, -s], &[-s, s]]);
    let rep = rho_min_given(&v, &u).unwrap();
    assert!((rep.rho_min - 1.0).abs() <= 1e-12);

    // Self-decoding of a unit-norm set: closed-form sqrt((1 - cos)/2).
    let v = gen_embeddings(EmbedKind::Sphere, 6, 4, 3).unwrap();
    let rep = rho_min_given(&v, &v).unwrap();
    let mut want = f64::INFINITY;
    for i in 0..6 {
        for j in 0..6 {
            if i != j {
                let c = v.row(i).dot(&v.row(j));
                want = want.min(((1.0 - c) / 2.0).sqrt());
            }
        }
    }
    assert!((rep.rho_min - want).abs() <= 1e-9, "{} vs {want}", rep.rho_min);

    // Collinear pair with hand-picked outputs.
    let v = set(&[&[1.0, 0.0], &[2.0, 0.0]]);
    let u = set(&[&[-1.0, 0.0], &[1.0, 0.0]]);
    let rep = rho_min_given(&v, &u).unwrap();
    assert!((rep.rho_min - 1.0).abs() <= 1e-12);
}

#[test]
fn margin_report_internal_consistency() {
    let v = gen_embeddings(EmbedKind::Gaussian, 7, 3, 11).unwrap();
    let u = gen_embeddings(EmbedKind::Sphere, 7, 3, 12).unwrap();
    let rep = rho_min_given(&v, &u).unwrap();
    let per_min = rep
        .per_index_margins
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    assert!((rep.rho_min - per_min).abs() <= 1e-12);

    let (wi, wj) = rep.worst_pair;
    let diff = v.row(wi) - v.row(wj);
    let m = diff.dot(&u.row(wi)) / (diff.norm() * u.row(wi).norm());
    assert!((m - rep.rho_min).abs() <= 1e-12);
}

#[test]
fn margin_report_rejects_degenerate_input() {
    let v = set(&[&[1.0, 0.0], &[1.0, 0.0]]);
    let u = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
    match rho_min_given(&v, &u) {
        Err(FactError::DegenerateInput(msg)) => {
            assert!(msg.contains('0') && msg.contains('1'), "message: {msg}");
        }
        other => panic!("expected degenerate-input, got {other:?}"),
    }

    let v = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let u = set(&[&[1.0, 0.0], &[0.0, 0.0]]);
    assert!(matches!(
        rho_min_given(&v, &u),
        Err(FactError::InvalidArgument(_))
    ));
}

#[test]
fn optimal_outputs_collinear_pair_points_away() {
    let v = set(&[&[1.0, 0.0], &[2.0, 0.0]]);
    let out = optimal_outputs(&v, &cfg()).unwrap();
    let u0 = out.u.row(0);
    assert!((u0.norm() - 1.0).abs() <= 1e-9);
    let cos = u0.dot(&DVector::from_vec(vec![-1.0, 0.0])).clamp(-1.0, 1.0);
    assert!(cos.acos() <= 1e-3, "angular error {}", cos.acos());
    assert!((out.achieved_rho - 1.0).abs() <= 1e-6);
}

#[test]
fn optimal_outputs_two_axis_points() {
    let v = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let out = optimal_outputs(&v, &cfg()).unwrap();
    let s = 1.0 / 2.0_f64.sqrt();
    let want = DVector::from_vec(vec![s, -s]);
    let cos = out.u.row(0).dot(&want).clamp(-1.0, 1.0);
    assert!(cos.acos() <= 1e-3);
    assert!((out.achieved_rho - 1.0).abs() <= 1e-6);
}

#[test]
fn optimal_outputs_orthonormal_values() {
    let v = EmbeddingSet::from_matrix(DMatrix::identity(2, 2), "i2").unwrap();
    let out = optimal_outputs(&v, &cfg()).unwrap();
    assert!((out.achieved_rho - 1.0).abs() <= 1e-3);

    let v = EmbeddingSet::from_matrix(DMatrix::identity(4, 4), "i4").unwrap();
    let out = optimal_outputs(&v, &cfg()).unwrap();
    let want = (4.0_f64 / 6.0).sqrt();
    assert!(
        (out.achieved_rho - want).abs() <= 1e-3,
        "{} vs {want}",
        out.achieved_rho
    );
}

#[test]
fn optimal_outputs_rows_are_unit_and_consistent() {
    let v = gen_embeddings(EmbedKind::Gaussian, 9, 5, 21).unwrap();
    let out = optimal_outputs(&v, &cfg()).unwrap();
    for i in 0..9 {
        let n = out.u.row(i).norm();
        assert!((n - 1.0).abs() <= 1e-9);
    }
    let rep = rho_min_given(&v, &out.u).unwrap();
    assert!((rep.rho_min - out.achieved_rho).abs() <= 1e-9);
}

#[test]
fn feasibility_dominance_over_self_decoding() {
    for seed in 0..8 {
        let v = gen_embeddings(EmbedKind::Sphere, 10, 6, seed).unwrap();
        let out = optimal_outputs(&v, &cfg()).unwrap();
        let base = rho_min_given(&v, &v).unwrap().rho_min;
        assert!(
            out.achieved_rho >= base - 1e-9,
            "seed {seed}: {} < {base}",
            out.achieved_rho
        );
    }
}

#[test]
fn random_feasible_outputs_never_beat_optimum() {
    for seed in 0..6 {
        let v = gen_embeddings(EmbedKind::Sphere, 8, 4, 100 + seed).unwrap();
        let u = gen_embeddings(EmbedKind::Sphere, 8, 4, 200 + seed).unwrap();
        let feas = rho_min_given(&v, &u).unwrap().rho_min;
        let opt = optimal_outputs(&v, &cfg()).unwrap().achieved_rho;
        assert!(feas <= opt + 1e-6, "seed {seed}: {feas} > {opt}");
    }
}

/// Dense 1-degree sweep of the unit circle: the exact reference for every
/// per-star subproblem in d = 2.
fn grid_star_optimum(v: &EmbeddingSet, i: usize) -> f64 {
    let n = v.n();
    let dirs: Vec<DVector<f64>> = (0..n)
        .filter(|&j| j != i)
        .map(|j| {
            let d = v.row(i) - v.row(j);
            let norm = d.norm();
            d / norm
        })
        .collect();
    let mut best = f64::NEG_INFINITY;
    for k in 0..360 {
        let theta = (k as f64).to_radians();
        let u = DVector::from_vec(vec![theta.cos(), theta.sin()]);
        let margin = dirs
            .iter()
            .map(|x| x.dot(&u))
            .fold(f64::INFINITY, f64::min);
        best = best.max(margin);
    }
    best
}

#[test]
fn solver_matches_circle_grid_oracle() {
    for n in 3..=6usize {
        for seed in 0..3u64 {
            let v = gen_embeddings(EmbedKind::Gaussian, n, 2, 1000 + 17 * n as u64 + seed).unwrap();
            let out = optimal_outputs(&v, &cfg()).unwrap();
            let rep = rho_min_given(&v, &out.u).unwrap();
            for i in 0..n {
                let grid = grid_star_optimum(&v, i);
                let solver = rep.per_index_margins[i];
                // The grid point is feasible, so the solver must not trail it;
                // the grid itself can undershoot by at most half a step (the
                // objective is 1-Lipschitz on the circle).
                assert!(
                    solver >= grid - 1e-4,
                    "n={n} seed={seed} star {i}: solver {solver} < grid {grid}"
                );
                assert!(
                    solver <= grid + 0.009,
                    "n={n} seed={seed} star {i}: solver {solver} implausibly above grid {grid}"
                );
            }
        }
    }
}

#[test]
fn rho_frozen_values_and_errors() {
    let v = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
    assert!((rho(&v, &cfg()).unwrap() - 1.0).abs() <= 1e-6);

    let v = set(&[&[1.0, 0.0], &[1.0, 0.0]]);
    assert!(matches!(
        rho(&v, &cfg()),
        Err(FactError::DegenerateInput(_))
    ));
}

#[test]
fn coherence_lower_bound_holds() {
    for (n, d, seed) in [(8usize, 4usize, 1u64), (16, 8, 2), (32, 16, 3), (64, 32, 4)] {
        let v = gen_embeddings(EmbedKind::Sphere, n, d, seed).unwrap();
        let mu = coherence(&v).unwrap();
        let r = rho(&v, &cfg()).unwrap();
        let bound = ((1.0 - mu) / 2.0).sqrt();
        assert!(r >= bound - 1e-6, "n={n} d={d}: rho {r} < bound {bound}");
    }
    // The bound stays informative on deliberately coherent sets too.
    let v = gen_p_hot_padded(4, 6, 2, 20).unwrap();
    let mu = coherence(&v).unwrap();
    let r = rho(&v, &cfg()).unwrap();
    assert!(r >= ((1.0 - mu) / 2.0).sqrt() - 1e-6);
}

#[test]
fn rho_is_invariant_to_scaling_translation_rotation() {
    let v = gen_embeddings(EmbedKind::Gaussian, 6, 3, 42).unwrap();
    let base = rho(&v, &cfg()).unwrap();

    let scaled =
        EmbeddingSet::from_matrix(v.data() * 3.7, "scaled").unwrap();
    assert!((rho(&scaled, &cfg()).unwrap() - base).abs() <= 1e-9);

    let mut shifted = v.data().clone();
    for i in 0..shifted.nrows() {
        shifted[(i, 0)] += 2.5;
        shifted[(i, 1)] -= 1.25;
        shifted[(i, 2)] += 0.75;
    }
    let shifted = EmbeddingSet::from_matrix(shifted, "shifted").unwrap();
    assert!((rho(&shifted, &cfg()).unwrap() - base).abs() <= 1e-9);

    // Householder reflection, orthogonal by construction.
    let w = DVector::from_vec(vec![1.0, 2.0, -0.5]).normalize();
    let q = DMatrix::identity(3, 3) - 2.0 * &w * w.transpose();
    let rotated = EmbeddingSet::from_matrix(v.data() * &q, "rotated").unwrap();
    assert!((rho(&rotated, &cfg()).unwrap() - base).abs() <= 1e-9);
}

#[test]
fn conditioning_sandwich_bounds_rho_change() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..4 {
        let v = gen_embeddings(EmbedKind::Sphere, 8, 4, 50 + trial).unwrap();
        let base = rho(&v, &cfg()).unwrap();

        // T = Q1 diag(spread) Q2 with controlled condition number.
        let kappa_t: f64 = [2.0, 10.0, 50.0, 100.0][trial as usize];
        let q1 = random_orthogonal(4, &mut rng);
        let q2 = random_orthogonal(4, &mut rng);
        let mut s = DMatrix::zeros(4, 4);
        for i in 0..4 {
            let t = i as f64 / 3.0;
            s[(i, i)] = kappa_t.powf(t);
        }
        let t_mat = q1 * s * q2;
        let svd = t_mat.clone().svd(false, false);
        let kappa = svd.singular_values.max() / svd.singular_values.min();

        let mapped =
            EmbeddingSet::from_matrix(v.data() * t_mat.transpose(), "mapped").unwrap();
        let r = rho(&mapped, &cfg()).unwrap();
        assert!(
            r >= base / kappa - 1e-6 && r <= kappa * base + 1e-6,
            "trial {trial}: rho {r} outside [{}, {}]",
            base / kappa,
            kappa * base
        );
    }
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let qr = a.qr();
    qr.q()
}

#[test]
fn chebyshev_frozen_values() {
    let v = set(&[&[0.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0]]);
    let b = chebyshev_star_bounds(&v, 0, false).unwrap();
    assert!((b.m_edge - (-1.0)).abs() <= 1e-12);
    assert!(b.upper.abs() <= 1e-12);
    assert!(b.lower <= b.upper + 1e-12);

    let v = set(&[
        &[1.0, 0.0, 0.0],
        &[0.0, 1.0, 0.0],
        &[0.0, 0.0, 1.0],
    ]);
    let b = chebyshev_star_bounds(&v, 0, false).unwrap();
    assert!((b.m_edge - 0.5).abs() <= 1e-12);
    assert!((b.upper - 3.0_f64.sqrt() / 2.0).abs() <= 1e-12);

    let b = chebyshev_star_bounds(&v, 0, true).unwrap();
    assert_eq!(b.s_a, Some(0.0));
    assert!(b.lower >= (0.5_f64).sqrt() - 1e-12);
}

#[test]
fn chebyshev_rejects_bad_anchor() {
    let v = set(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]);
    assert!(matches!(
        chebyshev_star_bounds(&v, 3, false),
        Err(FactError::InvalidArgument(_))
    ));
}

#[test]
fn chebyshev_sandwich_brackets_solver() {
    for seed in 0..6u64 {
        let v = gen_embeddings(EmbedKind::Sphere, 7, 4, 300 + seed).unwrap();
        let out = optimal_outputs(&v, &cfg()).unwrap();
        let rep = rho_min_given(&v, &out.u).unwrap();
        for a in 0..7 {
            let b = chebyshev_star_bounds(&v, a, true).unwrap();
            let star = rep.per_index_margins[a];
            assert!(
                star >= b.lower - 1e-6 && star <= b.upper + 1e-6,
                "seed {seed} anchor {a}: {star} outside [{}, {}]",
                b.lower,
                b.upper
            );
        }
    }
}

#[test]
fn softmax_lambda_frozen_values() {
    let l = softmax_lambda(1.0, 2, 0.25).unwrap();
    assert!((l - 4.0_f64.ln()).abs() <= 1e-6);

    // Exact homogeneity up to floating-point rounding of one division.
    let l10 = softmax_lambda(10.0, 2, 0.25).unwrap();
    assert!((l10 - l / 10.0).abs() <= 1e-12 * l);

    // Boundary alpha just under 1/2.
    let alpha = 0.4999;
    let l = softmax_lambda(1.0, 2, alpha).unwrap();
    let p = softmax_top_mass(&[l, 0.0]);
    assert!(p > 1.0 - alpha, "top mass {p}");

    assert!(softmax_lambda(0.0, 2, 0.25).is_err());
    assert!(softmax_lambda(1.0, 1, 0.25).is_err());
    assert!(softmax_lambda(1.0, 2, 0.5).is_err());
}

fn softmax_top_mass(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    scores
        .iter()
        .map(|s| (s - max).exp() / z)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn softmax_lambda_certifies_mass_on_random_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let alpha = 0.1;
    let gap = 0.35;
    let mut checked = 0usize;
    while checked < 1000 {
        let n = rng.gen_range(2..=16usize);
        let lambda = softmax_lambda(gap, n, alpha).unwrap();
        let mut scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // Force the gap onto a designated winner.
        let win = rng.gen_range(0..n);
        let runner_up = scores
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != win)
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        scores[win] = runner_up + gap;

        let scaled: Vec<f64> = scores.iter().map(|s| s * lambda).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scaled.iter().map(|s| (s - max).exp()).sum();
        let off_mass: f64 = scaled
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != win)
            .map(|(_, s)| (s - max).exp() / z)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            off_mass < alpha,
            "n={n} scores={scores:?}: off-target mass {off_mass}"
        );
        checked += 1;
    }
}
