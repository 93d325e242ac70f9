//! Dense linear-algebra kernels shared across the crate: the min-norm point
//! solver used for margin-optimal outputs, minimum-norm least squares for the
//! encoder gadgets, and small spectral utilities.

use nalgebra::{DMatrix, DVector};

use crate::error::{FactError, Result};

/// Minimum-norm point of the convex hull of the rows of `points`
/// (Wolfe's algorithm: grow a corral, solve the affine min-norm problem on
/// it, line-search back onto the simplex and prune).
///
/// Returns the point `p`; its norm is the optimal value of
/// `max_{|u|<=1} min_i <points_i, u>` and `p/|p|` attains it when `|p| > 0`.
pub fn min_norm_point(points: &DMatrix<f64>, tol: f64, max_iter: usize) -> DVector<f64> {
    let n = points.nrows();
    assert!(n > 0, "min_norm_point needs at least one point");

    // Start from the row with the smallest norm.
    let mut best = 0usize;
    let mut best_sq = f64::INFINITY;
    for i in 0..n {
        let sq = points.row(i).norm_squared();
        if sq < best_sq {
            best_sq = sq;
            best = i;
        }
    }
    let mut corral: Vec<usize> = vec![best];
    let mut lambda: Vec<f64> = vec![1.0];
    let mut x: DVector<f64> = points.row(best).transpose();

    for _ in 0..max_iter {
        // Linear minimization: the vertex most violating optimality.
        let scores = points * &x;
        let mut j = 0usize;
        let mut sj = f64::INFINITY;
        for i in 0..n {
            if scores[i] < sj {
                sj = scores[i];
                j = i;
            }
        }
        let xx = x.norm_squared();
        if xx - sj <= tol * xx.max(1.0) {
            break;
        }
        if !corral.contains(&j) {
            corral.push(j);
            lambda.push(0.0);
        }

        // Minor cycle: affine min-norm over the corral via the bordered
        // normal equations, stepping back toward the simplex when the
        // affine solution leaves it.
        for _ in 0..100 {
            let k = corral.len();
            let mut sys = DMatrix::zeros(k + 1, k + 1);
            for (a, &ia) in corral.iter().enumerate() {
                for (b, &ib) in corral.iter().enumerate() {
                    sys[(a, b)] = points.row(ia).dot(&points.row(ib));
                }
                sys[(a, k)] = 1.0;
                sys[(k, a)] = 1.0;
            }
            let mut rhs = DVector::zeros(k + 1);
            rhs[k] = 1.0;
            let v: Vec<f64> = match sys.clone().lu().solve(&rhs) {
                Some(sol) => sol.rows(0, k).iter().copied().collect(),
                None => {
                    // Singular corral gram: least-squares fallback.
                    let sol = sys
                        .svd(true, true)
                        .solve(&rhs, 1e-14)
                        .expect("svd solve cannot fail with both factors");
                    sol.rows(0, k).iter().copied().collect()
                }
            };
            if v.iter().all(|&c| c > 1e-12) {
                lambda = v;
                break;
            }
            // Largest step toward v keeping lambda nonnegative.
            let mut theta: f64 = 1.0;
            for a in 0..k {
                if v[a] < lambda[a] {
                    theta = theta.min(lambda[a] / (lambda[a] - v[a] + 1e-300));
                }
            }
            for a in 0..k {
                lambda[a] = (1.0 - theta) * lambda[a] + theta * v[a];
            }
            let keep: Vec<bool> = lambda.iter().map(|&c| c > 1e-12).collect();
            if keep.iter().all(|&b| b) {
                lambda = v;
                break;
            }
            let mut nc = Vec::with_capacity(k);
            let mut nl = Vec::with_capacity(k);
            for a in 0..k {
                if keep[a] {
                    nc.push(corral[a]);
                    nl.push(lambda[a]);
                }
            }
            corral = nc;
            let norm: f64 = nl.iter().sum();
            lambda = nl.into_iter().map(|c| c / norm).collect();
        }

        x.fill(0.0);
        for (a, &ia) in corral.iter().enumerate() {
            x.axpy(lambda[a], &points.row(ia).transpose(), 1.0);
        }
    }
    x
}

/// Minimum-norm least-squares solution of `M v = o` through a rank-revealing
/// SVD with relative cutoff `cutoff_rel * sigma_max`. Returns the solution
/// and the numerical rank.
pub fn min_norm_lsq(m: &DMatrix<f64>, o: &DVector<f64>, cutoff_rel: f64) -> (DVector<f64>, usize) {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = smax * cutoff_rel;
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > cutoff && s > 0.0)
        .count();
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let k = svd.singular_values.len();
    let mut z = DVector::zeros(k);
    for i in 0..k {
        let s = svd.singular_values[i];
        if s > cutoff && s > 0.0 {
            z[i] = u.column(i).dot(o) / s;
        }
    }
    (vt.transpose() * z, rank)
}

/// Largest singular value via power iteration on A^T A with a deterministic
/// start vector. Adequate for the spectral estimates used in reports.
pub fn spectral_norm(a: &DMatrix<f64>, iters: usize) -> f64 {
    let (r, c) = a.shape();
    if r == 0 || c == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(c, 1.0 / (c as f64).sqrt());
    // Deterministic perturbation so the start is not orthogonal to the top
    // singular vector in structured cases.
    for i in 0..c {
        v[i] += 1e-3 * ((i as f64) + 1.0).sin();
    }
    v /= v.norm();
    for _ in 0..iters {
        let w = a * &v;
        let z = a.transpose() * w;
        let nz = z.norm();
        if nz == 0.0 {
            return 0.0;
        }
        v = z / nz;
    }
    (a * &v).norm()
}

/// Condition number from the positive part of the spectrum.
pub fn condition_number(a: &DMatrix<f64>) -> Result<f64> {
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .filter(|&s| s > smax * 1e-12)
        .fold(f64::INFINITY, f64::min);
    if !smax.is_finite() || smax == 0.0 || !smin.is_finite() {
        return Err(FactError::Numeric(
            "condition number of a zero or non-finite matrix".into(),
        ));
    }
    Ok(smax / smin)
}
