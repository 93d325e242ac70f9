//! Geometric metrics on value embeddings: decodability, coherence,
//! margin-optimal output embeddings, spherical Chebyshev bounds for the
//! per-index star problem, and the softmax sharpness constant.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::embeddings::EmbeddingSet;
use crate::error::{FactError, Result};
use crate::linalg::min_norm_point;

/// Result of evaluating the pairwise normalized margins of (V, U).
#[derive(Debug, Clone)]
pub struct MarginReport {
    pub rho_min: f64,
    pub worst_pair: (usize, usize),
    pub per_index_margins: Vec<f64>,
}

/// Margin-optimal output embeddings: one unit row per value, each solving
/// the per-index max-min cosine-margin problem.
#[derive(Debug, Clone)]
pub struct OptimalOutputs {
    pub u: EmbeddingSet,
    pub achieved_rho: f64,
    pub solver_iterations: usize,
    pub tolerance: f64,
}

/// Two-sided bounds on the optimal margin of a single star (one anchor
/// against all other rows).
#[derive(Debug, Clone)]
pub struct ChebyshevBounds {
    pub anchor: usize,
    pub m_edge: f64,
    pub s_a: Option<f64>,
    pub lower: f64,
    pub upper: f64,
}

/// Solver configuration for `optimal_outputs`.
#[derive(Debug, Clone)]
pub struct SolverCfg {
    /// Tolerance on the margin (certified by the min-norm duality gap).
    pub tol: f64,
    /// Cap on supergradient ascent iterations per index.
    pub max_iters: usize,
    /// Base step size; steps decay as eta0/sqrt(t).
    pub eta0: f64,
    /// Stop when the best margin improves by less than `plateau_eps` over
    /// `plateau_window` iterations.
    pub plateau_window: usize,
    pub plateau_eps: f64,
    /// Constraints within this slack of the active minimum are averaged
    /// into the supergradient.
    pub tie_eps: f64,
}

impl Default for SolverCfg {
    fn default() -> Self {
        SolverCfg {
            tol: 1e-6,
            max_iters: 50_000,
            eta0: 1.0,
            plateau_window: 500,
            plateau_eps: 1e-9,
            tie_eps: 1e-9,
        }
    }
}

/// Max absolute pairwise cosine of the unit-normalized rows.
pub fn coherence(v: &EmbeddingSet) -> Result<f64> {
    if v.n() < 2 {
        return Err(FactError::invalid("coherence needs at least two rows"));
    }
    let n = v.n();
    let mut unit = v.data().clone();
    for i in 0..n {
        let norm = unit.row(i).norm();
        if norm <= 1e-300 {
            return Err(FactError::degenerate(format!("row {i} is zero")));
        }
        for j in 0..unit.ncols() {
            unit[(i, j)] /= norm;
        }
    }
    let gram = &unit * unit.transpose();
    let mut mu: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            mu = mu.max(gram[(i, j)].abs());
        }
    }
    Ok(mu.min(1.0 + 1e-12))
}

/// Build the normalized difference directions x_ij = (v_i - v_j)/|v_i - v_j|
/// for a fixed i, in increasing j order (skipping j = i).
fn star_directions(v: &DMatrix<f64>, i: usize) -> Result<DMatrix<f64>> {
    let n = v.nrows();
    let d = v.ncols();
    let mut x = DMatrix::zeros(n - 1, d);
    let mut r = 0;
    for j in 0..n {
        if j == i {
            continue;
        }
        let mut norm_sq = 0.0;
        for c in 0..d {
            let diff = v[(i, c)] - v[(j, c)];
            x[(r, c)] = diff;
            norm_sq += diff * diff;
        }
        let norm = norm_sq.sqrt();
        let scale = v.row(i).norm() + v.row(j).norm();
        if norm <= 1e-15 * (scale + 1.0) {
            return Err(FactError::degenerate(format!(
                "rows {i} and {j} coincide; pairwise margin undefined"
            )));
        }
        for c in 0..d {
            x[(r, c)] /= norm;
        }
        r += 1;
    }
    Ok(x)
}

/// Exact evaluation of rho_min(V, U) = min_i min_{j != i} of the normalized
/// margin <v_i - v_j, u_i> / (|v_i - v_j| |u_i|).
pub fn rho_min_given(v: &EmbeddingSet, u: &EmbeddingSet) -> Result<MarginReport> {
    if v.n() != u.n() || v.d() != u.d() {
        return Err(FactError::invalid("V and U must share shape"));
    }
    if v.n() < 2 {
        return Err(FactError::invalid("need at least two rows"));
    }
    let n = v.n();
    let mut per_index = vec![f64::INFINITY; n];
    let mut worst = (0usize, 1usize);
    let mut rho = f64::INFINITY;
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        let ui = u.row(i);
        let un = ui.norm();
        if un <= 1e-300 {
            return Err(FactError::invalid(format!("output row {i} is zero")));
        }
        let x = star_directions(v.data(), i)?;
        let margins = &x * (&ui / un);
        let mut r = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let m = margins[r];
            if m < per_index[i] {
                per_index[i] = m;
            }
            if m < rho {
                rho = m;
                worst = (i, j);
            }
            r += 1;
        }
    }
    Ok(MarginReport {
        rho_min: rho,
        worst_pair: worst,
        per_index_margins: per_index,
    })
}

/// Margin of a candidate u against the rows of x (min of x u / |u|).
fn star_margin(x: &DMatrix<f64>, u: &DVector<f64>) -> f64 {
    let norm = u.norm();
    if norm <= 1e-300 {
        return f64::NEG_INFINITY;
    }
    let scores = x * u;
    scores.iter().cloned().fold(f64::INFINITY, f64::min) / norm
}

/// Closed-form candidate directions for a star whose ball relaxation is
/// degenerate (0 inside the hull, optimum on the sphere possibly negative):
/// every constraint peak and every two-constraint tie point. In d = 2 the
/// sphere optimum of a min of cosines always lies on one of these, so the
/// enumeration is exact there; in higher dimensions it is a strong warm
/// start for the polish loop.
fn star_candidates(x: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let n = x.nrows();
    let d = x.ncols();
    let mut out = Vec::with_capacity(n * (n + 1));
    for r in 0..n {
        let xr = x.row(r).transpose();
        out.push(-&xr);
        out.push(xr);
    }
    for j in 0..n {
        for k in 0..j {
            let s = x.row(j).transpose() + x.row(k).transpose();
            let norm = s.norm();
            if norm > 1e-9 {
                out.push(&s / norm);
                out.push(-(&s / norm));
            } else if d >= 2 {
                // Antipodal pair: the tie value is 0 on the whole great
                // circle orthogonal to x_j; any unit normal attains it.
                let xj = x.row(j).transpose();
                let mut axis = 0usize;
                for c in 1..d {
                    if xj[c].abs() < xj[axis].abs() {
                        axis = c;
                    }
                }
                let mut v = -xj[axis] * &xj;
                v[axis] += 1.0;
                let vn = v.norm();
                if vn > 1e-9 {
                    out.push(v / vn);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StarStatus {
    /// Margin within tol of the dual bound |p*|.
    Certified,
    /// Stopped by the documented plateau rule.
    Plateaued,
    /// Ran out of iterations with the duality gap still open.
    MaxIters,
}

struct StarSolution {
    u: DVector<f64>,
    margin: f64,
    iterations: usize,
    gap: f64,
    status: StarStatus,
}

/// Solve one per-index star problem. The min-norm point of the constraint
/// directions solves the dual exactly; a feasible warm start (the value's
/// own direction) guarantees the coherence lower bound; projected
/// supergradient ascent mops up if the duality gap is still above
/// tolerance.
fn solve_star(x: &DMatrix<f64>, warm: Option<DVector<f64>>, cfg: &SolverCfg) -> StarSolution {
    let d = x.ncols();

    let p = min_norm_point(x, 1e-12, 200);
    let p_norm = p.norm();
    let mut best_u: DVector<f64> = if p_norm > 1e-12 {
        &p / p_norm
    } else {
        DVector::from_element(d, 1.0 / (d as f64).sqrt())
    };
    let mut best_margin = star_margin(x, &best_u);
    if let Some(w) = warm {
        let wn = w.norm();
        if wn > 1e-300 {
            let wu = &w / wn;
            let wm = star_margin(x, &wu);
            if wm > best_margin {
                best_margin = wm;
                best_u = wu;
            }
        }
    }

    // Certified optimal whenever the margin reaches the dual bound |p|.
    if p_norm - best_margin <= cfg.tol {
        return StarSolution {
            u: best_u,
            margin: best_margin,
            iterations: 0,
            gap: p_norm - best_margin,
            status: StarStatus::Certified,
        };
    }

    // When the min-norm point vanishes the ball optimum is u = 0 and carries
    // no direction; the sphere optimum can even be negative. Enumerate the
    // peak/tie candidates (exact in d = 2) before polishing. Skipped for very
    // wide stars where the O(n^2 d) sweep would dominate the solve.
    let degenerate = p_norm <= cfg.tol;
    if degenerate && x.nrows() <= 256 {
        for cand in star_candidates(x) {
            let m = star_margin(x, &cand);
            if m > best_margin {
                best_margin = m;
                best_u = cand;
            }
        }
        if p_norm - best_margin <= cfg.tol {
            return StarSolution {
                u: best_u,
                margin: best_margin,
                iterations: 0,
                gap: p_norm - best_margin,
                status: StarStatus::Certified,
            };
        }
    }

    // Projected supergradient ascent on phi(u) = min_j <x_j, u> over the
    // unit ball, averaging the supergradients of all near-active
    // constraints, with diminishing steps.
    let mut u = best_u.clone();
    let mut iters = 0usize;
    let mut window_best = best_margin;
    let mut status = StarStatus::MaxIters;
    for t in 1..=cfg.max_iters {
        iters = t;
        let scores = x * &u;
        let m = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut g = DVector::zeros(d);
        let mut ties = 0usize;
        for (r, &s) in scores.iter().enumerate() {
            if s <= m + cfg.tie_eps {
                g += x.row(r).transpose();
                ties += 1;
            }
        }
        g /= ties as f64;
        u += g * (cfg.eta0 / (t as f64).sqrt());
        let norm = u.norm();
        // In the degenerate regime stay on the sphere: inside the ball the
        // iterate would drift to the uninformative optimum u = 0.
        if norm > 1.0 || (degenerate && norm > 1e-12) {
            u /= norm;
        }
        let um = star_margin(x, &u);
        if um > best_margin {
            best_margin = um;
            best_u = u.clone();
        }
        if p_norm - best_margin <= cfg.tol {
            status = StarStatus::Certified;
            break;
        }
        if t % cfg.plateau_window == 0 {
            if best_margin - window_best < cfg.plateau_eps {
                status = StarStatus::Plateaued;
                break;
            }
            window_best = best_margin;
        }
    }
    StarSolution {
        u: best_u,
        margin: best_margin,
        iterations: iters,
        gap: p_norm - best_margin,
        status,
    }
}

/// Compute margin-optimal output embeddings for every value row.
pub fn optimal_outputs(v: &EmbeddingSet, cfg: &SolverCfg) -> Result<OptimalOutputs> {
    if v.n() < 2 {
        return Err(FactError::invalid("need at least two value rows"));
    }
    let n = v.n();
    let d = v.d();

    let solved: Vec<Result<StarSolution>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = star_directions(v.data(), i)?;
            let vi = v.row(i);
            let warm = if vi.norm() > 1e-300 { Some(vi) } else { None };
            Ok(solve_star(&x, warm, cfg))
        })
        .collect();

    let mut u = DMatrix::zeros(n, d);
    let mut rho = f64::INFINITY;
    let mut max_iters_used = 0usize;
    let mut open_gap = 0.0f64;
    for (i, item) in solved.into_iter().enumerate() {
        let sol = item?;
        let norm = sol.u.norm();
        let unit = if norm > 1e-300 {
            &sol.u / norm
        } else {
            DVector::from_element(d, 1.0 / (d as f64).sqrt())
        };
        for c in 0..d {
            u[(i, c)] = unit[c];
        }
        rho = rho.min(sol.margin);
        max_iters_used = max_iters_used.max(sol.iterations);
        if sol.status == StarStatus::MaxIters {
            open_gap = open_gap.max(sol.gap);
        }
    }

    let outputs = OptimalOutputs {
        u: EmbeddingSet::from_matrix(u, "optimal_outputs")?,
        achieved_rho: rho,
        solver_iterations: max_iters_used,
        tolerance: cfg.tol,
    };
    if open_gap > cfg.tol {
        return Err(FactError::Solver {
            context: "margin solver hit max_iters before certifying tolerance".into(),
            residual: open_gap,
            best: Some(Box::new(outputs.u)),
        });
    }
    Ok(outputs)
}

/// Decodability rho(V): the min margin achieved by the optimal outputs.
pub fn rho(v: &EmbeddingSet, cfg: &SolverCfg) -> Result<f64> {
    let opt = optimal_outputs(v, cfg)?;
    Ok(rho_min_given(v, &opt.u)?.rho_min)
}

/// Spherical Chebyshev sandwich for the star anchored at `anchor`:
/// m_edge <= rho* <= sqrt((1 + m_edge)/2), with the coherence-style lower
/// bound sqrt((1 - s_a)/2) additionally available for unit-norm rows.
pub fn chebyshev_star_bounds(
    v: &EmbeddingSet,
    anchor: usize,
    unit_norm: bool,
) -> Result<ChebyshevBounds> {
    let n = v.n();
    if anchor >= n {
        return Err(FactError::invalid(format!(
            "anchor {anchor} out of range for {n} rows"
        )));
    }
    if n < 2 {
        return Err(FactError::invalid("need at least two rows"));
    }
    let x = star_directions(v.data(), anchor)?;
    // With a single constraint the star is solved exactly by its direction.
    let m_edge = if n == 2 {
        1.0
    } else {
        let gram = &x * x.transpose();
        let mut m = f64::INFINITY;
        for a in 0..gram.nrows() {
            for b in (a + 1)..gram.ncols() {
                m = m.min(gram[(a, b)]);
            }
        }
        m
    };
    let upper = ((1.0 + m_edge) / 2.0).max(0.0).sqrt();
    let s_a = if unit_norm {
        for i in 0..n {
            let norm = v.data().row(i).norm();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(FactError::invalid(format!(
                    "unit-norm bounds requested but row {i} has norm {norm}"
                )));
            }
        }
        let va = v.row(anchor);
        let mut s = f64::NEG_INFINITY;
        for j in 0..n {
            if j != anchor {
                s = s.max(va.dot(&v.row(j)));
            }
        }
        Some(s)
    } else {
        None
    };
    let lower = match s_a {
        Some(s) => m_edge.max(((1.0 - s) / 2.0).max(0.0).sqrt()),
        None => m_edge,
    };
    Ok(ChebyshevBounds {
        anchor,
        m_edge,
        s_a,
        lower,
        upper,
    })
}

/// Smallest softmax scale guaranteeing that any score vector with margin at
/// least `gap` puts all non-target mass below `alpha`.
pub fn softmax_lambda(gap: f64, n: usize, alpha: f64) -> Result<f64> {
    if !(gap > 0.0) {
        return Err(FactError::invalid("gap must be positive"));
    }
    if n < 2 {
        return Err(FactError::invalid("need n >= 2 scores"));
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(FactError::invalid("alpha must lie in (0, 1/2)"));
    }
    Ok(((n as f64 - 1.0) / alpha).ln() / gap * (1.0 + 1e-9))
}
