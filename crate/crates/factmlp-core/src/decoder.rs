//! Compressed output codes and the random-projection decoder: sizing,
//! construction, margin verification with and without multiplicative noise,
//! and the gradient-descent decoder baseline.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingSet;
use crate::error::{FactError, Result};
use crate::rng::{gaussian_matrix_by_columns, mix_seed, rademacher_matrix_by_columns, rng_from_seed};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dist {
    Gaussian,
    Rademacher,
    /// Codes and projection learned by gradient descent rather than sampled.
    Learned,
}

impl Dist {
    pub fn tag(self) -> &'static str {
        match self {
            Dist::Gaussian => "gaussian",
            Dist::Rademacher => "rademacher",
            Dist::Learned => "learned",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Dist> {
        Ok(match tag {
            "gaussian" => Dist::Gaussian,
            "rademacher" => Dist::Rademacher,
            "learned" => Dist::Learned,
            other => return Err(FactError::invalid(format!("unknown dist '{other}'"))),
        })
    }
}

/// Projection matrix, compressed codes, and sizing metadata.
///
/// The decoder acts as dec(c) = (1/m) D c, so that decode gaps sit on the
/// same scale as the sizing theorem. `u_row_norms` records the norms of the
/// output rows the codes were built from; the theorem's normalized gaps
/// divide by them.
#[derive(Debug, Clone)]
pub struct DecoderPack {
    pub d_mat: DMatrix<f64>,
    pub codes: DMatrix<f64>,
    pub m: usize,
    pub dist: Dist,
    pub seed: u64,
    pub delta: Option<f64>,
    pub u_row_norms: Vec<f64>,
}

/// Score gaps of argmax decoding over all ordered pairs.
#[derive(Debug, Clone)]
pub struct DecodeMargins {
    pub min_gap: f64,
    pub normalized_min_gap: f64,
    pub violations: Vec<(usize, usize)>,
}

/// The sizing bound m >= 32/rho^2 ln(4 n (n-1) / delta), rounded up.
pub fn required_m(rho: f64, n_values: usize, delta: f64) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(FactError::invalid("rho must lie in (0, 1]"));
    }
    if n_values < 2 {
        return Err(FactError::invalid("need at least two values"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(FactError::invalid("delta must lie in (0, 1)"));
    }
    let n = n_values as f64;
    let m = 32.0 / (rho * rho) * (4.0 * n * (n - 1.0) / delta).ln();
    Ok(m.ceil() as usize)
}

/// Sample the projection and compress the output rows into codes c_i = u_i D.
///
/// D is filled column by column, so for a fixed seed the matrix at width m
/// is a prefix of the matrix at any larger width; searches over m therefore
/// probe nested projections.
pub fn build_decoder(u: &EmbeddingSet, m: usize, dist: Dist, seed: u64) -> Result<DecoderPack> {
    if m == 0 {
        return Err(FactError::invalid("decoder width m must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let d_mat = match dist {
        Dist::Gaussian => gaussian_matrix_by_columns(u.d(), m, &mut rng),
        Dist::Rademacher => rademacher_matrix_by_columns(u.d(), m, &mut rng),
        Dist::Learned => {
            return Err(FactError::invalid(
                "learned packs come from gd_decoder, not build_decoder",
            ))
        }
    };
    let codes = u.data() * &d_mat;
    Ok(DecoderPack {
        d_mat,
        codes,
        m,
        dist,
        seed,
        delta: None,
        u_row_norms: u.row_norms(),
    })
}

fn margins_from_decoded(
    v: &EmbeddingSet,
    decoded: &DMatrix<f64>,
    u_row_norms: &[f64],
) -> DecodeMargins {
    let n = v.n();
    if n < 2 {
        return DecodeMargins {
            min_gap: f64::INFINITY,
            normalized_min_gap: f64::INFINITY,
            violations: Vec::new(),
        };
    }
    let scores = decoded * v.data().transpose();
    let mut min_gap = f64::INFINITY;
    let mut min_norm_gap = f64::INFINITY;
    let mut violations = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let gap = scores[(i, i)] - scores[(i, j)];
            let diff = (v.data().row(i) - v.data().row(j)).norm();
            let denom = (diff * u_row_norms[i]).max(1e-300);
            let ngap = gap / denom;
            if gap < min_gap {
                min_gap = gap;
            }
            if ngap < min_norm_gap {
                min_norm_gap = ngap;
            }
            if gap <= 0.0 {
                violations.push((i, j));
            }
        }
    }
    DecodeMargins {
        min_gap,
        normalized_min_gap: min_norm_gap,
        violations,
    }
}

/// Evaluate all pairwise decode gaps s_ii - s_ij with s_ij = <v_j, dec(c_i)>.
pub fn decode_margins(v: &EmbeddingSet, pack: &DecoderPack) -> Result<DecodeMargins> {
    if v.n() != pack.codes.nrows() {
        return Err(FactError::invalid("V and codes row counts differ"));
    }
    if v.d() != pack.d_mat.nrows() {
        return Err(FactError::invalid("V dim and projection rows differ"));
    }
    let decoded = &pack.codes * pack.d_mat.transpose() / pack.m as f64;
    Ok(margins_from_decoded(v, &decoded, &pack.u_row_norms))
}

/// Decode gaps under worst-case multiplicative code noise: each code entry
/// is scaled by (1 + nu) with nu sampled i.i.d. from the interval extremes
/// {-eps, +eps}. Noise is seeded from the pack's own seed, so reports are
/// reproducible.
pub fn noisy_decode_margins(
    v: &EmbeddingSet,
    pack: &DecoderPack,
    u: &EmbeddingSet,
    eps: f64,
) -> Result<DecodeMargins> {
    if pack.dist != Dist::Rademacher {
        return Err(FactError::invalid(
            "noisy decoding is defined for rademacher packs",
        ));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(FactError::invalid("eps must lie in [0, 1)"));
    }
    if u.n() != v.n() || u.d() != v.d() {
        return Err(FactError::invalid("U and V must share shape"));
    }
    let mut rng = rng_from_seed(mix_seed(pack.seed ^ 0x6e6f_6973));
    let mut h = u.data() * &pack.d_mat;
    for i in 0..h.nrows() {
        for j in 0..h.ncols() {
            let nu = if rng.gen::<bool>() { eps } else { -eps };
            h[(i, j)] *= 1.0 + nu;
        }
    }
    let decoded = &h * pack.d_mat.transpose() / pack.m as f64;
    let norms = u.row_norms();
    Ok(margins_from_decoded(v, &decoded, &norms))
}

/// Training hyperparameters for the gradient-descent baselines.
#[derive(Debug, Clone)]
pub struct GdTrainCfg {
    /// Peak learning rate; the cosine schedule decays it to lr/100.
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for GdTrainCfg {
    fn default() -> Self {
        GdTrainCfg {
            lr: 1.0,
            steps: 1000,
            seed: 0,
        }
    }
}

struct Adam {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: usize,
}

impl Adam {
    fn new(shapes: &[(usize, usize)]) -> Self {
        Adam {
            m: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut DMatrix<f64>], grads: &[DMatrix<f64>], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - B1.powf(t);
        let bc2 = 1.0 - B2.powf(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = &grads[k];
            for idx in 0..g.len() {
                let gi = g[idx];
                self.m[k][idx] = B1 * self.m[k][idx] + (1.0 - B1) * gi;
                self.v[k][idx] = B2 * self.v[k][idx] + (1.0 - B2) * gi * gi;
                let mhat = self.m[k][idx] / bc1;
                let vhat = self.v[k][idx] / bc2;
                p[idx] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

pub(crate) fn cosine_lr(lr_peak: f64, step: usize, total: usize) -> f64 {
    let lr_end = lr_peak * 0.01;
    if total <= 1 {
        return lr_end;
    }
    let t = step as f64 / (total as f64 - 1.0);
    lr_end + (lr_peak - lr_end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Learn compressed codes C and a decoding matrix M by full-batch Adam on
/// the cross-entropy of the score matrix S = C M V^T against the identity
/// assignment. Rows of C and M are unit-normalized after training and the
/// result is packaged with D = M^T.
pub fn gd_decoder(v: &EmbeddingSet, m: usize, cfg: &GdTrainCfg) -> Result<DecoderPack> {
    if m == 0 {
        return Err(FactError::invalid("code width m must be at least 1"));
    }
    let n = v.n();
    let d = v.d();
    let mut rng = rng_from_seed(cfg.seed);
    let scale_c = 1.0 / (m as f64).sqrt();
    let scale_m = 1.0 / (d as f64).sqrt();
    let mut c = DMatrix::from_fn(n, m, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * scale_c
    });
    let mut mm = DMatrix::from_fn(m, d, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * scale_m
    });

    let vt = v.data().transpose();
    let mut adam = Adam::new(&[(n, m), (m, d)]);
    for step in 0..cfg.steps {
        let proj = &c * &mm;
        let scores = &proj * &vt;
        // Row-wise softmax cross-entropy against target = row index.
        let mut grad_s = DMatrix::zeros(n, n);
        let mut loss = 0.0;
        for i in 0..n {
            let row = scores.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                z += (row[j] - mx).exp();
            }
            loss += -(scores[(i, i)] - mx - z.ln());
            for j in 0..n {
                let p = (row[j] - mx).exp() / z;
                grad_s[(i, j)] = (p - if i == j { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(FactError::Solver {
                context: format!("gd_decoder loss diverged at step {step}"),
                residual: f64::INFINITY,
                best: None,
            });
        }
        let grad_proj = &grad_s * v.data();
        let grad_c = &grad_proj * mm.transpose();
        let grad_m = c.transpose() * &grad_proj;
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        adam.step(&mut [&mut c, &mut mm], &[grad_c, grad_m], lr);
    }

    for i in 0..n {
        let norm = c.row(i).norm();
        if norm > 1e-300 {
            for j in 0..m {
                c[(i, j)] /= norm;
            }
        }
    }
    for i in 0..m {
        let norm = mm.row(i).norm();
        if norm > 1e-300 {
            for j in 0..d {
                mm[(i, j)] /= norm;
            }
        }
    }

    Ok(DecoderPack {
        d_mat: mm.transpose(),
        codes: c,
        m,
        dist: Dist::Learned,
        seed: cfg.seed,
        delta: None,
        u_row_norms: vec![1.0; n],
    })
}
