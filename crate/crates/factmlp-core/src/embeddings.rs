//! Embedding sets, fact sets, and the affine transforms applied to them:
//! generation, conditioning control, and whitening.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FactError, Result};
use crate::rng::rng_from_seed;

/// Provenance carried alongside an embedding matrix.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbedMeta {
    pub generator: String,
    pub seed: Option<u64>,
    pub kappa: Option<f64>,
}

/// An N x d matrix of row embeddings plus provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    data: DMatrix<f64>,
    pub meta: EmbedMeta,
}

impl EmbeddingSet {
    pub fn new(data: DMatrix<f64>, meta: EmbedMeta) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(FactError::invalid("embedding matrix must be non-empty"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FactError::Numeric(
                "embedding matrix contains non-finite entries".into(),
            ));
        }
        Ok(EmbeddingSet { data, meta })
    }

    pub fn from_matrix(data: DMatrix<f64>, generator: &str) -> Result<Self> {
        Self::new(
            data,
            EmbedMeta {
                generator: generator.to_string(),
                seed: None,
                kappa: None,
            },
        )
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.data.row(i).transpose()
    }

    /// Row norms, in order.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.data.row(i).norm()).collect()
    }
}

/// A total map from key indices to value indices (0-based in memory; the
/// on-disk format is 1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactSet {
    map: Vec<usize>,
    n_values: usize,
}

impl FactSet {
    pub fn new(map: Vec<usize>, n_values: usize) -> Result<Self> {
        if map.is_empty() {
            return Err(FactError::invalid("fact set must cover at least one key"));
        }
        if n_values == 0 {
            return Err(FactError::invalid("fact set needs at least one value"));
        }
        if let Some(&bad) = map.iter().find(|&&v| v >= n_values) {
            return Err(FactError::invalid(format!(
                "fact set entry {bad} out of range (n_values = {n_values})"
            )));
        }
        Ok(FactSet { map, n_values })
    }

    pub fn get(&self, key: usize) -> usize {
        self.map[key]
    }

    pub fn n_keys(&self) -> usize {
        self.map.len()
    }

    pub fn n_values(&self) -> usize {
        self.n_values
    }

    pub fn entries(&self) -> &[usize] {
        &self.map
    }
}

/// An invertible affine map x -> x.M + c in row convention, with the inverse
/// matrix cached at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub inverse_matrix: DMatrix<f64>,
}

impl AffineMap {
    pub fn identity(d: usize) -> Self {
        AffineMap {
            matrix: DMatrix::identity(d, d),
            offset: DVector::zeros(d),
            inverse_matrix: DMatrix::identity(d, d),
        }
    }

    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let d = matrix.nrows();
        if matrix.ncols() != d || offset.len() != d {
            return Err(FactError::invalid("affine map shapes inconsistent"));
        }
        let inverse_matrix = matrix
            .clone()
            .try_inverse()
            .ok_or_else(|| FactError::degenerate("affine map matrix is singular"))?;
        let map = AffineMap {
            matrix,
            offset,
            inverse_matrix,
        };
        map.check_inverse()?;
        Ok(map)
    }

    /// Construct with an explicitly provided inverse (exact by construction,
    /// e.g. from a shared eigenbasis), still validated.
    pub fn with_inverse(
        matrix: DMatrix<f64>,
        offset: DVector<f64>,
        inverse_matrix: DMatrix<f64>,
    ) -> Result<Self> {
        let map = AffineMap {
            matrix,
            offset,
            inverse_matrix,
        };
        map.check_inverse()?;
        Ok(map)
    }

    fn check_inverse(&self) -> Result<()> {
        let prod = &self.matrix * &self.inverse_matrix;
        let d = self.matrix.nrows();
        let id = DMatrix::<f64>::identity(d, d);
        let err = (&prod - &id).amax();
        if err > 1e-8 {
            return Err(FactError::Numeric(format!(
                "affine map inverse residual {err:.3e} exceeds 1e-8"
            )));
        }
        Ok(())
    }

    /// Apply to every row of a matrix: out = rows.M + 1 c^T.
    pub fn apply_rows(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rows * &self.matrix;
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[(i, j)] += self.offset[j];
            }
        }
        out
    }

    /// Apply the inverse map to every row.
    pub fn apply_rows_inverse(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        let mut shifted = rows.clone();
        for i in 0..shifted.nrows() {
            for j in 0..shifted.ncols() {
                shifted[(i, j)] -= self.offset[j];
            }
        }
        shifted * &self.inverse_matrix
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedKind {
    Sphere,
    Gaussian,
}

/// Generate n i.i.d. embeddings: uniform on the unit sphere, or entrywise
/// standard normal.
pub fn gen_embeddings(kind: EmbedKind, n: usize, d: usize, seed: u64) -> Result<EmbeddingSet> {
    if n == 0 || d == 0 {
        return Err(FactError::invalid("n and d must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let mut data = DMatrix::zeros(n, d);
    for i in 0..n {
        loop {
            for j in 0..d {
                data[(i, j)] = rng.sample(StandardNormal);
            }
            match kind {
                EmbedKind::Gaussian => break,
                EmbedKind::Sphere => {
                    let norm = data.row(i).norm();
                    if norm > 1e-12 {
                        for j in 0..d {
                            data[(i, j)] /= norm;
                        }
                        break;
                    }
                    // Astronomically unlikely zero draw: resample the row.
                }
            }
        }
    }
    EmbeddingSet::new(
        data,
        EmbedMeta {
            generator: match kind {
                EmbedKind::Sphere => "sphere".into(),
                EmbedKind::Gaussian => "gaussian".into(),
            },
            seed: Some(seed),
            kappa: None,
        },
    )
}

/// All d(d-1) two-hot keys e_i - e_j, i != j, in lexicographic (i, j) order.
pub fn gen_two_hot_keys(d: usize) -> Result<EmbeddingSet> {
    if d < 2 {
        return Err(FactError::invalid("two-hot keys need d >= 2"));
    }
    let n = d * (d - 1);
    let mut data = DMatrix::zeros(n, d);
    let mut r = 0;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            data[(r, i)] = 1.0;
            data[(r, j)] = -1.0;
            r += 1;
        }
    }
    EmbeddingSet::new(
        data,
        EmbedMeta {
            generator: "two_hot".into(),
            seed: None,
            kappa: None,
        },
    )
}

/// n unit rows of the form (p-hot/sqrt(p), 1_t)/sqrt(1+t): high mutual
/// coherence (>= 1 - 1/(1+t)) yet decodability at least sqrt(1/(2p)).
/// Supports are the first n size-p subsets of [d0] in lexicographic order,
/// so any two overlap in at most p-1 coordinates.
pub fn gen_p_hot_padded(n: usize, d0: usize, p: usize, t: usize) -> Result<EmbeddingSet> {
    if p < 2 {
        return Err(FactError::invalid("p-hot rows need p >= 2"));
    }
    if p > d0 {
        return Err(FactError::invalid("p-hot rows need p <= d0"));
    }
    if n == 0 {
        return Err(FactError::invalid("need n >= 1 rows"));
    }
    // Count C(d0, p) with saturation; n beyond it is an error.
    let mut available: u128 = 1;
    for i in 0..p {
        available = available.saturating_mul((d0 - i) as u128) / (i as u128 + 1);
        if available > u128::from(u64::MAX) {
            break;
        }
    }
    if (n as u128) > available {
        return Err(FactError::invalid(format!(
            "requested {n} rows but only {available} distinct {p}-hot patterns exist in d0={d0}"
        )));
    }

    let d = d0 + t;
    let scale = 1.0 / (1.0 + t as f64).sqrt();
    let spike = scale / (p as f64).sqrt();
    let mut data = DMatrix::zeros(n, d);
    // Lexicographic combinations via the standard successor rule.
    let mut support: Vec<usize> = (0..p).collect();
    for row in 0..n {
        for &c in &support {
            data[(row, c)] = spike;
        }
        for j in 0..t {
            data[(row, d0 + j)] = scale;
        }
        if row + 1 < n {
            // Advance to the next combination.
            let mut i = p;
            loop {
                i -= 1;
                if support[i] != i + d0 - p {
                    support[i] += 1;
                    for k in i + 1..p {
                        support[k] = support[k - 1] + 1;
                    }
                    break;
                }
            }
        }
    }
    EmbeddingSet::new(
        data,
        EmbedMeta {
            generator: format!("p_hot_padded(p={p},t={t})"),
            seed: None,
            kappa: None,
        },
    )
}

/// Uniform random fact set; bijective draws a uniform permutation.
pub fn gen_fact_set(nk: usize, nv: usize, seed: u64, bijective: bool) -> Result<FactSet> {
    if nk == 0 || nv == 0 {
        return Err(FactError::invalid("nk and nv must be at least 1"));
    }
    if bijective && nk != nv {
        return Err(FactError::invalid(
            "bijective fact sets require nk == nv",
        ));
    }
    let mut rng = rng_from_seed(seed);
    let map: Vec<usize> = if bijective {
        let mut perm: Vec<usize> = (0..nv).collect();
        // Fisher-Yates with the crate RNG for cross-platform stability.
        for i in (1..nv).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        perm
    } else {
        (0..nk).map(|_| rng.gen_range(0..nv)).collect()
    };
    FactSet::new(map, nv)
}

/// Log-affine rescaling of the singular values: singular vectors and the
/// largest singular value are preserved, the smallest is set so the
/// condition number equals kappa, and intermediate values interpolate
/// linearly in log-space. A degenerate (flat) spectrum is ordered by stable
/// index for determinism.
pub fn rescale_condition(e: &EmbeddingSet, kappa: f64) -> Result<EmbeddingSet> {
    if !(kappa >= 1.0) {
        return Err(FactError::invalid("kappa must be >= 1"));
    }
    let svd = e.data().clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    if smax <= 0.0 {
        return Err(FactError::degenerate("zero matrix has no spectrum to rescale"));
    }
    let rank = sv.iter().filter(|&&s| s > smax * 1e-12).count();
    if rank < 2 {
        return Err(FactError::degenerate(
            "rescale_condition requires rank >= 2",
        ));
    }
    let smin = sv
        .iter()
        .cloned()
        .filter(|&s| s > smax * 1e-12)
        .fold(f64::INFINITY, f64::min);
    let log_smax = smax.ln();
    let spread = log_smax - smin.ln();
    let degenerate_spectrum = spread < 1e-12;
    let log_kappa = kappa.ln();

    let mut new_sv = sv.clone();
    // Positive spectrum sorted positions for the degenerate tie-break.
    let mut pos_index = 0usize;
    for i in 0..sv.len() {
        let s = sv[i];
        if s <= smax * 1e-12 {
            new_sv[i] = 0.0;
            continue;
        }
        let t = if degenerate_spectrum {
            // Flat input spectrum: spread values by stable index order.
            pos_index as f64 / (rank as f64 - 1.0)
        } else {
            (log_smax - s.ln()) / spread
        };
        pos_index += 1;
        new_sv[i] = (log_smax - t * log_kappa).exp();
    }

    let rebuilt = u * DMatrix::from_diagonal(&new_sv) * vt;
    let mut meta = e.meta.clone();
    meta.kappa = Some(kappa);
    EmbeddingSet::new(rebuilt, meta)
}

/// Whitening with strength alpha in [0, 1]: W_alpha = Q Lambda^{-alpha/2} Q^T
/// of the ridged second-moment matrix of the (optionally mean-centered)
/// rows. Returns the transformed set and the affine map applied, whose
/// cached inverse is built in the same eigenbasis.
pub fn whiten(
    e: &EmbeddingSet,
    alpha: f64,
    ridge: f64,
    center: bool,
) -> Result<(EmbeddingSet, AffineMap)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FactError::invalid("alpha must lie in [0, 1]"));
    }
    if !(ridge > 0.0) {
        return Err(FactError::invalid("ridge must be positive"));
    }
    let d = e.d();
    if alpha == 0.0 {
        // W^0 = I exactly; skip all numerics so output == input bitwise.
        return Ok((e.clone(), AffineMap::identity(d)));
    }
    let n = e.n() as f64;
    let mut centered = e.data().clone();
    let mut mean = DVector::zeros(d);
    if center {
        for j in 0..d {
            mean[j] = centered.column(j).sum() / n;
        }
        for i in 0..centered.nrows() {
            for j in 0..d {
                centered[(i, j)] -= mean[j];
            }
        }
    }
    let mut sigma = centered.transpose() * &centered / n;
    for j in 0..d {
        sigma[(j, j)] += ridge;
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(FactError::Numeric(
            "second-moment matrix has non-finite entries".into(),
        ));
    }
    let eig = sigma.symmetric_eigen();
    let q = &eig.eigenvectors;
    let mut w_diag = DVector::zeros(d);
    let mut w_inv_diag = DVector::zeros(d);
    for j in 0..d {
        let lam = eig.eigenvalues[j];
        if lam <= 0.0 {
            return Err(FactError::Numeric(
                "ridged second-moment matrix is not positive definite".into(),
            ));
        }
        w_diag[j] = lam.powf(-alpha / 2.0);
        w_inv_diag[j] = lam.powf(alpha / 2.0);
    }
    let w = q * DMatrix::from_diagonal(&w_diag) * q.transpose();
    let w_inv = q * DMatrix::from_diagonal(&w_inv_diag) * q.transpose();
    // Row convention: x' = (x - mean) W = x W + c with c = -mean W.
    let offset = if center {
        -(w.transpose() * &mean)
    } else {
        DVector::zeros(d)
    };
    let map = AffineMap::with_inverse(w, offset, w_inv)?;
    let out = map.apply_rows(e.data());
    let mut meta = e.meta.clone();
    meta.generator = format!("{}+whiten(a={alpha})", meta.generator);
    Ok((EmbeddingSet::new(out, meta)?, map))
}
