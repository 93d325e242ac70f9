//! Exact key-to-code encoders: closed-form two-hot constructions, the
//! generalized gated gadget solved as one structured least-squares system,
//! stacking of gadgets into vector-valued encoders, the finite-difference
//! reduction to plain (non-gated) networks, the block ReLU interpolation
//! fit, and a gradient-descent-trained baseline encoder.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::activation::Activation;
use crate::embeddings::{EmbeddingSet, FactSet};
use crate::error::{FactError, Result};
use crate::linalg::min_norm_lsq;
use crate::rng::{gaussian_matrix, rng_from_seed};

/// Read-out matrix of an encoder. The stacked construction uses a
/// block-of-ones matrix that is never stored densely; it contributes zero
/// stored parameters (pure bookkeeping).
#[derive(Debug, Clone, PartialEq)]
pub enum EMat {
    Dense(DMatrix<f64>),
    /// m output coordinates, each summing a contiguous block of h_tilde
    /// hidden units: row j is the indicator of block j.
    BlockOnes { m: usize, h_tilde: usize },
}

impl EMat {
    pub fn out_dim(&self) -> usize {
        match self {
            EMat::Dense(e) => e.nrows(),
            EMat::BlockOnes { m, .. } => *m,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            EMat::Dense(e) => e.ncols(),
            EMat::BlockOnes { m, h_tilde } => m * h_tilde,
        }
    }

    /// Number of stored weight entries (block-of-ones is implicit).
    pub fn stored_params(&self) -> usize {
        match self {
            EMat::Dense(e) => e.len(),
            EMat::BlockOnes { .. } => 0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            EMat::Dense(e) => e.clone(),
            EMat::BlockOnes { m, h_tilde } => {
                let mut e = DMatrix::zeros(*m, m * h_tilde);
                for j in 0..*m {
                    for l in 0..*h_tilde {
                        e[(j, j * h_tilde + l)] = 1.0;
                    }
                }
                e
            }
        }
    }

    /// hidden: n x h, returns n x m (i.e. hidden * E^T).
    pub fn apply_rows(&self, hidden: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            EMat::Dense(e) => hidden * e.transpose(),
            EMat::BlockOnes { m, h_tilde } => {
                let n = hidden.nrows();
                let mut out = DMatrix::zeros(n, *m);
                for i in 0..n {
                    for j in 0..*m {
                        let mut s = 0.0;
                        for l in 0..*h_tilde {
                            s += hidden[(i, j * h_tilde + l)];
                        }
                        out[(i, j)] = s;
                    }
                }
                out
            }
        }
    }
}

/// Gated one-hidden-layer encoder: enc(x) = E (sigma(Gx + b_G) ⊙ (Ax + b_A)) + b_E.
#[derive(Debug, Clone)]
pub struct GatedEncoder {
    pub g: DMatrix<f64>,
    pub b_g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b_a: DVector<f64>,
    pub e: EMat,
    pub b_e: DVector<f64>,
    pub activation: Activation,
    pub audit: BTreeMap<String, String>,
}

/// Plain one-hidden-layer encoder: enc(x) = E sigma(Ax + b_A) + b_E.
#[derive(Debug, Clone)]
pub struct PlainEncoder {
    pub a: DMatrix<f64>,
    pub b_a: DVector<f64>,
    pub e: EMat,
    pub b_e: DVector<f64>,
    pub activation: Activation,
    pub audit: BTreeMap<String, String>,
}

fn any_nonzero(v: &DVector<f64>) -> bool {
    v.iter().any(|&x| x != 0.0)
}

impl GatedEncoder {
    pub fn hidden_dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.e.out_dim()
    }

    /// Stored weight entries: dense G, A and E counts, bias vectors counted
    /// only when some entry is nonzero, block-of-ones E counted as zero.
    pub fn param_count(&self) -> usize {
        let mut c = self.g.len() + self.a.len() + self.e.stored_params();
        if any_nonzero(&self.b_g) {
            c += self.b_g.len();
        }
        if any_nonzero(&self.b_a) {
            c += self.b_a.len();
        }
        if any_nonzero(&self.b_e) {
            c += self.b_e.len();
        }
        c
    }

    /// Batch forward: x is n x d (one input per row), result n x m.
    pub fn forward_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut zg = x * self.g.transpose();
        let mut za = x * self.a.transpose();
        for i in 0..zg.nrows() {
            for l in 0..zg.ncols() {
                zg[(i, l)] = self.activation.eval(zg[(i, l)] + self.b_g[l]);
                za[(i, l)] += self.b_a[l];
            }
        }
        let hidden = zg.component_mul(&za);
        let mut out = self.e.apply_rows(&hidden);
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[(i, j)] += self.b_e[j];
            }
        }
        out
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let xm = DMatrix::from_row_slice(1, x.len(), x.as_slice());
        let out = self.forward_rows(&xm);
        DVector::from_row_slice(out.row(0).transpose().as_slice())
    }
}

impl PlainEncoder {
    pub fn hidden_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.e.out_dim()
    }

    pub fn param_count(&self) -> usize {
        let mut c = self.a.len() + self.e.stored_params();
        if any_nonzero(&self.b_a) {
            c += self.b_a.len();
        }
        if any_nonzero(&self.b_e) {
            c += self.b_e.len();
        }
        c
    }

    pub fn forward_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.a.transpose();
        for i in 0..z.nrows() {
            for l in 0..z.ncols() {
                z[(i, l)] = self.activation.eval(z[(i, l)] + self.b_a[l]);
            }
        }
        let mut out = self.e.apply_rows(&z);
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[(i, j)] += self.b_e[j];
            }
        }
        out
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let xm = DMatrix::from_row_slice(1, x.len(), x.as_slice());
        let out = self.forward_rows(&xm);
        DVector::from_row_slice(out.row(0).transpose().as_slice())
    }
}

/// The structured linear system behind a gated gadget: gate matrix Sigma
/// (one row per hidden unit) and the assembled design matrix
/// M = [diag(Sigma_1) K~, ..., diag(Sigma_h) K~ (, 1)].
#[derive(Debug, Clone)]
pub struct GadgetSystem {
    pub sigma: DMatrix<f64>,
    pub m_design: DMatrix<f64>,
    pub bias_mode: bool,
}

/// Closed-form scalar encoder on difference keys e_i - e_j: ReLU gate with
/// identity gate weights and A[p][q] = -h(p, q) off the diagonal. Exact on
/// every difference key. Pairs are 0-based (i, j), i != j, i, j < d.
pub fn two_hot_gated(h_table: &HashMap<(usize, usize), f64>, d: usize) -> Result<GatedEncoder> {
    if d < 2 {
        return Err(FactError::invalid("two-hot constructions need d >= 2"));
    }
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let h = *h_table.get(&(i, j)).ok_or_else(|| {
                FactError::invalid(format!("h table is missing ordered pair ({i}, {j})"))
            })?;
            if !h.is_finite() {
                return Err(FactError::invalid(format!(
                    "h({i}, {j}) is not finite"
                )));
            }
            a[(i, j)] = -h;
        }
    }
    let mut audit = BTreeMap::new();
    audit.insert("construction".into(), "two_hot_gated".into());
    Ok(GatedEncoder {
        g: DMatrix::identity(d, d),
        b_g: DVector::zeros(d),
        a,
        b_a: DVector::zeros(d),
        e: EMat::BlockOnes { m: 1, h_tilde: d },
        b_e: DVector::zeros(1),
        activation: Activation::Relu,
        audit,
    })
}

/// Closed-form plain ReLU encoder on difference keys: enc(x) = 1^T ReLU(Ax - 1)
/// with A[p][p] = 1 and A[p][q] = -h(p, q). The table is auto-normalized to
/// [0, 1]; the inverse affine map is folded into the read-out and recorded.
pub fn two_hot_relu(h_table: &HashMap<(usize, usize), f64>, d: usize) -> Result<PlainEncoder> {
    if d < 2 {
        return Err(FactError::invalid("two-hot constructions need d >= 2"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let h = *h_table.get(&(i, j)).ok_or_else(|| {
                FactError::invalid(format!("h table is missing ordered pair ({i}, {j})"))
            })?;
            if !h.is_finite() {
                return Err(FactError::invalid(format!("h({i}, {j}) is not finite")));
            }
            lo = lo.min(h);
            hi = hi.max(h);
        }
    }
    let offset = lo;
    let scale = if hi > lo { hi - lo } else { 1.0 };

    let mut a = DMatrix::zeros(d, d);
    for p in 0..d {
        a[(p, p)] = 1.0;
        for q in 0..d {
            if p == q {
                continue;
            }
            a[(p, q)] = -(h_table[&(p, q)] - offset) / scale;
        }
    }
    let mut audit = BTreeMap::new();
    audit.insert("construction".into(), "two_hot_relu".into());
    audit.insert("norm_offset".into(), format!("{offset}"));
    audit.insert("norm_scale".into(), format!("{scale}"));
    Ok(PlainEncoder {
        a,
        b_a: DVector::from_element(d, -1.0),
        e: EMat::Dense(DMatrix::from_element(1, d, scale)),
        b_e: DVector::from_element(1, offset),
        activation: Activation::Relu,
        audit,
    })
}

/// Max |enc(k_i) - o_i| over the key rows, for scalar encoders.
fn scalar_fit_error(enc: &GatedEncoder, k: &EmbeddingSet, o: &DVector<f64>) -> f64 {
    let out = enc.forward_rows(k.data());
    let mut worst: f64 = 0.0;
    for i in 0..k.n() {
        worst = worst.max((out[(i, 0)] - o[i]).abs());
    }
    worst
}

/// Returns (d~, unknown count) of the gadget system: d~ = d (+1 with a
/// value-arm bias), plus one shared output bias unknown in bias mode.
fn gadget_capacity(d: usize, h: usize, bias: bool) -> (usize, usize) {
    let d_tilde = if bias { d + 1 } else { d };
    (d_tilde, h * d_tilde + usize::from(bias))
}

/// Core gadget solve. Fits the minimum-norm slopes (and biases, in bias
/// mode) so the scalar gated encoder interpolates o on all keys. The gram
/// fast path never materializes M; the dense design is only assembled for
/// the returned GadgetSystem or the SVD fallback.
fn solve_gadget(
    k: &EmbeddingSet,
    o: &DVector<f64>,
    h: usize,
    activation: Activation,
    bias: bool,
    seed: u64,
    want_system: bool,
) -> Result<(GatedEncoder, Option<GadgetSystem>)> {
    let n = k.n();
    let d = k.d();
    if o.len() != n {
        return Err(FactError::invalid("target vector length must match key count"));
    }
    if h == 0 {
        return Err(FactError::invalid("gadget width h must be at least 1"));
    }
    if !activation.is_analytic_nonpolynomial() {
        return Err(FactError::invalid(
            "gated gadget requires a non-polynomial analytic activation (silu, tanh, gelu or a derivative thereof)",
        ));
    }
    let (d_tilde, unknowns) = gadget_capacity(d, h, bias);
    if unknowns < n {
        return Err(FactError::invalid(format!(
            "width too small: {unknowns} unknowns < {n} keys (need d~*h{} >= |K|)",
            if bias { "+1" } else { "" }
        )));
    }

    let mut rng = rng_from_seed(seed);
    let g = gaussian_matrix(h, d, &mut rng);
    let b_g = DVector::zeros(h);

    // Gate responses: sg[i][l] = sigma(g_l . k_i); K~ appends the ones column.
    let mut sg = k.data() * g.transpose();
    for x in sg.iter_mut() {
        *x = activation.eval(*x);
    }
    let k_tilde = if bias {
        let mut kt = DMatrix::zeros(n, d + 1);
        kt.view_mut((0, 0), (n, d)).copy_from(k.data());
        for i in 0..n {
            kt[(i, d)] = 1.0;
        }
        kt
    } else {
        k.data().clone()
    };

    let tol = 1e-6 * o.amax().max(1.0);
    let build = |w_blocks: &DVector<f64>, b_e_val: f64, path: &str| {
        // w_blocks has h*d_tilde entries laid out unit-major.
        let mut a = DMatrix::zeros(h, d);
        let mut b_a = DVector::zeros(h);
        for l in 0..h {
            for c in 0..d {
                a[(l, c)] = w_blocks[l * d_tilde + c];
            }
            if bias {
                b_a[l] = w_blocks[l * d_tilde + d];
            }
        }
        let mut audit = BTreeMap::new();
        audit.insert("construction".into(), "gated_gadget".into());
        audit.insert("seed".into(), format!("{seed}"));
        audit.insert("solve_path".into(), path.into());
        audit.insert("bias_mode".into(), format!("{bias}"));
        GatedEncoder {
            g: g.clone(),
            b_g: b_g.clone(),
            a,
            b_a,
            e: EMat::BlockOnes { m: 1, h_tilde: h },
            b_e: DVector::from_element(1, b_e_val),
            activation,
            audit,
        }
    };

    // Fast path: w solves (M M^T) w = o with
    // M M^T = (Sg Sg^T) ⊙ (K~ K~^T) (+ 1 1^T in bias mode),
    // then vec = M^T w block-wise: a_l = K~^T (Sg[:, l] ⊙ w), b_E = sum(w).
    let mut gram = (&sg * sg.transpose()).component_mul(&(&k_tilde * k_tilde.transpose()));
    if bias {
        for x in gram.iter_mut() {
            *x += 1.0;
        }
    }
    let fast = nalgebra::Cholesky::new(gram).map(|chol| {
        let w = chol.solve(o);
        let mut vec = DVector::zeros(h * d_tilde);
        for l in 0..h {
            let weighted = DVector::from_fn(n, |i, _| sg[(i, l)] * w[i]);
            let al = k_tilde.transpose() * weighted;
            for c in 0..d_tilde {
                vec[l * d_tilde + c] = al[c];
            }
        }
        let b_e_val = if bias { w.sum() } else { 0.0 };
        (vec, b_e_val)
    });

    if let Some((vec, b_e_val)) = fast {
        let enc = build(&vec, b_e_val, "gram_cholesky");
        let err = scalar_fit_error(&enc, k, o);
        if err <= tol {
            let system = want_system.then(|| GadgetSystem {
                sigma: sg.transpose(),
                m_design: assemble_design(&sg, &k_tilde, bias),
                bias_mode: bias,
            });
            let mut enc = enc;
            enc.audit.insert("residual_inf".into(), format!("{err:e}"));
            return Ok((enc, system));
        }
    }

    // Fallback: dense minimum-norm least squares with rank check.
    let m_design = assemble_design(&sg, &k_tilde, bias);
    let (vec_full, rank) = min_norm_lsq(&m_design, o, 1e-10);
    if rank < n {
        return Err(FactError::RankDeficient {
            rank,
            needed: n,
            context: format!("gadget design matrix (seed {seed}); reseed may help"),
        });
    }
    let b_e_val = if bias { vec_full[h * d_tilde] } else { 0.0 };
    let slice = DVector::from_fn(h * d_tilde, |i, _| vec_full[i]);
    let mut enc = build(&slice, b_e_val, "dense_svd");
    let err = scalar_fit_error(&enc, k, o);
    if err > tol {
        return Err(FactError::Solver {
            context: format!("gadget interpolation residual {err:e} exceeds {tol:e} at full rank"),
            residual: err,
            best: None,
        });
    }
    enc.audit.insert("residual_inf".into(), format!("{err:e}"));
    let system = want_system.then(|| GadgetSystem {
        sigma: sg.transpose(),
        m_design,
        bias_mode: bias,
    });
    Ok((enc, system))
}

fn assemble_design(sg: &DMatrix<f64>, k_tilde: &DMatrix<f64>, bias: bool) -> DMatrix<f64> {
    let n = sg.nrows();
    let h = sg.ncols();
    let d_tilde = k_tilde.ncols();
    let cols = h * d_tilde + usize::from(bias);
    let mut m = DMatrix::zeros(n, cols);
    for l in 0..h {
        for i in 0..n {
            let s = sg[(i, l)];
            for c in 0..d_tilde {
                m[(i, l * d_tilde + c)] = s * k_tilde[(i, c)];
            }
        }
    }
    if bias {
        for i in 0..n {
            m[(i, cols - 1)] = 1.0;
        }
    }
    m
}

/// Fit a scalar gated encoder to targets o over the keys: sample gaussian
/// gate weights, then solve the structured system M(Sigma, K) vec = o for
/// the minimum-norm value-arm weights.
pub fn gated_gadget(
    k: &EmbeddingSet,
    o: &DVector<f64>,
    h: usize,
    activation: Activation,
    bias: bool,
    seed: u64,
) -> Result<(GatedEncoder, GadgetSystem)> {
    let (enc, system) = solve_gadget(k, o, h, activation, bias, seed, true)?;
    Ok((enc, system.expect("system requested")))
}

/// Per-gadget width for a stacked encoder: the smallest h~ whose unknown
/// count reaches |K| (bias mode gains one slope per unit plus the shared
/// output bias).
pub fn gadget_width(n_keys: usize, d: usize, bias: bool) -> usize {
    if bias {
        // (d+1) h~ + 1 >= n
        n_keys.saturating_sub(1).div_ceil(d + 1).max(1)
    } else {
        n_keys.div_ceil(d).max(1)
    }
}

/// Stack m independent scalar gadgets, one per code coordinate, into a
/// vector-valued encoder with a block-of-ones read-out. Gadget j targets
/// o^(j)_i = C[f(i)][j] and draws its gate from seed XOR j.
pub fn stack_encoder(
    k: &EmbeddingSet,
    codes: &DMatrix<f64>,
    f: &FactSet,
    h_total: usize,
    activation: Activation,
    bias: bool,
    seed: u64,
) -> Result<GatedEncoder> {
    let n = k.n();
    let d = k.d();
    let m = codes.ncols();
    if m == 0 {
        return Err(FactError::invalid("code width m must be at least 1"));
    }
    if f.n_keys() != n {
        return Err(FactError::invalid("fact set length must match key count"));
    }
    if f.n_values() > codes.nrows() {
        return Err(FactError::invalid(
            "code matrix has fewer rows than the fact set's value range",
        ));
    }
    if !h_total.is_multiple_of(m) {
        return Err(FactError::invalid(format!(
            "h_total {h_total} must be divisible by the code width m {m}"
        )));
    }
    let h_tilde = h_total / m;
    let gadgets: Vec<Result<GatedEncoder>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let o = DVector::from_fn(n, |i, _| codes[(f.get(i), j)]);
            solve_gadget(k, &o, h_tilde, activation, bias, seed ^ j as u64, false)
                .map(|(enc, _)| enc)
                .map_err(|e| e.annotate(&format!("code coordinate {j}")))
        })
        .collect();

    let mut g = DMatrix::zeros(h_total, d);
    let mut a = DMatrix::zeros(h_total, d);
    let mut b_g = DVector::zeros(h_total);
    let mut b_a = DVector::zeros(h_total);
    let mut b_e = DVector::zeros(m);
    for (j, gadget) in gadgets.into_iter().enumerate() {
        let gadget = gadget?;
        let r0 = j * h_tilde;
        g.view_mut((r0, 0), (h_tilde, d)).copy_from(&gadget.g);
        a.view_mut((r0, 0), (h_tilde, d)).copy_from(&gadget.a);
        b_g.rows_mut(r0, h_tilde).copy_from(&gadget.b_g);
        b_a.rows_mut(r0, h_tilde).copy_from(&gadget.b_a);
        b_e[j] = gadget.b_e[0];
    }

    let mut audit = BTreeMap::new();
    audit.insert("construction".into(), "stack_encoder".into());
    audit.insert("seed".into(), format!("{seed}"));
    audit.insert("h_tilde".into(), format!("{h_tilde}"));
    audit.insert("bias_mode".into(), format!("{bias}"));
    let enc = GatedEncoder {
        g,
        b_g,
        a,
        b_a,
        e: EMat::BlockOnes { m, h_tilde },
        b_e,
        activation,
        audit,
    };

    let out = enc.forward_rows(k.data());
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..m {
            worst = worst.max((out[(i, j)] - codes[(f.get(i), j)]).abs());
        }
    }
    if worst > 1e-5 {
        return Err(FactError::Solver {
            context: format!("stacked encoder fit error {worst:e} exceeds 1e-5"),
            residual: worst,
            best: None,
        });
    }
    let mut enc = enc;
    enc.audit.insert("fit_error_inf".into(), format!("{worst:e}"));
    Ok(enc)
}

fn plain_from_gadget(gadget: &GatedEncoder, eps: f64, activation: Activation) -> PlainEncoder {
    let h = gadget.hidden_dim();
    let d = gadget.in_dim();
    let readout_coeff: Vec<f64> = match &gadget.e {
        EMat::BlockOnes { .. } => vec![1.0; h],
        EMat::Dense(e) => (0..h).map(|l| e[(0, l)]).collect(),
    };
    let mut a = DMatrix::zeros(2 * h, d);
    let mut b_a = DVector::zeros(2 * h);
    let mut e = DMatrix::zeros(1, 2 * h);
    for l in 0..h {
        for c in 0..d {
            a[(2 * l, c)] = gadget.g[(l, c)] + eps * gadget.a[(l, c)];
            a[(2 * l + 1, c)] = gadget.g[(l, c)] - eps * gadget.a[(l, c)];
        }
        b_a[2 * l] = gadget.b_g[l] + eps * gadget.b_a[l];
        b_a[2 * l + 1] = gadget.b_g[l] - eps * gadget.b_a[l];
        e[(0, 2 * l)] = readout_coeff[l] / (2.0 * eps);
        e[(0, 2 * l + 1)] = -readout_coeff[l] / (2.0 * eps);
    }
    PlainEncoder {
        a,
        b_a,
        e: EMat::Dense(e),
        b_e: gadget.b_e.clone(),
        activation,
        audit: BTreeMap::new(),
    }
}

/// Replace a scalar gated gadget built with the derivative activation
/// sigma' by a plain 2x-width encoder using sigma, via the central
/// difference [sigma(u + eps w) - sigma(u - eps w)] / (2 eps) -> sigma'(u) w.
/// A single shared eps is searched: halved from 1 until the deviation from
/// the gadget's outputs on K is at most delta, then pushed back up by 20
/// bisection steps toward the largest passing value.
pub fn nongated_reduce(
    gadget: &GatedEncoder,
    k: &EmbeddingSet,
    delta: f64,
    activation: Activation,
) -> Result<PlainEncoder> {
    if gadget.out_dim() != 1 {
        return Err(FactError::invalid(
            "the finite-difference reduction applies to scalar gadgets",
        ));
    }
    if !(delta >= 0.0) {
        return Err(FactError::invalid("delta must be nonnegative"));
    }
    let expected = activation.derivative_activation()?;
    if gadget.activation != expected {
        return Err(FactError::invalid(format!(
            "gadget activation {} does not match the derivative of {}",
            gadget.activation.tag(),
            activation.tag()
        )));
    }
    let targets = gadget.forward_rows(k.data());

    let error_at = |eps: f64| -> f64 {
        let plain = plain_from_gadget(gadget, eps, activation);
        let out = plain.forward_rows(k.data());
        let mut worst: f64 = 0.0;
        for i in 0..k.n() {
            worst = worst.max((out[(i, 0)] - targets[(i, 0)]).abs());
        }
        worst
    };

    const FLOOR: f64 = 1e-12;
    let mut eps = 1.0;
    let mut best_err = f64::INFINITY;
    let mut pass_eps = None;
    let mut fail_eps = None;
    while eps >= FLOOR {
        let err = error_at(eps);
        best_err = best_err.min(err);
        if err <= delta {
            pass_eps = Some(eps);
            break;
        }
        fail_eps = Some(eps);
        eps *= 0.5;
    }
    let Some(mut lo) = pass_eps else {
        return Err(FactError::ApproximationInfeasible {
            smallest_error: best_err,
            context: format!("no eps above {FLOOR:e} meets delta {delta:e}"),
        });
    };
    if let Some(mut hi) = fail_eps {
        for _ in 0..20 {
            let mid = 0.5 * (lo + hi);
            if error_at(mid) <= delta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let final_err = error_at(lo);
    let mut plain = plain_from_gadget(gadget, lo, activation);
    plain.audit.insert("construction".into(), "nongated_reduce".into());
    plain.audit.insert("eps".into(), format!("{lo:e}"));
    plain.audit.insert("max_error".into(), format!("{final_err:e}"));
    Ok(plain)
}

/// Convenience builder: fit the gated gadget with sigma' internally, then
/// reduce it to a plain sigma encoder within delta.
pub fn nongated_builder(
    k: &EmbeddingSet,
    o: &DVector<f64>,
    h: usize,
    activation: Activation,
    bias: bool,
    seed: u64,
    delta: f64,
) -> Result<PlainEncoder> {
    let deriv = activation.derivative_activation()?;
    let (gadget, _) = gated_gadget(k, o, h, deriv, bias, seed)?;
    nongated_reduce(&gadget, k, delta, activation)
}

/// One block of the ReLU interpolation plan: keys `indices` lie on the
/// hyperplane z . x = b, the slope v interpolates the block targets, and
/// (tau, delta) keep the paired units silent outside the block.
#[derive(Debug, Clone)]
pub struct ReluBlock {
    pub indices: Vec<usize>,
    pub z: DVector<f64>,
    pub b: f64,
    pub v: DVector<f64>,
    pub tau: f64,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct ReluBlockPlan {
    pub blocks: Vec<ReluBlock>,
}

/// Exact interpolation of (key, target) pairs by a width-4*ceil(n/d) ReLU
/// network. Keys are split into consecutive blocks of at most d; each block
/// contributes four units h(x) = [g_{b-tau}(x) - g_{b+tau}(x)] built from
/// paired differences of ReLUs that evaluate to v . x on the block's
/// hyperplane and to exactly zero on every other key.
pub fn relu_block_fit(k: &EmbeddingSet, y: &DVector<f64>) -> Result<(PlainEncoder, ReluBlockPlan)> {
    let n = k.n();
    let d = k.d();
    if y.len() != n {
        return Err(FactError::invalid("target vector length must match key count"));
    }
    let r = n.div_ceil(d);
    let mut blocks = Vec::with_capacity(r);
    let mut a = DMatrix::zeros(4 * r, d);
    let mut b_a = DVector::zeros(4 * r);
    let mut e = DMatrix::zeros(1, 4 * r);

    for (bi, start) in (0..n).step_by(d).enumerate() {
        let len = d.min(n - start);
        let indices: Vec<usize> = (start..start + len).collect();
        let x_s = k.data().rows(start, len).clone_owned();
        let ones = DVector::from_element(len, 1.0);
        let y_s = DVector::from_fn(len, |i, _| y[start + i]);

        let (z, rank_z) = min_norm_lsq(&x_s, &ones, 1e-10);
        if rank_z < len {
            return Err(FactError::DegenerateInput(format!(
                "block {bi} keys are linearly dependent (rank {rank_z} < {len}); general position violated"
            )));
        }
        let plane_err = (&x_s * &z - &ones).amax();
        if plane_err > 1e-9 {
            return Err(FactError::DegenerateInput(format!(
                "block {bi} hyperplane residual {plane_err:e} exceeds 1e-9"
            )));
        }
        let (v, _) = min_norm_lsq(&x_s, &y_s, 1e-10);
        let fit_err = (&x_s * &v - &y_s).amax();
        if fit_err > 1e-9 * y_s.amax().max(1.0) {
            return Err(FactError::DegenerateInput(format!(
                "block {bi} slope solve residual {fit_err:e} too large"
            )));
        }

        // Separation of all other keys from the block hyperplane.
        let b = 1.0;
        let mut sep = f64::INFINITY;
        for i in 0..n {
            if indices.contains(&i) {
                continue;
            }
            let c = (k.data().row(i).transpose().dot(&z) - b).abs();
            sep = sep.min(c);
        }
        let tau = if sep.is_finite() {
            if sep <= 1e-12 {
                return Err(FactError::DegenerateInput(format!(
                    "block {bi} hyperplane passes through a key outside the block; general position violated"
                )));
            }
            sep / 4.0
        } else {
            // Single block: no outside keys to silence.
            0.25
        };

        // delta keeps |delta * v . k| strictly inside each key's safe slack:
        // tau on the block, |z . k - b| - tau off it. Half the strict bound.
        let mut bound = f64::INFINITY;
        for i in 0..n {
            let vk = k.data().row(i).transpose().dot(&v).abs();
            if vk <= 1e-300 {
                continue;
            }
            let slack = if indices.contains(&i) {
                tau
            } else {
                (k.data().row(i).transpose().dot(&z) - b).abs() - tau
            };
            bound = bound.min(slack / vk);
        }
        let delta = if bound.is_finite() { 0.5 * bound } else { 1.0 };

        let r0 = 4 * bi;
        for unit in 0..4 {
            let with_slope = unit == 0 || unit == 2;
            for c in 0..d {
                a[(r0 + unit, c)] = z[c] + if with_slope { delta * v[c] } else { 0.0 };
            }
        }
        b_a[r0] = tau - b;
        b_a[r0 + 1] = tau - b;
        b_a[r0 + 2] = -(b + tau);
        b_a[r0 + 3] = -(b + tau);
        e[(0, r0)] = 1.0 / delta;
        e[(0, r0 + 1)] = -1.0 / delta;
        e[(0, r0 + 2)] = -1.0 / delta;
        e[(0, r0 + 3)] = 1.0 / delta;

        blocks.push(ReluBlock {
            indices,
            z,
            b,
            v,
            tau,
            delta,
        });
    }

    let mut audit = BTreeMap::new();
    audit.insert("construction".into(), "relu_block_fit".into());
    audit.insert("blocks".into(), format!("{r}"));
    let enc = PlainEncoder {
        a,
        b_a,
        e: EMat::Dense(e),
        b_e: DVector::zeros(1),
        activation: Activation::Relu,
        audit,
    };

    let out = enc.forward_rows(k.data());
    let mut worst: f64 = 0.0;
    for i in 0..n {
        worst = worst.max((out[(i, 0)] - y[i]).abs());
    }
    if worst > 1e-6 {
        return Err(FactError::Solver {
            context: format!("block ReLU fit error {worst:e} exceeds 1e-6"),
            residual: worst,
            best: None,
        });
    }
    Ok((enc, ReluBlockPlan { blocks }))
}

/// Training hyperparameters for the gradient-descent encoder.
#[derive(Debug, Clone)]
pub struct GdEncoderCfg {
    pub lr: f64,
    pub steps: usize,
    /// Std-dev of the fresh gaussian key noise added each step.
    pub noise_eps: f64,
    pub seed: u64,
}

impl Default for GdEncoderCfg {
    fn default() -> Self {
        GdEncoderCfg {
            lr: 1e-2,
            steps: 1000,
            noise_eps: 1e-7,
            seed: 0,
        }
    }
}

/// Loss value plus gradients with respect to G, A and E, in that order.
pub type LossGrads = (f64, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

/// Mean-squared encoding loss and its analytic gradients with respect to
/// G, A and dense E, at fixed inputs x (no noise). Exposed so the gradients
/// can be checked against finite differences.
pub fn gated_loss_grads(
    enc: &GatedEncoder,
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> Result<LossGrads> {
    let EMat::Dense(e) = &enc.e else {
        return Err(FactError::invalid("gradient evaluation needs a dense read-out"));
    };
    let n = x.nrows();
    let h = enc.hidden_dim();
    let zg = x * enc.g.transpose();
    let za = x * enc.a.transpose();
    let mut sig = zg.clone();
    let mut dsig = zg.clone();
    for i in 0..n {
        for l in 0..h {
            let z = zg[(i, l)] + enc.b_g[l];
            sig[(i, l)] = enc.activation.eval(z);
            dsig[(i, l)] = enc.activation.deriv(z);
        }
    }
    let mut za_b = za;
    for i in 0..n {
        for l in 0..h {
            za_b[(i, l)] += enc.b_a[l];
        }
    }
    let hidden = sig.component_mul(&za_b);
    let out = &hidden * e.transpose();
    let mut d_out = DMatrix::zeros(n, enc.out_dim());
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..enc.out_dim() {
            let diff = out[(i, j)] + enc.b_e[j] - targets[(i, j)];
            loss += diff * diff;
            d_out[(i, j)] = 2.0 * diff / n as f64;
        }
    }
    loss /= n as f64;
    let d_hidden = &d_out * e;
    let d_e = d_out.transpose() * &hidden;
    let d_a = d_hidden.component_mul(&sig).transpose() * x;
    let d_g = d_hidden
        .component_mul(&za_b)
        .component_mul(&dsig)
        .transpose()
        * x;
    Ok((loss, d_g, d_a, d_e))
}

/// Train a gated encoder on (key, target-code) pairs by full-batch Adam on
/// the mean-squared loss, adding fresh tiny gaussian noise to the keys at
/// every step. The activation is silu; the read-out starts at zero.
pub fn gd_encoder(
    k: &EmbeddingSet,
    targets: &DMatrix<f64>,
    width: usize,
    cfg: &GdEncoderCfg,
) -> Result<GatedEncoder> {
    if width == 0 {
        return Err(FactError::invalid("width must be at least 1"));
    }
    let n = k.n();
    let d = k.d();
    if targets.nrows() != n {
        return Err(FactError::invalid("targets must have one row per key"));
    }
    let m = targets.ncols();
    let mut rng = rng_from_seed(cfg.seed);
    let scale = 1.0 / (d as f64).sqrt();
    let g0 = {
        let mut g = gaussian_matrix(width, d, &mut rng);
        g *= scale;
        g
    };
    let a0 = {
        let mut a = gaussian_matrix(width, d, &mut rng);
        a *= scale;
        a
    };
    let mut enc = GatedEncoder {
        g: g0,
        b_g: DVector::zeros(width),
        a: a0,
        b_a: DVector::zeros(width),
        e: EMat::Dense(DMatrix::zeros(m, width)),
        b_e: DVector::zeros(m),
        activation: Activation::Silu,
        audit: BTreeMap::new(),
    };

    let mut adam_state: Vec<(DMatrix<f64>, DMatrix<f64>)> = vec![
        (DMatrix::zeros(width, d), DMatrix::zeros(width, d)),
        (DMatrix::zeros(width, d), DMatrix::zeros(width, d)),
        (DMatrix::zeros(m, width), DMatrix::zeros(m, width)),
    ];
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let mut x = k.data().clone();
        for v in x.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += cfg.noise_eps * z;
        }
        let (loss, d_g, d_a, d_e) = gated_loss_grads(&enc, &x, targets)?;
        if !loss.is_finite() {
            return Err(FactError::Solver {
                context: format!("gd_encoder loss diverged at step {step}"),
                residual: f64::INFINITY,
                best: None,
            });
        }
        final_loss = loss;
        let t = (step + 1) as f64;
        let bc1 = 1.0 - B1.powf(t);
        let bc2 = 1.0 - B2.powf(t);
        let grads = [d_g, d_a, d_e];
        for (slot, grad) in grads.into_iter().enumerate() {
            let (mom, var) = &mut adam_state[slot];
            let param: &mut DMatrix<f64> = match slot {
                0 => &mut enc.g,
                1 => &mut enc.a,
                _ => match &mut enc.e {
                    EMat::Dense(e) => e,
                    EMat::BlockOnes { .. } => unreachable!(),
                },
            };
            for idx in 0..grad.len() {
                let gi = grad[idx];
                mom[idx] = B1 * mom[idx] + (1.0 - B1) * gi;
                var[idx] = B2 * var[idx] + (1.0 - B2) * gi * gi;
                param[idx] -= cfg.lr * (mom[idx] / bc1) / ((var[idx] / bc2).sqrt() + EPS);
            }
        }
    }
    enc.audit.insert("construction".into(), "gd_encoder".into());
    enc.audit.insert("final_loss".into(), format!("{final_loss:e}"));
    enc.audit.insert("steps".into(), format!("{}", cfg.steps));
    enc.audit.insert("seed".into(), format!("{}", cfg.seed));
    Ok(enc)
}
