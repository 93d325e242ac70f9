//! The composed fact MLP: encoder plus decoder, storage verification,
//! baseline constructions (NTK Hermite features and the naive wide ReLU
//! network), Lipschitz estimation, quantization, and model persistence.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::decodability::{optimal_outputs, SolverCfg};
use crate::decoder::{build_decoder, DecoderPack, Dist};
use crate::embeddings::{EmbeddingSet, FactSet};
use crate::encoder::{gadget_width, stack_encoder, EMat, GatedEncoder, PlainEncoder};
use crate::error::{FactError, Result};
use crate::io::fnv1a64;
use crate::linalg::spectral_norm;
use crate::rng::{gaussian_matrix, mix_seed, rng_from_seed};

#[derive(Debug, Clone)]
pub enum EncoderArm {
    Gated(GatedEncoder),
    Plain(PlainEncoder),
}

#[derive(Debug, Clone)]
pub enum DecoderArm {
    /// Random-projection decoder applied as dec(c) = (1/m) D c.
    Pack(DecoderPack),
    /// Explicit d x m matrix applied as dec(c) = M c.
    Matrix(DMatrix<f64>),
    /// Pass the encoder output through unchanged.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Constructed,
    Ntk,
    Naive,
    Gd,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Constructed => "constructed",
            ModelKind::Ntk => "ntk",
            ModelKind::Naive => "naive",
            ModelKind::Gd => "gd",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "constructed" => ModelKind::Constructed,
            "ntk" => ModelKind::Ntk,
            "naive" => ModelKind::Naive,
            "gd" => ModelKind::Gd,
            other => return Err(FactError::invalid(format!("unknown model kind '{other}'"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct FactMlp {
    pub encoder: EncoderArm,
    pub decoder: DecoderArm,
    pub kind: ModelKind,
    pub audit: BTreeMap<String, String>,
}

/// Per-key storage verdicts under strict argmax decoding.
#[derive(Debug, Clone)]
pub struct StorageReport {
    pub accuracy: f64,
    pub stored_mask: Vec<bool>,
    pub min_margin: f64,
    pub per_key_margin: Vec<f64>,
}

impl FactMlp {
    pub fn in_dim(&self) -> usize {
        match &self.encoder {
            EncoderArm::Gated(e) => e.in_dim(),
            EncoderArm::Plain(e) => e.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match &self.decoder {
            DecoderArm::Pack(p) => p.d_mat.nrows(),
            DecoderArm::Matrix(m) => m.nrows(),
            DecoderArm::Identity => match &self.encoder {
                EncoderArm::Gated(e) => e.out_dim(),
                EncoderArm::Plain(e) => e.out_dim(),
            },
        }
    }

    /// Stored weight entries: encoder weights plus the decoder projection.
    /// Code matrices are construction targets, not forward-pass weights,
    /// and block-of-ones read-outs are free bookkeeping.
    pub fn param_count(&self) -> usize {
        let enc = match &self.encoder {
            EncoderArm::Gated(e) => e.param_count(),
            EncoderArm::Plain(e) => e.param_count(),
        };
        let dec = match &self.decoder {
            DecoderArm::Pack(p) => p.d_mat.len(),
            DecoderArm::Matrix(m) => m.len(),
            DecoderArm::Identity => 0,
        };
        enc + dec
    }

    pub fn encode_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.encoder {
            EncoderArm::Gated(e) => e.forward_rows(x),
            EncoderArm::Plain(e) => e.forward_rows(x),
        }
    }

    /// Batch forward: one input per row, one output per row.
    pub fn forward_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let enc = self.encode_rows(x);
        match &self.decoder {
            DecoderArm::Pack(p) => enc * &p.d_mat.transpose() / p.m as f64,
            DecoderArm::Matrix(m) => enc * m.transpose(),
            DecoderArm::Identity => enc,
        }
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let xm = DMatrix::from_row_slice(1, x.len(), x.as_slice());
        let out = self.forward_rows(&xm);
        DVector::from_row_slice(out.row(0).transpose().as_slice())
    }
}

/// Options for the full closed-form construction.
#[derive(Debug, Clone)]
pub struct ConstructCfg {
    /// Give the gadgets value-arm and output biases (smaller width per
    /// coordinate: (d+1) h~ + 1 unknowns instead of d h~).
    pub bias: bool,
    pub dist: Dist,
    /// Failure probability recorded for sizing bookkeeping.
    pub delta: f64,
    pub solver: SolverCfg,
}

impl Default for ConstructCfg {
    fn default() -> Self {
        ConstructCfg {
            bias: true,
            dist: Dist::Gaussian,
            delta: 0.1,
            solver: SolverCfg::default(),
        }
    }
}

/// Margin-optimal outputs for the construction pipeline, with the
/// degenerate-V and single-value cases mapped to the construction's error
/// vocabulary.
pub fn construction_outputs(
    v: &EmbeddingSet,
    solver: &SolverCfg,
) -> Result<(EmbeddingSet, f64)> {
    if v.n() == 1 {
        // A single value decodes unconditionally; use the value itself.
        let norm = v.row(0).norm();
        let row = if norm > 1e-300 {
            v.data().clone() / norm
        } else {
            DMatrix::from_element(1, v.d(), 1.0 / (v.d() as f64).sqrt())
        };
        return Ok((EmbeddingSet::from_matrix(row, "optimal_outputs")?, f64::INFINITY));
    }
    let opt = optimal_outputs(v, solver).map_err(|e| match e {
        FactError::DegenerateInput(msg) => {
            FactError::InfeasibleValues(format!("decodability undefined: {msg}"))
        }
        other => other,
    })?;
    if !(opt.achieved_rho > 1e-9) {
        return Err(FactError::InfeasibleValues(format!(
            "decodability {:.3e} is not positive",
            opt.achieved_rho
        )));
    }
    Ok((opt.u, opt.achieved_rho))
}

/// Closed-form pipeline: margin-optimal outputs U* for V, a random
/// projection decoder of width m over U*, and a stacked gated encoder that
/// hits every key's code exactly. The decoder draws from `seed` and the
/// encoder gadgets from a mixed stream of it.
pub fn construct_full(
    k: &EmbeddingSet,
    v: &EmbeddingSet,
    f: &FactSet,
    m: usize,
    activation: Activation,
    seed: u64,
    cfg: &ConstructCfg,
) -> Result<FactMlp> {
    let (u_star, rho_hat) = construction_outputs(v, &cfg.solver)?;
    construct_with_outputs(k, v, f, m, activation, seed, cfg, &u_star, rho_hat)
}

/// Same pipeline with the margin-optimal outputs precomputed; lets sweeps
/// solve U* once per grid point and reuse it across seeds.
#[allow(clippy::too_many_arguments)]
pub fn construct_with_outputs(
    k: &EmbeddingSet,
    v: &EmbeddingSet,
    f: &FactSet,
    m: usize,
    activation: Activation,
    seed: u64,
    cfg: &ConstructCfg,
    u_star: &EmbeddingSet,
    rho_hat: f64,
) -> Result<FactMlp> {
    if m == 0 {
        return Err(FactError::invalid("decoder width m must be at least 1"));
    }
    if f.n_keys() != k.n() {
        return Err(FactError::invalid("fact set length must match key count"));
    }
    if f.n_values() > v.n() {
        return Err(FactError::invalid("fact set range exceeds value count"));
    }
    if k.d() != v.d() {
        return Err(FactError::invalid("keys and values must share dimension"));
    }
    if u_star.n() != v.n() || u_star.d() != v.d() {
        return Err(FactError::invalid("output set must share V's shape"));
    }

    let pack = build_decoder(u_star, m, cfg.dist, seed)?;
    let h_tilde = gadget_width(k.n(), k.d(), cfg.bias);
    let h_total = m * h_tilde;
    let seed_enc = mix_seed(seed);
    let encoder = stack_encoder(k, &pack.codes, f, h_total, activation, cfg.bias, seed_enc)?;

    let mut model = FactMlp {
        encoder: EncoderArm::Gated(encoder),
        decoder: DecoderArm::Pack(DecoderPack {
            delta: Some(cfg.delta),
            ..pack
        }),
        kind: ModelKind::Constructed,
        audit: BTreeMap::new(),
    };
    let report = verify_storage(&model, k, v, f)?;
    model.audit.insert("m".into(), format!("{m}"));
    model.audit.insert("h_tilde".into(), format!("{h_tilde}"));
    model.audit.insert("rho_hat".into(), format!("{rho_hat}"));
    model.audit.insert("seed".into(), format!("{seed}"));
    model.audit.insert("seed_encoder".into(), format!("{seed_enc}"));
    model.audit.insert("dist".into(), cfg.dist.tag().into());
    model.audit.insert("delta".into(), format!("{}", cfg.delta));
    model.audit.insert("accuracy".into(), format!("{}", report.accuracy));
    model
        .audit
        .insert("min_margin".into(), format!("{}", report.min_margin));
    Ok(model)
}

/// Normalized probabilists' Hermite polynomial He_k(z)/sqrt(k!), evaluated
/// by the three-term recurrence He_{j+1} = z He_j - j He_{j-1}.
pub fn hermite_normalized(k: usize, z: f64) -> f64 {
    let mut prev = 1.0;
    if k == 0 {
        return prev;
    }
    let mut cur = z;
    for j in 1..k {
        let next = z * cur - j as f64 * prev;
        prev = cur;
        cur = next;
    }
    let mut fact = 1.0f64;
    for j in 2..=k {
        fact *= j as f64;
    }
    cur / fact.sqrt()
}

/// The NTK-style baseline: random gates, degree-k Hermite features of the
/// gate pre-activations, and an up-projection averaging the feature-weighted
/// targets. margin_optimal swaps the raw value targets for U*.
pub fn ntk_construct(
    k: &EmbeddingSet,
    v: &EmbeddingSet,
    f: &FactSet,
    h: usize,
    hermite_k: usize,
    margin_optimal: bool,
    seed: u64,
) -> Result<FactMlp> {
    if h == 0 {
        return Err(FactError::invalid("hidden width h must be at least 1"));
    }
    if hermite_k == 0 {
        return Err(FactError::invalid("hermite degree must be at least 1"));
    }
    if f.n_keys() != k.n() {
        return Err(FactError::invalid("fact set length must match key count"));
    }
    if f.n_values() > v.n() {
        return Err(FactError::invalid("fact set range exceeds value count"));
    }
    if k.d() != v.d() {
        return Err(FactError::invalid("keys and values must share dimension"));
    }
    let n = k.n();
    let d = k.d();

    let targets = if margin_optimal && v.n() >= 2 {
        optimal_outputs(v, &SolverCfg::default())?.u
    } else {
        v.clone()
    };

    let mut rng = rng_from_seed(seed);
    let w_gate = gaussian_matrix(h, d, &mut rng);
    let mut p = gaussian_matrix(d, h, &mut rng);
    for c in 0..h {
        let norm = p.column(c).norm();
        if norm > 1e-300 {
            for r in 0..d {
                p[(r, c)] /= norm;
            }
        }
    }

    let z = k.data() * w_gate.transpose();
    let mut hf = z.clone();
    for x in hf.iter_mut() {
        *x = hermite_normalized(hermite_k, *x);
    }
    let y = DMatrix::from_fn(n, d, |i, c| targets.data()[(f.get(i), c)]);
    let a = y * &p;
    let w_up = hf.component_mul(&a).transpose() * k.data() / h as f64;

    let mut audit = BTreeMap::new();
    audit.insert("construction".into(), "ntk".into());
    audit.insert("hermite_k".into(), format!("{hermite_k}"));
    audit.insert("h".into(), format!("{h}"));
    audit.insert("seed".into(), format!("{seed}"));
    audit.insert("margin_optimal".into(), format!("{margin_optimal}"));
    let encoder = GatedEncoder {
        g: w_gate,
        b_g: DVector::zeros(h),
        a: w_up,
        b_a: DVector::zeros(h),
        e: EMat::Dense(p),
        b_e: DVector::zeros(d),
        activation: Activation::Silu,
        audit: BTreeMap::new(),
    };
    Ok(FactMlp {
        encoder: EncoderArm::Gated(encoder),
        decoder: DecoderArm::Identity,
        kind: ModelKind::Ntk,
        audit,
    })
}

/// The naive wide construction: one ReLU unit per key, thresholded halfway
/// between its self-similarity and its closest other key, reading out the
/// fact's value embedding scaled to undo the remaining slack.
pub fn naive_construct(k: &EmbeddingSet, v: &EmbeddingSet, f: &FactSet) -> Result<FactMlp> {
    let n = k.n();
    let d = k.d();
    if f.n_keys() != n {
        return Err(FactError::invalid("fact set length must match key count"));
    }
    if f.n_values() > v.n() {
        return Err(FactError::invalid("fact set range exceeds value count"));
    }
    if k.d() != v.d() {
        return Err(FactError::invalid("keys and values must share dimension"));
    }
    let gram = k.data() * k.data().transpose();
    let mut b = DVector::zeros(n);
    let mut slack = DVector::zeros(n);
    for j in 0..n {
        let alpha = gram[(j, j)];
        let mut beta = f64::NEG_INFINITY;
        for i in 0..n {
            if i != j {
                beta = beta.max(gram[(i, j)]);
            }
        }
        if n == 1 {
            beta = alpha - 1.0;
        }
        if alpha <= beta {
            return Err(FactError::KeysNotSeparable { index: j });
        }
        b[j] = 0.5 * (alpha + beta);
        slack[j] = alpha - b[j];
    }
    let mut e = DMatrix::zeros(d, n);
    for j in 0..n {
        let val = v.data().row(f.get(j));
        for c in 0..d {
            e[(c, j)] = val[c] / slack[j];
        }
    }
    let mut audit = BTreeMap::new();
    audit.insert("construction".into(), "naive".into());
    let encoder = PlainEncoder {
        a: k.data().clone(),
        b_a: -b,
        e: EMat::Dense(e),
        b_e: DVector::zeros(d),
        activation: Activation::Relu,
        audit: BTreeMap::new(),
    };
    Ok(FactMlp {
        encoder: EncoderArm::Plain(encoder),
        decoder: DecoderArm::Identity,
        kind: ModelKind::Naive,
        audit,
    })
}

/// Strict argmax storage check: key i is stored iff its target value's
/// score strictly beats every other value's score. Ties count as failures.
pub fn verify_storage(
    model: &FactMlp,
    k: &EmbeddingSet,
    v: &EmbeddingSet,
    f: &FactSet,
) -> Result<StorageReport> {
    let n = k.n();
    if f.n_keys() != n {
        return Err(FactError::invalid("fact set length must match key count"));
    }
    if f.n_values() > v.n() {
        return Err(FactError::invalid("fact set range exceeds value count"));
    }
    let out = model.forward_rows(k.data());
    if out.ncols() != v.d() {
        return Err(FactError::invalid(
            "model output dimension does not match value dimension",
        ));
    }
    let scores = out * v.data().transpose();
    let mut stored_mask = Vec::with_capacity(n);
    let mut per_key_margin = Vec::with_capacity(n);
    let mut min_margin = f64::INFINITY;
    for i in 0..n {
        let target = f.get(i);
        let margin = if v.n() == 1 {
            f64::INFINITY
        } else {
            let mut best_other = f64::NEG_INFINITY;
            for j in 0..v.n() {
                if j != target {
                    best_other = best_other.max(scores[(i, j)]);
                }
            }
            scores[(i, target)] - best_other
        };
        stored_mask.push(margin > 0.0);
        per_key_margin.push(margin);
        min_margin = min_margin.min(margin);
    }
    let accuracy = stored_mask.iter().filter(|&&s| s).count() as f64 / n as f64;
    Ok(StorageReport {
        accuracy,
        stored_mask,
        min_margin,
        per_key_margin,
    })
}

fn rms_normalize(x: &DVector<f64>) -> (DVector<f64>, f64) {
    let d = x.len() as f64;
    let r = (x.dot(x) / d + 1e-8).sqrt();
    (x / r, r)
}

/// Jacobian of the encoder at x (m x d).
fn encoder_jacobian(model: &FactMlp, x: &DVector<f64>) -> DMatrix<f64> {
    match &model.encoder {
        EncoderArm::Gated(enc) => {
            let h = enc.hidden_dim();
            let zg = &enc.g * x + &enc.b_g;
            let za = &enc.a * x + &enc.b_a;
            let mut inner = DMatrix::zeros(h, enc.in_dim());
            for l in 0..h {
                let s = enc.activation.eval(zg[l]);
                let ds = enc.activation.deriv(zg[l]);
                for c in 0..enc.in_dim() {
                    inner[(l, c)] = ds * za[l] * enc.g[(l, c)] + s * enc.a[(l, c)];
                }
            }
            match &enc.e {
                EMat::Dense(e) => e * inner,
                EMat::BlockOnes { .. } => enc.e.to_dense() * inner,
            }
        }
        EncoderArm::Plain(enc) => {
            let h = enc.hidden_dim();
            let z = &enc.a * x + &enc.b_a;
            let mut inner = DMatrix::zeros(h, enc.in_dim());
            for l in 0..h {
                let ds = enc.activation.deriv(z[l]);
                for c in 0..enc.in_dim() {
                    inner[(l, c)] = ds * enc.a[(l, c)];
                }
            }
            match &enc.e {
                EMat::Dense(e) => e * inner,
                EMat::BlockOnes { .. } => enc.e.to_dense() * inner,
            }
        }
    }
}

/// Largest singular value of the Jacobian of x -> V (model(rms(x))),
/// maximized over the sample keys. The Jacobian is assembled analytically
/// (decoder x encoder chain rule, plus the rms normalization term when on).
pub fn lipschitz_estimate(
    model: &FactMlp,
    v: &EmbeddingSet,
    k_samples: &EmbeddingSet,
    rms: bool,
) -> Result<f64> {
    if k_samples.d() != model.in_dim() {
        return Err(FactError::invalid("sample dimension mismatch"));
    }
    let d = model.in_dim();
    let mut worst: f64 = 0.0;
    for i in 0..k_samples.n() {
        let x0 = k_samples.row(i);
        let (x_eval, j_rms) = if rms {
            let (xn, r) = rms_normalize(&x0);
            // J_rms = I/r - x x^T / (d r^3)
            let mut j = DMatrix::identity(d, d) / r;
            let coef = 1.0 / (d as f64 * r * r * r);
            for a in 0..d {
                for b in 0..d {
                    j[(a, b)] -= coef * x0[a] * x0[b];
                }
            }
            (xn, Some(j))
        } else {
            (x0.clone(), None)
        };
        let j_enc = encoder_jacobian(model, &x_eval);
        let j_model = match &model.decoder {
            DecoderArm::Pack(p) => &p.d_mat * &j_enc / p.m as f64,
            DecoderArm::Matrix(m) => m * &j_enc,
            DecoderArm::Identity => j_enc,
        };
        let j_scores = v.data() * j_model;
        let j_full = match j_rms {
            Some(jr) => j_scores * jr,
            None => j_scores,
        };
        worst = worst.max(spectral_norm(&j_full, 200));
    }
    Ok(worst)
}

fn quantize_matrix(m: &mut DMatrix<f64>, step: f64, max_delta: &mut f64) {
    for x in m.iter_mut() {
        let q = (*x / step).round() * step;
        *max_delta = max_delta.max((q - *x).abs());
        *x = q;
    }
}

fn quantize_vector(v: &mut DVector<f64>, step: f64, max_delta: &mut f64) {
    for x in v.iter_mut() {
        let q = (*x / step).round() * step;
        *max_delta = max_delta.max((q - *x).abs());
        *x = q;
    }
}

/// Round every stored weight to the nearest multiple of `step`. The
/// block-of-ones read-out and code targets carry no stored weights and are
/// left untouched.
pub fn quantize(model: &FactMlp, step: f64) -> Result<FactMlp> {
    if !(step > 0.0) {
        return Err(FactError::invalid("quantization step must be positive"));
    }
    let mut out = model.clone();
    let mut max_delta = 0.0f64;
    match &mut out.encoder {
        EncoderArm::Gated(e) => {
            quantize_matrix(&mut e.g, step, &mut max_delta);
            quantize_vector(&mut e.b_g, step, &mut max_delta);
            quantize_matrix(&mut e.a, step, &mut max_delta);
            quantize_vector(&mut e.b_a, step, &mut max_delta);
            if let EMat::Dense(em) = &mut e.e {
                quantize_matrix(em, step, &mut max_delta);
            }
            quantize_vector(&mut e.b_e, step, &mut max_delta);
        }
        EncoderArm::Plain(e) => {
            quantize_matrix(&mut e.a, step, &mut max_delta);
            quantize_vector(&mut e.b_a, step, &mut max_delta);
            if let EMat::Dense(em) = &mut e.e {
                quantize_matrix(em, step, &mut max_delta);
            }
            quantize_vector(&mut e.b_e, step, &mut max_delta);
        }
    }
    match &mut out.decoder {
        DecoderArm::Pack(p) => quantize_matrix(&mut p.d_mat, step, &mut max_delta),
        DecoderArm::Matrix(m) => quantize_matrix(m, step, &mut max_delta),
        DecoderArm::Identity => {}
    }
    out.audit.insert("quantize_step".into(), format!("{step:e}"));
    out.audit
        .insert("quantize_max_delta".into(), format!("{max_delta:e}"));
    Ok(out)
}

pub const MODEL_MAGIC: &[u8; 8] = b"FACTMLP\x01";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct MatrixMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct EMatMeta {
    kind: String,
    m: usize,
    h_tilde: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    kind: String,
    encoder_type: String,
    activation: String,
    e_meta: EMatMeta,
    decoder_type: String,
    dist: Option<String>,
    decoder_seed: Option<u64>,
    decoder_m: Option<usize>,
    decoder_delta: Option<f64>,
    u_row_norms: Option<Vec<f64>>,
    audit: BTreeMap<String, String>,
    encoder_audit: BTreeMap<String, String>,
    matrices: Vec<MatrixMeta>,
}

fn matrix_bytes(m: &DMatrix<f64>, out: &mut Vec<u8>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

fn vector_as_matrix(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(v.len(), 1, |i, _| v[i])
}

/// Serialize the model: magic, JSON header (length-prefixed), named f64
/// little-endian row-major matrices in header order, then a 64-bit FNV-1a
/// checksum of everything before it.
pub fn save_model(model: &FactMlp, path: &Path) -> Result<()> {
    let mut mats: Vec<(String, DMatrix<f64>)> = Vec::new();
    let (encoder_type, activation, e_meta, enc_audit) = match &model.encoder {
        EncoderArm::Gated(e) => {
            mats.push(("G".into(), e.g.clone()));
            mats.push(("b_G".into(), vector_as_matrix(&e.b_g)));
            mats.push(("A".into(), e.a.clone()));
            mats.push(("b_A".into(), vector_as_matrix(&e.b_a)));
            let meta = match &e.e {
                EMat::Dense(em) => {
                    mats.push(("E".into(), em.clone()));
                    EMatMeta {
                        kind: "dense".into(),
                        m: em.nrows(),
                        h_tilde: 0,
                    }
                }
                EMat::BlockOnes { m, h_tilde } => EMatMeta {
                    kind: "block_ones".into(),
                    m: *m,
                    h_tilde: *h_tilde,
                },
            };
            mats.push(("b_E".into(), vector_as_matrix(&e.b_e)));
            ("gated", e.activation.tag(), meta, e.audit.clone())
        }
        EncoderArm::Plain(e) => {
            mats.push(("A".into(), e.a.clone()));
            mats.push(("b_A".into(), vector_as_matrix(&e.b_a)));
            let meta = match &e.e {
                EMat::Dense(em) => {
                    mats.push(("E".into(), em.clone()));
                    EMatMeta {
                        kind: "dense".into(),
                        m: em.nrows(),
                        h_tilde: 0,
                    }
                }
                EMat::BlockOnes { m, h_tilde } => EMatMeta {
                    kind: "block_ones".into(),
                    m: *m,
                    h_tilde: *h_tilde,
                },
            };
            mats.push(("b_E".into(), vector_as_matrix(&e.b_e)));
            ("plain", e.activation.tag(), meta, e.audit.clone())
        }
    };
    let (decoder_type, dist, decoder_seed, decoder_m, decoder_delta, u_row_norms) =
        match &model.decoder {
            DecoderArm::Pack(p) => {
                mats.push(("D".into(), p.d_mat.clone()));
                mats.push(("C".into(), p.codes.clone()));
                (
                    "pack",
                    Some(p.dist.tag().to_string()),
                    Some(p.seed),
                    Some(p.m),
                    p.delta,
                    Some(p.u_row_norms.clone()),
                )
            }
            DecoderArm::Matrix(m) => {
                mats.push(("D".into(), m.clone()));
                ("matrix", None, None, None, None, None)
            }
            DecoderArm::Identity => ("identity", None, None, None, None, None),
        };

    let header = ModelHeader {
        version: MODEL_VERSION,
        kind: model.kind.tag().into(),
        encoder_type: encoder_type.into(),
        activation: activation.into(),
        e_meta,
        decoder_type: decoder_type.into(),
        dist,
        decoder_seed,
        decoder_m,
        decoder_delta,
        u_row_norms,
        audit: model.audit.clone(),
        encoder_audit: enc_audit,
        matrices: mats
            .iter()
            .map(|(name, m)| MatrixMeta {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| FactError::Malformed(format!("header serialization: {e}")))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MODEL_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, m) in &mats {
        matrix_bytes(m, &mut bytes);
    }
    let checksum = fnv1a64(&bytes);
    bytes.extend_from_slice(&checksum.to_le_bytes());

    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, len: usize, what: &str) -> Result<&'a [u8]> {
    if *at + len > bytes.len() {
        return Err(FactError::Truncated(format!(
            "{what}: need {len} bytes at offset {at}"
        )));
    }
    let s = &bytes[*at..*at + len];
    *at += len;
    Ok(s)
}

/// Load a model saved by [`save_model`], verifying magic, version and
/// checksum before reconstructing the weights bit-exactly.
pub fn load_model(path: &Path) -> Result<FactMlp> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MODEL_MAGIC.len() + 4 + 8 {
        return Err(FactError::Truncated("file shorter than fixed framing".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if fnv1a64(body) != stored {
        return Err(FactError::ChecksumMismatch);
    }
    let mut at = 0usize;
    let magic = take(body, &mut at, MODEL_MAGIC.len(), "magic")?;
    if magic != MODEL_MAGIC {
        return Err(FactError::Malformed("bad magic bytes".into()));
    }
    let len_bytes = take(body, &mut at, 4, "header length")?;
    let header_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let header_bytes = take(body, &mut at, header_len, "header")?;
    let header: ModelHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| FactError::Malformed(format!("header parse: {e}")))?;
    if header.version != MODEL_VERSION {
        return Err(FactError::VersionMismatch {
            found: header.version,
            expected: MODEL_VERSION,
        });
    }

    let mut mats: BTreeMap<String, DMatrix<f64>> = BTreeMap::new();
    for meta in &header.matrices {
        let raw = take(body, &mut at, meta.rows * meta.cols * 8, &meta.name)?;
        let mut m = DMatrix::zeros(meta.rows, meta.cols);
        for i in 0..meta.rows {
            for j in 0..meta.cols {
                let o = (i * meta.cols + j) * 8;
                m[(i, j)] = f64::from_le_bytes(raw[o..o + 8].try_into().expect("8 bytes"));
            }
        }
        mats.insert(meta.name.clone(), m);
    }
    if at != body.len() {
        return Err(FactError::Malformed(format!(
            "{} trailing bytes after matrices",
            body.len() - at
        )));
    }
    let grab = |name: &str| -> Result<DMatrix<f64>> {
        mats.get(name)
            .cloned()
            .ok_or_else(|| FactError::Malformed(format!("matrix '{name}' missing")))
    };
    let as_vector = |m: DMatrix<f64>| DVector::from_fn(m.nrows(), |i, _| m[(i, 0)]);

    let activation = Activation::from_tag(&header.activation)?;
    let e_mat = match header.e_meta.kind.as_str() {
        "dense" => EMat::Dense(grab("E")?),
        "block_ones" => EMat::BlockOnes {
            m: header.e_meta.m,
            h_tilde: header.e_meta.h_tilde,
        },
        other => return Err(FactError::Malformed(format!("unknown read-out kind '{other}'"))),
    };
    let encoder = match header.encoder_type.as_str() {
        "gated" => EncoderArm::Gated(GatedEncoder {
            g: grab("G")?,
            b_g: as_vector(grab("b_G")?),
            a: grab("A")?,
            b_a: as_vector(grab("b_A")?),
            e: e_mat,
            b_e: as_vector(grab("b_E")?),
            activation,
            audit: header.encoder_audit.clone(),
        }),
        "plain" => EncoderArm::Plain(PlainEncoder {
            a: grab("A")?,
            b_a: as_vector(grab("b_A")?),
            e: e_mat,
            b_e: as_vector(grab("b_E")?),
            activation,
            audit: header.encoder_audit.clone(),
        }),
        other => {
            return Err(FactError::Malformed(format!(
                "unknown encoder type '{other}'"
            )))
        }
    };
    let decoder = match header.decoder_type.as_str() {
        "pack" => {
            let d_mat = grab("D")?;
            let codes = grab("C")?;
            let m = header
                .decoder_m
                .ok_or_else(|| FactError::Malformed("pack decoder missing m".into()))?;
            let dist = Dist::from_tag(
                header
                    .dist
                    .as_deref()
                    .ok_or_else(|| FactError::Malformed("pack decoder missing dist".into()))?,
            )?;
            DecoderArm::Pack(DecoderPack {
                d_mat,
                codes,
                m,
                dist,
                seed: header.decoder_seed.unwrap_or(0),
                delta: header.decoder_delta,
                u_row_norms: header.u_row_norms.clone().unwrap_or_default(),
            })
        }
        "matrix" => DecoderArm::Matrix(grab("D")?),
        "identity" => DecoderArm::Identity,
        other => {
            return Err(FactError::Malformed(format!(
                "unknown decoder type '{other}'"
            )))
        }
    };
    Ok(FactMlp {
        encoder,
        decoder,
        kind: ModelKind::from_tag(&header.kind)?,
        audit: header.audit,
    })
}
