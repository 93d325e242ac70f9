//! Capacity measurement: binary search for the smallest size parameter
//! meeting an accuracy threshold, and grid sweeps over (d, F, kappa) that
//! emit crash-safe CSV mirroring the scaling experiments at desk scale.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::activation::Activation;
use crate::decodability::{optimal_outputs, SolverCfg};
use crate::decoder::{build_decoder, required_m, Dist};
use crate::embeddings::{
    gen_embeddings, gen_fact_set, rescale_condition, EmbedKind, EmbeddingSet,
};
use crate::error::{FactError, Result};
use crate::factmlp::{construct_with_outputs, ntk_construct, verify_storage, ConstructCfg};
use crate::io::fnv1a64;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// F grows with d (F = beta d^2 by default); search decoder width m.
    CostVsFacts,
    /// kappa varies the value conditioning; search decoder width m.
    CostVsRho,
    /// Search decoder width m on a fixed instance.
    MinM,
    /// Search the NTK hidden width h.
    MinHNtk,
}

impl SweepMode {
    pub fn tag(self) -> &'static str {
        match self {
            SweepMode::CostVsFacts => "cost_vs_facts",
            SweepMode::CostVsRho => "cost_vs_rho",
            SweepMode::MinM => "min_m",
            SweepMode::MinHNtk => "min_h_ntk",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "cost_vs_facts" => SweepMode::CostVsFacts,
            "cost_vs_rho" => SweepMode::CostVsRho,
            "min_m" => SweepMode::MinM,
            "min_h_ntk" => SweepMode::MinHNtk,
            other => return Err(FactError::invalid(format!("unknown sweep mode '{other}'"))),
        })
    }
}

/// Search bounds for the size parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bounds {
    /// d for decoder-m searches, 2^15 for NTK width.
    Default,
    Explicit { lo: usize, hi: usize },
    /// Upper bound from the sizing theorem: required_m(rho_hat, F, delta).
    /// Falls back to the default for NTK width searches.
    Theorem,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub mode: SweepMode,
    pub d_list: Vec<usize>,
    /// Explicit fact counts; zipped against d_list (singleton broadcasts).
    /// Ignored when beta is set.
    pub f_list: Vec<usize>,
    /// F = round(beta * d^2) when set.
    pub beta: Option<f64>,
    pub kappa_list: Vec<f64>,
    /// Seeds per grid point; the aggregate accuracy is the minimum.
    pub seeds: usize,
    pub base_seed: u64,
    /// Success threshold is accuracy >= 1 - eps_acc.
    pub eps_acc: f64,
    pub bounds: Bounds,
    /// Tied embeddings: K = V. Untied samples keys independently.
    pub tied: bool,
    pub bias: bool,
    pub dist: Dist,
    pub activation: Activation,
    pub hermite_k: usize,
    pub margin_optimal: bool,
    /// Failure probability for theorem-sized bounds.
    pub delta: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            mode: SweepMode::MinM,
            d_list: vec![16],
            f_list: Vec::new(),
            beta: Some(0.25),
            kappa_list: vec![1.0],
            seeds: 3,
            base_seed: 0,
            eps_acc: 0.0,
            bounds: Bounds::Default,
            tied: true,
            bias: true,
            dist: Dist::Gaussian,
            activation: Activation::Silu,
            hermite_k: 4,
            margin_optimal: false,
            delta: 0.1,
        }
    }
}

/// A single predicate evaluation during search.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub pass: bool,
    pub accuracy: f64,
}

/// Binary-search outcome with its certificate: the accuracy measured at the
/// returned size, and the largest size observed failing (None when the
/// search returned its lower bound untested against smaller sizes).
#[derive(Debug, Clone, Copy)]
pub struct SearchOutcome {
    pub size: usize,
    pub accuracy: f64,
    pub last_fail: Option<(usize, f64)>,
}

/// Smallest size in [lo, hi] whose probe passes, assuming monotonicity of
/// the predicate in size. The boundary is certified by construction: the
/// returned size was probed true and `last_fail` was probed false.
pub fn min_size_search(
    lo: usize,
    hi: usize,
    mut probe: impl FnMut(usize) -> Result<Probe>,
) -> Result<SearchOutcome> {
    if lo == 0 || lo > hi {
        return Err(FactError::invalid("need 1 <= lo <= hi"));
    }
    let at_lo = probe(lo)?;
    if at_lo.pass {
        return Ok(SearchOutcome {
            size: lo,
            accuracy: at_lo.accuracy,
            last_fail: None,
        });
    }
    if lo == hi {
        return Err(FactError::SearchInfeasible {
            hi,
            accuracy_at_hi: at_lo.accuracy,
        });
    }
    let at_hi = probe(hi)?;
    if !at_hi.pass {
        return Err(FactError::SearchInfeasible {
            hi,
            accuracy_at_hi: at_hi.accuracy,
        });
    }
    let mut lo_fail = (lo, at_lo.accuracy);
    let mut hi_pass = (hi, at_hi.accuracy);
    while hi_pass.0 - lo_fail.0 > 1 {
        let mid = lo_fail.0 + (hi_pass.0 - lo_fail.0) / 2;
        let at_mid = probe(mid)?;
        if at_mid.pass {
            hi_pass = (mid, at_mid.accuracy);
        } else {
            lo_fail = (mid, at_mid.accuracy);
        }
    }
    Ok(SearchOutcome {
        size: hi_pass.0,
        accuracy: hi_pass.1,
        last_fail: Some(lo_fail),
    })
}

/// One sweep grid point's outcome. The certificate fields repeat the
/// binary-search boundary; they are not part of the CSV schema.
#[derive(Debug, Clone)]
pub struct SweepRecord {
    pub point_id: String,
    pub d: usize,
    pub f: usize,
    pub kappa: f64,
    pub rho_hat: f64,
    pub size_param: usize,
    pub param_count: usize,
    pub accuracy: f64,
    pub status: String,
    pub seed_list: Vec<u64>,
    pub wall_ms: u64,
    pub cert_fail_size: Option<usize>,
    pub cert_fail_accuracy: Option<f64>,
}

pub const CSV_HEADER: &str =
    "point_id,d,F,kappa,rho_hat,size_param,param_count,accuracy,status,seed_list,wall_ms";

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// One CSV row per the fixed schema; wall_ms is replaced by an empty field
/// when `with_wall` is off so determinism hashing can exclude it.
pub fn csv_row(r: &SweepRecord, with_wall: bool) -> String {
    let seeds = r
        .seed_list
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(";");
    let mut row = String::new();
    let _ = write!(
        row,
        "{},{},{},{},{},{},{},{},{},{},{}",
        csv_quote(&r.point_id),
        r.d,
        r.f,
        r.kappa,
        r.rho_hat,
        r.size_param,
        r.param_count,
        r.accuracy,
        csv_quote(&r.status),
        csv_quote(&seeds),
        if with_wall {
            r.wall_ms.to_string()
        } else {
            String::new()
        }
    );
    row
}

/// FNV-1a over every row except the wall-time column.
pub fn determinism_hash(records: &[SweepRecord]) -> u64 {
    let mut buf = String::from(CSV_HEADER);
    for r in records {
        buf.push('\n');
        buf.push_str(&csv_row(r, false));
    }
    fnv1a64(buf.as_bytes())
}

fn fact_count(cfg: &SweepConfig, idx: usize, d: usize) -> Result<usize> {
    if let Some(beta) = cfg.beta {
        let f = (beta * (d * d) as f64).round() as usize;
        if f == 0 {
            return Err(FactError::invalid("beta * d^2 rounds to zero facts"));
        }
        return Ok(f);
    }
    match cfg.f_list.len() {
        0 => Err(FactError::invalid("need either beta or an F list")),
        1 => Ok(cfg.f_list[0]),
        n if n == cfg.d_list.len() => Ok(cfg.f_list[idx]),
        _ => Err(FactError::invalid(
            "F list must be a singleton or match the d list length",
        )),
    }
}

/// Decoder-stage storage accuracy: fraction of value rows whose code
/// decodes back to them under strict argmax against V. With an exact
/// encoder and a bijective fact map this equals full-model accuracy.
fn decoder_stage_accuracy(
    v: &EmbeddingSet,
    u_star: &EmbeddingSet,
    m: usize,
    dist: Dist,
    seed: u64,
) -> Result<f64> {
    let pack = build_decoder(u_star, m, dist, seed)?;
    let decoded = &pack.codes * pack.d_mat.transpose() / pack.m as f64;
    let scores = decoded * v.data().transpose();
    let n = v.n();
    let mut good = 0usize;
    for i in 0..n {
        let mut ok = true;
        for j in 0..n {
            if j != i && scores[(i, j)] >= scores[(i, i)] {
                ok = false;
                break;
            }
        }
        if ok {
            good += 1;
        }
    }
    Ok(good as f64 / n as f64)
}

struct PointOutput {
    rho_hat: f64,
    size: usize,
    param_count: usize,
    accuracy: f64,
    cert: Option<(usize, f64)>,
}

fn run_point(
    cfg: &SweepConfig,
    d: usize,
    f_count: usize,
    kappa: f64,
    point_base: u64,
    seeds: &[u64],
) -> Result<PointOutput> {
    let seed_v = derive_seed(point_base, 1);
    let seed_k = derive_seed(point_base, 2);
    let seed_f = derive_seed(point_base, 3);
    let mut values = gen_embeddings(EmbedKind::Sphere, f_count, d, seed_v)?;
    if kappa > 1.0 {
        values = rescale_condition(&values, kappa)?;
    }
    let keys = if cfg.tied {
        values.clone()
    } else {
        gen_embeddings(EmbedKind::Sphere, f_count, d, seed_k)?
    };
    let facts = gen_fact_set(f_count, f_count, seed_f, true)?;

    let threshold = 1.0 - cfg.eps_acc;

    if cfg.mode == SweepMode::MinHNtk {
        let (lo, hi) = match cfg.bounds {
            Bounds::Explicit { lo, hi } => (lo, hi),
            _ => (1, 1 << 15),
        };
        let probe = |h: usize| -> Result<Probe> {
            let mut min_acc = f64::INFINITY;
            for &s in seeds {
                let model = ntk_construct(
                    &keys,
                    &values,
                    &facts,
                    h,
                    cfg.hermite_k,
                    cfg.margin_optimal,
                    s,
                )?;
                let report = verify_storage(&model, &keys, &values, &facts)?;
                min_acc = min_acc.min(report.accuracy);
            }
            Ok(Probe {
                pass: min_acc >= threshold,
                accuracy: min_acc,
            })
        };
        let found = min_size_search(lo, hi, probe)?;
        return Ok(PointOutput {
            rho_hat: f64::NAN,
            size: found.size,
            param_count: 3 * found.size * d,
            accuracy: found.accuracy,
            cert: found.last_fail,
        });
    }

    // Decoder-width search modes share one pipeline.
    let solver = SolverCfg::default();
    let opt = optimal_outputs(&values, &solver)?;
    let rho_hat = opt.achieved_rho;
    let u_star = opt.u;

    let (lo, hi) = match cfg.bounds {
        Bounds::Explicit { lo, hi } => (lo, hi),
        Bounds::Default => (1, d),
        Bounds::Theorem => (1, required_m(rho_hat.min(1.0), f_count, cfg.delta)?),
    };
    let probe = |m: usize| -> Result<Probe> {
        let mut min_acc = f64::INFINITY;
        for &s in seeds {
            let acc = decoder_stage_accuracy(&values, &u_star, m, cfg.dist, s)?;
            min_acc = min_acc.min(acc);
        }
        Ok(Probe {
            pass: min_acc >= threshold,
            accuracy: min_acc,
        })
    };
    let found = min_size_search(lo, hi, probe)?;

    let ccfg = ConstructCfg {
        bias: cfg.bias,
        dist: cfg.dist,
        delta: cfg.delta,
        solver,
    };
    let mut min_acc = f64::INFINITY;
    let mut params = 0usize;
    for &s in seeds {
        let model = construct_with_outputs(
            &keys,
            &values,
            &facts,
            found.size,
            cfg.activation,
            s,
            &ccfg,
            &u_star,
            rho_hat,
        )?;
        let report = verify_storage(&model, &keys, &values, &facts)?;
        min_acc = min_acc.min(report.accuracy);
        params = model.param_count();
    }
    if params < keys.n() {
        return Err(FactError::Numeric(format!(
            "parameter count {params} fell below the degrees-of-freedom floor {}",
            keys.n()
        )));
    }
    Ok(PointOutput {
        rho_hat,
        size: found.size,
        param_count: params,
        accuracy: min_acc,
        cert: found.last_fail,
    })
}

/// Run every grid point (d x kappa), searching the mode's size parameter
/// with min-over-seed aggregation, writing one CSV row per point as soon as
/// it finishes. Per-point failures land in the status column and the sweep
/// continues.
pub fn run_sweep(cfg: &SweepConfig, out: Option<&Path>) -> Result<Vec<SweepRecord>> {
    if cfg.d_list.is_empty() || cfg.kappa_list.is_empty() {
        return Err(FactError::invalid("d and kappa lists must be non-empty"));
    }
    if cfg.seeds == 0 {
        return Err(FactError::invalid("need at least one seed per point"));
    }
    if !(0.0..1.0).contains(&cfg.eps_acc) {
        return Err(FactError::invalid("eps_acc must lie in [0, 1)"));
    }
    let mut writer = match out {
        Some(path) => {
            let mut file = File::create(path)?;
            writeln!(file, "{CSV_HEADER}")?;
            file.flush()?;
            Some(file)
        }
        None => None,
    };

    let mut records = Vec::new();
    let mut point_index = 0u64;
    for (di, &d) in cfg.d_list.iter().enumerate() {
        let f_count = fact_count(cfg, di, d)?;
        for &kappa in &cfg.kappa_list {
            let point_base = derive_seed(cfg.base_seed, point_index);
            let seeds: Vec<u64> = (0..cfg.seeds)
                .map(|t| derive_seed(point_base, 100 + t as u64))
                .collect();
            let started = Instant::now();
            let outcome = run_point(cfg, d, f_count, kappa, point_base, &seeds);
            let wall_ms = started.elapsed().as_millis() as u64;
            let record = match outcome {
                Ok(p) => SweepRecord {
                    point_id: format!("d{d}_F{f_count}_k{kappa}"),
                    d,
                    f: f_count,
                    kappa,
                    rho_hat: p.rho_hat,
                    size_param: p.size,
                    param_count: p.param_count,
                    accuracy: p.accuracy,
                    status: "ok".into(),
                    seed_list: seeds,
                    wall_ms,
                    cert_fail_size: p.cert.map(|c| c.0),
                    cert_fail_accuracy: p.cert.map(|c| c.1),
                },
                Err(e) => SweepRecord {
                    point_id: format!("d{d}_F{f_count}_k{kappa}"),
                    d,
                    f: f_count,
                    kappa,
                    rho_hat: f64::NAN,
                    size_param: 0,
                    param_count: 0,
                    accuracy: f64::NAN,
                    status: format!("error: {e}"),
                    seed_list: seeds,
                    wall_ms,
                    cert_fail_size: None,
                    cert_fail_accuracy: None,
                },
            };
            if let Some(file) = writer.as_mut() {
                writeln!(file, "{}", csv_row(&record, true))?;
                file.flush()?;
            }
            records.push(record);
            point_index += 1;
        }
    }
    Ok(records)
}

/// Least-squares slope of log10(y) against log10(x); pairs with
/// non-positive coordinates are skipped.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.log10(), y.log10()))
        .collect();
    if logs.len() < 2 {
        return Err(FactError::invalid(
            "need at least two positive points for a log-log slope",
        ));
    }
    let n = logs.len() as f64;
    let sx: f64 = logs.iter().map(|p| p.0).sum();
    let sy: f64 = logs.iter().map(|p| p.1).sum();
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return Err(FactError::degenerate("all x values coincide"));
    }
    Ok((n * sxy - sx * sy) / denom)
}

/// Parse a flat key=value config ('#' starts a comment). Unknown keys are
/// rejected so typos fail loudly.
pub fn parse_sweep_config(text: &str) -> Result<SweepConfig> {
    let mut cfg = SweepConfig::default();
    let mut beta_set = false;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| FactError::invalid(format!("line {}: expected key=value", ln + 1)))?;
        let key = key.trim();
        let value = value.trim();
        let bad =
            |what: &str| FactError::invalid(format!("line {}: bad {what} '{value}'", ln + 1));
        match key {
            "mode" => cfg.mode = SweepMode::from_tag(value)?,
            "d" => {
                cfg.d_list = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("d list"))?;
            }
            "f" => {
                cfg.f_list = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("F list"))?;
                if !beta_set {
                    cfg.beta = None;
                }
            }
            "beta" => {
                cfg.beta = Some(value.parse().map_err(|_| bad("beta"))?);
                beta_set = true;
            }
            "kappa" => {
                cfg.kappa_list = value
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("kappa list"))?;
            }
            "seeds" => cfg.seeds = value.parse().map_err(|_| bad("seed count"))?,
            "base_seed" => cfg.base_seed = value.parse().map_err(|_| bad("base seed"))?,
            "eps_acc" => cfg.eps_acc = value.parse().map_err(|_| bad("eps_acc"))?,
            "bounds" => {
                cfg.bounds = match value {
                    "default" => Bounds::Default,
                    "theorem" => Bounds::Theorem,
                    other => {
                        let (lo, hi) = other
                            .split_once("..")
                            .ok_or_else(|| bad("bounds (default|theorem|lo..hi)"))?;
                        Bounds::Explicit {
                            lo: lo.trim().parse().map_err(|_| bad("bounds lo"))?,
                            hi: hi.trim().parse().map_err(|_| bad("bounds hi"))?,
                        }
                    }
                };
            }
            "tied" => cfg.tied = value.parse().map_err(|_| bad("tied flag"))?,
            "bias" => cfg.bias = value.parse().map_err(|_| bad("bias flag"))?,
            "dist" => cfg.dist = Dist::from_tag(value)?,
            "activation" => cfg.activation = Activation::from_tag(value)?,
            "hermite_k" => cfg.hermite_k = value.parse().map_err(|_| bad("hermite_k"))?,
            "margin_optimal" => {
                cfg.margin_optimal = value.parse().map_err(|_| bad("margin_optimal flag"))?
            }
            "delta" => cfg.delta = value.parse().map_err(|_| bad("delta"))?,
            other => {
                return Err(FactError::invalid(format!(
                    "line {}: unknown config key '{other}'",
                    ln + 1
                )))
            }
        }
    }
    Ok(cfg)
}
