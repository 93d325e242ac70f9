//! factmlp: construct, verify, and benchmark closed-form fact-storing MLPs.
//!
//! Every subcommand works on files (embedding sets, fact maps, model blobs,
//! CSV sweeps) and prints a single machine-readable result line, or a JSON
//! object with `--json`. Exit codes: 0 success, 1 domain errors, 2 usage
//! errors.

use std::path::PathBuf;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use factmlp_core::{
    build_decoder, chebyshev_star_bounds, coherence, construct_full, decode_margins,
    determinism_hash, emit_plot, gen_embeddings, gen_fact_set, gen_p_hot_padded,
    gen_two_hot_keys, hermite_normalized, lipschitz_estimate, load_model, loglog_slope,
    min_size_search, naive_construct, ntk_construct, optimal_outputs, parse_sweep_config,
    quantize, read_embeddings, read_fact_set, required_m, rescale_condition, rho, rho_min_given,
    run_sweep, save_model, two_hot_gated, verify_storage, whiten, write_embeddings,
    write_fact_set, Activation, Bounds, ConstructCfg, DecoderArm, Dist, EmbedKind, EmbeddingSet,
    FactError, PlotSpec, Probe, Result, SolverCfg, SweepConfig, SweepMode, SweepRecord,
};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "factmlp", version, about = "Closed-form fact-storing MLP toolkit")]
struct Cli {
    /// Emit a machine-readable JSON report on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// Cap worker threads (FACTMLP_THREADS is the fallback; 1 is fully serial).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Increase verbosity; -v prints the fully resolved configuration.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate embedding sets or fact maps.
    Gen(GenArgs),
    /// Solve for the decodability rho-hat of a value set and report coherence.
    Rho(RhoArgs),
    /// Report the absolute coherence mu and its induced rho lower bound.
    Coherence(CoherenceArgs),
    /// Two-sided spherical Chebyshev bounds for one anchor's margin.
    Chebyshev(ChebyshevArgs),
    /// Whiten an embedding set toward identity covariance.
    Whiten(WhitenArgs),
    /// Build a fact-storing MLP in closed form and save it.
    Construct(ConstructArgs),
    /// Build the NTK Hermite-feature baseline and save it.
    Ntk(NtkArgs),
    /// Build the naive wide ReLU lookup baseline and save it.
    Naive(NaiveArgs),
    /// Check a saved model against a fact set; exit 0 iff accuracy meets the threshold.
    Verify(VerifyArgs),
    /// Estimate the model's score-space Lipschitz constant on random probes.
    Lipschitz(LipschitzArgs),
    /// Round model weights to a grid and save the result.
    Quantize(QuantizeArgs),
    /// Run a capacity sweep over a parameter grid and write CSV.
    Sweep(SweepArgs),
    /// Render an SVG scatter/line plot from a sweep CSV.
    Plot(PlotArgs),
    /// Run the built-in small-instance oracle suite.
    Selftest,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum GenKind {
    /// Uniform rows on the unit sphere.
    Sphere,
    /// Entrywise standard normal rows.
    Gaussian,
    /// All d(d-1) two-hot difference keys e_i - e_j.
    TwoHot,
    /// p-hot blocks padded with a shared constant coordinate.
    PHot,
    /// A key-to-value index map.
    Facts,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ActChoice {
    Silu,
    Tanh,
    Gelu,
    Relu,
}

impl From<ActChoice> for Activation {
    fn from(a: ActChoice) -> Self {
        match a {
            ActChoice::Silu => Activation::Silu,
            ActChoice::Tanh => Activation::Tanh,
            ActChoice::Gelu => Activation::Gelu,
            ActChoice::Relu => Activation::Relu,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum DistChoice {
    Gaussian,
    Rademacher,
    Learned,
}

impl From<DistChoice> for Dist {
    fn from(d: DistChoice) -> Self {
        match d {
            DistChoice::Gaussian => Dist::Gaussian,
            DistChoice::Rademacher => Dist::Rademacher,
            DistChoice::Learned => Dist::Learned,
        }
    }
}

#[derive(clap::Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: GenKind,
    /// Row count (keys for `facts`, blocks for `p-hot`).
    #[arg(long)]
    n: Option<usize>,
    /// Embedding dimension (base dimension d0 for `p-hot`).
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hot coordinates per row for `p-hot`.
    #[arg(long, default_value_t = 2)]
    p: usize,
    /// Padding weight t for `p-hot`.
    #[arg(long, default_value_t = 200)]
    pad: usize,
    /// Value count for `facts` (defaults to --n).
    #[arg(long)]
    n_values: Option<usize>,
    /// Force the fact map to be a bijection.
    #[arg(long)]
    bijective: bool,
    /// Rescale the spectrum to this condition number after generating.
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct RhoArgs {
    #[arg(long)]
    values: PathBuf,
    /// Margin tolerance for the minimax solver.
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration cap per anchor for the minimax solver.
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(clap::Args, Debug)]
struct CoherenceArgs {
    #[arg(long)]
    values: PathBuf,
}

#[derive(clap::Args, Debug)]
struct ChebyshevArgs {
    #[arg(long)]
    values: PathBuf,
    #[arg(long, default_value_t = 0)]
    anchor: usize,
    /// Normalize rows to unit length before bounding.
    #[arg(long)]
    unit_norm: bool,
}

#[derive(clap::Args, Debug)]
struct WhitenArgs {
    #[arg(long)]
    values: PathBuf,
    /// Whitening strength in [0, 1]; 1 is full ZCA.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    /// Subtract the row mean before whitening.
    #[arg(long)]
    center: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct ConstructArgs {
    #[arg(long)]
    keys: PathBuf,
    #[arg(long)]
    values: PathBuf,
    #[arg(long)]
    facts: PathBuf,
    /// Decoder code dimension.
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ActChoice::Silu)]
    activation: ActChoice,
    /// Drop the value-arm and output biases from the gadgets.
    #[arg(long)]
    no_bias: bool,
    #[arg(long, value_enum, default_value_t = DistChoice::Gaussian)]
    dist: DistChoice,
    /// Failure probability recorded for sizing bookkeeping.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct NtkArgs {
    #[arg(long)]
    keys: PathBuf,
    #[arg(long)]
    values: PathBuf,
    #[arg(long)]
    facts: PathBuf,
    /// Hidden width.
    #[arg(long)]
    h: usize,
    #[arg(long, default_value_t = 2)]
    hermite_k: usize,
    /// Read out against margin-optimal outputs instead of raw values.
    #[arg(long)]
    margin_optimal: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct NaiveArgs {
    #[arg(long)]
    keys: PathBuf,
    #[arg(long)]
    values: PathBuf,
    #[arg(long)]
    facts: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    keys: PathBuf,
    #[arg(long)]
    values: PathBuf,
    #[arg(long)]
    facts: PathBuf,
    /// Minimum accuracy for exit code 0.
    #[arg(long, default_value_t = 1.0)]
    threshold: f64,
}

#[derive(clap::Args, Debug)]
struct LipschitzArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    values: PathBuf,
    /// Number of random probe keys.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report the RMS directional derivative instead of the max.
    #[arg(long)]
    rms: bool,
}

#[derive(clap::Args, Debug)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Grid step; weights snap to multiples of it.
    #[arg(long)]
    step: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct SweepArgs {
    /// key=value config file; '#' starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set seeds=3 (repeatable, wins over the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    x: String,
    #[arg(long)]
    y: String,
    #[arg(long)]
    loglog: bool,
    /// Column whose distinct values split the rows into series.
    #[arg(long)]
    series: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if cli.verbose >= 1 {
        eprintln!("config: {cli:?}");
    }
    init_threads(cli.threads);
    match run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}

fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("FACTMLP_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(n) = n {
        // Ignore the error if a pool already exists; the cap is best-effort.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a, cli.json),
        Cmd::Rho(a) => cmd_rho(a, cli.json),
        Cmd::Coherence(a) => cmd_coherence(a, cli.json),
        Cmd::Chebyshev(a) => cmd_chebyshev(a, cli.json),
        Cmd::Whiten(a) => cmd_whiten(a, cli.json),
        Cmd::Construct(a) => cmd_construct(a, cli.json),
        Cmd::Ntk(a) => cmd_ntk(a, cli.json),
        Cmd::Naive(a) => cmd_naive(a, cli.json),
        Cmd::Verify(a) => cmd_verify(a, cli.json),
        Cmd::Lipschitz(a) => cmd_lipschitz(a, cli.json),
        Cmd::Quantize(a) => cmd_quantize(a, cli.json),
        Cmd::Sweep(a) => cmd_sweep(a, cli.json),
        Cmd::Plot(a) => cmd_plot(a, cli.json),
        Cmd::Selftest => cmd_selftest(cli.json),
    }
}

fn output(json_mode: bool, value: serde_json::Value, text: String) {
    if json_mode {
        println!("{value}");
    } else {
        println!("{text}");
    }
}

fn need(opt: Option<usize>, flag: &str, kind: &str) -> Result<usize> {
    opt.ok_or_else(|| FactError::invalid(format!("--{flag} is required for kind {kind}")))
}

fn cmd_gen(a: &GenArgs, json: bool) -> Result<i32> {
    if matches!(a.kind, GenKind::Facts) {
        if a.kappa.is_some() {
            return Err(FactError::invalid("--kappa only applies to embedding kinds"));
        }
        let n = need(a.n, "n", "facts")?;
        let n_values = a.n_values.unwrap_or(n);
        let f = gen_fact_set(n, n_values, a.seed, a.bijective)?;
        write_fact_set(&f, &a.out)?;
        output(
            json,
            json!({
                "kind": "facts",
                "n_keys": f.n_keys(),
                "n_values": f.n_values(),
                "seed": a.seed,
                "bijective": a.bijective,
                "out": a.out.display().to_string(),
            }),
            format!(
                "kind=facts n_keys={} n_values={} seed={} bijective={} out={}",
                f.n_keys(),
                f.n_values(),
                a.seed,
                a.bijective,
                a.out.display()
            ),
        );
        return Ok(0);
    }

    let (set, kind_tag) = match a.kind {
        GenKind::Sphere => (
            gen_embeddings(EmbedKind::Sphere, need(a.n, "n", "sphere")?, need(a.d, "d", "sphere")?, a.seed)?,
            "sphere",
        ),
        GenKind::Gaussian => (
            gen_embeddings(EmbedKind::Gaussian, need(a.n, "n", "gaussian")?, need(a.d, "d", "gaussian")?, a.seed)?,
            "gaussian",
        ),
        GenKind::TwoHot => (gen_two_hot_keys(need(a.d, "d", "two-hot")?)?, "two_hot"),
        GenKind::PHot => (
            gen_p_hot_padded(need(a.n, "n", "p-hot")?, need(a.d, "d", "p-hot")?, a.p, a.pad)?,
            "p_hot",
        ),
        GenKind::Facts => unreachable!("handled above"),
    };
    let set = match a.kappa {
        Some(kappa) => rescale_condition(&set, kappa)?,
        None => set,
    };
    write_embeddings(&set, &a.out)?;
    output(
        json,
        json!({
            "kind": kind_tag,
            "n": set.n(),
            "d": set.d(),
            "seed": a.seed,
            "kappa": a.kappa,
            "out": a.out.display().to_string(),
        }),
        format!(
            "kind={} n={} d={} seed={}{} out={}",
            kind_tag,
            set.n(),
            set.d(),
            a.seed,
            a.kappa.map(|k| format!(" kappa={k}")).unwrap_or_default(),
            a.out.display()
        ),
    );
    Ok(0)
}

fn cmd_rho(a: &RhoArgs, json: bool) -> Result<i32> {
    let v = read_embeddings(&a.values)?;
    let mut cfg = SolverCfg::default();
    if let Some(tol) = a.tol {
        cfg.tol = tol;
    }
    if let Some(iters) = a.max_iters {
        cfg.max_iters = iters;
    }
    let opt = optimal_outputs(&v, &cfg)?;
    let report = rho_min_given(&v, &opt.u)?;
    let mu = coherence(&v)?;
    output(
        json,
        json!({
            "rho_hat": report.rho_min,
            "mu": mu,
            "solver_iterations": opt.solver_iterations,
            "worst_pair": [report.worst_pair.0, report.worst_pair.1],
            "n": v.n(),
            "d": v.d(),
        }),
        format!(
            "rho_hat={} mu={} iterations={} worst_pair={},{}",
            report.rho_min, mu, opt.solver_iterations, report.worst_pair.0, report.worst_pair.1
        ),
    );
    Ok(0)
}

fn cmd_coherence(a: &CoherenceArgs, json: bool) -> Result<i32> {
    let v = read_embeddings(&a.values)?;
    let mu = coherence(&v)?;
    let bound = ((1.0 - mu) / 2.0).max(0.0).sqrt();
    output(
        json,
        json!({ "mu": mu, "rho_lower_bound": bound, "n": v.n(), "d": v.d() }),
        format!("mu={mu} rho_lower_bound={bound}"),
    );
    Ok(0)
}

fn cmd_chebyshev(a: &ChebyshevArgs, json: bool) -> Result<i32> {
    let v = read_embeddings(&a.values)?;
    let b = chebyshev_star_bounds(&v, a.anchor, a.unit_norm)?;
    output(
        json,
        json!({
            "anchor": b.anchor,
            "m_edge": b.m_edge,
            "s_a": b.s_a,
            "lower": b.lower,
            "upper": b.upper,
        }),
        format!(
            "anchor={} m_edge={} lower={} upper={} s_a={}",
            b.anchor,
            b.m_edge,
            b.lower,
            b.upper,
            b.s_a.map(|s| s.to_string()).unwrap_or_else(|| "none".into())
        ),
    );
    Ok(0)
}

fn spectral_cond(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let mut max = 0.0f64;
    let mut min = f64::INFINITY;
    for s in sv.iter() {
        max = max.max(*s);
        min = min.min(*s);
    }
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

fn cmd_whiten(a: &WhitenArgs, json: bool) -> Result<i32> {
    let v = read_embeddings(&a.values)?;
    let cond_before = spectral_cond(v.data());
    let (w, _map) = whiten(&v, a.alpha, a.ridge, a.center)?;
    let cond_after = spectral_cond(w.data());
    write_embeddings(&w, &a.out)?;
    output(
        json,
        json!({
            "n": w.n(),
            "d": w.d(),
            "alpha": a.alpha,
            "ridge": a.ridge,
            "center": a.center,
            "cond_before": if cond_before.is_finite() { Some(cond_before) } else { None },
            "cond_after": if cond_after.is_finite() { Some(cond_after) } else { None },
            "out": a.out.display().to_string(),
        }),
        format!(
            "n={} d={} alpha={} cond_before={} cond_after={} out={}",
            w.n(),
            w.d(),
            a.alpha,
            cond_before,
            cond_after,
            a.out.display()
        ),
    );
    Ok(0)
}

fn cmd_construct(a: &ConstructArgs, json: bool) -> Result<i32> {
    let k = read_embeddings(&a.keys)?;
    let v = read_embeddings(&a.values)?;
    let f = read_fact_set(&a.facts)?;
    let cfg = ConstructCfg {
        bias: !a.no_bias,
        dist: a.dist.into(),
        delta: a.delta,
        solver: SolverCfg::default(),
    };
    let model = construct_full(&k, &v, &f, a.m, a.activation.into(), a.seed, &cfg)?;
    save_model(&model, &a.out)?;
    let report = verify_storage(&model, &k, &v, &f)?;
    let rho_hat = model.audit.get("rho_hat").cloned().unwrap_or_default();
    output(
        json,
        json!({
            "params": model.param_count(),
            "m": a.m,
            "seed": a.seed,
            "rho_hat": rho_hat.parse::<f64>().ok(),
            "accuracy": report.accuracy,
            "min_margin": report.min_margin,
            "out": a.out.display().to_string(),
        }),
        format!(
            "params={} m={} seed={} rho_hat={} accuracy={} min_margin={} out={}",
            model.param_count(),
            a.m,
            a.seed,
            rho_hat,
            report.accuracy,
            report.min_margin,
            a.out.display()
        ),
    );
    Ok(0)
}

fn cmd_ntk(a: &NtkArgs, json: bool) -> Result<i32> {
    let k = read_embeddings(&a.keys)?;
    let v = read_embeddings(&a.values)?;
    let f = read_fact_set(&a.facts)?;
    let model = ntk_construct(&k, &v, &f, a.h, a.hermite_k, a.margin_optimal, a.seed)?;
    save_model(&model, &a.out)?;
    let report = verify_storage(&model, &k, &v, &f)?;
    output(
        json,
        json!({
            "params": model.param_count(),
            "h": a.h,
            "hermite_k": a.hermite_k,
            "accuracy": report.accuracy,
            "min_margin": report.min_margin,
            "out": a.out.display().to_string(),
        }),
        format!(
            "params={} h={} hermite_k={} accuracy={} min_margin={} out={}",
            model.param_count(),
            a.h,
            a.hermite_k,
            report.accuracy,
            report.min_margin,
            a.out.display()
        ),
    );
    Ok(0)
}

fn cmd_naive(a: &NaiveArgs, json: bool) -> Result<i32> {
    let k = read_embeddings(&a.keys)?;
    let v = read_embeddings(&a.values)?;
    let f = read_fact_set(&a.facts)?;
    let model = naive_construct(&k, &v, &f)?;
    save_model(&model, &a.out)?;
    let report = verify_storage(&model, &k, &v, &f)?;
    output(
        json,
        json!({
            "params": model.param_count(),
            "accuracy": report.accuracy,
            "min_margin": report.min_margin,
            "out": a.out.display().to_string(),
        }),
        format!(
            "params={} accuracy={} min_margin={} out={}",
            model.param_count(),
            report.accuracy,
            report.min_margin,
            a.out.display()
        ),
    );
    Ok(0)
}

fn cmd_verify(a: &VerifyArgs, json: bool) -> Result<i32> {
    let model = load_model(&a.model)?;
    let k = read_embeddings(&a.keys)?;
    let v = read_embeddings(&a.values)?;
    let f = read_fact_set(&a.facts)?;
    let report = verify_storage(&model, &k, &v, &f)?;
    let stored = report.stored_mask.iter().filter(|&&b| b).count();
    let pass = report.accuracy >= a.threshold;
    output(
        json,
        json!({
            "accuracy": report.accuracy,
            "min_margin": report.min_margin,
            "stored": stored,
            "total": report.stored_mask.len(),
            "threshold": a.threshold,
            "pass": pass,
        }),
        format!(
            "accuracy={} min_margin={} stored={} total={} threshold={} pass={}",
            report.accuracy,
            report.min_margin,
            stored,
            report.stored_mask.len(),
            a.threshold,
            pass
        ),
    );
    Ok(if pass { 0 } else { 1 })
}

fn cmd_lipschitz(a: &LipschitzArgs, json: bool) -> Result<i32> {
    let model = load_model(&a.model)?;
    let v = read_embeddings(&a.values)?;
    let probes = gen_embeddings(EmbedKind::Sphere, a.samples, model.in_dim(), a.seed)?;
    let lip = lipschitz_estimate(&model, &v, &probes, a.rms)?;
    output(
        json,
        json!({ "lipschitz": lip, "samples": a.samples, "seed": a.seed, "rms": a.rms }),
        format!("lipschitz={} samples={} seed={} rms={}", lip, a.samples, a.seed, a.rms),
    );
    Ok(0)
}

fn cmd_quantize(a: &QuantizeArgs, json: bool) -> Result<i32> {
    let model = load_model(&a.model)?;
    let q = quantize(&model, a.step)?;
    save_model(&q, &a.out)?;
    let max_delta = q.audit.get("quantize_max_delta").cloned().unwrap_or_default();
    output(
        json,
        json!({
            "step": a.step,
            "max_delta": max_delta.parse::<f64>().ok(),
            "params": q.param_count(),
            "out": a.out.display().to_string(),
        }),
        format!(
            "step={} max_delta={} params={} out={}",
            a.step,
            max_delta,
            q.param_count(),
            a.out.display()
        ),
    );
    Ok(0)
}

fn record_json(r: &SweepRecord) -> serde_json::Value {
    json!({
        "point_id": r.point_id,
        "d": r.d,
        "F": r.f,
        "kappa": r.kappa,
        "rho_hat": if r.rho_hat.is_finite() { Some(r.rho_hat) } else { None },
        "size_param": r.size_param,
        "param_count": r.param_count,
        "accuracy": r.accuracy,
        "status": r.status,
        "seed_list": r.seed_list,
        "wall_ms": r.wall_ms,
        "cert_fail_size": r.cert_fail_size,
        "cert_fail_accuracy": r.cert_fail_accuracy,
    })
}

fn cmd_sweep(a: &SweepArgs, json: bool) -> Result<i32> {
    let mut text = match &a.config {
        Some(path) => std::fs::read_to_string(path)?,
        None => String::new(),
    };
    for line in &a.set {
        text.push('\n');
        text.push_str(line);
    }
    let cfg = parse_sweep_config(&text)?;
    let records = run_sweep(&cfg, a.out.as_deref())?;
    let hash = determinism_hash(&records);
    if json {
        println!(
            "{}",
            json!({
                "records": records.iter().map(record_json).collect::<Vec<_>>(),
                "hash": format!("{hash:016x}"),
                "csv": a.out.as_ref().map(|p| p.display().to_string()),
            })
        );
    } else {
        for r in &records {
            println!(
                "point={} d={} F={} kappa={} rho_hat={} size={} params={} accuracy={} wall_ms={} status={}",
                r.point_id,
                r.d,
                r.f,
                r.kappa,
                r.rho_hat,
                r.size_param,
                r.param_count,
                r.accuracy,
                r.wall_ms,
                r.status
            );
        }
        println!(
            "records={} hash={hash:016x}{}",
            records.len(),
            a.out
                .as_ref()
                .map(|p| format!(" csv={}", p.display()))
                .unwrap_or_default()
        );
    }
    Ok(0)
}

fn cmd_plot(a: &PlotArgs, json: bool) -> Result<i32> {
    let spec = PlotSpec {
        x: a.x.clone(),
        y: a.y.clone(),
        loglog: a.loglog,
        series: a.series.clone(),
    };
    emit_plot(&a.csv, &spec, &a.out)?;
    output(
        json,
        json!({
            "csv": a.csv.display().to_string(),
            "x": a.x,
            "y": a.y,
            "loglog": a.loglog,
            "series": a.series,
            "out": a.out.display().to_string(),
        }),
        format!("x={} y={} loglog={} out={}", a.x, a.y, a.loglog, a.out.display()),
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// selftest: small-instance oracle checks, each self-contained and seeded.
// ---------------------------------------------------------------------------

macro_rules! ensure {
    ($cond:expr, $($t:tt)*) => {
        if !$cond {
            return Err(format!($($t)*));
        }
    };
}

type PropResult = std::result::Result<(), String>;

fn core_err(e: FactError) -> String {
    e.to_string()
}

fn prop_required_m_frozen() -> PropResult {
    let a = required_m(1.0, 2, 0.5).map_err(core_err)?;
    ensure!(a == 89, "required_m(1, 2, 0.5) = {a}, want 89");
    let b = required_m(0.5, 16, 0.1).map_err(core_err)?;
    ensure!(b == 1174, "required_m(0.5, 16, 0.1) = {b}, want 1174");
    Ok(())
}

fn prop_hermite_closed_form() -> PropResult {
    let x = 0.7f64;
    let want = (x * x * x - 3.0 * x) / 6.0f64.sqrt();
    let got = hermite_normalized(3, x);
    ensure!((got - want).abs() <= 1e-12, "H3(0.7) = {got}, want {want}");
    Ok(())
}

fn prop_two_hot_table_exact() -> PropResult {
    let d = 4;
    let mut table = std::collections::HashMap::new();
    for i in 0..d {
        for j in 0..d {
            if i != j {
                table.insert((i, j), ((7 * i + 13 * j + 5) % 101) as f64 / 101.0);
            }
        }
    }
    let enc = two_hot_gated(&table, d).map_err(core_err)?;
    let keys = gen_two_hot_keys(d).map_err(core_err)?;
    let mut r = 0;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let got = enc.forward(&keys.row(r))[0];
            let want = table[&(i, j)];
            ensure!(
                (got - want).abs() <= 1e-12,
                "two-hot entry ({i},{j}): {got} vs {want}"
            );
            r += 1;
        }
    }
    Ok(())
}

fn prop_circle_solver_matches_grid() -> PropResult {
    let v = gen_embeddings(EmbedKind::Gaussian, 3, 2, 0).map_err(core_err)?;
    let opt = optimal_outputs(&v, &SolverCfg::default()).map_err(core_err)?;
    let report = rho_min_given(&v, &opt.u).map_err(core_err)?;
    let steps = 3600;
    let half_step = std::f64::consts::PI / steps as f64;
    for i in 0..3 {
        let mut best = f64::NEG_INFINITY;
        for t in 0..steps {
            let theta = t as f64 * std::f64::consts::TAU / steps as f64;
            let (ux, uy) = (theta.cos(), theta.sin());
            let mut worst = f64::INFINITY;
            for j in 0..3 {
                if j == i {
                    continue;
                }
                let diff = v.row(i) - v.row(j);
                worst = worst.min((ux * diff[0] + uy * diff[1]) / diff.norm());
            }
            best = best.max(worst);
        }
        let got = report.per_index_margins[i];
        ensure!(
            got >= best - 1e-4 && got <= best + half_step + 1e-9,
            "star {i}: solver {got} vs grid {best}"
        );
    }
    Ok(())
}

fn prop_p_hot_counterexample() -> PropResult {
    let v = gen_p_hot_padded(6, 6, 2, 200).map_err(core_err)?;
    let mu = coherence(&v).map_err(core_err)?;
    ensure!(mu >= 1.0 - 1.0 / 201.0 - 1e-9, "mu = {mu} too small");
    let r = rho(&v, &SolverCfg::default()).map_err(core_err)?;
    ensure!(r >= 0.5 - 1e-3, "rho = {r}, want >= 0.499");
    Ok(())
}

fn prop_decoder_projections_nest() -> PropResult {
    let u = gen_embeddings(EmbedKind::Sphere, 8, 4, 21).map_err(core_err)?;
    let small = build_decoder(&u, 8, Dist::Rademacher, 9).map_err(core_err)?;
    let big = build_decoder(&u, 16, Dist::Rademacher, 9).map_err(core_err)?;
    ensure!(
        big.d_mat.columns(0, 8).into_owned() == small.d_mat,
        "projection columns are not nested across widths"
    );
    ensure!(
        big.codes.columns(0, 8).into_owned() == small.codes,
        "codes are not nested across widths"
    );
    let margins = decode_margins(&u, &big).map_err(core_err)?;
    ensure!(
        margins.normalized_min_gap.is_finite(),
        "margins are not finite"
    );
    Ok(())
}

/// A tiny tied instance shared by the model-file properties.
fn tiny_model() -> std::result::Result<(EmbeddingSet, factmlp_core::FactSet, factmlp_core::FactMlp), String> {
    let v = gen_embeddings(EmbedKind::Sphere, 10, 6, 11).map_err(core_err)?;
    let f = gen_fact_set(10, 10, 12, true).map_err(core_err)?;
    let model = construct_full(&v, &v, &f, 24, Activation::Silu, 13, &ConstructCfg::default())
        .map_err(core_err)?;
    Ok((v, f, model))
}

fn prop_model_io_roundtrip() -> PropResult {
    let (v, _f, model) = tiny_model()?;
    let dir = std::env::temp_dir().join(format!("factmlp-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("roundtrip.mlp");
    save_model(&model, &path).map_err(core_err)?;
    let back = load_model(&path).map_err(core_err)?;
    let _ = std::fs::remove_file(&path);
    let _ = std::fs::remove_dir(&dir);
    ensure!(
        back.param_count() == model.param_count(),
        "parameter counts differ after reload"
    );
    ensure!(
        back.forward_rows(v.data()) == model.forward_rows(v.data()),
        "reloaded model's forward pass is not bit-identical"
    );
    Ok(())
}

fn prop_quantize_idempotent() -> PropResult {
    let (_v, _f, model) = tiny_model()?;
    let q1 = quantize(&model, 1e-6).map_err(core_err)?;
    let q2 = quantize(&q1, 1e-6).map_err(core_err)?;
    let delta: f64 = q2
        .audit
        .get("quantize_max_delta")
        .and_then(|s| s.parse().ok())
        .ok_or("missing quantize_max_delta audit entry")?;
    ensure!(delta <= 1e-15, "second quantization moved weights by {delta}");
    Ok(())
}

fn prop_affine_reparam_preserves_mask() -> PropResult {
    let (v, f, model) = tiny_model()?;
    let base = verify_storage(&model, &v, &v, &f).map_err(core_err)?;
    let g = gen_embeddings(EmbedKind::Gaussian, 6, 6, 31).map_err(core_err)?;
    let q = g.data().clone().qr().q();
    let scales = DVector::from_fn(6, |i, _| 10f64.powf(-(i as f64) / 5.0));
    let t = &q * DMatrix::from_diagonal(&scales);
    let t_inv = t.clone().try_inverse().ok_or("T is singular")?;
    let v2 = EmbeddingSet::from_matrix(v.data() * t.transpose(), "affine").map_err(core_err)?;
    let mut reparam = model.clone();
    match &mut reparam.decoder {
        DecoderArm::Pack(pack) => pack.d_mat = t_inv.transpose() * &pack.d_mat,
        _ => return Err("constructed model should carry a decoder pack".into()),
    }
    let after = verify_storage(&reparam, &v, &v2, &f).map_err(core_err)?;
    ensure!(
        after.stored_mask == base.stored_mask,
        "stored mask changed under affine reparameterization"
    );
    Ok(())
}

fn tiny_sweep_cfg() -> SweepConfig {
    SweepConfig {
        mode: SweepMode::MinM,
        d_list: vec![4],
        f_list: vec![8],
        beta: None,
        kappa_list: vec![1.0],
        seeds: 1,
        base_seed: 7,
        eps_acc: 0.0,
        bounds: Bounds::Explicit { lo: 1, hi: 128 },
        tied: true,
        bias: true,
        dist: Dist::Gaussian,
        activation: Activation::Silu,
        hermite_k: 2,
        margin_optimal: false,
        delta: 0.1,
    }
}

fn prop_sweep_point_stores_all_facts() -> PropResult {
    let records = run_sweep(&tiny_sweep_cfg(), None).map_err(core_err)?;
    ensure!(records.len() == 1, "expected one record, got {}", records.len());
    let r = &records[0];
    ensure!(r.status == "ok", "sweep status {}", r.status);
    ensure!(r.accuracy == 1.0, "sweep accuracy {}", r.accuracy);
    Ok(())
}

fn prop_sweep_rerun_hash_matches() -> PropResult {
    let a = run_sweep(&tiny_sweep_cfg(), None).map_err(core_err)?;
    let b = run_sweep(&tiny_sweep_cfg(), None).map_err(core_err)?;
    ensure!(
        determinism_hash(&a) == determinism_hash(&b),
        "rerun hash differs: {:016x} vs {:016x}",
        determinism_hash(&a),
        determinism_hash(&b)
    );
    Ok(())
}

fn prop_search_certificate() -> PropResult {
    let out = min_size_search(1, 64, |s| {
        Ok(Probe {
            pass: s * s >= 500,
            accuracy: if s * s >= 500 { 1.0 } else { (s * s) as f64 / 500.0 },
        })
    })
    .map_err(core_err)?;
    ensure!(out.size == 23, "boundary at {}, want 23", out.size);
    let expect_fail = Some((22usize, 484.0 / 500.0));
    ensure!(
        out.last_fail == expect_fail,
        "certificate {:?}, want {:?}",
        out.last_fail,
        expect_fail
    );
    Ok(())
}

fn prop_loglog_slope_recovers_exponent() -> PropResult {
    let s = loglog_slope(&[(1.0, 2.0), (10.0, 200.0), (100.0, 20000.0)]).map_err(core_err)?;
    ensure!((s - 2.0).abs() <= 1e-12, "slope {s}, want 2");
    Ok(())
}

fn cmd_selftest(json: bool) -> Result<i32> {
    let properties: Vec<(&str, fn() -> PropResult)> = vec![
        ("required_m_frozen_values", prop_required_m_frozen),
        ("hermite_closed_form", prop_hermite_closed_form),
        ("two_hot_table_exact", prop_two_hot_table_exact),
        ("circle_solver_matches_grid", prop_circle_solver_matches_grid),
        ("p_hot_counterexample", prop_p_hot_counterexample),
        ("decoder_projections_nest", prop_decoder_projections_nest),
        ("model_io_roundtrip", prop_model_io_roundtrip),
        ("quantize_idempotent", prop_quantize_idempotent),
        ("affine_reparam_preserves_mask", prop_affine_reparam_preserves_mask),
        ("sweep_point_stores_all_facts", prop_sweep_point_stores_all_facts),
        ("sweep_rerun_hash_matches", prop_sweep_rerun_hash_matches),
        ("search_certificate", prop_search_certificate),
        ("loglog_slope_recovers_exponent", prop_loglog_slope_recovers_exponent),
    ];
    let mut results = Vec::new();
    let mut failed = 0usize;
    for (name, prop) in &properties {
        let verdict = prop();
        if !json {
            match &verdict {
                Ok(()) => println!("ok {name}"),
                Err(msg) => println!("FAIL {name}: {msg}"),
            }
        }
        if verdict.is_err() {
            failed += 1;
        }
        results.push(json!({
            "name": name,
            "pass": verdict.is_ok(),
            "detail": verdict.err(),
        }));
    }
    let passed = properties.len() - failed;
    if json {
        println!(
            "{}",
            json!({ "properties": results, "passed": passed, "failed": failed })
        );
    } else {
        println!("passed={passed} failed={failed}");
    }
    Ok(if failed == 0 { 0 } else { 1 })
}
