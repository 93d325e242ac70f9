//! Property tests for the contracts that hold on whole input families:
//! sizing formulas, search certificates, serialization roundtrips, and
//! solver invariances.

use nalgebra::DMatrix;
use proptest::prelude::*;

use factmlp_core::decodability::{rho, rho_min_given, SolverCfg};
use factmlp_core::decoder::{build_decoder, required_m, Dist};
use factmlp_core::embeddings::{gen_embeddings, gen_fact_set, EmbedKind, EmbeddingSet, FactSet};
use factmlp_core::encoder::{gadget_width, two_hot_gated};
use factmlp_core::error::FactError;
use factmlp_core::factmlp::{hermite_normalized, naive_construct, quantize};
use factmlp_core::harness::{csv_row, loglog_slope, min_size_search, Probe, SweepRecord, CSV_HEADER};
use factmlp_core::io::{read_embeddings, write_embeddings};

/// Smallest pairwise row distance, used to discard degenerate samples.
fn min_row_gap(m: &DMatrix<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..m.nrows() {
        for j in i + 1..m.nrows() {
            best = best.min((m.row(i) - m.row(j)).norm());
        }
    }
    best
}

proptest! {
    #[test]
    fn prop_gadget_width_is_minimal(n in 1usize..240, d in 1usize..24, bias: bool) {
        let h = gadget_width(n, d, bias);
        prop_assert!(h >= 1);
        let capacity = |h: usize| if bias { (d + 1) * h + 1 } else { d * h };
        prop_assert!(capacity(h) >= n, "width {h} cannot interpolate {n} keys");
        if h > 1 {
            prop_assert!(capacity(h - 1) < n, "width {h} is not minimal for {n} keys");
        }
    }

    #[test]
    fn prop_required_m_is_monotone(
        r1 in 0.01f64..1.0,
        r2 in 0.01f64..1.0,
        n1 in 2usize..400,
        extra in 0usize..400,
        d1 in 0.01f64..0.99,
        d2 in 0.01f64..0.99,
    ) {
        let (r_lo, r_hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        prop_assert!(required_m(r_lo, n1, d1)? >= required_m(r_hi, n1, d1)?);
        prop_assert!(required_m(r1, n1, d1)? <= required_m(r1, n1 + extra, d1)?);
        let (d_lo, d_hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(required_m(r1, n1, d_lo)? >= required_m(r1, n1, d_hi)?);
    }

    #[test]
    fn prop_hermite_three_term_recurrence(k in 1usize..10, x in -5.0f64..5.0) {
        let lhs = hermite_normalized(k + 1, x);
        let kf = k as f64;
        let rhs = x * hermite_normalized(k, x) / (kf + 1.0).sqrt()
            - (kf / (kf + 1.0)).sqrt() * hermite_normalized(k - 1, x);
        prop_assert!(
            (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0),
            "recurrence broken at k={k}, x={x}: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn prop_search_matches_linear_scan(lo in 1usize..20, span in 0usize..80, offset in 0usize..82) {
        let hi = lo + span;
        // Threshold may sit anywhere in [lo, hi + 1]; hi + 1 means infeasible.
        let t = lo + offset.min(span + 1);
        let result = min_size_search(lo, hi, |size| {
            Ok(Probe { pass: size >= t, accuracy: if size >= t { 1.0 } else { 0.0 } })
        });
        if t <= hi {
            let outcome = result.unwrap();
            prop_assert_eq!(outcome.size, t);
            match outcome.last_fail {
                None => prop_assert_eq!(t, lo),
                Some((s, _)) => prop_assert_eq!(s, t - 1),
            }
        } else {
            let infeasible_at_hi =
                matches!(result, Err(FactError::SearchInfeasible { hi: h, .. }) if h == hi);
            prop_assert!(infeasible_at_hi);
        }
    }

    #[test]
    fn prop_search_certificate_holds_without_monotonicity(bits in prop::collection::vec(any::<bool>(), 1..60)) {
        let hi = bits.len();
        let result = min_size_search(1, hi, |size| {
            Ok(Probe { pass: bits[size - 1], accuracy: 0.0 })
        });
        match result {
            Ok(outcome) => {
                prop_assert!(bits[outcome.size - 1], "returned size must have probed true");
                match outcome.last_fail {
                    None => prop_assert_eq!(outcome.size, 1),
                    Some((s, _)) => {
                        prop_assert!(s < outcome.size);
                        prop_assert!(!bits[s - 1], "recorded failure must have probed false");
                    }
                }
            }
            Err(FactError::SearchInfeasible { hi: h, .. }) => {
                prop_assert_eq!(h, hi);
                prop_assert!(!bits[hi - 1]);
            }
            Err(other) => prop_assert!(false, "unexpected error {other:?}"),
        }
    }

    #[test]
    fn prop_csv_row_roundtrips_through_standard_parsing(
        point_id in "[a-zA-Z0-9 ;:',\"]{0,24}",
        status in "[a-zA-Z0-9 ;:',\"]{0,24}",
        d in 1usize..64,
        f in 1usize..512,
        kappa in 0.0f64..1e3,
        rho_hat in 0.0f64..1.0,
        size_param in 0usize..4096,
        param_count in 0usize..1_000_000,
        accuracy in 0.0f64..1.0,
        seeds in prop::collection::vec(any::<u64>(), 0..4),
        wall_ms in any::<u64>(),
    ) {
        let record = SweepRecord {
            point_id: point_id.clone(),
            d, f, kappa, rho_hat, size_param, param_count, accuracy,
            status: status.clone(),
            seed_list: seeds.clone(),
            wall_ms,
            cert_fail_size: None,
            cert_fail_accuracy: None,
        };
        let text = format!("{CSV_HEADER}\n{}\n", csv_row(&record, true));
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let row = reader.records().next().unwrap().map_err(|e| {
            TestCaseError::fail(format!("row failed to parse: {e}"))
        })?;
        prop_assert_eq!(row.len(), 11);
        prop_assert_eq!(row.get(0).unwrap(), point_id.as_str());
        prop_assert_eq!(row.get(8).unwrap(), status.as_str());
        let joined = seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
        prop_assert_eq!(row.get(9).unwrap(), joined.as_str());
        prop_assert_eq!(row.get(10).unwrap().parse::<u64>().unwrap(), wall_ms);
        // Shortest-roundtrip float printing parses back to the same bits.
        prop_assert_eq!(row.get(3).unwrap().parse::<f64>().unwrap(), kappa);
        prop_assert_eq!(row.get(4).unwrap().parse::<f64>().unwrap(), rho_hat);
        prop_assert_eq!(row.get(7).unwrap().parse::<f64>().unwrap(), accuracy);
    }

    #[test]
    fn prop_loglog_slope_recovers_the_exponent(
        p in 0.25f64..3.0,
        c in 0.1f64..10.0,
        xs in prop::collection::btree_set(1u32..50, 2..6),
    ) {
        let pts: Vec<(f64, f64)> = xs.iter().map(|&x| {
            let x = x as f64;
            (x, c * x.powf(p))
        }).collect();
        let slope = loglog_slope(&pts).unwrap();
        prop_assert!((slope - p).abs() < 1e-6, "slope {slope} for exponent {p}");
    }

    #[test]
    fn prop_fact_set_accepts_exactly_in_range_maps(
        map in prop::collection::vec(0usize..12, 0..8),
        n_values in 1usize..12,
    ) {
        let valid = !map.is_empty() && map.iter().all(|&v| v < n_values);
        match FactSet::new(map.clone(), n_values) {
            Ok(fs) => {
                prop_assert!(valid);
                prop_assert_eq!(fs.n_keys(), map.len());
                for (i, &v) in map.iter().enumerate() {
                    prop_assert_eq!(fs.get(i), v);
                }
            }
            Err(_) => prop_assert!(!valid),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_embedding_file_roundtrip_is_bit_exact(
        n in 1usize..6,
        d in 1usize..5,
        flat in prop::collection::vec(-1e6f64..1e6, 30),
        generator in "[a-z_]{1,12}",
        seed in prop::option::of(any::<u64>()),
    ) {
        let data = DMatrix::from_fn(n, d, |i, j| flat[i * d + j]);
        let mut set = EmbeddingSet::from_matrix(data, &generator).unwrap();
        set.meta.seed = seed;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.emb");
        write_embeddings(&set, &path).unwrap();
        let back = read_embeddings(&path).unwrap();
        prop_assert_eq!(back.data(), set.data());
        prop_assert_eq!(&back.meta, &set.meta);
    }

    #[test]
    fn prop_generated_sets_are_deterministic(
        n in 1usize..12,
        d in 1usize..10,
        seed in any::<u64>(),
        kind_pick in 0usize..2,
    ) {
        let kind = if kind_pick == 0 { EmbedKind::Sphere } else { EmbedKind::Gaussian };
        let a = gen_embeddings(kind, n, d, seed).unwrap();
        let b = gen_embeddings(kind, n, d, seed).unwrap();
        prop_assert_eq!(a.data(), b.data());
        if kind == EmbedKind::Sphere {
            for norm in a.row_norms() {
                prop_assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prop_decoder_projections_nest_across_widths(
        n in 2usize..5,
        d in 2usize..6,
        m1 in 1usize..24,
        extra in 1usize..24,
        seed in any::<u64>(),
        rademacher: bool,
    ) {
        let dist = if rademacher { Dist::Rademacher } else { Dist::Gaussian };
        let u = gen_embeddings(EmbedKind::Sphere, n, d, seed).unwrap();
        let m2 = m1 + extra;
        let small = build_decoder(&u, m1, dist, seed).unwrap();
        let large = build_decoder(&u, m2, dist, seed).unwrap();
        prop_assert_eq!(&small.d_mat, &large.d_mat.columns(0, m1).into_owned());
        prop_assert_eq!(&small.codes, &large.codes.columns(0, m1).into_owned());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_rho_is_scale_invariant(
        n in 2usize..5,
        d in 2usize..4,
        flat in prop::collection::vec(-3.0..3.0f64, 20),
        scale in 0.1f64..10.0,
    ) {
        let data = DMatrix::from_fn(n, d, |i, j| flat[i * d + j]);
        prop_assume!(min_row_gap(&data) > 1e-2);
        let cfg = SolverCfg::default();
        let v = EmbeddingSet::from_matrix(data.clone(), "prop").unwrap();
        let scaled = EmbeddingSet::from_matrix(&data * scale, "prop").unwrap();
        let base = rho(&v, &cfg).unwrap();
        let after = rho(&scaled, &cfg).unwrap();
        prop_assert!((base - after).abs() < 5e-6, "rho {base} became {after} under scale {scale}");
    }

    #[test]
    fn prop_feasible_outputs_never_beat_the_solver(
        n in 2usize..5,
        d in 2usize..4,
        v_seed in any::<u64>(),
        flat in prop::collection::vec(-3.0..3.0f64, 20),
    ) {
        let v = gen_embeddings(EmbedKind::Sphere, n, d, v_seed).unwrap();
        prop_assume!(min_row_gap(v.data()) > 1e-2);
        let mut u_data = DMatrix::from_fn(n, d, |i, j| flat[i * d + j]);
        for i in 0..n {
            let norm = u_data.row(i).norm();
            prop_assume!(norm > 1e-2);
            for j in 0..d {
                u_data[(i, j)] /= norm;
            }
        }
        let u = EmbeddingSet::from_matrix(u_data, "prop").unwrap();
        let report = rho_min_given(&v, &u).unwrap();
        let best = rho(&v, &SolverCfg::default()).unwrap();
        prop_assert!(
            report.rho_min <= best + 1e-6,
            "feasible point {} beat the solver {}",
            report.rho_min,
            best
        );
    }

    #[test]
    fn prop_two_hot_tables_fit_exactly(
        d in 2usize..5,
        flat in prop::collection::vec(-2.0..2.0f64, 20),
    ) {
        let mut table = std::collections::HashMap::new();
        let mut idx = 0usize;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    table.insert((i, j), flat[idx % flat.len()]);
                    idx += 1;
                }
            }
        }
        let enc = two_hot_gated(&table, d).unwrap();
        for (&(i, j), &want) in &table {
            let mut key = nalgebra::DVector::zeros(d);
            key[i] = 1.0;
            key[j] = -1.0;
            let got = enc.forward(&key)[0];
            prop_assert!((got - want).abs() <= 1e-9, "h({i},{j}) = {got}, wanted {want}");
        }
    }

    #[test]
    fn prop_quantize_is_idempotent(
        n in 2usize..6,
        d in 2usize..6,
        seed in any::<u64>(),
        exp in -6i32..0,
    ) {
        let keys = gen_embeddings(EmbedKind::Sphere, n, d, seed).unwrap();
        let values = gen_embeddings(EmbedKind::Sphere, n, d, seed ^ 0x9e37).unwrap();
        let facts = gen_fact_set(n, n, seed ^ 0x51, true).unwrap();
        let model = naive_construct(&keys, &values, &facts).unwrap();
        let step = 10f64.powi(exp);
        let once = quantize(&model, step).unwrap();
        let twice = quantize(&once, step).unwrap();
        // Re-quantizing moves nothing: the audit reports a zero max shift
        // and the forward map is bitwise unchanged.
        let delta: f64 = twice.audit["quantize_max_delta"].parse().unwrap();
        prop_assert!(delta <= 1e-15, "second quantize moved weights by {delta}");
        let probe = keys.data().clone();
        prop_assert_eq!(once.forward_rows(&probe), twice.forward_rows(&probe));
    }
}
