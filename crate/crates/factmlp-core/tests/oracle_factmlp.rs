//! End-to-end model composition, baselines, diagnostics, and persistence.

use std::collections::BTreeMap;

use factmlp_core::activation::Activation;
use factmlp_core::decoder::required_m;
use factmlp_core::embeddings::{gen_embeddings, gen_fact_set, EmbedKind};
use factmlp_core::encoder::{stack_encoder, two_hot_gated, EMat};
use factmlp_core::factmlp::{
    construct_full, hermite_normalized, lipschitz_estimate, load_model, naive_construct,
    ntk_construct, quantize, save_model, verify_storage, ConstructCfg, DecoderArm, EncoderArm,
    FactMlp, ModelKind,
};
use factmlp_core::io::fnv1a64;
use factmlp_core::{EmbeddingSet, FactError, FactSet};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn tied_instance(n: usize, d: usize, seed: u64) -> (EmbeddingSet, FactSet) {
    let v = gen_embeddings(EmbedKind::Sphere, n, d, seed).unwrap();
    let f = gen_fact_set(n, n, seed + 1, true).unwrap();
    (v, f)
}

#[test]
fn hermite_values_match_closed_forms() {
    assert_eq!(hermite_normalized(0, 0.3), 1.0);
    assert!((hermite_normalized(1, 0.3) - 0.3).abs() <= 1e-15);
    // H_2(z) = (z^2 - 1)/sqrt(2)
    assert!((hermite_normalized(2, 0.0) + 1.0 / 2.0_f64.sqrt()).abs() <= 1e-15);
    // H_3(z) = (z^3 - 3z)/sqrt(6)
    let z = 1.5;
    let want = (z * z * z - 3.0 * z) / 6.0_f64.sqrt();
    assert!((hermite_normalized(3, z) - want).abs() <= 1e-12);
    // H_4(z) = (z^4 - 6 z^2 + 3)/sqrt(24)
    let want = (z.powi(4) - 6.0 * z * z + 3.0) / 24.0_f64.sqrt();
    assert!((hermite_normalized(4, z) - want).abs() <= 1e-12);
}

#[test]
fn construct_full_stores_desk_scale_instance() {
    // At d = 16, F = 64 a d-wide code is measurably below the empirical
    // storage threshold (m* is around 25 here), so the desk-scale check
    // runs at m = 4d: far under the theorem sizing, comfortably above m*.
    let (v, f) = tied_instance(64, 16, 7);
    let model = construct_full(&v, &v, &f, 64, Activation::Silu, 7, &ConstructCfg::default())
        .unwrap();
    let report = verify_storage(&model, &v, &v, &f).unwrap();
    assert_eq!(report.accuracy, 1.0, "min margin {}", report.min_margin);
    assert!(report.min_margin > 0.0);
    let audited: f64 = model.audit["accuracy"].parse().unwrap();
    assert_eq!(audited, 1.0);
}

#[test]
fn construct_full_single_fact() {
    let v = gen_embeddings(EmbedKind::Sphere, 1, 4, 3).unwrap();
    let f = FactSet::new(vec![0], 1).unwrap();
    let model =
        construct_full(&v, &v, &f, 1, Activation::Silu, 3, &ConstructCfg::default()).unwrap();
    let report = verify_storage(&model, &v, &v, &f).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.min_margin, f64::INFINITY);
}

#[test]
fn construct_full_rejects_duplicate_values() {
    let rows = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    let v = EmbeddingSet::from_matrix(rows, "dups").unwrap();
    let k = gen_embeddings(EmbedKind::Sphere, 3, 2, 4).unwrap();
    let f = FactSet::new(vec![0, 1, 2], 3).unwrap();
    assert!(matches!(
        construct_full(&k, &v, &f, 4, Activation::Silu, 1, &ConstructCfg::default()),
        Err(FactError::InfeasibleValues(_))
    ));
}

#[test]
fn full_construction_event_rate_at_sized_m() {
    let (v, f) = tied_instance(48, 16, 11);
    let out = factmlp_core::decodability::optimal_outputs(&v, &Default::default()).unwrap();
    let m = required_m(out.achieved_rho.min(1.0), 48, 0.1).unwrap();
    let mut good = 0;
    for seed in 0..10 {
        let model = construct_full(
            &v,
            &v,
            &f,
            m,
            Activation::Silu,
            500 + seed,
            &ConstructCfg::default(),
        )
        .unwrap();
        let report = verify_storage(&model, &v, &v, &f).unwrap();
        if report.accuracy == 1.0 {
            good += 1;
        } else {
            // Failures must be visible in the audit, never silent.
            let audited: f64 = model.audit["accuracy"].parse().unwrap();
            assert!(audited < 1.0);
        }
    }
    assert!(good >= 9, "stored perfectly in only {good}/10 seeds");
}

#[test]
fn naive_construction_on_orthonormal_keys() {
    let k = EmbeddingSet::from_matrix(DMatrix::identity(8, 8), "i8").unwrap();
    let v = gen_embeddings(EmbedKind::Sphere, 8, 8, 21).unwrap();
    let f = gen_fact_set(8, 8, 22, true).unwrap();
    let model = naive_construct(&k, &v, &f).unwrap();
    assert_eq!(model.kind, ModelKind::Naive);

    // b_j = midpoint of (beta, alpha) = 1/2 for orthonormal keys.
    let EncoderArm::Plain(enc) = &model.encoder else {
        panic!("naive models use the plain arm")
    };
    for j in 0..8 {
        assert!((enc.b_a[j] + 0.5).abs() <= 1e-12, "bias {}", enc.b_a[j]);
    }
    let out = model.forward_rows(k.data());
    for i in 0..8 {
        for c in 0..8 {
            assert!(
                (out[(i, c)] - v.data()[(f.get(i), c)]).abs() <= 1e-12,
                "key {i} coord {c}"
            );
        }
    }
    let report = verify_storage(&model, &k, &v, &f).unwrap();
    assert_eq!(report.accuracy, 1.0);
}

#[test]
fn naive_construction_rejects_duplicate_keys() {
    let rows = DMatrix::from_row_slice(3, 4, &[
        1.0, 0.0, 0.0, 0.0,
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
    ]);
    let k = EmbeddingSet::from_matrix(rows, "dupkeys").unwrap();
    let v = gen_embeddings(EmbedKind::Sphere, 3, 4, 5).unwrap();
    let f = FactSet::new(vec![0, 1, 2], 3).unwrap();
    match naive_construct(&k, &v, &f) {
        Err(FactError::KeysNotSeparable { index }) => assert!(index < 2),
        other => panic!("expected keys-not-separable, got {other:?}"),
    }
}

#[test]
fn naive_parameter_count_is_2df_plus_f() {
    let k = gen_embeddings(EmbedKind::Sphere, 64, 16, 31).unwrap();
    let v = gen_embeddings(EmbedKind::Sphere, 64, 16, 32).unwrap();
    let f = gen_fact_set(64, 64, 33, true).unwrap();
    let model = naive_construct(&k, &v, &f).unwrap();
    assert_eq!(model.param_count(), 2 * 16 * 64 + 64);
    let report = verify_storage(&model, &k, &v, &f).unwrap();
    assert_eq!(report.accuracy, 1.0);
}

#[test]
fn forward_composes_known_parts() {
    let mut table = std::collections::HashMap::new();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                table.insert((i, j), 0.1 * (i as f64) + 0.7 * (j as f64));
            }
        }
    }
    let enc = two_hot_gated(&table, 3).unwrap();
    let column = DMatrix::from_column_slice(4, 1, &[0.5, -1.0, 2.0, 0.25]);
    let model = FactMlp {
        encoder: EncoderArm::Gated(enc),
        decoder: DecoderArm::Matrix(column.clone()),
        kind: ModelKind::Constructed,
        audit: BTreeMap::new(),
    };
    let x = DVector::from_vec(vec![1.0, 0.0, -1.0]);
    let out = model.forward(&x);
    let h = table[&(0, 2)];
    for c in 0..4 {
        assert!((out[c] - h * column[(c, 0)]).abs() <= 1e-12);
    }
}

#[test]
fn gated_forward_is_linear_in_value_arm() {
    let k = gen_embeddings(EmbedKind::Gaussian, 8, 4, 41).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let codes = DMatrix::from_fn(8, 2, |_, _| rng.gen_range(-1.0..1.0));
    let f = FactSet::new((0..8).collect(), 8).unwrap();
    let enc = stack_encoder(&k, &codes, &f, 4, Activation::Silu, false, 43).unwrap();
    let mut doubled = enc.clone();
    doubled.a *= 2.0;
    doubled.b_a *= 2.0;
    let probe = gen_embeddings(EmbedKind::Gaussian, 5, 4, 44).unwrap();
    let base = enc.forward_rows(probe.data());
    let twice = doubled.forward_rows(probe.data());
    for i in 0..5 {
        for j in 0..2 {
            assert!((twice[(i, j)] - 2.0 * base[(i, j)]).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_model_scores_tie_and_fail() {
    let d = 4;
    let zero = factmlp_core::encoder::GatedEncoder {
        g: DMatrix::zeros(2, d),
        b_g: DVector::zeros(2),
        a: DMatrix::zeros(2, d),
        b_a: DVector::zeros(2),
        e: EMat::Dense(DMatrix::zeros(d, 2)),
        b_e: DVector::zeros(d),
        activation: Activation::Silu,
        audit: BTreeMap::new(),
    };
    let model = FactMlp {
        encoder: EncoderArm::Gated(zero),
        decoder: DecoderArm::Identity,
        kind: ModelKind::Gd,
        audit: BTreeMap::new(),
    };
    let (v, f) = tied_instance(6, d, 51);
    let report = verify_storage(&model, &v, &v, &f).unwrap();
    assert_eq!(report.accuracy, 0.0);
    assert!(report.stored_mask.iter().all(|&b| !b));
    assert!(report.min_margin <= 0.0);
}

#[test]
fn affine_reparameterization_preserves_storage() {
    let (v, f) = tied_instance(24, 8, 61);
    let model = construct_full(
        &v,
        &v,
        &f,
        64,
        Activation::Silu,
        61,
        &ConstructCfg::default(),
    )
    .unwrap();
    let base = verify_storage(&model, &v, &v, &f).unwrap();

    // Random T with condition number <= 100, applied to the values; the
    // decoder is reparameterized by the inverse transpose.
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let t = {
        let a = DMatrix::from_fn(8, 8, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let svd = a.clone().svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut s = DMatrix::zeros(8, 8);
        for i in 0..8 {
            s[(i, i)] = 100.0_f64.powf(i as f64 / 7.0);
        }
        u * s * vt
    };
    let t_inv_t = t.clone().try_inverse().unwrap().transpose();

    let v_prime = EmbeddingSet::from_matrix(v.data() * t.transpose(), "vprime").unwrap();
    let mut reparam = model.clone();
    match &mut reparam.decoder {
        DecoderArm::Pack(pack) => {
            pack.d_mat = &t_inv_t * &pack.d_mat;
        }
        _ => panic!("constructed models carry a pack decoder"),
    }
    let after = verify_storage(&reparam, &v, &v_prime, &f).unwrap();
    assert_eq!(base.stored_mask, after.stored_mask);
}

#[test]
fn ntk_single_unit_is_well_defined() {
    let (v, f) = tied_instance(6, 4, 71);
    let model = ntk_construct(&v, &v, &f, 1, 4, false, 71).unwrap();
    assert_eq!(model.kind, ModelKind::Ntk);
    assert_eq!(model.param_count(), 3 * 1 * 4);
    let report = verify_storage(&model, &v, &v, &f).unwrap();
    assert!((0.0..=1.0).contains(&report.accuracy));
}

#[test]
fn ntk_margin_optimal_flag_builds() {
    let (v, f) = tied_instance(8, 4, 81);
    let plain = ntk_construct(&v, &v, &f, 256, 4, false, 81).unwrap();
    let opt = ntk_construct(&v, &v, &f, 256, 4, true, 81).unwrap();
    let rp = verify_storage(&plain, &v, &v, &f).unwrap();
    let ro = verify_storage(&opt, &v, &v, &f).unwrap();
    assert!((0.0..=1.0).contains(&rp.accuracy));
    assert!((0.0..=1.0).contains(&ro.accuracy));
}

#[test]
fn lipschitz_zero_model_is_zero() {
    let d = 3;
    let zero = factmlp_core::encoder::GatedEncoder {
        g: DMatrix::zeros(2, d),
        b_g: DVector::zeros(2),
        a: DMatrix::zeros(2, d),
        b_a: DVector::zeros(2),
        e: EMat::Dense(DMatrix::zeros(d, 2)),
        b_e: DVector::zeros(d),
        activation: Activation::Silu,
        audit: BTreeMap::new(),
    };
    let model = FactMlp {
        encoder: EncoderArm::Gated(zero),
        decoder: DecoderArm::Identity,
        kind: ModelKind::Gd,
        audit: BTreeMap::new(),
    };
    let v = EmbeddingSet::from_matrix(DMatrix::identity(d, d), "iv").unwrap();
    let samples = gen_embeddings(EmbedKind::Sphere, 10, d, 72).unwrap();
    let lip = lipschitz_estimate(&model, &v, &samples, false).unwrap();
    assert_eq!(lip, 0.0);
}

#[test]
fn lipschitz_of_relu_identity_is_one() {
    let d = 4;
    let mut a = DMatrix::zeros(2 * d, d);
    let mut e = DMatrix::zeros(d, 2 * d);
    for i in 0..d {
        a[(i, i)] = 1.0;
        a[(d + i, i)] = -1.0;
        e[(i, i)] = 1.0;
        e[(i, d + i)] = -1.0;
    }
    let enc = factmlp_core::encoder::PlainEncoder {
        a,
        b_a: DVector::zeros(2 * d),
        e: EMat::Dense(e),
        b_e: DVector::zeros(d),
        activation: Activation::Relu,
        audit: BTreeMap::new(),
    };
    let model = FactMlp {
        encoder: EncoderArm::Plain(enc),
        decoder: DecoderArm::Identity,
        kind: ModelKind::Gd,
        audit: BTreeMap::new(),
    };
    // ReLU(x) - ReLU(-x) = x, so with orthonormal V the Jacobian is I.
    let v = EmbeddingSet::from_matrix(DMatrix::identity(d, d), "iv").unwrap();
    let samples = gen_embeddings(EmbedKind::Gaussian, 20, d, 73).unwrap();
    let lip = lipschitz_estimate(&model, &v, &samples, false).unwrap();
    assert!((lip - 1.0).abs() <= 1e-9, "sigma1 {lip}");
}

#[test]
fn lipschitz_matches_finite_difference_jacobian() {
    let d = 4;
    let (v, f) = tied_instance(8, d, 91);
    let model = construct_full(
        &v,
        &v,
        &f,
        8,
        Activation::Silu,
        91,
        &ConstructCfg::default(),
    )
    .unwrap();
    let samples = gen_embeddings(EmbedKind::Sphere, 5, d, 92).unwrap();

    for rms in [false, true] {
        let analytic = lipschitz_estimate(&model, &v, &samples, rms).unwrap();

        let map = |x: &DVector<f64>| -> DVector<f64> {
            let x_in = if rms {
                let r = ((x.dot(x) / d as f64) + 1e-8).sqrt();
                x / r
            } else {
                x.clone()
            };
            v.data() * model.forward(&x_in)
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..samples.n() {
            let x0 = samples.row(i);
            let mut jac = DMatrix::zeros(v.n(), d);
            for b in 0..d {
                let mut xp = x0.clone();
                let mut xm = x0.clone();
                xp[b] += h;
                xm[b] -= h;
                let fp = map(&xp);
                let fm = map(&xm);
                for r in 0..v.n() {
                    jac[(r, b)] = (fp[r] - fm[r]) / (2.0 * h);
                }
            }
            worst = worst.max(jac.svd(false, false).singular_values.max());
        }
        assert!(
            (analytic - worst).abs() <= 1e-4 * worst.max(1.0),
            "rms={rms}: analytic {analytic} vs fd {worst}"
        );
    }
}

#[test]
fn quantize_extremes_and_ladder() {
    let (v, f) = tied_instance(24, 8, 101);
    let model = construct_full(
        &v,
        &v,
        &f,
        96,
        Activation::Silu,
        101,
        &ConstructCfg::default(),
    )
    .unwrap();
    let base = verify_storage(&model, &v, &v, &f).unwrap();
    assert_eq!(base.accuracy, 1.0);

    // A step above every weight magnitude zeroes the model.
    let nuked = quantize(&model, 1e6).unwrap();
    let out = nuked.forward_rows(v.data());
    assert_eq!(out.amax(), 0.0);

    // A step below the representable granularity changes nothing.
    let fine = quantize(&model, 1e-12).unwrap();
    let rf = verify_storage(&fine, &v, &v, &f).unwrap();
    assert_eq!(rf.stored_mask, base.stored_mask);
    assert_eq!(rf.accuracy, base.accuracy);

    let mut last = f64::INFINITY;
    for step in [1e-8, 1e-6, 1e-4, 1e-2, 1.0] {
        let q = quantize(&model, step).unwrap();
        let report = verify_storage(&q, &v, &v, &f).unwrap();
        assert!(
            report.accuracy <= last + 1e-12,
            "step {step}: accuracy {} after {last}",
            report.accuracy
        );
        last = report.accuracy;
        let max_delta: f64 = q.audit["quantize_max_delta"].parse().unwrap();
        assert!(max_delta <= step / 2.0 + 1e-15);
    }
}

#[test]
fn model_files_roundtrip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fmlp");
    let (v, f) = tied_instance(12, 6, 111);
    let model = construct_full(
        &v,
        &v,
        &f,
        24,
        Activation::Silu,
        111,
        &ConstructCfg::default(),
    )
    .unwrap();
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.kind, model.kind);
    assert_eq!(back.audit, model.audit);

    let probes = gen_embeddings(EmbedKind::Gaussian, 100, 6, 112).unwrap();
    let a = model.forward_rows(probes.data());
    let b = back.forward_rows(probes.data());
    assert_eq!(a, b);
}

#[test]
fn model_files_detect_corruption_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fmlp");
    let (v, f) = tied_instance(6, 4, 121);
    let model = construct_full(
        &v,
        &v,
        &f,
        8,
        Activation::Silu,
        121,
        &ConstructCfg::default(),
    )
    .unwrap();
    save_model(&model, &path).unwrap();
    let pristine = std::fs::read(&path).unwrap();

    // Flipped payload byte -> checksum failure.
    let mut bad = pristine.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_model(&path), Err(FactError::ChecksumMismatch)));

    // Truncation -> truncated error.
    std::fs::write(&path, &pristine[..pristine.len() - 11]).unwrap();
    assert!(matches!(
        load_model(&path),
        Err(FactError::Truncated(_)) | Err(FactError::ChecksumMismatch)
    ));

    // Future version field with a recomputed checksum -> version mismatch.
    let needle = b"\"version\":1";
    let pos = pristine
        .windows(needle.len())
        .position(|w| w == needle)
        .expect("version field present");
    let mut versioned = pristine.clone();
    versioned[pos + needle.len() - 1] = b'9';
    let body_len = versioned.len() - 8;
    let sum = fnv1a64(&versioned[..body_len]);
    versioned[body_len..].copy_from_slice(&sum.to_le_bytes());
    std::fs::write(&path, &versioned).unwrap();
    assert!(matches!(
        load_model(&path),
        Err(FactError::VersionMismatch { .. })
    ));
}

#[test]
fn constructed_models_undercut_naive_at_desk_scale() {
    let d = 16;
    let n = 64;
    let (v, f) = tied_instance(n, d, 131);
    let m = d / 2;
    let constructed = construct_full(
        &v,
        &v,
        &f,
        m,
        Activation::Silu,
        131,
        &ConstructCfg::default(),
    )
    .unwrap();
    let naive = naive_construct(&v, &v, &f).unwrap();
    assert!(
        constructed.param_count() < naive.param_count(),
        "{} vs {}",
        constructed.param_count(),
        naive.param_count()
    );
}
