//! Shared fixtures for the criterion benchmarks: small tied instances with
//! deterministic seeds so runs are comparable across machines.

use factmlp_core::{
    construction_outputs, gen_embeddings, gen_fact_set, EmbedKind, EmbeddingSet, FactSet,
    SolverCfg,
};

/// A tied key/value instance: n spherical rows in d dimensions plus a
/// bijective fact map.
pub fn tied_instance(n: usize, d: usize, seed: u64) -> (EmbeddingSet, FactSet) {
    let v = gen_embeddings(EmbedKind::Sphere, n, d, seed).expect("fixture embeddings");
    let f = gen_fact_set(n, n, seed ^ 0x5bd1e995, true).expect("fixture facts");
    (v, f)
}

/// Margin-optimal outputs for a value set, solved once outside the timed
/// region so construction benchmarks isolate the solve being measured.
pub fn solved_outputs(v: &EmbeddingSet) -> (EmbeddingSet, f64) {
    construction_outputs(v, &SolverCfg::default()).expect("fixture outputs")
}
