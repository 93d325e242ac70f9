//! Closed-form fact-storing MLPs: construct one-hidden-layer gated networks
//! that memorize key-value maps exactly, size and verify their random
//! projection decoders, and benchmark empirical storage capacity.
//!
//! The pipeline: margin-optimal output directions for the value embeddings
//! (a minimax margin solve per value), compressed codes through a random
//! projection, and a gated encoder fitted to hit every key's code by one
//! structured least-squares solve. Baselines (NTK Hermite features, a naive
//! wide ReLU network, gradient-descent training) and a sweep harness with
//! CSV/SVG artifacts round out the library.

// `!(x > 0.0)` style guards are deliberate: they reject NaN where the
// suggested `x <= 0.0` would let it through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod decodability;
pub mod decoder;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod factmlp;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod plot;
pub mod rng;

pub use activation::Activation;
pub use decodability::{
    chebyshev_star_bounds, coherence, optimal_outputs, rho, rho_min_given, softmax_lambda,
    ChebyshevBounds, MarginReport, OptimalOutputs, SolverCfg,
};
pub use decoder::{
    build_decoder, decode_margins, gd_decoder, noisy_decode_margins, required_m, DecodeMargins,
    DecoderPack, Dist, GdTrainCfg,
};
pub use embeddings::{
    gen_embeddings, gen_fact_set, gen_p_hot_padded, gen_two_hot_keys, rescale_condition, whiten,
    AffineMap, EmbedKind, EmbedMeta, EmbeddingSet, FactSet,
};
pub use encoder::{
    gadget_width, gated_gadget, gated_loss_grads, gd_encoder, nongated_builder, nongated_reduce,
    relu_block_fit, stack_encoder, two_hot_gated, two_hot_relu, EMat, GadgetSystem, GatedEncoder,
    GdEncoderCfg, PlainEncoder, ReluBlock, ReluBlockPlan,
};
pub use error::{FactError, Result};
pub use factmlp::{
    construct_full, construct_with_outputs, construction_outputs, hermite_normalized,
    lipschitz_estimate, load_model, naive_construct, ntk_construct, quantize, save_model,
    verify_storage, ConstructCfg, DecoderArm, EncoderArm, FactMlp, ModelKind, StorageReport,
};
pub use harness::{
    csv_row, determinism_hash, loglog_slope, min_size_search, parse_sweep_config, run_sweep,
    Bounds, Probe, SearchOutcome, SweepConfig, SweepMode, SweepRecord, CSV_HEADER,
};
pub use io::{
    export_embeddings_csv, import_embeddings_csv, read_embeddings, read_fact_set,
    write_embeddings, write_fact_set,
};
pub use plot::{emit_plot, PlotSpec};
pub use rng::{derive_seed, mix_seed, rng_from_seed};
