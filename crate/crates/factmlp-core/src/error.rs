use thiserror::Error;

/// Unified error type for the whole crate.
///
/// Domain errors carry enough structure for callers to react (reseed on rank
/// deficiency, widen a search on infeasibility) and for the CLI to map every
/// variant onto exit code 1.
#[derive(Debug, Error)]
pub enum FactError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input is degenerate for the requested operation (duplicate rows,
    /// rank-1 spectra, keys on a shared hyperplane, zero rows).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A design matrix turned out rank deficient; callers may reseed.
    #[error("rank deficient system: rank {rank} < required {needed} ({context}); reseeding may help")]
    RankDeficient {
        rank: usize,
        needed: usize,
        context: String,
    },

    /// An iterative solver failed to reach its tolerance. Carries the best
    /// iterate found (when meaningful) and the residual it achieved.
    #[error("solver did not converge: {context} (residual {residual:.3e})")]
    Solver {
        context: String,
        residual: f64,
        best: Option<Box<crate::embeddings::EmbeddingSet>>,
    },

    /// No parameter value met the requested approximation error.
    #[error("approximation infeasible: smallest achieved error {smallest_error:.3e} > requested ({context})")]
    ApproximationInfeasible {
        smallest_error: f64,
        context: String,
    },

    /// The naive construction requires every key to be more similar to
    /// itself than to any other key.
    #[error("keys not separable: key {index} has self-similarity not above its max cross-similarity")]
    KeysNotSeparable { index: usize },

    /// Value embeddings admit no positive-decodability outputs.
    #[error("infeasible values: {0}")]
    InfeasibleValues(String),

    /// Binary search found the predicate false at the upper bound.
    #[error("search infeasible: predicate fails at hi={hi} (accuracy {accuracy_at_hi})")]
    SearchInfeasible { hi: usize, accuracy_at_hi: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("file version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch: file is corrupted")]
    ChecksumMismatch,

    #[error("malformed file: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, FactError>;

impl FactError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        FactError::InvalidArgument(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        FactError::DegenerateInput(msg.into())
    }

    /// Prefix the error's context with where it happened (e.g. which code
    /// coordinate's gadget failed inside a stacked build).
    pub fn annotate(self, site: &str) -> Self {
        match self {
            FactError::InvalidArgument(m) => FactError::InvalidArgument(format!("{site}: {m}")),
            FactError::DegenerateInput(m) => FactError::DegenerateInput(format!("{site}: {m}")),
            FactError::RankDeficient {
                rank,
                needed,
                context,
            } => FactError::RankDeficient {
                rank,
                needed,
                context: format!("{site}: {context}"),
            },
            FactError::Solver {
                context,
                residual,
                best,
            } => FactError::Solver {
                context: format!("{site}: {context}"),
                residual,
                best,
            },
            FactError::ApproximationInfeasible {
                smallest_error,
                context,
            } => FactError::ApproximationInfeasible {
                smallest_error,
                context: format!("{site}: {context}"),
            },
            FactError::InfeasibleValues(m) => FactError::InfeasibleValues(format!("{site}: {m}")),
            FactError::Numeric(m) => FactError::Numeric(format!("{site}: {m}")),
            other => other,
        }
    }
}
