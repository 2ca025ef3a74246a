use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported dump format version {0}")]
    UnsupportedFormatVersion(u32),

    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no tokens match the role filter")]
    EmptyPool,

    #[error("degenerate direction at layer {layer}: mean difference norm below threshold")]
    DegenerateDirection { layer: usize },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("layer search band is empty for {layer_count} layers")]
    BandTooSmall { layer_count: usize },

    #[error("invalid digit token map: {0}")]
    InvalidDigitMap(String),

    #[error("context overflow: {len} tokens exceeds maximum {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("token id {id} outside vocabulary of {vocab}")]
    InvalidToken { id: u32, vocab: usize },

    #[error("backend has no hook point at layer {layer}")]
    MissingHook { layer: usize },

    #[error("unsupported by backend: {0}")]
    Unsupported(String),

    #[error("need at least {required} clusters, found {found}")]
    TooFewClusters { found: usize, required: usize },

    #[error("cluster structure differs between paired samples")]
    ClusterMismatch,

    #[error("statistic failed on {failures} of {replicates} bootstrap resamples")]
    BootstrapDegenerate { failures: usize, replicates: usize },

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("run incomplete: {0}")]
    PartialRun(String),
}
