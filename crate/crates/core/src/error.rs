use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite pseudo-count projection in layer {layer}")]
    NonFiniteProjection { layer: usize },

    #[error("pseudo-count {index} is not positive ({value})")]
    NonPositiveAlpha { index: usize, value: f64 },

    #[error("gamma sampler failed for shape {shape}")]
    GammaSampler { shape: f64 },

    #[error("degenerate mixture: every component of an attention row is masked")]
    DegenerateMixture,

    #[error("fully pruned representation: total pseudo-count is zero")]
    FullyPruned,

    #[error("every data vector of encoder layer {layer} was pruned; only the prior survives")]
    FinalLayerPruned { layer: usize },

    #[error("argument must be positive, got {0}")]
    NonPositiveArgument(f64),

    #[error("empty memory after masking")]
    EmptyMemory,

    #[error("empty input sequence")]
    EmptySequence,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("layer {layer} out of range (encoder has {depth} layers)")]
    LayerOutOfRange { layer: usize, depth: usize },

    #[error("dataset has a single class")]
    SingleClass,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
