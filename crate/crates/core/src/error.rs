use thiserror::Error;

/// Errors produced anywhere in the retrieval pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence {id}: event {index} at t={time} does not follow t={prev}")]
    NonMonotonicTimes {
        id: String,
        index: usize,
        time: f64,
        prev: f64,
    },
    #[error("sequence {id}: event {index} at t={time} is not before the horizon T={horizon}")]
    EventBeyondHorizon {
        id: String,
        index: usize,
        time: f64,
        horizon: f64,
    },
    #[error("sequence {id}: event {index} has negative time {time}")]
    NegativeEventTime { id: String, index: usize, time: f64 },
    #[error("mark {mark} outside vocabulary of size {num_marks}")]
    UnknownMark { mark: usize, num_marks: usize },
    #[error("sequence {0} has no events")]
    EmptySequence(String),
    #[error("query sequence is empty")]
    EmptyQuery,
    #[error("non-finite value encountered in {0}")]
    NonFiniteValue(&'static str),
    #[error("negative time {0} passed to the unwarping function")]
    NegativeTime(f64),
    #[error("inter-event gap must be positive, got {0}")]
    NonPositiveGap(f64),
    #[error("log-normal scale must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("horizon {horizon} is smaller than event time {time}")]
    HorizonTooSmall { horizon: f64, time: f64 },
    #[error("sequence {0} has an all-zero log-likelihood gradient")]
    ZeroGradient(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("ranking loss needs at least one positive and one negative score")]
    EmptySide,
    #[error("query {0} has no positive corpus sequences in the training split")]
    NoPositives(String),
    #[error("training loss diverged (non-finite) at epoch {0}")]
    DivergedLoss(usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("hash loss weights must be nonnegative and sum to 1, got {0:?}")]
    BadWeights([f64; 3]),
    #[error("index needs at least L={bits} code bits, codes have R={code_len}")]
    TooFewBits { bits: usize, code_len: usize },
    #[error("no test queries to evaluate")]
    NoTestQueries,
    #[error("sub-sequence range [{0}, {1}] is degenerate")]
    DegenerateRange(usize, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown identifier {0}")]
    UnknownId(String),
    #[error("unknown parameter segment {0}")]
    UnknownSegment(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
