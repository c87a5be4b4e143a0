use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("loss mask selects no positions")]
    EmptyLoss,
    #[error("optimizer state error: {0}")]
    State(String),
    #[error("sequence length {len} exceeds maximum {max}{}", context_suffix(.context))]
    SequenceLength {
        len: usize,
        max: usize,
        context: Option<String>,
    },
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("persona sentences tokenize to zero tokens")]
    EmptyPersona,
    #[error("need {needed} distinct personas, found {found}")]
    InsufficientPersonas { needed: usize, found: usize },
    #[error("need at least {min} dialogue pairs to split, found {found}")]
    TooFewPairs { found: usize, min: usize },
    #[error("need {needed} general dialogue pairs, only {available} available")]
    InsufficientGeneralPairs { needed: usize, available: usize },
    #[error("no {n}-grams in response pool")]
    EmptyPool { n: usize },
    #[error("training failed at epoch {epoch}: {reason}")]
    TrainingFailure { epoch: usize, reason: String },
    #[error("invalid record {record_id}: {reason}")]
    InvalidRecord { record_id: String, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
}

fn context_suffix(context: &Option<String>) -> String {
    match context {
        Some(c) => alloc::format!(" ({c})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
