use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("vocabulary table line {line}: {message}")]
    BadTable { line: usize, message: String },
    #[error("unknown token `{word}` at position {position}")]
    UnknownToken { word: String, position: usize },
    #[error("BEG/SEP out of place at position {position}")]
    MisplacedIndicator { position: usize },
    #[error("sequence does not end with SEP")]
    MissingSep,
    #[error("operator at step {step} has too few operands")]
    ArityUnderflow { step: usize },
    #[error("{count} operands left on the stack at SEP")]
    DanglingOperands { count: usize },
    #[error("time span misused at step {step}")]
    TimeSpanMisuse { step: usize },
    #[error("sequence of {len} tokens exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("expression needs {required} days of history, only {available} available")]
    InsufficientHistory { required: usize, available: usize },
    #[error("day range {start}..{end} is outside the panel of {days} days")]
    RangeOutOfPanel {
        start: usize,
        end: usize,
        days: usize,
    },
    #[error("panel has no feature `{0}`")]
    MissingFeature(String),
    #[error("malformed expression tree: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate row for {date} {symbol}")]
    DuplicateRow { date: String, symbol: String },
    #[error("non-numeric cell `{value}` in column {column} at line {line}")]
    NonNumericCell {
        line: usize,
        column: String,
        value: String,
    },
    #[error("missing cells: {0}")]
    MissingCells(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfig(String),
    #[error("horizon {horizon} leaves no usable days in a {days}-day panel")]
    HorizonTooLarge { horizon: usize, days: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero variance or too few finite pairs")]
    DegenerateDay,
    #[error("no day in the range had a defined IC")]
    NoValidDays,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("factor pool is empty")]
    EmptyPool,
    #[error("loss became non-finite during weight fitting")]
    NonFiniteLoss,
    #[error("candidate factor is invalid: {0}")]
    InvalidCandidate(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapingError {
    #[error("demonstration set is empty")]
    EmptyDemoSet,
    #[error("demonstration on line {line} does not parse: {source}")]
    UnparseableDemo { line: usize, source: ExprError },
    #[error("next state is not a one-token extension of the current state")]
    NotAnExtension,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action {0} is not legal in the current state")]
    IllegalAction(crate::vocab::TokenId),
    #[error("episode is already finished")]
    Finished,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CenteringError {
    #[error("reward {0} is not finite")]
    NonFiniteReward(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("every action is masked")]
    AllMasked,
    #[error("gradient became non-finite; update discarded")]
    NonFiniteGradient,
    #[error("policy produced a non-finite output")]
    NonFiniteOutput,
    #[error("empty batch")]
    EmptyBatch,
    #[error("expected {expected} parameters, got {got}")]
    ParameterCount { expected: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Centering(#[from] CenteringError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failure of a top-level command, grouped by process exit code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Io(_) => 3,
            RunError::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

impl From<DataError> for RunError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::DegenerateConfig(_) | DataError::HorizonTooLarge { .. } => {
                RunError::Config(e.to_string())
            }
            _ => RunError::Io(e.to_string()),
        }
    }
}

impl From<CheckpointError> for RunError {
    fn from(e: CheckpointError) -> Self {
        RunError::Io(e.to_string())
    }
}

impl From<TrainError> for RunError {
    fn from(e: TrainError) -> Self {
        RunError::Numeric(e.to_string())
    }
}
