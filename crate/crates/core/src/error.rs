use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} cannot hold {len} elements")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("softmax row {row} has no finite entry")]
    DegenerateRow { row: usize },
    #[error("layer norm over a single feature with eps = 0 divides by zero")]
    DivisionByZero,
    #[error("loss is not connected to any tensor that requires a gradient")]
    DetachedLoss,
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("non-finite recurrent state at step {step}")]
    NumericFault { step: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("eval-mode attention requires a frozen value gate")]
    FreezeRequired,
    #[error("initial recurrent state passed to a bidirectional block")]
    StateOnBidirectional,
    #[error("recurrent state passed to a non-causal block")]
    StateOnNonCausal,
    #[error("signal of {len} samples is shorter than one frame of {frame}")]
    TooShort { len: usize, frame: usize },
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{0} signal has zero energy")]
    ZeroEnergy(&'static str),
    #[error("epoch {epoch} outside 1..={epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("loss diverged at step {step}")]
    Divergence { step: usize },
    #[error("streaming requires a causal model")]
    StreamingUnsupported,
    #[error("stream already flushed")]
    StreamClosed,
    #[error("sample rate {0} Hz unsupported (expected 16000)")]
    UnsupportedRate(u32),
    #[error("empty input")]
    Empty,
}
