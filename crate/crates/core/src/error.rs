use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("time {time} lies outside the basis interval [0, {length}]")]
    OutOfDomain { time: f64, length: f64 },

    #[error("sample offsets outside the basis interval at (element, snapshot) {0:?}")]
    OffsetsOutOfInterval(Vec<(usize, usize)>),

    #[error("subspace dimension {needed} exceeds the {available} available elements")]
    InsufficientElements { needed: usize, available: usize },

    #[error("packet geometry violates the touching constraint: {0}")]
    Geometry(String),

    #[error("constraint block {block} is degenerate or infeasible")]
    DegenerateConstraint { block: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}
