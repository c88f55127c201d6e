use std::fmt;

/// Per-group shortfall reported when a design cannot meet its requirements.
#[derive(Debug, Clone, PartialEq)]
pub struct Shortfall {
    pub group: String,
    pub required: f64,
    /// Largest expected number of successes any allocation can reach.
    pub max_achievable: f64,
}

impl fmt::Display for Shortfall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: requires {:.3}, at most {:.3} achievable (short by {:.3})",
            self.group,
            self.required,
            self.max_achievable,
            self.required - self.max_achievable
        )
    }
}

fn join_shortfalls(groups: &[Shortfall]) -> String {
    groups.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("input contains no records")]
    EmptyInput,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("group `{0}` has no records")]
    EmptyGroup(String),

    #[error("count matrix is already noised")]
    AlreadyNoised,

    #[error("infeasible design: {}", join_shortfalls(.0))]
    Infeasible(Vec<Shortfall>),

    #[error("{regions} regions exceeds the enumeration limit of {limit}")]
    TooManyRegions { regions: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
