use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("cannot aggregate an empty model list")]
    EmptyAggregate,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("model {index} has zero norm; cosine similarity is undefined")]
    DegenerateNorm { index: usize },

    #[error("cannot sample a plan for an empty population")]
    EmptyPopulation,

    #[error("recombination plan does not fit the model list: {0}")]
    PlanShape(String),

    #[error("granularity must lie in (0, 1], got {0}")]
    InvalidGranularity(f64),

    #[error("non-finite input feature in sample {sample}")]
    NumericInput { sample: usize },

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("client {client} has an empty shard")]
    EmptyShard { client: usize },

    #[error("proximal term requested (mu = {mu}) without a global reference model")]
    MissingReference { mu: f64 },

    #[error("cannot evaluate on an empty dataset")]
    EmptyEval,

    #[error("invalid configuration `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("cannot place {classes} simplex centers in {dim} dimensions")]
    InfeasibleCenters { classes: usize, dim: usize },

    #[error("cannot split {samples} training samples across {clients} clients")]
    InfeasiblePartition { clients: usize, samples: usize },

    #[error("cannot select K = {k} clients out of N = {n}")]
    InvalidK { k: usize, n: usize },

    #[error("invalid layer bounds: {0}")]
    InvalidBounds(String),

    #[error("message routed to unknown client {to}")]
    Routing { to: usize },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("malformed model container: {0}")]
    Format(String),

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
