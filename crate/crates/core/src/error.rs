use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible world: {0}")]
    InfeasibleWorld(String),

    #[error("no chain of {hops} hops exists in this world")]
    NoChain { hops: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token {0} is masked in this state")]
    MaskedToken(u32),

    #[error("search node {0} has no expanded children")]
    Unexpanded(usize),

    #[error("search node {0} is terminal")]
    TerminalNode(usize),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("non-finite probability ratio at trajectory {trajectory}, token {token}")]
    NonFiniteRatio { trajectory: usize, token: usize },

    #[error("[{stage}] diverged at iteration {iteration}: {detail}")]
    Diverged {
        stage: &'static str,
        iteration: usize,
        detail: String,
    },

    #[error("[{stage}] missing checkpoint {path}")]
    MissingCheckpoint { stage: &'static str, path: String },

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<LabError>,
    },

    #[error("malformed record: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl LabError {
    /// Tags an error with the stage that produced it, once.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e if e.stage().is_some() => e,
            e => LabError::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            LabError::Stage { stage, .. } => Some(stage),
            LabError::Diverged { stage, .. } | LabError::MissingCheckpoint { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

/// Adds a stage tag to the error side of a result.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
