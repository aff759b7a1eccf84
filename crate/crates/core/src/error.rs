use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward: node {node} references later node {input}")]
    Cycle { node: usize, input: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("shape topology: {0}")]
    Topology(String),

    #[error("class {class} absent from {which} mask")]
    ClassAbsent { class: usize, which: &'static str },

    #[error("non-finite loss (dice = {dice}, aw_ce = {ce})")]
    NonFiniteLoss { dice: f64, ce: f64 },

    #[error("energy minimization diverged at iteration {iteration}: strain = {strain}, mismatch = {mismatch}")]
    EnergyDiverged {
        iteration: usize,
        strain: f64,
        mismatch: f64,
    },

    #[error("transform folds: det > 0 at {fraction} of mesh nodes, need {required}")]
    NotDiffeomorphic { fraction: f64, required: f64 },

    #[error("format: {msg} (at byte {offset})")]
    Format { msg: String, offset: usize },

    #[error("mask label {label} at (row {row}, col {col}) exceeds class count {class_count}")]
    LabelOutOfRange {
        label: u16,
        row: usize,
        col: usize,
        class_count: usize,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    InFile {
        path: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Attaches the file being read or written.
    pub fn in_file(self, path: &std::path::Path) -> Self {
        Error::InFile {
            path: path.display().to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error, past any file context.
    pub fn root(&self) -> &Error {
        match self {
            Error::InFile { source, .. } => source.root(),
            e => e,
        }
    }

    /// Stable snake_case name of the innermost variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::NonFinite { .. } => "non_finite",
            Error::NonScalarRoot(_) => "non_scalar_root",
            Error::Cycle { .. } => "cycle",
            Error::Config(_) => "config",
            Error::Topology(_) => "topology",
            Error::ClassAbsent { .. } => "class_absent",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::EnergyDiverged { .. } => "energy_diverged",
            Error::NotDiffeomorphic { .. } => "not_diffeomorphic",
            Error::Format { .. } => "format",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::Manifest(_) => "manifest",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::InFile { .. } => unreachable!("root strips file context"),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
