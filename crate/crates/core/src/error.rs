use thiserror::Error;

pub type Result<T> = std::result::Result<T, IcmError>;

#[derive(Debug, Error)]
pub enum IcmError {
    #[error("deformation gradient has non-positive Jacobian det F = {0}")]
    NonPositiveJacobian(f64),
    #[error("state outside the material's admissible domain: {0}")]
    DomainViolation(String),
    #[error("unknown subset rule `{0}`")]
    UnknownSubsetRule(String),
    #[error("degenerate normalization: {0}")]
    DegenerateBasis(String),
    #[error("mesh generation failed: {0}")]
    MeshGenerationFailure(String),
    #[error("degenerate element {element}: reference area {area:e}")]
    DegenerateElement { element: usize, area: f64 },
    #[error("node {node} is not a vertex of element {element}")]
    NodeNotInElement { node: usize, element: usize },
    #[error("unknown boundary set `{0}`")]
    UnknownBoundarySet(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("Newton solve did not converge after {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("line search failed after {halvings} halvings")]
    LineSearchFailure { halvings: usize },
    #[error("load program failed at step {step}: {source}")]
    LoadStepFailure {
        step: usize,
        #[source]
        source: Box<IcmError>,
    },
    #[error("token at node {0} has a zero-norm coefficient row")]
    ZeroRowNorm(usize),
    #[error("insufficient tokens: requested {requested}, available {available}")]
    InsufficientTokens { requested: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in layer `{0}`")]
    NonFiniteActivation(String),
    #[error("degenerate prediction: loss denominator {0:e}")]
    DegeneratePrediction(f64),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("boundary condition {0} has zero true force")]
    ZeroTrueForce(String),
    #[error("scaling factor collapsed: alpha = {0:e}")]
    ZeroAlpha(f64),
    #[error("all stress components have degenerate range")]
    DegenerateRange,
    #[error("force scale must be positive, got {0:e}")]
    ZeroForceScale(f64),
    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl IcmError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            IcmError::NonConvergence { .. }
                | IcmError::LineSearchFailure { .. }
                | IcmError::LoadStepFailure { .. }
                | IcmError::DomainViolation(_)
                | IcmError::NonFiniteActivation(_)
                | IcmError::DegeneratePrediction(_)
                | IcmError::NonFinite(_)
                | IcmError::ZeroAlpha(_)
                | IcmError::TrainingAborted { .. }
        )
    }
}
