use thiserror::Error;

#[derive(Debug, Error)]
pub enum StudioError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("wrong state: {0}")]
    WrongState(String),
    #[error("{message}")]
    Invalid { field: Option<String>, message: String },
    #[error(transparent)]
    Core(#[from] inpaint_compose::Error),
    #[error("io error: {0}")]
    Io(String),
    /// Raised by fault injection in place of a persistence write.
    #[error("injected crash")]
    Crash,
}

impl StudioError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        StudioError::Invalid {
            field: Some(field.into()),
            message: message.into(),
        }
    }

    /// Stable machine-readable code for API responses.
    pub fn code(&self) -> &'static str {
        match self {
            StudioError::NotFound(_) => "not_found",
            StudioError::Conflict(_) => "conflict",
            StudioError::WrongState(_) => "wrong_state",
            StudioError::Invalid { .. } => "invalid",
            StudioError::Core(e) if e.is_user_error() => "invalid",
            _ => "internal",
        }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            StudioError::Invalid { field, .. } => field.as_deref(),
            StudioError::Core(inpaint_compose::Error::Schema { field, .. }) => Some(field),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, StudioError>;
