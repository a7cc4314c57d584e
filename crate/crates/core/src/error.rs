use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input configuration (bad grid, missing weights, unknown kind, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Structural mismatch between objects (non-nested meshes, wrong lengths).
    #[error("structural error: {0}")]
    Structure(String),
    /// Iterative solver did not reach the requested tolerance.
    #[error("solver failed after {iterations} iterations (relative residual {residual:e}): {context}")]
    Solver {
        iterations: usize,
        residual: f64,
        context: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }

    /// Attach context to a solver failure; other variants pass through.
    pub fn with_context(self, ctx: impl Into<String>) -> Self {
        match self {
            Error::Solver {
                iterations,
                residual,
                context,
            } => {
                let ctx = ctx.into();
                Error::Solver {
                    iterations,
                    residual,
                    context: if context.is_empty() {
                        ctx
                    } else {
                        format!("{ctx}: {context}")
                    },
                }
            }
            other => other,
        }
    }
}
