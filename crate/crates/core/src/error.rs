use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("requested {requested} generated entries but only {available} are available (short by {})", requested - available)]
    Shortfall { requested: usize, available: usize },

    #[error("skipped {skipped} of {total} inputs, above the {limit_pct}% limit")]
    TooManySkipped {
        skipped: usize,
        total: usize,
        limit_pct: usize,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

/// Fails when more than `max_fraction` of `total` inputs were skipped.
pub(crate) fn check_skip_budget(skipped: usize, total: usize, max_fraction: f64) -> Result<()> {
    if total > 0 && skipped as f64 > max_fraction * total as f64 {
        return Err(Error::TooManySkipped {
            skipped,
            total,
            limit_pct: (max_fraction * 100.0).round() as usize,
        });
    }
    Ok(())
}
