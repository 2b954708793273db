use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("objective is not deterministic: {0} vs {1}")]
    NonDeterministic(f64, f64),
    #[error("stale data: built for generation {built}, cloud is at {current}")]
    Stale { built: u64, current: u64 },
    #[error("training diverged at iteration {iter}: {what}")]
    Diverged { iter: usize, what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
