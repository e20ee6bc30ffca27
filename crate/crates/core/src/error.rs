use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value at voxel {index}, channel {channel}")]
    NonFinite { index: usize, channel: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("mesh folded: tetrahedron {tet} has signed volume {volume:e}")]
    FoldedMesh { tet: usize, volume: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
