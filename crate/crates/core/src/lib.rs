//! Unsupervised domain adaptation for monocular depth estimation.
//!
//! A source domain provides synthetic images with dense depth ground truth; a
//! target domain provides real-style images with instance detections but no
//! depth. Adaptation combines three signals:
//!
//! * image translation with adversarial training to close the appearance gap,
//! * a semantic-consistency branch that predicts depth from semantic and edge
//!   maps alone and is pulled toward the image branch,
//! * instance-height pseudo-labels: a learned per-class height prior converts
//!   detected pixel heights into metric depth through the pinhole relation
//!   `depth = focal * height_m / height_px`, with a learnable global scale
//!   that absorbs focal-length misdeclaration.
//!
//! The crate is organised bottom-up: [`nn`] is a small CPU tensor/layer stack
//! with explicit backward passes, [`networks`] assembles the U-Nets, the
//! residual translator and the patch discriminator, [`losses`] implements the
//! training objective, [`train`] runs the two-phase schedule, [`data`]
//! generates and loads the synthetic desk-scale datasets, and [`eval`]
//! computes median-scaled depth metrics.

/// Working depth range in meters; network outputs and pseudo depths are
/// bounded to it, and evaluation caps align with its upper end.
pub const DEPTH_MIN_M: f64 = 0.1;
pub const DEPTH_MAX_M: f64 = 80.0;

pub mod config;
pub mod data;
pub mod eval;
pub mod height;
pub mod losses;
pub mod nn;
pub mod networks;
pub mod rng;
pub mod semantic;
pub mod train;

// Array types appear throughout the public API; re-export the crate so
// downstream binaries match versions without a separate dependency.
pub use ndarray;

/// Errors surfaced by dataset IO, checkpointing, configuration and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {message}")]
    Image {
        path: std::path::PathBuf,
        message: String,
    },
    #[error("malformed json at {path}: {message}")]
    Json {
        path: std::path::PathBuf,
        message: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error at {path}: {message}")]
    Checkpoint {
        path: std::path::PathBuf,
        message: String,
    },
    #[error("training diverged at iteration {iter}: {term} is not finite")]
    Diverged { iter: usize, term: String },
}

impl Error {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
