//! A desk-scale learned video codec built around coarse-to-fine motion
//! compensation and hyperprior-guided mode prediction.
//!
//! The pipeline codes P-frames in feature space: frames are lifted to a
//! stride-2 feature map, motion is estimated/compressed/compensated twice
//! (coarse then fine), and the feature residual is compressed with a
//! per-element skip mode. Both mode decisions (block resolution for motion,
//! skip/keep for residual) are predicted from the hyperprior's decoded
//! (mu, sigma) maps, so they cost no side-information bits.
//!
//! Everything is end-to-end trainable through a small reverse-mode autodiff
//! engine ([`graph`]), and everything that is coded is coded for real: an
//! exact integer range coder over frozen CDF tables produces a decodable
//! bitstream ([`codec::bitstream`]).

pub mod clip;
pub mod codec;
pub mod config;
pub mod entropy;
pub mod eval;
pub mod frame;
pub mod graph;
pub mod metrics;
pub mod modes;
pub mod motion;
pub mod nn;
pub mod plot;
pub mod synth;
pub mod train;

pub use config::ModelConfig;
pub use graph::{Arr, Graph, Var};

/// Errors surfaced by coding, decoding and model I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt stream at byte {offset}: {reason}")]
    CorruptStream { offset: usize, reason: String },
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn in_frame(self, frame: usize) -> Error {
        Error::Frame {
            frame,
            source: Box::new(self),
        }
    }
}
