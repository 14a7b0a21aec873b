use mvinpaint_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing frame: camera {camera}, timestep {timestep}")]
    MissingFrame { camera: usize, timestep: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint/dataset handshake failed: {0}")]
    Handshake(String),
    #[error("cache integrity error: {0}")]
    CacheIntegrity(String),
    #[error("non-finite loss at step {step}: L_in={l_in} L_out={l_out} d_loss={d_loss} g_loss={g_loss}")]
    NonFiniteLoss {
        step: usize,
        l_in: f32,
        l_out: f32,
        d_loss: f32,
        g_loss: f32,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFiniteLoss { .. } => 4,
            Error::Tensor(TensorError::NonFinite(_)) => 4,
            _ => 3,
        }
    }
}

/// Lets pipeline closures run inside tensor-level utilities such as the gradient checker.
impl From<Error> for TensorError {
    fn from(e: Error) -> Self {
        match e {
            Error::Tensor(t) => t,
            other => TensorError::Invalid {
                op: "pipeline",
                msg: other.to_string(),
            },
        }
    }
}
