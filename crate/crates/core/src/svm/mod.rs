//! Soft-margin SVM written from scratch: kernels, SMO, one-vs-one voting and
//! the model file.

mod io;
mod kernel;
mod multiclass;
mod smo;

pub use io::{load_model, model_from_str, model_to_string, save_model};
pub use kernel::{kernel_eval, scale_gamma, Kernel};
pub use multiclass::{train_multiclass, vote, ModelMetadata, PairMachine, Prediction, SvmModel, MODEL_SCHEMA_VERSION};
pub use smo::{dual_objective, max_kkt_violation, smo_train_binary, BinarySvm, SmoSolution, TrainConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SvmError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training failed: {0}")]
    Train(String),
    #[error("model load failed: {0}")]
    Load(String),
    #[error("unsupported model schema_version {0} (this build reads version 1)")]
    UnsupportedVersion(u64),
    #[error("{0}")]
    Domain(String),
    #[error("i/o: {0}")]
    Io(String),
}
