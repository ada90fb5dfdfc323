//! Training orchestration: configuration, the Adam optimizer, the six-phase
//! pretraining step, the epoch loop with checkpoint/resume, evaluation, the
//! end-to-end gradient audit, and attention export.

mod adam;
mod attention;
mod checkpoint;
mod config;
mod eval;
mod gradcheck;
mod metrics;
mod run;
mod step;

pub use adam::{AdamConfig, AdamSnapshot, AdamState};
pub use attention::{dump_attention, format_attention_dump, AttentionDump, LayerAttention};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CKPT_VERSION};
pub use config::TrainConfig;
pub use eval::{evaluate, evaluate_records, EvalReport, HELD_OUT_SEED_OFFSET};
pub use gradcheck::{run_gradcheck, GradcheckReport, GroupReport, GRADCHECK_THRESHOLD};
pub use metrics::{read_metrics, MetricsRow};
pub use run::{acquire_records, restore_state, run_pretrain, RunOutcome};
pub use step::{pretrain_step, StepSettings, StepTrace};

use thiserror::Error;

use crate::data::DataError;
use crate::numeric::NumericError;

#[derive(Debug, Error)]
pub enum TrainError {
    /// Rejected configuration or input; the message lists every offending
    /// field.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Data(#[from] DataError),
    /// Checkpoint written by a different format version.
    #[error("checkpoint incompatibility: {0}")]
    Incompatible(String),
    /// Checkpoint bytes fail their own checksum or do not decode.
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;
