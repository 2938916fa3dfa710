//! Synthetic task, configuration, training and evaluation drivers, and the
//! file-based commands behind the `raidx` binary.

mod commands;
mod config;
mod dataset;
mod metrics;
mod run;

use thiserror::Error;

use crate::grpo::GrpoError;
use crate::policy::PolicyError;
use crate::retrieval::RetrievalError;
use crate::saliency::SaliencyError;

pub use commands::{
    cmd_ablate, cmd_build_index, cmd_eval, cmd_gen_data, cmd_infer, cmd_train, read_image, AblationRow,
    AblationTable, ImageSource, InferOutcome, OutDir, TrainSummary,
};
pub use config::{Arm, RunConfig};
pub use dataset::{
    generate_dataset, render_scene, ArtifactKind, ArtifactMix, Dataset, LabeledImage, Scene, SyntheticSpec,
    MANIFEST_FILE, TEST_FILE, TRAIN_FILE,
};
pub use metrics::{precision_recall_f1, ClassMetrics, Confusion, EvalReport};
pub use run::{
    arm_prompt, embed_all, features_all, global_static_summary, index_for, judge, runlog_jsonl, sha256_hex,
    EvalPoint, Experiment, Judgement, LogRecord,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 3 for missing or
    /// corrupt inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Policy(PolicyError::Config(_)) => 2,
            HarnessError::Grpo(GrpoError::Config(_)) => 2,
            HarnessError::Data(_) | HarnessError::Io(_) | HarnessError::Retrieval(_) => 3,
            HarnessError::Policy(PolicyError::Checkpoint(_) | PolicyError::Io(_)) => 3,
            _ => 1,
        }
    }
}
