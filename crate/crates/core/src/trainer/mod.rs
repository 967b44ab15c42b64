//! Teacher-student training: EMA coupling, augmentation, the optimization
//! step, the epoch loop and sliding-window inference.

mod adam;
mod augment;
mod checkpoint;
mod config;
mod ema;
mod fit;
mod infer;
mod step;

pub use adam::Adam;
pub use augment::{augment, augment_with, AugmentDraw};
pub use checkpoint::{load_inference_network, load_state, save_state, CheckpointMeta, CHECKPOINT_VERSION};
pub use config::{InferenceConfig, InferenceNetwork, InputKind, Provenance, TrainerConfig};
pub use ema::{ema_blend, ema_decay};
pub use fit::{
    fit, read_log, validation_dsc, EpochRecord, FitOptions, FitSummary, TrainingData, BEST_CHECKPOINT, LAST_CHECKPOINT,
    LOG_FILE,
};
pub use infer::{predict_probability, predict_volume, window_starts, VolumePrediction};
pub use step::{ema_update, train_step, StepReport, TeacherStudentState};
