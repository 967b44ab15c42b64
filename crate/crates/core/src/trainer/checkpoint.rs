use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::{InferenceNetwork, TrainerConfig};
use super::step::TeacherStudentState;
use crate::backbone::{build_network, read_checkpoint, write_checkpoint, ParamMap, SegmentationNetwork};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON header stored with every training checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config: TrainerConfig,
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_dsc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub optimizer_step: u64,
}

const PREFIXES: [&str; 4] = ["teacher.", "student.", "adam.m.", "adam.v."];

pub fn save_state(path: &Path, state: &TeacherStudentState, meta: &CheckpointMeta) -> Result<()> {
    let names = state.teacher.param_names();
    let groups: [&[Tensor]; 4] = [
        state.teacher.params(),
        state.student.params(),
        &state.optimizer.m,
        &state.optimizer.v,
    ];
    let mut tensors = Vec::with_capacity(4 * names.len());
    for (prefix, group) in PREFIXES.iter().zip(groups) {
        for (n, t) in names.iter().zip(group) {
            tensors.push((format!("{prefix}{n}"), t));
        }
    }
    write_checkpoint(path, &serde_json::to_value(meta)?, &tensors)
}

fn split(tensors: Vec<(String, Tensor)>, prefix: &str) -> ParamMap {
    tensors
        .into_iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t)))
        .collect()
}

pub fn load_state(path: &Path) -> Result<(TeacherStudentState, CheckpointMeta)> {
    let (meta, tensors) = read_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported checkpoint version {}", meta.version),
        });
    }
    let net_cfg = meta.config.network_config();
    let mut teacher = build_network(&net_cfg, 0)?;
    let mut student = teacher.clone();
    teacher.load_parameters(&split(tensors.clone(), PREFIXES[0]))?;
    student.load_parameters(&split(tensors.clone(), PREFIXES[1]))?;
    let mut m_net = teacher.clone();
    let mut v_net = teacher.clone();
    m_net.load_parameters(&split(tensors.clone(), PREFIXES[2]))?;
    v_net.load_parameters(&split(tensors, PREFIXES[3]))?;
    let mut optimizer = Adam::new(teacher.params());
    optimizer.m = m_net.params().to_vec();
    optimizer.v = v_net.params().to_vec();
    optimizer.step = meta.optimizer_step;
    let state = TeacherStudentState {
        teacher,
        student,
        iteration: meta.iteration,
        optimizer,
    };
    Ok((state, meta))
}

/// The network used for prediction plus the run configuration.
pub fn load_inference_network(
    path: &Path,
    which: Option<InferenceNetwork>,
) -> Result<(SegmentationNetwork, TrainerConfig)> {
    let (state, meta) = load_state(path)?;
    let net = match which.unwrap_or(meta.config.inference.network) {
        InferenceNetwork::Student => state.student,
        InferenceNetwork::Teacher => state.teacher,
    };
    Ok((net, meta.config))
}
