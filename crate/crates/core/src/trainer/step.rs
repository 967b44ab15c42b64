use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::{InputKind, TrainerConfig};
use super::ema::{ema_blend, ema_decay};
use crate::backbone::{
    build_network, logits_to_prediction, softmax_backward, NetworkConfig, Prediction, SegmentationNetwork,
};
use crate::error::{invalid, Result};
use crate::losses::{consistency_with_grad, supervised_with_grad, total_loss, SpectralMask, SupervisedTerms};
use crate::nn::{Tape, Tensor};
use crate::preprocess::Patch;

/// Gradient-trained teacher, EMA-tracked student and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudentState {
    pub teacher: SegmentationNetwork,
    pub student: SegmentationNetwork,
    pub iteration: u64,
    pub optimizer: Adam,
}

impl TeacherStudentState {
    /// Teacher and student start from the same initialization.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let teacher = build_network(config, seed)?;
        let optimizer = Adam::new(teacher.params());
        Ok(Self {
            student: teacher.clone(),
            teacher,
            iteration: 0,
            optimizer,
        })
    }
}

/// Blend the student towards the teacher with the decay of the current
/// iteration count.
pub fn ema_update(state: &mut TeacherStudentState, base_decay: f64) -> Result<()> {
    let d = ema_decay(state.iteration, base_decay);
    ema_blend(&mut state.student, &state.teacher, d)
}

/// Loss values of one step. Batch terms are means over patches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub lr: f64,
    pub sup: SupervisedTerms,
    pub semi_mse: f64,
    pub semi_sim: f64,
    pub semi: f64,
    pub total: f64,
}

pub(crate) fn network_input(patch: &Patch, kind: InputKind) -> &Array3<f32> {
    match kind {
        InputKind::Raw => &patch.image,
        InputKind::VesselLike => &patch.vessel_like,
    }
}

struct TeacherPass {
    tape: Tape,
    logits: crate::nn::Var,
    pred: Prediction,
}

fn teacher_pass(net: &SegmentationNetwork, input: &Array3<f32>) -> Result<TeacherPass> {
    let mut tape = Tape::new();
    let x = net.input_on(&mut tape, input)?;
    let logits = net.logits_on(&mut tape, x);
    let pred = logits_to_prediction(tape.value(logits));
    Ok(TeacherPass { tape, logits, pred })
}

fn accumulate(acc: &mut [Option<Tensor>], pass: &TeacherPass, grad: &Array4<f64>) {
    let seed = softmax_backward(&pass.pred, grad);
    let grads = pass.tape.backward(&[(pass.logits, seed)]);
    let n = acc.len();
    for (a, g) in acc.iter_mut().zip(pass.tape.param_grads(&grads, n)) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// One optimization step.
///
/// The teacher sees `teacher_input` patches and is the only network that
/// receives gradients; the student sees the vessel-like twins and its outputs
/// enter the consistency terms as constants. After the optimizer step the
/// student is blended towards the teacher with the decay of the iteration
/// index the step started at, then the iteration counter advances.
pub fn train_step(
    state: &mut TeacherStudentState,
    labeled: &[Patch],
    unlabeled: &[Patch],
    cfg: &TrainerConfig,
    lr: f64,
    mask: Option<&SpectralMask>,
) -> Result<StepReport> {
    if labeled.is_empty() {
        return Err(invalid("labeled batch is empty"));
    }
    let loss = &cfg.loss;
    let semi_on = loss.semi_weight > 0.0 && !unlabeled.is_empty();
    let wsum = loss.sup_weight + loss.semi_weight;
    let (ws, wu) = (loss.sup_weight / wsum, loss.semi_weight / wsum);
    let n_params = state.teacher.params().len();
    let mut acc: Vec<Option<Tensor>> = vec![None; n_params];
    let mut report = StepReport { lr, ..Default::default() };

    let nl = labeled.len() as f64;
    for patch in labeled {
        let target = patch.mask.as_ref().ok_or_else(|| invalid("labeled patch without mask"))?;
        let pass = teacher_pass(&state.teacher, network_input(patch, cfg.teacher_input))?;
        let (terms, g_sup) = supervised_with_grad(&pass.pred, target, mask, loss)?;
        report.sup.ce += terms.ce / nl;
        report.sup.dice += terms.dice / nl;
        report.sup.boundary += terms.boundary / nl;
        report.sup.total += terms.total / nl;
        let mut grad = g_sup * (ws / nl);
        if semi_on {
            let student = state.student.forward(&patch.vessel_like)?;
            let (c, g) = consistency_with_grad(&pass.pred, &student, loss.cosine_form)?;
            report.semi_mse += c.mse / nl;
            report.semi_sim += c.sim / nl;
            grad.scaled_add(wu / nl, &g);
        }
        accumulate(&mut acc, &pass, &grad);
    }
    if semi_on {
        let nu = unlabeled.len() as f64;
        for patch in unlabeled {
            let pass = teacher_pass(&state.teacher, network_input(patch, cfg.teacher_input))?;
            let student = state.student.forward(&patch.vessel_like)?;
            // Symmetric terms: the value for (student, teacher) equals the
            // value for (teacher, student), whose gradient is the one needed.
            let (c, g) = consistency_with_grad(&pass.pred, &student, loss.cosine_form)?;
            report.semi_mse += c.mse / nu;
            report.semi_sim += c.sim / nu;
            accumulate(&mut acc, &pass, &(g * (wu / nu)));
        }
    }
    report.semi = report.semi_mse + report.semi_sim;
    report.total = total_loss(report.sup.total, report.semi, loss);

    let it = state.iteration;
    state.optimizer.update(state.teacher.params_mut(), &acc, lr)?;
    state.iteration += 1;
    ema_blend(&mut state.student, &state.teacher, ema_decay(it, cfg.ema_base_decay))?;
    Ok(report)
}
