//! Task losses, the normalized feature distillation loss and the combined
//! objective `sum_t w_t * task_t + lambda_t * sum_taps distill_{t,tap}`.
//!
//! All terms are per-batch means, so `w` and `lambda` do not depend on the
//! batch size.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::models::{BoundModel, LossKind, ModelBundle, TaskSpec};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// One class index per sample and spatial position.
    Classes(Vec<usize>),
    /// `[N, output_dim, H, W]` regression or direction targets.
    Dense(Tensor),
}

/// Inputs that go through the encoder together, and the targets of every
/// task evaluated on them. Multi-label batches have one group holding all
/// tasks; disjoint-label batches have one group per task.
#[derive(Debug, Clone)]
pub struct InputGroup {
    pub x: Tensor,
    pub targets: Vec<(String, Target)>,
}

#[derive(Debug, Clone, Default)]
pub struct ObjectiveBatch {
    pub groups: Vec<InputGroup>,
}

/// Unweighted components and the weighted total actually optimized.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub task_loss: BTreeMap<String, f64>,
    pub distill_loss: BTreeMap<String, BTreeMap<usize, f64>>,
    pub total: f64,
}

/// Frozen single-task teachers, by task id.
pub type Teachers = BTreeMap<String, ModelBundle>;

pub fn task_loss(tape: &mut Tape, spec: &TaskSpec, pred: Var, target: &Target) -> Result<Var> {
    match (spec.loss, target) {
        (LossKind::CrossEntropy, Target::Classes(labels)) => tape.cross_entropy(pred, labels),
        (LossKind::L1, Target::Dense(t)) => {
            let tv = tape.leaf(t);
            tape.l1_loss(pred, tv)
        }
        (LossKind::Cosine, Target::Dense(t)) => {
            let tv = tape.leaf(t);
            tape.cosine_loss_each(pred, tv)
        }
        (kind, _) => Err(Error::InvalidArgument(format!(
            "task `{}` ({kind}) given the wrong kind of target",
            spec.id
        ))),
    }
}

/// `|| a/|a| - b/|b| ||^2`, normalizing each sample's whole feature map;
/// averaged over the batch for `[N, C, H, W]` inputs.
pub fn distill_loss(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    if tape.shape(student) != tape.shape(teacher) {
        return Err(Error::Shape(format!(
            "distillation between {:?} and {:?}",
            tape.shape(student),
            tape.shape(teacher)
        )));
    }
    let samples = match tape.shape(student) {
        s if s.len() == 4 => s[0],
        _ => 1,
    };
    let a = tape.l2_normalize_each(student)?;
    let b = tape.l2_normalize_each(teacher)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.sum_squares(diff);
    Ok(tape.scale(sq, 1.0 / samples as f64))
}

/// [`distill_loss`] on plain tensors.
pub fn distill_loss_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a), tape.leaf(b));
    let d = distill_loss(&mut tape, va, vb)?;
    tape.scalar(d)
}

/// Per-task loss nodes of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardLosses {
    pub task: BTreeMap<String, Var>,
    pub distill: BTreeMap<String, BTreeMap<usize, Var>>,
}

/// Runs the student over every input group and builds the task losses,
/// plus distillation terms for every task listed in `distill_tasks`.
/// Teacher features enter the tape as constants, so no gradient can reach
/// a teacher.
pub fn forward_losses(
    tape: &mut Tape,
    student: &BoundModel<'_>,
    teachers: Option<&Teachers>,
    batch: &ObjectiveBatch,
    taps: &[usize],
    distill_tasks: &[String],
) -> Result<ForwardLosses> {
    let mut out = ForwardLosses::default();
    for group in &batch.groups {
        let x = tape.leaf(&group.x);
        let feats = student.encode(tape, x)?;
        for (task_id, target) in &group.targets {
            let spec = student.bundle().task(task_id)?;
            let pred = student.predict(tape, task_id, feats.last)?;
            out.task.insert(task_id.clone(), task_loss(tape, spec, pred, target)?);

            if !distill_tasks.contains(task_id) {
                continue;
            }
            let teacher = teachers
                .and_then(|t| t.get(task_id))
                .ok_or_else(|| Error::MissingTeacher(task_id.clone()))?;
            let teacher_feats = teacher.encoder_forward(&group.x)?;
            let mut per_tap = BTreeMap::new();
            for &tap in taps {
                let sf = *feats.taps.get(&tap).ok_or_else(|| {
                    Error::InvalidArgument(format!("student has no tap point {tap}"))
                })?;
                let tf = teacher_feats.get(&tap).ok_or_else(|| {
                    Error::InvalidArgument(format!("teacher for `{task_id}` has no tap point {tap}"))
                })?;
                let adapted = match student.bundle().adaptor_kind() {
                    crate::models::AdaptorKind::None => sf,
                    _ => student.adapt(tape, task_id, tap, sf)?,
                };
                let tv = tape.leaf(tf);
                per_tap.insert(tap, distill_loss(tape, adapted, tv)?);
            }
            out.distill.insert(task_id.clone(), per_tap);
        }
    }
    Ok(out)
}

/// Combines loss nodes in task order as
/// `sum_t scale_t * w_t * task_t + lambda_t * sum_taps distill_{t,tap}`.
/// `scale` carries balancer weights (missing entries mean 1).
pub fn combine(
    tape: &mut Tape,
    losses: &ForwardLosses,
    specs: &[TaskSpec],
    scale: &BTreeMap<String, f64>,
) -> Result<(Var, LossBreakdown)> {
    let mut terms = Vec::new();
    let mut breakdown = LossBreakdown::default();
    for spec in specs {
        let Some(&tl) = losses.task.get(&spec.id) else {
            continue;
        };
        let weight = scale.get(&spec.id).copied().unwrap_or(1.0) * spec.w;
        terms.push(tape.scale(tl, weight));
        breakdown.task_loss.insert(spec.id.clone(), tape.scalar(tl)?);
        if let Some(per_tap) = losses.distill.get(&spec.id) {
            let mut values = BTreeMap::new();
            for (&tap, &d) in per_tap {
                terms.push(tape.scale(d, spec.lambda));
                values.insert(tap, tape.scalar(d)?);
            }
            breakdown.distill_loss.insert(spec.id.clone(), values);
        }
    }
    if terms.is_empty() {
        return Err(Error::InvalidArgument("objective has no terms".into()));
    }
    let stacked = tape.stack(&terms)?;
    let total = tape.sum(stacked);
    breakdown.total = tape.scalar(total)?;
    Ok((total, breakdown))
}

/// Tasks that take part in distillation: those with `lambda > 0`.
pub fn distilled_tasks(specs: &[TaskSpec]) -> Vec<String> {
    specs.iter().filter(|s| s.lambda > 0.0).map(|s| s.id.clone()).collect()
}

/// Student objective: uniform task weighting plus distillation for every
/// task with `lambda > 0`.
pub fn total_objective(
    tape: &mut Tape,
    student: &BoundModel<'_>,
    teachers: Option<&Teachers>,
    batch: &ObjectiveBatch,
    taps: &[usize],
    specs: &[TaskSpec],
) -> Result<(Var, LossBreakdown)> {
    let losses = forward_losses(tape, student, teachers, batch, taps, &distilled_tasks(specs))?;
    combine(tape, &losses, specs, &BTreeMap::new())
}

/// Distillation terms alone, keyed by `(task, tap)`.
pub fn distillation_term(
    tape: &mut Tape,
    student: &BoundModel<'_>,
    teachers: &Teachers,
    batch: &ObjectiveBatch,
    taps: &[usize],
) -> Result<BTreeMap<(String, usize), Var>> {
    let tasks: Vec<String> = batch
        .groups
        .iter()
        .flat_map(|g| g.targets.iter().map(|(t, _)| t.clone()))
        .collect();
    for t in &tasks {
        if !teachers.contains_key(t) {
            return Err(Error::MissingTeacher(t.clone()));
        }
    }
    let losses = forward_losses(tape, student, Some(teachers), batch, taps, &tasks)?;
    Ok(losses
        .distill
        .into_iter()
        .flat_map(|(t, per)| per.into_iter().map(move |(tap, v)| ((t.clone(), tap), v)))
        .collect())
}
