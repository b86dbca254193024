//! Per-client adversarial novel-domain generation.
//!
//! Every mini-batch runs four steps in order: perturb the inputs with the
//! generator, update the generator to push student features of the perturbed
//! input away from teacher features of the clean input (capped at `m`) while
//! keeping the perturbed input classifiable, update the student to pull the
//! features back together, then move the teacher toward the student by EMA.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bench::Sample;
use crate::error::{check_dim, Error, Result};
use crate::losses::{self, CapM};
use crate::model::Networks;
use crate::params::{sgd_step, ParamVector, SgdConfig, SgdState};
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdagHyper {
    /// Perturbation intensity in `[0, 1]`.
    pub alpha: f64,
    pub m: CapM,
    /// Per-mini-batch teacher EMA decay in `[0, 1]`.
    pub ema_decay: f64,
    pub task_opt: SgdConfig,
    pub gen_opt: SgdConfig,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Inclusive per-coordinate input range used to clamp generated samples.
    pub input_range: (f64, f64),
}

impl NdagHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidArgument(format!(
                "ema_decay must lie in [0, 1], got {}",
                self.ema_decay
            )));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and local_epochs must be positive".into(),
            ));
        }
        let (lo, hi) = self.input_range;
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::InvalidArgument(format!("input range [{lo}, {hi}] is empty")));
        }
        self.task_opt.validate()?;
        self.gen_opt.validate()
    }
}

/// The three local models of a client plus optimizer state for the two
/// trainable ones.
#[derive(Clone, Debug)]
pub struct ClientModels {
    pub teacher: ParamVector,
    pub student: ParamVector,
    pub generator: ParamVector,
    pub student_opt: SgdState,
    pub gen_opt: SgdState,
}

impl ClientModels {
    pub fn new(task: ParamVector, generator: ParamVector) -> Self {
        ClientModels {
            teacher: task.clone(),
            student: task,
            generator,
            student_opt: SgdState::default(),
            gen_opt: SgdState::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
    Generator,
}

/// Gradients of one scalar objective. Roles that were not requested, or are
/// not on the computation path (the teacher always), are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub teacher: ParamVector,
    pub student: ParamVector,
    pub generator: ParamVector,
}

impl GradientSet {
    pub fn get(&self, role: Role) -> &ParamVector {
        match role {
            Role::Teacher => &self.teacher,
            Role::Student => &self.student,
            Role::Generator => &self.generator,
        }
    }
}

/// `clamp(x + alpha * G(x), lo, hi)`.
pub fn generate(
    nets: &Networks,
    gen_params: &ParamVector,
    x: &[f64],
    alpha: f64,
    range: (f64, f64),
) -> Result<Vec<f64>> {
    let delta = nets.gen.forward(gen_params, x)?;
    Ok(x.iter()
        .zip(&delta)
        .map(|(xi, di)| (xi + alpha * di).clamp(range.0, range.1))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `mean[L_cls(S(x_hat), y) - L_dis(T(x), S(x_hat))]`, minimized over the generator.
    Generator,
    /// `mean[(L_cls(S(x), y) + L_cls(S(x_hat), y)) / 2 + L_sim(T(x), S(x_hat))]`,
    /// minimized over the student. The student is supervised on both the
    /// original and the generated view; when the two coincide this is plain
    /// `L_cls + L_sim`.
    Student,
    /// `mean[L_cls(S(x), y)]`, plain classification of clean inputs.
    Classification,
}

#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub loss: f64,
    /// Batch-mean cross-entropy term.
    pub l_cls: f64,
    /// Batch-mean feature term: capped discrepancy for [`Objective::Generator`],
    /// similarity for [`Objective::Student`], zero otherwise.
    pub l_feat: f64,
    /// Batch-mean uncapped normalized distance over non-degenerate samples.
    pub raw_dist: f64,
    /// Samples whose feature term was skipped because of near-zero features.
    pub degenerate: usize,
    pub grads: GradientSet,
}

/// Evaluates an objective on a batch and its exact gradient for `wrt`.
///
/// `teacher_features[b]` must be the teacher's features of `batch[b].x`; they
/// are constants of the objective. Samples with degenerate features contribute
/// only their classification term.
pub fn evaluate_objective(
    nets: &Networks,
    models: &ClientModels,
    batch: &[&Sample],
    teacher_features: &[Vec<f64>],
    hyper: &NdagHyper,
    objective: Objective,
    wrt: &[Role],
) -> Result<ObjectiveEval> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_dim("teacher features", batch.len(), teacher_features.len())?;
    let want_student = wrt.contains(&Role::Student);
    let want_gen = wrt.contains(&Role::Generator) && objective != Objective::Classification;
    let mut g_student = vec![0.0; nets.task.n_params()];
    let mut g_gen = vec![0.0; nets.gen.n_params()];
    let inv_b = 1.0 / batch.len() as f64;
    let (lo, hi) = hyper.input_range;
    let (mut sum_cls, mut sum_feat, mut sum_raw) = (0.0, 0.0, 0.0);
    let mut degenerate = 0usize;

    for (sample, f_teacher) in batch.iter().zip(teacher_features) {
        let x = &sample.x;
        let (x_hat, gen_trace, inside) = if objective == Objective::Classification {
            (x.clone(), None, Vec::new())
        } else {
            let trace = nets.gen.forward_traced(&models.generator, x)?;
            let mut inside = Vec::with_capacity(x.len());
            let x_hat = x
                .iter()
                .zip(trace.output())
                .map(|(xi, di)| {
                    let v = xi + hyper.alpha * di;
                    inside.push(v >= lo && v <= hi);
                    v.clamp(lo, hi)
                })
                .collect::<Vec<_>>();
            (x_hat, Some(trace), inside)
        };

        let trace = nets.task.forward_traced(&models.student, &x_hat)?;
        let (l_cls, mut d_logits) = losses::loss_cls_grad(trace.logits(), sample.y)?;
        let two_views = objective == Objective::Student && x_hat != *x;
        let view_weight = if two_views { 0.5 } else { 1.0 };
        d_logits.iter_mut().for_each(|v| *v *= view_weight * inv_b);
        sum_cls += view_weight * l_cls;
        if two_views {
            let clean = nets.task.forward_traced(&models.student, x)?;
            let (l_clean, mut d_clean) = losses::loss_cls_grad(clean.logits(), sample.y)?;
            d_clean.iter_mut().for_each(|v| *v *= 0.5 * inv_b);
            sum_cls += 0.5 * l_clean;
            if want_student {
                nets.task.backward(
                    &models.student,
                    &clean,
                    None,
                    Some(&d_clean),
                    Some(g_student.as_mut_slice()),
                );
            }
        }

        let mut d_features: Option<Vec<f64>> = None;
        if objective != Objective::Classification {
            match losses::normalized_sq_dist_grad(f_teacher, trace.features()) {
                Ok(dist) => {
                    sum_raw += dist.value;
                    let (value, grad, sign) = match objective {
                        Objective::Generator if dist.value >= hyper.m.get() => (hyper.m.get(), None, -1.0),
                        Objective::Generator => (dist.value, Some(dist.d_f_hat), -1.0),
                        _ => (dist.value, Some(dist.d_f_hat), 1.0),
                    };
                    sum_feat += value;
                    d_features = grad.map(|g| g.into_iter().map(|v| sign * inv_b * v).collect());
                }
                Err(Error::DegenerateFeature { .. }) => degenerate += 1,
                Err(e) => return Err(e),
            }
        }

        if !(want_student || want_gen) {
            continue;
        }
        let d_x_hat = nets.task.backward(
            &models.student,
            &trace,
            d_features.as_deref(),
            Some(&d_logits),
            want_student.then_some(g_student.as_mut_slice()),
        );
        if want_gen {
            if let Some(gt) = gen_trace.as_ref() {
                // d x_hat / d delta = alpha inside the clamp range, 0 outside.
                let d_delta: Vec<f64> = d_x_hat
                    .iter()
                    .zip(&inside)
                    .map(|(&d, &ok)| if ok { hyper.alpha * d } else { 0.0 })
                    .collect();
                nets.gen.backward(&models.generator, gt, &d_delta, &mut g_gen);
            }
        }
    }

    let l_cls = sum_cls * inv_b;
    let l_feat = sum_feat * inv_b;
    let loss = match objective {
        Objective::Generator => l_cls - l_feat,
        Objective::Student => l_cls + l_feat,
        Objective::Classification => l_cls,
    };
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss in {objective:?} objective")));
    }
    let valid = batch.len() - degenerate;
    Ok(ObjectiveEval {
        loss,
        l_cls,
        l_feat,
        raw_dist: if valid > 0 { sum_raw / valid as f64 } else { 0.0 },
        degenerate,
        grads: GradientSet {
            teacher: ParamVector::zeros(nets.task.n_params()),
            student: ParamVector::new(g_student),
            generator: ParamVector::new(g_gen),
        },
    })
}

pub fn teacher_features(nets: &Networks, teacher: &ParamVector, batch: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    batch.iter().map(|s| nets.task.features(teacher, &s.x)).collect()
}

fn collapse_guard(eval: &ObjectiveEval, batch: usize) -> Result<()> {
    if eval.degenerate > 0 {
        log::warn!(
            "{} of {batch} samples produced near-zero features; feature term skipped",
            eval.degenerate
        );
    }
    if 2 * eval.degenerate > batch {
        return Err(Error::Collapse {
            degenerate: eval.degenerate,
            batch,
        });
    }
    Ok(())
}

/// One SGD step on the generator; teacher and student are untouched.
/// Returns the pre-step objective evaluation.
pub fn generator_step(
    nets: &Networks,
    models: &mut ClientModels,
    batch: &[&Sample],
    teacher_features: &[Vec<f64>],
    hyper: &NdagHyper,
) -> Result<ObjectiveEval> {
    let eval = evaluate_objective(
        nets,
        models,
        batch,
        teacher_features,
        hyper,
        Objective::Generator,
        &[Role::Generator],
    )?;
    collapse_guard(&eval, batch.len())?;
    sgd_step(
        &mut models.generator,
        &eval.grads.generator,
        &hyper.gen_opt,
        &mut models.gen_opt,
    )?;
    Ok(eval)
}

/// One SGD step on the student against inputs regenerated from the current
/// generator; generator and teacher are untouched.
pub fn student_step(
    nets: &Networks,
    models: &mut ClientModels,
    batch: &[&Sample],
    teacher_features: &[Vec<f64>],
    hyper: &NdagHyper,
) -> Result<ObjectiveEval> {
    let eval = evaluate_objective(
        nets,
        models,
        batch,
        teacher_features,
        hyper,
        Objective::Student,
        &[Role::Student],
    )?;
    collapse_guard(&eval, batch.len())?;
    sgd_step(
        &mut models.student,
        &eval.grads.student,
        &hyper.task_opt,
        &mut models.student_opt,
    )?;
    Ok(eval)
}

/// Plain cross-entropy step on clean inputs.
pub fn classification_step(
    nets: &Networks,
    models: &mut ClientModels,
    batch: &[&Sample],
    hyper: &NdagHyper,
) -> Result<ObjectiveEval> {
    let placeholders = vec![Vec::new(); batch.len()];
    let eval = evaluate_objective(
        nets,
        models,
        batch,
        &placeholders,
        hyper,
        Objective::Classification,
        &[Role::Student],
    )?;
    sgd_step(
        &mut models.student,
        &eval.grads.student,
        &hyper.task_opt,
        &mut models.student_opt,
    )?;
    Ok(eval)
}

/// `decay * teacher + (1 - decay) * student`.
pub fn ema_update(teacher: &ParamVector, student: &ParamVector, decay: f64) -> Result<ParamVector> {
    check_dim("ema_update", teacher.dim(), student.dim())?;
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!(
            "ema decay must lie in [0, 1], got {decay}"
        )));
    }
    Ok(ParamVector::new(
        teacher
            .as_slice()
            .iter()
            .zip(student.as_slice())
            .map(|(t, s)| decay * t + (1.0 - decay) * s)
            .collect(),
    ))
}

/// Per-batch loss record. Terms that a mode does not compute are `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchTrace {
    pub batch: usize,
    pub l_cls_g: Option<f64>,
    pub l_dis: Option<f64>,
    pub l_cls_s: f64,
    pub l_sim: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ClientRoundOutput {
    /// Student gradient of the final mini-batch (pre-step), used for
    /// sharpness-aware scoring.
    pub last_batch_grad: ParamVector,
    pub trace: Vec<BatchTrace>,
    pub degenerate_samples: usize,
}

/// Shuffled mini-batch index lists for one local epoch.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, &[rng::TAG_BATCHES, epoch as u64]));
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Local training of one client for one communication round.
///
/// With `ndag_enabled` each mini-batch runs generate, generator step, student
/// step and EMA; the teacher and generator in `models` are the upload.
/// Without it the student is trained on plain cross-entropy and copied into
/// the teacher slot at the end; the generator is left untouched.
pub fn client_round(
    nets: &Networks,
    models: &mut ClientModels,
    data: &[Sample],
    hyper: &NdagHyper,
    ndag_enabled: bool,
    seed: u64,
) -> Result<ClientRoundOutput> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("client has no training data".into()));
    }
    let mut trace = Vec::new();
    let mut last_grad = ParamVector::zeros(nets.task.n_params());
    let mut degenerate_samples = 0;
    let mut batch_no = 0;
    for epoch in 0..hyper.local_epochs {
        for indices in batch_order(data.len(), hyper.batch_size, seed, epoch) {
            let batch: Vec<&Sample> = indices.iter().map(|&i| &data[i]).collect();
            if ndag_enabled {
                let f_teacher = teacher_features(nets, &models.teacher, &batch)?;
                let g = generator_step(nets, models, &batch, &f_teacher, hyper)?;
                let s = student_step(nets, models, &batch, &f_teacher, hyper)?;
                models.teacher = ema_update(&models.teacher, &models.student, hyper.ema_decay)?;
                degenerate_samples += g.degenerate + s.degenerate;
                trace.push(BatchTrace {
                    batch: batch_no,
                    l_cls_g: Some(g.l_cls),
                    l_dis: Some(g.l_feat),
                    l_cls_s: s.l_cls,
                    l_sim: Some(s.l_feat),
                });
                last_grad = s.grads.student;
            } else {
                let s = classification_step(nets, models, &batch, hyper)?;
                trace.push(BatchTrace {
                    batch: batch_no,
                    l_cls_g: None,
                    l_dis: None,
                    l_cls_s: s.l_cls,
                    l_sim: None,
                });
                last_grad = s.grads.student;
            }
            batch_no += 1;
        }
    }
    if !ndag_enabled {
        models.teacher = models.student.clone();
    }
    Ok(ClientRoundOutput {
        last_batch_grad: last_grad,
        trace,
        degenerate_samples,
    })
}
