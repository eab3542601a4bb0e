//! Losses and the optimizer loop.
//!
//! Incremental steps train on a compound objective: `(1 - lambda) * CE`
//! over all current classes plus `lambda * KD`, where KD distills the
//! previous (already shift-corrected) model over the old-class slice of the
//! logits, both sides tempered by the same temperature. `lambda` grows with
//! the old-class fraction, so distillation dominates as the stream gets
//! longer, and the per-step weight decay follows a geometric schedule.
//!
//! The update rule is `v <- momentum * v + g`, then
//! `theta <- theta - lr * (v + r * theta)`; the decay term `r * theta`
//! skips bias parameters. Plain SGD is the momentum 0 case and an
//! adaptive-moment optimizer is available as an alternative.

use crate::aligning::{apply_shifts, ShiftVector};
use crate::data::LabeledDataset;
use crate::model::{Gradients, MlpClassifier};
use crate::numerics::{log_sum_exp, softmax};
use crate::{derive_seed, Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) const SHUFFLE_STREAM: u64 = 0x7368_7566; // "shuf"

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    /// Multiply by `factor` at every milestone epoch (absolute indices).
    Step { milestones: Vec<usize>, factor: f64 },
    /// Half-cosine decay from the base rate toward zero.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer and loop settings. `momentum` only applies to [`OptimizerKind::Sgd`];
/// `temperature` only matters when distilling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            schedule: LrSchedule::Cosine,
            warmup_epochs: 0,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 30,
            temperature: 2.0,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epochs must be positive".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let LrSchedule::Step { factor, .. } = self.schedule {
            if !(factor.is_finite() && factor > 0.0) {
                return Err(Error::Config(format!(
                    "step-decay factor must be positive, got {factor}"
                )));
            }
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup epochs {} exceed total epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }

    /// Learning rate for a 0-indexed epoch: linear warm-up, then the chosen
    /// decay over the remaining epochs.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.learning_rate * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        match &self.schedule {
            LrSchedule::Step { milestones, factor } => {
                let hits = milestones.iter().filter(|&&m| m <= epoch).count();
                self.learning_rate * factor.powi(hits as i32)
            }
            LrSchedule::Cosine => {
                let span = (self.epochs - self.warmup_epochs) as f64;
                let t = (epoch - self.warmup_epochs) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t / span).cos())
            }
        }
    }
}

/// Distillation mixing weight: `lambda_base * c_old / (c_old + c_new)`.
pub fn lambda_weight(lambda_base: f64, c_old: usize, c_new: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda_base) {
        return Err(Error::Config(format!(
            "lambda base must be in [0, 1], got {lambda_base}"
        )));
    }
    if c_new == 0 {
        return Err(Error::Config("a step must introduce new classes".into()));
    }
    Ok(lambda_base * c_old as f64 / (c_old + c_new) as f64)
}

/// Geometric weight-decay schedule for 1-indexed step `b`:
/// `r_base * eta^(b-1)`.
pub fn step_weight_decay(r_base: f64, eta: f64, step: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("steps are 1-indexed".into()));
    }
    if !(r_base.is_finite() && r_base >= 0.0) || !(eta.is_finite() && eta > 0.0) {
        return Err(Error::Config(format!(
            "bad weight-decay schedule: base {r_base}, eta {eta}"
        )));
    }
    Ok(r_base * eta.powi(step as i32 - 1))
}

/// Cross entropy of one logit row; returns the loss and its gradient with
/// respect to the logits (`softmax - onehot`).
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::IndexOutOfRange {
            context: "cross_entropy label",
            index: label,
            len: logits.len(),
        });
    }
    let lse = log_sum_exp(logits)?;
    let loss = lse - logits[label];
    let mut grad = softmax(logits)?;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Tempered distillation over the old-class logit slice:
/// `sum_i -qhat(i) log q(i)` with `qhat = softmax(teacher / T)` and
/// `q = softmax(student / T)`. Returns the loss and its gradient with
/// respect to the student slice, `(q - qhat) / T`. Empty slices are a
/// no-op (first step).
pub fn kd_loss(
    student_old: &[f64],
    teacher_corrected_old: &[f64],
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    if student_old.len() != teacher_corrected_old.len() {
        return Err(Error::LengthMismatch {
            context: "kd_loss slices",
            expected: teacher_corrected_old.len(),
            got: student_old.len(),
        });
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if student_old.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let t_student: Vec<f64> = student_old.iter().map(|v| v / temperature).collect();
    let t_teacher: Vec<f64> = teacher_corrected_old.iter().map(|v| v / temperature).collect();
    let q_hat = softmax(&t_teacher)?;
    let q = softmax(&t_student)?;
    let lse_student = log_sum_exp(&t_student)?;
    let loss: f64 = q_hat
        .iter()
        .zip(&t_student)
        .map(|(qh, s)| -qh * (s - lse_student))
        .sum();
    let grad = q
        .iter()
        .zip(&q_hat)
        .map(|(qi, qh)| (qi - qh) / temperature)
        .collect();
    Ok((loss, grad))
}

/// Loss and logit gradient of the compound objective
/// `(1 - lambda) * CE + lambda * KD` for one sample. The teacher slice is
/// already shift-corrected; its length tells which prefix of the student
/// logits is "old".
pub fn compound_logit_loss(
    student_logits: &[f64],
    teacher_corrected_old: &[f64],
    label: usize,
    lambda: f64,
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    let c_old = teacher_corrected_old.len();
    if c_old > student_logits.len() {
        return Err(Error::LengthMismatch {
            context: "compound loss old slice",
            expected: student_logits.len(),
            got: c_old,
        });
    }
    let (ce, ce_grad) = cross_entropy(student_logits, label)?;
    let (kd, kd_grad) = kd_loss(&student_logits[..c_old], teacher_corrected_old, temperature)?;
    let loss = (1.0 - lambda) * ce + lambda * kd;
    let grad = ce_grad
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let kd_part = if i < c_old { kd_grad[i] } else { 0.0 };
            (1.0 - lambda) * g + lambda * kd_part
        })
        .collect();
    Ok((loss, grad))
}

/// Previous-step model plus its shift correction and mixing weight.
#[derive(Debug, Clone)]
pub struct DistillTarget<'a> {
    pub teacher: &'a MlpClassifier,
    pub shifts: &'a ShiftVector,
    pub lambda: f64,
}

impl DistillTarget<'_> {
    /// Corrected teacher logits for one input.
    pub fn corrected_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        apply_shifts(&self.teacher.forward(x)?, self.shifts)
    }
}

/// Compound loss and full parameter gradients for one sample; the
/// finite-difference reference for this lives in the test suites.
pub fn compound_loss(
    student: &MlpClassifier,
    x: &[f64],
    label: usize,
    distill: &DistillTarget,
    temperature: f64,
) -> Result<(f64, Gradients)> {
    let student_logits = student.forward(x)?;
    let teacher_logits = distill.corrected_logits(x)?;
    let (loss, dlogits) = compound_logit_loss(
        &student_logits,
        &teacher_logits,
        label,
        distill.lambda,
        temperature,
    )?;
    let mut grads = student.zero_gradients();
    student.accumulate_backward(x, &dlogits, &mut grads)?;
    Ok((loss, grads))
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
}

struct OptState {
    velocity: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

fn apply_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptState,
    cfg: &SgdConfig,
    lr: f64,
    bias_mask: &[bool],
) {
    state.step += 1;
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for i in 0..params.len() {
                state.velocity[i] = cfg.momentum * state.velocity[i] + grads[i];
                let decay = if bias_mask[i] { 0.0 } else { cfg.weight_decay * params[i] };
                params[i] -= lr * (state.velocity[i] + decay);
            }
        }
        OptimizerKind::Adam => {
            const BETA1: f64 = 0.9;
            const BETA2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            let t = state.step as i32;
            for i in 0..params.len() {
                state.velocity[i] = BETA1 * state.velocity[i] + (1.0 - BETA1) * grads[i];
                state.second[i] = BETA2 * state.second[i] + (1.0 - BETA2) * grads[i] * grads[i];
                let m_hat = state.velocity[i] / (1.0 - BETA1.powi(t));
                let v_hat = state.second[i] / (1.0 - BETA2.powi(t));
                let decay = if bias_mask[i] { 0.0 } else { cfg.weight_decay * params[i] };
                params[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + decay);
            }
        }
    }
}

/// Mini-batch training with a seeded shuffle each epoch. With `distill`,
/// every sample is scored by the compound loss against the corrected
/// teacher; otherwise plain cross entropy. A non-finite loss aborts.
pub fn train(
    model: &mut MlpClassifier,
    data: &LabeledDataset,
    cfg: &SgdConfig,
    distill: Option<&DistillTarget>,
) -> Result<Vec<EpochStat>> {
    cfg.validate()?;
    if data.feature_dim() != model.input_dim() {
        return Err(Error::LengthMismatch {
            context: "train feature dim",
            expected: model.input_dim(),
            got: data.feature_dim(),
        });
    }
    if data.class_count() > model.class_count() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model only {}",
            data.class_count(),
            model.class_count()
        )));
    }
    if let Some(d) = distill {
        if d.teacher.class_count() > model.class_count() {
            return Err(Error::Config(format!(
                "teacher has {} classes but the student only {}",
                d.teacher.class_count(),
                model.class_count()
            )));
        }
        if d.shifts.class_count() != d.teacher.class_count() {
            return Err(Error::LengthMismatch {
                context: "teacher shift vector",
                expected: d.teacher.class_count(),
                got: d.shifts.class_count(),
            });
        }
        if !(0.0..=1.0).contains(&d.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1], got {}",
                d.lambda
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut params = model.flatten_params();
    let bias_mask = model.bias_mask();
    let mut state = OptState {
        velocity: vec![0.0; params.len()],
        second: vec![0.0; params.len()],
        step: 0,
    };
    let mut grads = model.zero_gradients();
    let mut stats = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in indices.chunks(cfg.batch_size) {
            grads.zero();
            let mut batch_loss = 0.0;
            for &i in batch {
                let x = data.feature_row(i);
                let label = data.labels()[i];
                let logits = model.forward(x)?;
                if logits.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                    });
                }
                let (loss, dlogits) = match distill {
                    Some(d) => {
                        let teacher_logits = d.corrected_logits(x)?;
                        compound_logit_loss(
                            &logits,
                            &teacher_logits,
                            label,
                            d.lambda,
                            cfg.temperature,
                        )?
                    }
                    None => cross_entropy(&logits, label)?,
                };
                model.accumulate_backward(x, &dlogits, &mut grads)?;
                batch_loss += loss;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            grads.scale(1.0 / batch.len() as f64);
            apply_update(&mut params, &grads.flatten(), &mut state, cfg, lr, &bias_mask);
            model.load_flat_params(&params)?;
        }
        stats.push(EpochStat {
            epoch,
            loss: epoch_loss / data.len() as f64,
        });
    }
    Ok(stats)
}
