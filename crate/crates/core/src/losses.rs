//! Cross-entropy, intermediate feature matching, ensemble distillation and
//! their weighted combination.
//!
//! All per-sample terms are averaged over the batch and summed over
//! students. Distillation targets (the pseudo teacher's feature maps, the
//! ensemble teacher's distribution) are detached from the graph.

use crate::ensemble::{EnsembleModel, EnsembleOutput, TAPS};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    /// Let gradients flow from the KD term through the teacher average.
    pub kd_teacher_grad: bool,
    /// Multiply the KD term by `T²`.
    pub kd_t2_scale: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.7,
            beta: 0.15,
            gamma: 0.15,
            temperature: 2.0,
            kd_teacher_grad: false,
            kd_t2_scale: false,
        }
    }
}

impl LossWeights {
    /// Cross-entropy only: the independently trained baseline.
    pub fn baseline() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and non-negative, got {w:?}")));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "loss weights must sum to 1, got {}",
                w.iter().sum::<f64>()
            )));
        }
        if !(self.temperature >= 1.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be >= 1, got {}", self.temperature)));
        }
        Ok(())
    }

    /// Multiplier actually applied to the KD component.
    pub fn kd_factor(&self) -> f64 {
        if self.kd_t2_scale {
            self.gamma * self.temperature * self.temperature
        } else {
            self.gamma
        }
    }
}

/// Scalar loss tensors for one batch.
#[derive(Debug, Clone)]
pub struct LossBundle<T: Element> {
    pub normal: Tensor<T>,
    pub intermediate: Tensor<T>,
    pub kd: Tensor<T>,
    pub combined: Tensor<T>,
    pub per_student_ce: Vec<f64>,
    /// `α·normal + γ·kd`, the part allowed to reach the base block.
    direct: Tensor<T>,
    /// `β·intermediate`, kept away from the base block.
    hint: Tensor<T>,
}

/// Plain-number view of a [`LossBundle`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub normal: f64,
    pub intermediate: f64,
    pub kd: f64,
    pub combined: f64,
}

impl<T: Element> LossBundle<T> {
    /// Backpropagates the combined loss for a forward pass `out`.
    ///
    /// Branch and adaptation parameters receive the gradient of the full
    /// combined loss. The shared base receives only the cross-entropy and
    /// distillation parts: it belongs to the pseudo teacher, which the
    /// intermediate loss must not update.
    pub fn backward(&self, out: &EnsembleOutput<T>) -> Result<()> {
        self.hint.backward()?;
        if let Some(proxy) = &out.base_proxy {
            proxy.zero_grad();
        }
        self.direct.backward()?;
        out.propagate_to_base()
    }

    pub fn values(&self) -> LossValues {
        LossValues {
            normal: self.normal.item().to_f64(),
            intermediate: self.intermediate.item().to_f64(),
            kd: self.kd.item().to_f64(),
            combined: self.combined.item().to_f64(),
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

/// `log softmax(logits / T)` row-wise.
pub fn softened_log_softmax<T: Element>(logits: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_temperature(t)?;
    logits.scale(T::from_f64(1.0 / t)).log_softmax()
}

/// `softmax(logits / T)` row-wise, computed through the log domain.
pub fn softened_softmax<T: Element>(logits: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    Ok(softened_log_softmax(logits, t)?.exp())
}

/// Mean negative log-likelihood of `labels` under one student's logits.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    Ok(logits.log_softmax()?.gather(labels)?.mean().neg())
}

/// Sum over students of the batch-mean cross-entropy. Also returns each
/// student's term.
pub fn cross_entropy_all<T: Element>(logits: &[Tensor<T>], labels: &[usize]) -> Result<(Tensor<T>, Vec<f64>)> {
    let mut total: Option<Tensor<T>> = None;
    let mut each = Vec::with_capacity(logits.len());
    for l in logits {
        let ce = cross_entropy(l, labels)?;
        each.push(ce.item().to_f64());
        total = Some(match total {
            Some(acc) => acc.add(&ce)?,
            None => ce,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no student logits".into()))?;
    Ok((total, each))
}

/// Element-mean squared error between an adapted student map and a target
/// map. The target is used as given; detach it first if needed.
pub fn feature_mse<T: Element>(adapted: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if adapted.shape() != target.shape() {
        return Err(Error::shape("intermediate loss", adapted.shape(), target.shape()));
    }
    Ok(adapted.sub(target)?.square().mean())
}

/// Feature-matching loss summed over students `2..S` and the three tap
/// locations. `teacher_taps` are the (detached) pseudo-teacher maps.
pub fn intermediate_loss<T: Element>(
    model: &EnsembleModel<T>,
    student_taps: &[[Tensor<T>; TAPS]],
    teacher_taps: &[Tensor<T>; TAPS],
) -> Result<Tensor<T>> {
    if student_taps.len() != model.adaptation.len() {
        return Err(Error::InvalidArgument(format!(
            "{} student tap sets for {} adaptation sets",
            student_taps.len(),
            model.adaptation.len()
        )));
    }
    let mut total = Tensor::scalar(T::zero());
    for (taps, layers) in student_taps.iter().zip(&model.adaptation) {
        for b in 0..TAPS {
            let adapted = layers[b].adapt_channels(&taps[b])?;
            total = total.add(&feature_mse(&adapted, &teacher_taps[b])?)?;
        }
    }
    Ok(total)
}

/// `Σ_i mean_j KL(teacher_j ‖ student_ij)` with both sides softened at `T`.
///
/// The teacher is detached unless `teacher_grad` is set.
pub fn kd_loss<T: Element>(
    student_logits: &[Tensor<T>],
    teacher_logits: &Tensor<T>,
    t: f64,
    teacher_grad: bool,
) -> Result<Tensor<T>> {
    let mut log_p = softened_log_softmax(teacher_logits, t)?;
    if !teacher_grad {
        log_p = log_p.stop_gradient();
    }
    let p = log_p.exp();
    let n = teacher_logits.shape()[0];
    let inv_n = T::one() / T::from_usize(n.max(1));
    let mut total = Tensor::scalar(T::zero());
    for s in student_logits {
        if s.shape() != teacher_logits.shape() {
            return Err(Error::shape("kd_loss", s.shape(), teacher_logits.shape()));
        }
        let log_q = softened_log_softmax(s, t)?;
        let kl = p.mul(&log_p.sub(&log_q)?)?.sum().scale(inv_n);
        total = total.add(&kl)?;
    }
    Ok(total)
}

/// `α·normal + β·intermediate + γ·kd` (γ·T² with `kd_t2_scale`).
pub fn combine<T: Element>(
    normal: &Tensor<T>,
    intermediate: &Tensor<T>,
    kd: &Tensor<T>,
    w: &LossWeights,
) -> Result<Tensor<T>> {
    let (direct, hint) = split_combine(normal, intermediate, kd, w)?;
    direct.add(&hint)
}

fn split_combine<T: Element>(
    normal: &Tensor<T>,
    intermediate: &Tensor<T>,
    kd: &Tensor<T>,
    w: &LossWeights,
) -> Result<(Tensor<T>, Tensor<T>)> {
    w.validate()?;
    let direct = normal
        .scale(T::from_f64(w.alpha))
        .add(&kd.scale(T::from_f64(w.kd_factor())))?;
    Ok((direct, intermediate.scale(T::from_f64(w.beta))))
}

/// Detached quantities captured from one forward pass: the distillation
/// targets, and the base output as seen by the intermediate loss.
///
/// Normally these come from the same pass as the predictions. Finite
/// difference checks capture them once and hold them fixed while
/// parameters are perturbed; the resulting function is exactly the one
/// whose gradient [`LossBundle::backward`] computes.
#[derive(Debug, Clone)]
pub struct DistillTargets<T: Element> {
    pub teacher_logits: Tensor<T>,
    pub teacher_taps: [Tensor<T>; TAPS],
    pub base_features: Tensor<T>,
}

impl<T: Element> DistillTargets<T> {
    pub fn capture(out: &EnsembleOutput<T>) -> Self {
        DistillTargets {
            teacher_logits: out.teacher_logits.stop_gradient(),
            teacher_taps: out.taps[0].clone().map(|t| t.stop_gradient()),
            base_features: out.base.stop_gradient(),
        }
    }
}

/// Assembles every loss component for one forward pass.
///
/// A zero `beta` skips the adaptation layers entirely and reports an
/// intermediate loss of 0; a one-student model has neither an
/// intermediate nor a distillation term.
pub fn ensemble_loss<T: Element>(
    model: &EnsembleModel<T>,
    out: &EnsembleOutput<T>,
    labels: &[usize],
    w: &LossWeights,
    frozen: Option<&DistillTargets<T>>,
) -> Result<LossBundle<T>> {
    w.validate()?;
    let (normal, per_student_ce) = cross_entropy_all(&out.logits, labels)?;
    let captured;
    let targets = match frozen {
        Some(f) => f,
        None => {
            captured = DistillTargets::capture(out);
            &captured
        }
    };
    let intermediate = if w.beta > 0.0 && out.logits.len() > 1 {
        match frozen {
            None => intermediate_loss(model, &out.taps[1..], &targets.teacher_taps)?,
            Some(f) => {
                let taps = model.students[1..]
                    .iter()
                    .map(|s| Ok(s.forward(&f.base_features)?.0))
                    .collect::<Result<Vec<_>>>()?;
                intermediate_loss(model, &taps, &targets.teacher_taps)?
            }
        }
    } else {
        Tensor::scalar(T::zero())
    };
    let kd = if out.logits.len() > 1 {
        let teacher = if w.kd_teacher_grad {
            &out.teacher_logits
        } else {
            &targets.teacher_logits
        };
        kd_loss(&out.logits, teacher, w.temperature, w.kd_teacher_grad)?
    } else {
        Tensor::scalar(T::zero())
    };
    let (direct, hint) = split_combine(&normal, &intermediate, &kd, w)?;
    Ok(LossBundle {
        combined: direct.add(&hint)?,
        normal,
        intermediate,
        kd,
        per_student_ce,
        direct,
        hint,
    })
}
