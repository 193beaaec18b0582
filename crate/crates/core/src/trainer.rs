//! Joint SGD training of an ensemble with the step learning-rate schedule.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use crate::data::{DatasetBundle, SplitKind};
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::layers::Param;
use crate::losses::{ensemble_loss, LossValues, LossWeights};
use crate::tensor::{no_grad, Element};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// All loss terms; students distil from each other.
    Ensemble,
    /// Cross-entropy only.
    Baseline,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Ensemble => "ensemble",
            TrainMode::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// `(fraction of training, multiplier of base_lr)`, fractions strictly
    /// increasing in `(0, 1)`.
    pub lr_drops: Vec<(f64, f64)>,
    pub weights: LossWeights,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            base_lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            lr_drops: vec![(0.5, 0.1), (0.75, 0.01)],
            weights: LossWeights::default(),
            seed: 0,
            mode: TrainMode::Ensemble,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        let mut prev = 0.0;
        for &(frac, mult) in &self.lr_drops {
            if !(frac > prev && frac < 1.0) {
                return bad(format!("lr drop fractions must be strictly increasing in (0, 1), got {frac}"));
            }
            if !(mult > 0.0 && mult.is_finite()) {
                return bad(format!("lr multiplier must be positive, got {mult}"));
            }
            prev = frac;
        }
        self.weights.validate()
    }

    /// Loss weights actually used: baseline mode zeroes β and γ.
    pub fn effective_weights(&self) -> LossWeights {
        match self.mode {
            TrainMode::Ensemble => self.weights,
            TrainMode::Baseline => LossWeights {
                temperature: self.weights.temperature,
                ..LossWeights::baseline()
            },
        }
    }
}

/// Learning rate during `epoch` (0-based): `base_lr` times the multiplier
/// of the last drop point with `epoch ≥ fraction · epochs`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside a {}-epoch schedule",
            config.epochs
        )));
    }
    let e = epoch as f64;
    let mult = config
        .lr_drops
        .iter().rfind(|(frac, _)| e >= frac * config.epochs as f64)
        .map_or(1.0, |&(_, m)| m);
    Ok(config.base_lr * mult)
}

/// One SGD update with (optionally Nesterov) momentum, then clears the
/// gradients:
///
/// `v ← μ·v + g`, `p ← p − lr·(g + μ·v)` (Nesterov) or `p ← p − lr·v`.
///
/// Parameters without a gradient are treated as having a zero gradient.
/// Nothing is modified if any gradient or resulting update is non-finite.
pub fn sgd_step<T: Element>(params: &[Param<T>], velocity: &mut [Vec<T>], lr: f64, momentum: f64, nesterov: bool) -> Result<()> {
    if params.len() != velocity.len() {
        return Err(Error::InvalidArgument(format!(
            "{} velocity buffers for {} parameters",
            velocity.len(),
            params.len()
        )));
    }
    for (p, v) in params.iter().zip(velocity.iter()) {
        if v.len() != p.tensor.numel() {
            return Err(Error::shape("sgd velocity", &[v.len()], p.tensor.shape()));
        }
        if let Some(g) = p.tensor.grad_ref().as_ref() {
            if g.len() != v.len() {
                return Err(Error::shape("sgd gradient", &[g.len()], p.tensor.shape()));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite gradient in {}[{i}]", p.name)));
            }
        }
    }
    let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
    let mut updates = Vec::with_capacity(params.len());
    for (p, v) in params.iter().zip(velocity.iter()) {
        let grad = p.tensor.grad_ref();
        let g = |i: usize| grad.as_ref().map_or(T::zero(), |g| g[i]);
        let mut nv = Vec::with_capacity(v.len());
        let mut step = Vec::with_capacity(v.len());
        for (i, &vi) in v.iter().enumerate() {
            let vel = mu * vi + g(i);
            let u = if nesterov { g(i) + mu * vel } else { vel };
            nv.push(vel);
            step.push(lr * u);
        }
        if let Some(i) = step.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite update in {}[{i}]", p.name)));
        }
        updates.push((nv, step));
    }
    for ((p, v), (nv, step)) in params.iter().zip(velocity.iter_mut()).zip(updates) {
        *v = nv;
        p.tensor.data_mut().iter_mut().zip(&step).for_each(|(x, s)| *x = *x - *s);
        p.tensor.zero_grad();
    }
    Ok(())
}

/// Everything besides the parameters needed to continue training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState<T: Element> {
    pub step: u64,
    pub epoch: usize,
    /// Batches of the current epoch already applied.
    pub batch_in_epoch: usize,
    /// Aligned with the model's parameter order.
    pub velocity: Vec<Vec<T>>,
    pub best_student: Vec<f64>,
    pub best_teacher: f64,
    /// Sums of per-batch loss values over the current epoch.
    pub running: LossValues,
}

impl<T: Element> TrainingState<T> {
    pub fn new(params: &[Param<T>], students: usize) -> Self {
        TrainingState {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            velocity: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            best_student: vec![0.0; students],
            best_teacher: 0.0,
            running: LossValues::default(),
        }
    }
}

/// One row of the metrics history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-averaged loss components.
    pub losses: LossValues,
    pub test: Metrics,
}

pub const METRICS_SCHEMA: &str = "# kdc-metrics v1";

pub fn metrics_header(students: usize) -> String {
    let mut h = String::from("epoch,lr,normal,intermediate,kd,combined");
    for i in 1..=students {
        let _ = write!(h, ",student{i}_acc");
    }
    h.push_str(",teacher_acc");
    h
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let mut row = format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr, l.normal, l.intermediate, l.kd, l.combined
        );
        for a in &self.test.per_student_top1 {
            let _ = write!(row, ",{a}");
        }
        let _ = write!(row, ",{}", self.test.teacher_top1);
        row
    }
}

/// Full metrics CSV text: schema line, header, one row per record.
pub fn metrics_csv(students: usize, records: &[EpochRecord]) -> String {
    let mut out = format!("{METRICS_SCHEMA}\n{}\n", metrics_header(students));
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Appends rows to a metrics file, writing the schema line and header
/// first if the file is new or empty.
pub fn append_metrics(path: &Path, students: usize, records: &[EpochRecord]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{METRICS_SCHEMA}\n{}", metrics_header(students))?;
    }
    for r in records {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Drives training of one model on one dataset.
pub struct Trainer<'a, T: Element> {
    pub model: EnsembleModel<T>,
    pub config: TrainConfig,
    pub data: &'a DatasetBundle,
    pub state: TrainingState<T>,
    pub history: Vec<EpochRecord>,
    params: Vec<Param<T>>,
    weights: LossWeights,
}

impl<'a, T: Element> Trainer<'a, T> {
    pub fn new(model: EnsembleModel<T>, config: TrainConfig, data: &'a DatasetBundle) -> Result<Self> {
        config.validate()?;
        if data.num_classes != model.spec.num_classes {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} classes, model expects {}",
                data.num_classes, model.spec.num_classes
            )));
        }
        if data.image_shape() != model.spec.input_shape {
            return Err(Error::InvalidArgument(format!(
                "dataset images are {:?}, model expects {:?}",
                data.image_shape(),
                model.spec.input_shape
            )));
        }
        let params = model.parameters();
        let state = TrainingState::new(&params, model.num_students());
        let weights = config.effective_weights();
        Ok(Trainer {
            model,
            config,
            data,
            state,
            history: Vec::new(),
            params,
            weights,
        })
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.train.len().div_ceil(self.config.batch_size)
    }

    /// Replaces the state, e.g. after restoring a checkpoint.
    pub fn set_state(&mut self, state: TrainingState<T>) -> Result<()> {
        if state.velocity.len() != self.params.len()
            || state.velocity.iter().zip(&self.params).any(|(v, p)| v.len() != p.tensor.numel())
            || state.best_student.len() != self.model.num_students()
        {
            return Err(Error::InvalidArgument("training state does not match the model".into()));
        }
        self.state = state;
        Ok(())
    }

    /// Applies one mini-batch update. Returns the epoch record when the
    /// batch completed an epoch.
    pub fn step(&mut self) -> Result<Option<EpochRecord>> {
        if self.is_finished() {
            return Err(Error::InvalidArgument("training already finished".into()));
        }
        let epoch = self.state.epoch;
        let lr = lr_at(&self.config, epoch)?;
        let mut batches = self
            .data
            .batches::<T>(SplitKind::Train, self.config.batch_size, Some((self.config.seed, epoch as u64)));
        batches.skip_batches(self.state.batch_in_epoch);
        let batch = batches.next().expect("batch_in_epoch stays below the batch count");
        let out = self.model.forward(&batch.images)?;
        let bundle = ensemble_loss(&self.model, &out, &batch.labels, &self.weights, None)?;
        let values = bundle.values();
        let step_no = self.state.step;
        let diverged = |detail: String| Error::Divergence {
            epoch,
            step: step_no,
            detail,
        };
        if !values.combined.is_finite() {
            return Err(diverged(format!("combined loss is {}", values.combined)));
        }
        bundle.backward(&out)?;
        drop(bundle);
        drop(out);
        sgd_step(&self.params, &mut self.state.velocity, lr, self.config.momentum, self.config.nesterov).map_err(|e| diverged(e.to_string()))?;

        let r = &mut self.state.running;
        r.normal += values.normal;
        r.intermediate += values.intermediate;
        r.kd += values.kd;
        r.combined += values.combined;
        self.state.step += 1;
        self.state.batch_in_epoch += 1;
        if self.state.batch_in_epoch < self.batches_per_epoch() {
            return Ok(None);
        }
        Ok(Some(self.finish_epoch(lr)?))
    }

    fn finish_epoch(&mut self, lr: f64) -> Result<EpochRecord> {
        let test = evaluate(&self.model, self.data, SplitKind::Test, self.config.batch_size)?;
        let n = self.state.batch_in_epoch.max(1) as f64;
        let r = self.state.running;
        let record = EpochRecord {
            epoch: self.state.epoch,
            lr,
            losses: LossValues {
                normal: r.normal / n,
                intermediate: r.intermediate / n,
                kd: r.kd / n,
                combined: r.combined / n,
            },
            test,
        };
        for (best, &acc) in self.state.best_student.iter_mut().zip(&record.test.per_student_top1) {
            *best = best.max(acc);
        }
        self.state.best_teacher = self.state.best_teacher.max(record.test.teacher_top1);
        self.state.epoch += 1;
        self.state.batch_in_epoch = 0;
        self.state.running = LossValues::default();
        self.history.push(record.clone());
        Ok(record)
    }

    /// Runs until the current epoch completes.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        loop {
            if let Some(r) = self.step()? {
                return Ok(r);
            }
        }
    }

    /// Runs all remaining epochs, calling `on_epoch` after each.
    pub fn run<F: FnMut(&Self, &EpochRecord) -> Result<()>>(&mut self, mut on_epoch: F) -> Result<()> {
        while !self.is_finished() {
            let record = self.run_epoch()?;
            on_epoch(self, &record)?;
        }
        Ok(())
    }

    /// Mean loss components over the whole train split at the current
    /// parameters, without recording a graph.
    pub fn train_loss(&self) -> Result<LossValues> {
        let _guard = no_grad();
        let mut sum = LossValues::default();
        let mut count = 0usize;
        for batch in self.data.batches::<T>(SplitKind::Train, self.config.batch_size, None) {
            let out = self.model.forward(&batch.images)?;
            let v = ensemble_loss(&self.model, &out, &batch.labels, &self.weights, None)?.values();
            let k = batch.labels.len() as f64;
            sum.normal += v.normal * k;
            sum.intermediate += v.intermediate * k;
            sum.kd += v.kd * k;
            sum.combined += v.combined * k;
            count += batch.labels.len();
        }
        let n = count.max(1) as f64;
        Ok(LossValues {
            normal: sum.normal / n,
            intermediate: sum.intermediate / n,
            kd: sum.kd / n,
            combined: sum.combined / n,
        })
    }
}
