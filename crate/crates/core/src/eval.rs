//! Accuracy metrics, model-size accounting, Grad-CAM, and the
//! finite-difference gradient oracle.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetBundle, SplitKind};
use crate::ensemble::{ArchitectureSpec, EnsembleModel, StudentModel};
use crate::error::{Error, Result};
use crate::layers::{build_layer, AdaptationLayer, Block, BlockSpec, LayerSpec, Param};
use crate::losses::{ensemble_loss, DistillTargets, LossWeights};
use crate::tensor::{no_grad, Element, Tensor};

/// Row-wise argmax of a `[N, C]` tensor; ties go to the lowest index.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(c)
        .map(|row| (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best }))
        .collect()
}

/// Number of rows whose argmax equals the label.
pub fn count_correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Top-1 accuracy in percent.
pub fn top1_accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    100.0 * count_correct(logits, labels) as f64 / labels.len() as f64
}

/// `Σ (i / S) · acc_i`: more compressed students weigh more. Weights sum
/// to `(S + 1) / 2`, so the result is not an average in the strict sense.
pub fn weighted_student_average(accuracies: &[f64]) -> f64 {
    let s = accuracies.len() as f64;
    accuracies
        .iter()
        .enumerate()
        .map(|(i, a)| (i + 1) as f64 / s * a)
        .sum()
}

pub fn mean_accuracy(accuracies: &[f64]) -> f64 {
    if accuracies.is_empty() {
        return 0.0;
    }
    accuracies.iter().sum::<f64>() / accuracies.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub per_student_top1: Vec<f64>,
    pub teacher_top1: f64,
    pub weighted_average: f64,
    pub mean_accuracy: f64,
}

impl Metrics {
    pub fn new(per_student_top1: Vec<f64>, teacher_top1: f64) -> Self {
        Metrics {
            weighted_average: weighted_student_average(&per_student_top1),
            mean_accuracy: mean_accuracy(&per_student_top1),
            per_student_top1,
            teacher_top1,
        }
    }
}

/// Accuracy of every student and of the ensemble teacher on one split.
pub fn evaluate<T: Element>(
    model: &EnsembleModel<T>,
    data: &DatasetBundle,
    split: SplitKind,
    batch_size: usize,
) -> Result<Metrics> {
    let _guard = no_grad();
    let mut correct = vec![0usize; model.num_students()];
    let mut teacher = 0usize;
    let mut total = 0usize;
    for batch in data.batches::<T>(split, batch_size, None) {
        let out = model.forward(&batch.images)?;
        for (c, l) in correct.iter_mut().zip(&out.logits) {
            *c += count_correct(l, &batch.labels);
        }
        teacher += count_correct(&out.teacher_logits, &batch.labels);
        total += batch.labels.len();
    }
    let pct = |c: usize| 100.0 * c as f64 / total.max(1) as f64;
    Ok(Metrics::new(correct.into_iter().map(pct).collect(), pct(teacher)))
}

/// Accuracy of a standalone student on one split.
pub fn evaluate_student<T: Element>(
    student: &StudentModel<T>,
    data: &DatasetBundle,
    split: SplitKind,
    batch_size: usize,
) -> Result<f64> {
    let _guard = no_grad();
    let (mut correct, mut total) = (0usize, 0usize);
    for batch in data.batches::<T>(split, batch_size, None) {
        correct += count_correct(&student.forward(&batch.images)?, &batch.labels);
        total += batch.labels.len();
    }
    Ok(100.0 * correct as f64 / total.max(1) as f64)
}

/// Deployable parameter counts (base + branch, no adaptation layers) and
/// sizes relative to student 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub params: Vec<usize>,
    pub relative_pct: Vec<f64>,
}

impl SizeReport {
    fn from_counts(params: Vec<usize>) -> Self {
        let first = params.first().copied().unwrap_or(1).max(1) as f64;
        SizeReport {
            relative_pct: params.iter().map(|&p| 100.0 * p as f64 / first).collect(),
            params,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("student,params,relative_pct\n");
        for (i, (p, r)) in self.params.iter().zip(&self.relative_pct).enumerate() {
            let _ = writeln!(out, "{},{p},{r:.2}", i + 1);
        }
        out
    }
}

pub fn size_report<T: Element>(model: &EnsembleModel<T>) -> SizeReport {
    let base: usize = model.base.parameters().iter().map(|p| p.tensor.numel()).sum();
    let counts = model
        .students
        .iter()
        .map(|s| base + s.parameters().iter().map(|p| p.tensor.numel()).sum::<usize>())
        .collect();
    SizeReport::from_counts(counts)
}

/// Same as [`size_report`] but computed from the specification without
/// allocating any weights.
pub fn size_report_for_spec(spec: &ArchitectureSpec, students: usize) -> SizeReport {
    SizeReport::from_counts((1..=students).map(|i| spec.student_param_count(students, i)).collect())
}

/// A Grad-CAM heat map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl HeatMap {
    /// Binary 8-bit portable graymap.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

/// The Grad-CAM combination for `K` feature maps of size `H×W` and the
/// gradients of the class score with respect to them:
/// `relu(Σ_k mean(∂y/∂A_k) · A_k)`, scaled so the maximum is 1.
pub fn grad_cam_from(maps: &[f64], grads: &[f64], height: usize, width: usize) -> HeatMap {
    let hw = height * width;
    let mut cam = vec![0.0f64; hw];
    for (a, g) in maps.chunks(hw).zip(grads.chunks(hw)) {
        let w = g.iter().sum::<f64>() / hw as f64;
        cam.iter_mut().zip(a).for_each(|(c, &v)| *c += w * v);
    }
    cam.iter_mut().for_each(|c| *c = c.max(0.0));
    let max = cam.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        cam.iter_mut().for_each(|c| *c /= max);
    }
    HeatMap {
        height,
        width,
        values: cam,
    }
}

/// Grad-CAM of `class` on the last block's output for a single image
/// `[1, C, H, W]`. Parameter gradients are cleared afterwards.
pub fn grad_cam<T: Element>(student: &StudentModel<T>, input: &Tensor<T>, class: usize) -> Result<HeatMap> {
    if input.ndim() != 4 || input.shape()[0] != 1 {
        return Err(Error::shape("grad_cam input", input.shape(), &[1]));
    }
    let (features, logits) = student.forward_with_features(input)?;
    let classes = logits.shape()[1];
    if class >= classes {
        return Err(Error::LabelOutOfRange { label: class, classes });
    }
    let params = student.parameters();
    params.iter().for_each(|p| p.tensor.zero_grad());
    features.zero_grad();
    logits.gather(&[class])?.sum().backward()?;
    let grads = features.grad().unwrap_or_else(|| vec![T::zero(); features.numel()]);
    params.iter().for_each(|p| p.tensor.zero_grad());
    let s = features.shape();
    let maps: Vec<f64> = features.data().iter().map(|&v| Element::to_f64(v)).collect();
    let grads: Vec<f64> = grads.iter().map(|&v| Element::to_f64(v)).collect();
    Ok(grad_cam_from(&maps, &grads, s[2], s[3]))
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backprop gradients of the scalar built by `loss` with central
/// differences `(f(p + h) − f(p − h)) / 2h` on every coordinate of
/// `params`. `loss` must rebuild the graph from the current parameter
/// values on every call.
pub fn finite_difference_check<F>(params: &[Param<f64>], mut loss: F, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor<f64>>,
{
    params.iter().for_each(|p| p.tensor.zero_grad());
    loss()?.backward()?;
    finite_difference_check_with(params, || Ok(loss()?.item()), || Ok(()), h, tolerance)
}

/// Like [`finite_difference_check`], with the analytic gradients produced
/// by `backprop`, which must accumulate into the parameters' grads. `value`
/// evaluates the scalar whose derivative `backprop` claims to compute.
pub fn finite_difference_check_with<V, B>(
    params: &[Param<f64>],
    mut value: V,
    mut backprop: B,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    V: FnMut() -> Result<f64>,
    B: FnMut() -> Result<()>,
{
    backprop()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.tensor.grad().unwrap_or_else(|| vec![0.0; p.tensor.numel()]))
        .collect();
    params.iter().for_each(|p| p.tensor.zero_grad());

    let _guard = no_grad();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tolerance,
    };
    for (p, grad) in params.iter().zip(&analytic) {
        for i in 0..p.tensor.numel() {
            let orig = p.tensor.data()[i];
            p.tensor.data_mut()[i] = orig + h;
            let up = value()?;
            p.tensor.data_mut()[i] = orig - h;
            let down = value()?;
            p.tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(grad[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((p.name.clone(), i));
                report.analytic_at_worst = grad[i];
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Checks the combined training loss of an ensemble on one batch. The
/// distillation targets (teacher logits, pseudo-teacher maps and the base
/// features seen by the hint path) are frozen at the starting parameters,
/// which is exactly the function the routed training backward pass
/// differentiates.
pub fn ensemble_gradient_check(
    model: &EnsembleModel<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    weights: &LossWeights,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let params = model.parameters();
    model.zero_grad();
    let targets = {
        let _guard = no_grad();
        DistillTargets::capture(&model.forward(images)?)
    };
    finite_difference_check_with(
        &params,
        || {
            let out = model.forward(images)?;
            Ok(ensemble_loss(model, &out, labels, weights, Some(&targets))?.combined.item())
        },
        || {
            let out = model.forward(images)?;
            ensemble_loss(model, &out, labels, weights, Some(&targets))?.backward(&out)
        },
        h,
        tolerance,
    )
}

/// Step and tolerance of the gradient oracle.
pub const ORACLE_STEP: f64 = 1e-5;
pub const ORACLE_TOLERANCE: f64 = 1e-4;

/// Three-student ensemble with about a thousand parameters, used by the
/// whole-loss gradient check.
pub fn oracle_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        input_shape: [1, 12, 12],
        num_classes: 3,
        blocks: vec![
            BlockSpec::new(1, vec![LayerSpec::conv(1, 3, 3, 1), LayerSpec::max_pool(3, 2, 2)]),
            BlockSpec::new(2, vec![LayerSpec::conv(3, 4, 3, 2)]),
            BlockSpec::new(3, vec![LayerSpec::residual(4, 4, 3, 1, 1)]),
            BlockSpec::new(4, vec![LayerSpec::conv(4, 4, 3, 1)]),
        ],
        classifier: LayerSpec::linear(4, 3),
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()
}

/// Checks a module's parameters and input against a random linear readout
/// of its output.
fn module_check<F>(mut params: Vec<Param<f64>>, input_shape: &[usize], rng: &mut ChaCha8Rng, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    for p in &params {
        let n = p.tensor.numel();
        let shift = uniform(rng, n, 0.1);
        p.tensor.data_mut().iter_mut().zip(shift).for_each(|(v, d)| *v += d);
    }
    let x = Tensor::parameter(uniform(rng, input_shape.iter().product(), 1.0), input_shape)?;
    params.push(Param {
        name: "input".into(),
        tensor: x.clone(),
    });
    let out_shape = forward(&x)?.shape().to_vec();
    let probe = Tensor::new(uniform(rng, out_shape.iter().product(), 1.0), &out_shape)?;
    finite_difference_check(&params, || Ok(forward(&x)?.mul(&probe)?.sum()), ORACLE_STEP, ORACLE_TOLERANCE)
}

/// Finite-difference checks of every layer type and of the combined
/// training loss of a small three-student ensemble, in 64-bit precision.
pub fn gradient_oracle_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let layers = [
        ("conv 3x3", LayerSpec::conv(2, 3, 3, 1), vec![2, 2, 5, 5]),
        ("conv 3x3 stride 2", LayerSpec::conv(3, 2, 3, 2), vec![2, 3, 6, 5]),
        ("residual identity skip", LayerSpec::residual(3, 3, 3, 1, 1), vec![2, 3, 4, 4]),
        ("residual projection skip", LayerSpec::residual(2, 4, 3, 2, 1), vec![2, 2, 5, 5]),
        ("max pool", LayerSpec::max_pool(2, 2, 2), vec![2, 2, 4, 4]),
        ("global average pool", LayerSpec::global_avg_pool(3), vec![2, 3, 3, 2]),
        ("linear", LayerSpec::linear(6, 4), vec![3, 6]),
    ];
    for (name, spec, shape) in layers {
        let layer = build_layer::<f64, _>(&spec, "l", &mut rng)?;
        out.push((name.to_string(), module_check(layer.parameters(), &shape, &mut rng, |x| layer.forward(x))?));
    }
    let block = Block::<f64>::build(
        &BlockSpec::new(2, vec![LayerSpec::residual(2, 3, 3, 2, 2), LayerSpec::max_pool(3, 2, 1)]),
        "b",
        &mut rng,
    )?;
    out.push(("two-unit residual block".into(), module_check(block.parameters(), &[2, 2, 6, 6], &mut rng, |x| block.forward(x))?));
    let adapt = AdaptationLayer::<f64>::new("a", 2, 5, &mut rng)?;
    out.push(("adaptation layer".into(), module_check(adapt.parameters(), &[2, 2, 3, 3], &mut rng, |x| adapt.adapt_channels(x))?));

    let model = EnsembleModel::<f64>::build(&oracle_spec(), 3, &mut rng)?;
    for p in model.parameters().iter().filter(|p| p.name.ends_with(".bias")) {
        let n = p.tensor.numel();
        p.tensor.data_mut().copy_from_slice(&uniform(&mut rng, n, 0.1));
    }
    let images = Tensor::new(uniform(&mut rng, 4 * 144, 1.0), &[4, 1, 12, 12])?;
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
    let report = ensemble_gradient_check(&model, &images, &labels, &LossWeights::default(), ORACLE_STEP, ORACLE_TOLERANCE)?;
    out.push(("combined ensemble loss".into(), report));
    Ok(out)
}
