//! Expansion of one architecture into a shared-base, multi-branch ensemble
//! of progressively narrower students.
//!
//! Student `i` of `S` keeps the base block as-is and scales every channel
//! count in blocks 2–4 by `(S − i + 1) / S`. Student 1, the pseudo
//! teacher, is the original architecture. Students 2..S each get three
//! adaptation layers (one per branch block) that lift their feature maps
//! to the pseudo teacher's width for the intermediate loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{AdaptationLayer, Block, BlockSpec, LayerKind, LayerSpec, Linear, Param};
use crate::tensor::{is_grad_enabled, Element, Tensor};

/// Number of branch blocks whose outputs are distillation taps.
pub const TAPS: usize = 3;

/// Four-block architecture from which every student is derived.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchitectureSpec {
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Block 1 is the shared base; blocks 2–4 are replicated per student.
    pub blocks: Vec<BlockSpec>,
    pub classifier: LayerSpec,
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidSpec(m));
        if self.blocks.len() != 4 {
            return invalid(format!("expected exactly 4 blocks, got {}", self.blocks.len()));
        }
        if self.num_classes < 2 {
            return invalid("need at least 2 classes".into());
        }
        if self.input_shape.contains(&0) {
            return invalid(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        let mut channels = self.input_shape[0];
        for (b, block) in self.blocks.iter().enumerate() {
            if block.index != b + 1 {
                return invalid(format!("block at position {} carries index {}", b + 1, block.index));
            }
            block.validate()?;
            if block.in_channels() != channels {
                return invalid(format!(
                    "block {} expects {} input channels, receives {channels}",
                    b + 1,
                    block.in_channels()
                ));
            }
            (h, w) = block
                .out_extent(h, w)
                .ok_or_else(|| Error::InvalidSpec(format!("block {} collapses the spatial extent", b + 1)))?;
            channels = block.out_channels();
        }
        self.classifier.validate()?;
        if self.classifier.kind != LayerKind::Linear {
            return invalid("classifier must be a linear layer".into());
        }
        if self.classifier.in_channels != channels {
            return invalid(format!(
                "classifier expects {} inputs, block 4 emits {channels}",
                self.classifier.in_channels
            ));
        }
        if self.classifier.out_channels != self.num_classes {
            return invalid(format!(
                "classifier emits {} outputs for {} classes",
                self.classifier.out_channels, self.num_classes
            ));
        }
        Ok(())
    }

    pub fn base(&self) -> &BlockSpec {
        &self.blocks[0]
    }

    /// Branch blocks (2–4) with every channel count scaled for student
    /// `index` of `students`. The first layer's input stays at the base
    /// block's width.
    pub fn branch_blocks(&self, students: usize, index: usize) -> Vec<BlockSpec> {
        let mut channels = self.base().out_channels();
        self.blocks[1..]
            .iter()
            .map(|block| {
                let layers = block
                    .layers
                    .iter()
                    .map(|l| {
                        let out = match l.kind {
                            LayerKind::Conv | LayerKind::Residual => assign_channels(l.out_channels, students, index),
                            _ => channels,
                        };
                        let scaled = LayerSpec {
                            in_channels: channels,
                            out_channels: out,
                            ..l.clone()
                        };
                        channels = out;
                        scaled
                    })
                    .collect();
                BlockSpec::new(block.index, layers)
            })
            .collect()
    }

    /// Classifier for student `index`: input width follows the scaled
    /// block-4 output, output width stays at the class count.
    pub fn branch_classifier(&self, students: usize, index: usize) -> LayerSpec {
        let width = self.branch_blocks(students, index).last().map_or(0, BlockSpec::out_channels);
        LayerSpec::linear(width, self.num_classes)
    }

    /// Output extents `(h, w)` after each of the four blocks.
    pub fn block_extents(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        self.blocks
            .iter()
            .map(|b| {
                (h, w) = b.out_extent(h, w).unwrap_or((0, 0));
                (h, w)
            })
            .collect()
    }

    /// Parameters of the deployable student `index` (base + branch +
    /// classifier), computed from the specification alone.
    pub fn student_param_count(&self, students: usize, index: usize) -> usize {
        self.base().param_count()
            + self.branch_blocks(students, index).iter().map(BlockSpec::param_count).sum::<usize>()
            + self.branch_classifier(students, index).param_count()
    }
}

/// Channel count for student `index` (1-based) of `students`:
/// `max(1, round(m · (S − i + 1) / S))`, rounding halves away from zero.
pub fn assign_channels(m: usize, students: usize, index: usize) -> usize {
    assert!(
        (1..=students).contains(&index),
        "student index {index} outside 1..={students}"
    );
    let num = m * (students - index + 1);
    ((2 * num + students) / (2 * students)).max(1)
}

/// Width multiplier of student `index`: `(S − i + 1) / S`.
pub fn student_ratio(students: usize, index: usize) -> f64 {
    (students - index + 1) as f64 / students as f64
}

/// Blocks 2–4 plus classifier of one student.
#[derive(Debug)]
pub struct StudentBranch<T: Element> {
    /// 1-based student index within the ensemble it was built for.
    pub index: usize,
    pub ratio: f64,
    pub blocks: Vec<Block<T>>,
    pub classifier: Linear<T>,
}

impl<T: Element> StudentBranch<T> {
    fn build<R: Rng + ?Sized>(spec: &ArchitectureSpec, students: usize, index: usize, rng: &mut R) -> Result<Self> {
        let prefix = format!("student{index}");
        let blocks = spec
            .branch_blocks(students, index)
            .iter()
            .map(|b| Block::build(b, &format!("{prefix}.b{}", b.index), rng))
            .collect::<Result<Vec<_>>>()?;
        let cls = spec.branch_classifier(students, index);
        let classifier = Linear::new(&format!("{prefix}.fc"), cls.in_channels, cls.out_channels, rng)?;
        Ok(StudentBranch {
            index,
            ratio: student_ratio(students, index),
            blocks,
            classifier,
        })
    }

    /// Runs blocks 2–4 and the head on the base output. Returns the three
    /// block outputs and the logits.
    pub fn forward(&self, base_out: &Tensor<T>) -> Result<([Tensor<T>; TAPS], Tensor<T>)> {
        let b2 = self.blocks[0].forward(base_out)?;
        let b3 = self.blocks[1].forward(&b2)?;
        let b4 = self.blocks[2].forward(&b3)?;
        let logits = self.head(&b4)?;
        Ok(([b2, b3, b4], logits))
    }

    /// Global average pool then the linear classifier.
    pub fn head(&self, last_map: &Tensor<T>) -> Result<Tensor<T>> {
        let n = last_map.shape()[0];
        let pooled = last_map.global_avg_pool()?;
        let flat = pooled.reshape(&[n, pooled.numel() / n])?;
        self.classifier.forward(&flat)
    }

    pub fn tap_channels(&self) -> [usize; TAPS] {
        [0, 1, 2].map(|b| self.blocks[b].spec.out_channels())
    }

    pub(crate) fn collect(&self, out: &mut Vec<Param<T>>) {
        self.blocks.iter().for_each(|b| b.collect(out));
        self.classifier.collect(out);
    }

    pub fn parameters(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn deep_copy(&self) -> Self {
        StudentBranch {
            index: self.index,
            ratio: self.ratio,
            blocks: self.blocks.iter().map(Block::deep_copy).collect(),
            classifier: self.classifier.deep_copy(),
        }
    }
}

/// Forward results of the whole ensemble for one batch.
#[derive(Debug, Clone)]
pub struct EnsembleOutput<T: Element> {
    /// `[N, C]` logits per student, student 1 first.
    pub logits: Vec<Tensor<T>>,
    /// Average of the student logits (or the configured weighting).
    pub teacher_logits: Tensor<T>,
    /// Per student, the outputs of branch blocks 2, 3 and 4.
    pub taps: Vec<[Tensor<T>; TAPS]>,
    /// Output of the shared base block.
    pub base: Tensor<T>,
    /// Leaf copy of `base` that the branches actually consume, so the
    /// gradient reaching the base can be chosen per loss term. `None`
    /// when no graph is recorded.
    pub base_proxy: Option<Tensor<T>>,
}

impl<T: Element> EnsembleOutput<T> {
    /// Pushes whatever gradient has accumulated on the branch input
    /// into the base block, then clears it.
    pub fn propagate_to_base(&self) -> Result<()> {
        let Some(proxy) = &self.base_proxy else {
            return Ok(());
        };
        let grad = proxy.grad();
        proxy.zero_grad();
        match grad {
            Some(g) => self.base.backward_with(g),
            None => Ok(()),
        }
    }
}

/// Shared base, student branches, and adaptation layers.
#[derive(Debug)]
pub struct EnsembleModel<T: Element> {
    pub spec: ArchitectureSpec,
    pub base: Block<T>,
    pub students: Vec<StudentBranch<T>>,
    /// `adaptation[l - 2][b]` serves student `l` at tap `b`.
    pub adaptation: Vec<[AdaptationLayer<T>; TAPS]>,
    /// Student count the branch widths were derived from.
    pub ensemble_size: usize,
    teacher_weights: Option<Vec<f64>>,
}

impl<T: Element> EnsembleModel<T> {
    /// Builds base, `students` branches and adaptation layers, drawing all
    /// initial weights from `rng` in registry order.
    pub fn build<R: Rng + ?Sized>(spec: &ArchitectureSpec, students: usize, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if students < 2 {
            return Err(Error::InvalidArgument(format!("an ensemble needs at least 2 students, got {students}")));
        }
        let base = Block::build(spec.base(), "base", rng)?;
        let branches = (1..=students)
            .map(|i| StudentBranch::build(spec, students, i, rng))
            .collect::<Result<Vec<_>>>()?;
        let teacher_width = branches[0].tap_channels();
        let adaptation = branches[1..]
            .iter()
            .map(|s| {
                let widths = s.tap_channels();
                let mut mk = |b: usize| AdaptationLayer::new(&format!("adapt{}.{}", s.index, b + 1), widths[b], teacher_width[b], rng);
                Ok([mk(0)?, mk(1)?, mk(2)?])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleModel {
            spec: spec.clone(),
            base,
            students: branches,
            adaptation,
            ensemble_size: students,
            teacher_weights: None,
        })
    }

    /// Wraps a standalone student as a one-branch model so the same
    /// training loop can run the independent baseline.
    pub fn from_student(student: StudentModel<T>) -> Self {
        EnsembleModel {
            spec: student.spec,
            base: student.base,
            students: vec![student.branch],
            adaptation: Vec::new(),
            ensemble_size: student.ensemble_size,
            teacher_weights: None,
        }
    }

    pub fn num_students(&self) -> usize {
        self.students.len()
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.students.iter().map(|s| s.ratio).collect()
    }

    /// Replaces the uniform teacher average with a weighted combination.
    pub fn set_teacher_weights(&mut self, weights: Option<Vec<f64>>) -> Result<()> {
        if let Some(w) = &weights {
            if w.len() != self.num_students() {
                return Err(Error::InvalidArgument(format!(
                    "{} teacher weights for {} students",
                    w.len(),
                    self.num_students()
                )));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument("teacher weights must be non-negative and sum to 1".into()));
            }
        }
        self.teacher_weights = weights;
        Ok(())
    }

    pub fn teacher_weights(&self) -> Option<&[f64]> {
        self.teacher_weights.as_deref()
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.spec.input_shape {
            let mut expected = vec![s.first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.spec.input_shape);
            return Err(Error::shape("ensemble input", s, &expected));
        }
        Ok(())
    }

    /// Runs the base once and every branch on its output.
    ///
    /// While recording, the branches read a detached copy of the base
    /// output; call [`EnsembleOutput::propagate_to_base`] after the
    /// backward passes to reach the base parameters.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<EnsembleOutput<T>> {
        self.check_input(batch)?;
        let base = self.base.forward(batch)?;
        let base_proxy = (is_grad_enabled() && base.requires_grad())
            .then(|| Tensor::leaf(base.to_vec(), base.shape(), true))
            .transpose()?;
        let branch_input = base_proxy.as_ref().unwrap_or(&base);
        let mut logits = Vec::with_capacity(self.num_students());
        let mut taps = Vec::with_capacity(self.num_students());
        for branch in &self.students {
            let (t, l) = branch.forward(branch_input)?;
            taps.push(t);
            logits.push(l);
        }
        let teacher_logits = combine_logits(&logits, self.teacher_weights.as_deref())?;
        Ok(EnsembleOutput {
            logits,
            teacher_logits,
            taps,
            base,
            base_proxy,
        })
    }

    /// All trainable parameters in registry order: base, students, then
    /// adaptation layers.
    pub fn parameters(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        self.base.collect(&mut out);
        for s in &self.students {
            s.collect(&mut out);
        }
        for layers in &self.adaptation {
            layers.iter().for_each(|a| a.collect(&mut out));
        }
        out
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies the base and branch `index` (1-based) into a standalone
    /// model. Adaptation layers are left behind.
    pub fn extract_student(&self, index: usize) -> Result<StudentModel<T>> {
        let branch = self
            .students
            .iter()
            .find(|s| s.index == index)
            .ok_or_else(|| Error::InvalidArgument(format!("no student {index} in a {}-student model", self.num_students())))?;
        Ok(StudentModel {
            spec: self.spec.clone(),
            ensemble_size: self.ensemble_size,
            base: self.base.deep_copy(),
            branch: branch.deep_copy(),
        })
    }
}

/// Uniform mean or weighted sum of per-student logits.
///
/// The mean is taken as `l₁ + Σ (lᵢ − l₁) / S`, so students that agree
/// exactly yield exactly their shared logits.
pub fn combine_logits<T: Element>(logits: &[Tensor<T>], weights: Option<&[f64]>) -> Result<Tensor<T>> {
    let first = logits
        .first()
        .ok_or_else(|| Error::InvalidArgument("no logits to combine".into()))?;
    match weights {
        None => {
            if logits.len() == 1 {
                return Ok(first.clone());
            }
            let mut spread = logits[1].sub(first)?;
            for l in &logits[2..] {
                spread = spread.add(&l.sub(first)?)?;
            }
            first.add(&spread.scale(T::one() / T::from_usize(logits.len())))
        }
        Some(w) => {
            let mut acc = first.scale(T::from_f64(w[0]));
            for (l, &wi) in logits[1..].iter().zip(&w[1..]) {
                acc = acc.add(&l.scale(T::from_f64(wi)))?;
            }
            Ok(acc)
        }
    }
}

/// A single student detached from its ensemble.
#[derive(Debug)]
pub struct StudentModel<T: Element> {
    pub spec: ArchitectureSpec,
    /// Student count of the ensemble this student's widths came from.
    pub ensemble_size: usize,
    pub base: Block<T>,
    pub branch: StudentBranch<T>,
}

impl<T: Element> StudentModel<T> {
    /// Freshly initialized student `index` of an `ensemble_size` ensemble,
    /// without building the other branches.
    pub fn build<R: Rng + ?Sized>(spec: &ArchitectureSpec, ensemble_size: usize, index: usize, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if !(1..=ensemble_size).contains(&index) {
            return Err(Error::InvalidArgument(format!("student {index} outside 1..={ensemble_size}")));
        }
        Ok(StudentModel {
            spec: spec.clone(),
            ensemble_size,
            base: Block::build(spec.base(), "base", rng)?,
            branch: StudentBranch::build(spec, ensemble_size, index, rng)?,
        })
    }

    pub fn index(&self) -> usize {
        self.branch.index
    }

    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_features(batch)?.1)
    }

    /// Logits together with the last block's feature map.
    pub fn forward_with_features(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.spec.input_shape {
            return Err(Error::shape("student input", s, &self.spec.input_shape));
        }
        let base_out = self.base.forward(batch)?;
        let ([_, _, last], logits) = self.branch.forward(&base_out)?;
        Ok((last, logits))
    }

    pub fn parameters(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        self.base.collect(&mut out);
        self.branch.collect(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub(crate) fn small_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            input_shape: [1, 8, 8],
            num_classes: 3,
            blocks: vec![
                BlockSpec::new(1, vec![LayerSpec::conv(1, 4, 3, 1)]),
                BlockSpec::new(2, vec![LayerSpec::residual(4, 16, 3, 1, 1)]),
                BlockSpec::new(3, vec![LayerSpec::residual(16, 32, 3, 2, 1)]),
                BlockSpec::new(4, vec![LayerSpec::residual(32, 64, 3, 2, 1)]),
            ],
            classifier: LayerSpec::linear(64, 3),
        }
    }

    #[test]
    fn channel_assignment_examples() {
        assert_eq!((1..=3).map(|i| assign_channels(96, 3, i)).collect::<Vec<_>>(), [96, 64, 32]);
        assert_eq!((1..=4).map(|i| assign_channels(64, 4, i)).collect::<Vec<_>>(), [64, 48, 32, 16]);
        assert_eq!(assign_channels(1, 5, 5), 1);
        // 2.5 rounds away from zero
        assert_eq!(assign_channels(5, 2, 2), 3);
    }

    #[test]
    fn branch_chains_follow_rounding_rule() {
        let spec = small_spec();
        let chain = |i| {
            spec.branch_blocks(3, i)
                .iter()
                .map(BlockSpec::out_channels)
                .collect::<Vec<_>>()
        };
        assert_eq!(chain(1), [16, 32, 64]);
        assert_eq!(chain(2), [11, 21, 43]);
        assert_eq!(chain(3), [5, 11, 21]);
        // first branch layer keeps the base width as input
        assert_eq!(spec.branch_blocks(3, 3)[0].in_channels(), 4);
        assert_eq!(spec.branch_classifier(3, 3), LayerSpec::linear(21, 3));
    }

    #[test]
    fn build_registers_expected_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model: EnsembleModel<f32> = EnsembleModel::build(&small_spec(), 3, &mut rng).unwrap();
        assert_eq!(model.ratios(), vec![1.0, 2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(model.adaptation.len(), 2);
        assert_eq!(model.adaptation[1][2].student_channels(), 21);
        assert_eq!(model.adaptation[1][2].teacher_channels(), 64);
        let names: Vec<String> = model.parameters().into_iter().map(|p| p.name).collect();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.iter().all(|n| n.starts_with("base.") || n.starts_with("student") || n.starts_with("adapt")));
        assert!(names.contains(&"adapt3.2.kernel".to_string()));
        assert!(!names.iter().any(|n| n.starts_with("adapt1.")));
        assert_eq!(model.base.spec, small_spec().blocks[0]);
    }

    #[test]
    fn two_students_half_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model: EnsembleModel<f32> = EnsembleModel::build(&small_spec(), 2, &mut rng).unwrap();
        assert_eq!(model.ratios(), vec![1.0, 0.5]);
        assert_eq!(model.students[1].tap_channels(), [8, 16, 32]);
    }

    #[test]
    fn build_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(EnsembleModel::<f32>::build(&small_spec(), 1, &mut rng).is_err());
        let mut spec = small_spec();
        spec.blocks.pop();
        assert!(matches!(EnsembleModel::<f32>::build(&spec, 3, &mut rng), Err(Error::InvalidSpec(_))));
        let mut spec = small_spec();
        spec.classifier = LayerSpec::linear(32, 3);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn teacher_is_mean_of_students() {
        let a = Tensor::new(vec![1.0f64, 3.0], &[1, 2]).unwrap();
        let b = Tensor::new(vec![3.0f64, 1.0], &[1, 2]).unwrap();
        assert_eq!(combine_logits(&[a.clone(), b.clone()], None).unwrap().to_vec(), vec![2.0, 2.0]);
        assert_eq!(combine_logits(&[a.clone(), a.clone()], None).unwrap().to_vec(), a.to_vec());
        let w = combine_logits(&[a, b], Some(&[0.25, 0.75])).unwrap();
        assert_eq!(w.to_vec(), vec![2.5, 1.5]);
    }

    #[test]
    fn base_runs_once_per_batch() {
        for s in [2, 4] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let model: EnsembleModel<f32> = EnsembleModel::build(&small_spec(), s, &mut rng).unwrap();
            let out = model.forward(&Tensor::zeros(&[2, 1, 8, 8])).unwrap();
            assert_eq!(out.logits.len(), s);
            assert_eq!(model.base.calls(), 1);
            assert!(model.students.iter().all(|b| b.blocks[0].calls() == 1));
        }
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model: EnsembleModel<f32> = EnsembleModel::build(&small_spec(), 2, &mut rng).unwrap();
        assert!(model.forward(&Tensor::zeros(&[2, 1, 9, 8])).is_err());
        assert!(model.forward(&Tensor::zeros(&[2, 8, 8])).is_err());
    }

    #[test]
    fn extraction_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model: EnsembleModel<f32> = EnsembleModel::build(&small_spec(), 3, &mut rng).unwrap();
        assert!(model.extract_student(0).is_err());
        assert!(model.extract_student(4).is_err());
        let pt = model.extract_student(1).unwrap();
        assert_eq!(pt.branch.ratio, 1.0);
        assert_eq!(pt.branch.tap_channels(), [16, 32, 64]);
    }

    #[test]
    fn spec_param_count_matches_built_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = small_spec();
        let model: EnsembleModel<f32> = EnsembleModel::build(&spec, 3, &mut rng).unwrap();
        for i in 1..=3 {
            assert_eq!(model.extract_student(i).unwrap().param_count(), spec.student_param_count(3, i));
        }
    }
}
