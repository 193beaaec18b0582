//! Paired ensemble-versus-baseline runs over several seeds.
//!
//! For every seed both arms start from the same initial weights: the
//! ensemble arm trains the freshly built ensemble jointly, the baseline
//! arm extracts each student from that same build and trains it alone
//! with cross-entropy only.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::DatasetBundle;
use crate::ensemble::{ArchitectureSpec, EnsembleModel};
use crate::error::{Error, Result};
use crate::eval::{mean_accuracy, weighted_student_average};
use crate::trainer::{EpochRecord, TrainConfig, TrainMode, Trainer};

/// Builds the initial ensemble for `seed`; identical across arms.
pub fn initial_ensemble(spec: &ArchitectureSpec, students: usize, seed: u64) -> Result<EnsembleModel<f32>> {
    EnsembleModel::build(spec, students, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub mode: TrainMode,
    /// Best test accuracy per student over all epochs.
    pub best_student: Vec<f64>,
    /// Best ensemble-teacher accuracy; `None` for the baseline arm.
    pub best_teacher: Option<f64>,
    /// Per-epoch records; one history per student for the baseline arm.
    pub histories: Vec<Vec<EpochRecord>>,
}

fn seeded(config: &TrainConfig, seed: u64, mode: TrainMode) -> TrainConfig {
    TrainConfig {
        seed,
        mode,
        ..config.clone()
    }
}

pub fn run_ensemble_arm(
    spec: &ArchitectureSpec,
    students: usize,
    data: &DatasetBundle,
    config: &TrainConfig,
    seed: u64,
) -> Result<ArmResult> {
    let model = initial_ensemble(spec, students, seed)?;
    let mut trainer = Trainer::new(model, seeded(config, seed, TrainMode::Ensemble), data)?;
    trainer.run(|_, _| Ok(()))?;
    Ok(ArmResult {
        mode: TrainMode::Ensemble,
        best_student: trainer.state.best_student.clone(),
        best_teacher: Some(trainer.state.best_teacher),
        histories: vec![trainer.history],
    })
}

pub fn run_baseline_arm(
    spec: &ArchitectureSpec,
    students: usize,
    data: &DatasetBundle,
    config: &TrainConfig,
    seed: u64,
) -> Result<ArmResult> {
    let ensemble = initial_ensemble(spec, students, seed)?;
    let mut best = Vec::with_capacity(students);
    let mut histories = Vec::with_capacity(students);
    for i in 1..=students {
        let model = EnsembleModel::from_student(ensemble.extract_student(i)?);
        let mut trainer = Trainer::new(model, seeded(config, seed, TrainMode::Baseline), data)?;
        trainer.run(|_, _| Ok(()))?;
        best.push(trainer.state.best_student[0]);
        histories.push(trainer.history);
    }
    Ok(ArmResult {
        mode: TrainMode::Baseline,
        best_student: best,
        best_teacher: None,
        histories,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub ensemble: ArmResult,
    pub baseline: ArmResult,
}

pub fn run_seed(
    spec: &ArchitectureSpec,
    students: usize,
    data: &DatasetBundle,
    config: &TrainConfig,
    seed: u64,
) -> Result<SeedResult> {
    Ok(SeedResult {
        seed,
        ensemble: run_ensemble_arm(spec, students, data, config, seed)?,
        baseline: run_baseline_arm(spec, students, data, config, seed)?,
    })
}

/// Seed-averaged results of both arms.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub runs: Vec<SeedResult>,
    pub baseline_mean: Vec<f64>,
    pub ensemble_mean: Vec<f64>,
    pub teacher_mean: f64,
}

impl CompareReport {
    pub fn from_runs(runs: Vec<SeedResult>) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::InvalidArgument("no runs to aggregate".into()))?;
        let s = first.ensemble.best_student.len();
        let n = runs.len() as f64;
        let avg = |f: &dyn Fn(&SeedResult) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let baseline_mean = (0..s).map(|i| avg(&|r| r.baseline.best_student[i])).collect();
        let ensemble_mean = (0..s).map(|i| avg(&|r| r.ensemble.best_student[i])).collect();
        let teacher_mean = avg(&|r| r.ensemble.best_teacher.unwrap_or(0.0));
        Ok(CompareReport {
            runs,
            baseline_mean,
            ensemble_mean,
            teacher_mean,
        })
    }

    pub fn students(&self) -> usize {
        self.ensemble_mean.len()
    }

    /// Plain-text table: one row per student plus aggregate rows.
    pub fn to_table(&self) -> String {
        let seeds: Vec<String> = self.runs.iter().map(|r| r.seed.to_string()).collect();
        let mut out = format!("seeds: {}\n", seeds.join(","));
        let _ = writeln!(out, "{:<18}{:>10}{:>10}{:>9}", "student", "baseline", "ensemble", "delta");
        for (i, (b, e)) in self.baseline_mean.iter().zip(&self.ensemble_mean).enumerate() {
            let _ = writeln!(out, "{:<18}{b:>10.2}{e:>10.2}{:>+9.2}", i + 1, e - b);
        }
        let rows = [
            ("weighted average", weighted_student_average(&self.baseline_mean), weighted_student_average(&self.ensemble_mean)),
            ("mean accuracy", mean_accuracy(&self.baseline_mean), mean_accuracy(&self.ensemble_mean)),
        ];
        for (name, b, e) in rows {
            let _ = writeln!(out, "{name:<18}{b:>10.2}{e:>10.2}{:>+9.2}", e - b);
        }
        let _ = writeln!(out, "{:<18}{:>10}{:>10.2}", "ensemble teacher", "-", self.teacher_mean);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,arm,student,best_acc\n");
        for r in &self.runs {
            for arm in [&r.ensemble, &r.baseline] {
                for (i, a) in arm.best_student.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{a}", r.seed, arm.mode.as_str(), i + 1);
                }
                if let Some(t) = arm.best_teacher {
                    let _ = writeln!(out, "{},{},teacher,{t}", r.seed, arm.mode.as_str());
                }
            }
        }
        out
    }
}

/// Runs both arms for every seed, spreading seeds over up to `threads`
/// worker threads. Results come back in seed order regardless.
pub fn compare(
    spec: &ArchitectureSpec,
    students: usize,
    data: &DatasetBundle,
    config: &TrainConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<CompareReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("compare needs at least one seed".into()));
    }
    let threads = threads.clamp(1, seeds.len());
    let runs = if threads == 1 {
        seeds
            .iter()
            .map(|&s| run_seed(spec, students, data, config, s))
            .collect::<Result<Vec<_>>>()?
    } else {
        let chunk = seeds.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|&s| run_seed(spec, students, data, config, s))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed worker panicked"))
                .collect::<Result<Vec<Vec<_>>>>()
        })?
        .into_iter()
        .flatten()
        .collect()
    };
    CompareReport::from_runs(runs)
}
