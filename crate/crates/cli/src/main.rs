use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ensemble_kd::checkpoint::{load_checkpoint, load_student, save_checkpoint, save_student, CheckpointError, Container};
use ensemble_kd::config::{load_config, ConfigError, DataSource, RunConfig};
use ensemble_kd::data::{import_cifar10, load_dataset, nearest_centroid_accuracy, save_dataset, synth_with, DatasetBundle, SplitKind, SynthParams};
use ensemble_kd::ensemble::{EnsembleModel, StudentModel};
use ensemble_kd::eval::{evaluate, evaluate_student, grad_cam, gradient_oracle_suite, size_report_for_spec};
use ensemble_kd::experiment::{compare, initial_ensemble};
use ensemble_kd::trainer::{append_metrics, metrics_csv, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "ekd", version, about = "Online ensemble distillation of channel-compressed students")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an ensemble; writes metrics.csv, last.ckpt and best.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to run.out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed (defaults to the first of run.seeds).
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report test accuracy of an ensemble checkpoint or a student file.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Write one student of an ensemble checkpoint as a standalone model.
    Extract {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        student: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Paired ensemble-versus-independent training over several seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds (defaults to run.seeds).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        threads: Option<usize>,
        /// Directory for compare.txt and compare.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every layer type and the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the synthetic dataset described by a config.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Parameter counts per student, as CSV.
    Size {
        #[arg(long)]
        config: PathBuf,
        /// Student count (defaults to ensemble.students).
        #[arg(long)]
        students: Option<usize>,
    },
    /// Grad-CAM heat map of a student on one test image, as PGM.
    Gradcam {
        #[arg(long)]
        config: PathBuf,
        /// Student file, or an ensemble checkpoint together with --student.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        student: Option<usize>,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Class to explain (defaults to the image's label).
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Convert the CIFAR-10 binary distribution into a dataset file.
    ImportCifar {
        /// Directory holding data_batch_1.bin .. data_batch_5.bin and test_batch.bin.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Test,
}

impl From<Split> for SplitKind {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitKind::Train,
            Split::Test => SplitKind::Test,
        }
    }
}

/// Bad arguments or inputs that do not fit the configuration.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn is_validation(e: &ensemble_kd::Error) -> bool {
    use ensemble_kd::Error as E;
    match e {
        E::Config(_) | E::InvalidSpec(_) | E::InvalidArgument(_) | E::LabelOutOfRange { .. } => true,
        E::Checkpoint(c) => matches!(c, CheckpointError::Mismatch(_) | CheckpointError::Fingerprint),
        _ => false,
    }
}

/// 1 for validation failures, 2 for runtime failures, 3 for failed checks.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<CheckFailed>() {
            return 3;
        }
        if cause.is::<Invalid>() || cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(c) = cause.downcast_ref::<CheckpointError>() {
            if matches!(c, CheckpointError::Mismatch(_) | CheckpointError::Fingerprint) {
                return 1;
            }
        }
        if let Some(e) = cause.downcast_ref::<ensemble_kd::Error>() {
            if is_validation(e) {
                return 1;
            }
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<DatasetBundle> {
    let data = match &cfg.data {
        DataSource::File(p) => load_dataset(p).with_context(|| format!("loading {}", p.display()))?,
        DataSource::Synth(p) => synth_with(p)?,
    };
    let a = &cfg.architecture;
    if data.num_classes != a.num_classes || [data.channels, data.height, data.width] != a.input_shape {
        return Err(invalid(format!(
            "dataset has {} classes of {}x{}x{} images, model expects {} classes of {:?}",
            data.num_classes, data.channels, data.height, data.width, a.num_classes, a.input_shape
        )));
    }
    Ok(data)
}

fn build_model(cfg: &RunConfig, seed: u64) -> anyhow::Result<EnsembleModel<f32>> {
    let mut model = initial_ensemble(&cfg.architecture, cfg.students, seed)?;
    model.set_teacher_weights(cfg.teacher_weights.clone())?;
    Ok(model)
}

fn restored_model(cfg: &RunConfig, checkpoint: &Path) -> anyhow::Result<EnsembleModel<f32>> {
    let model = build_model(cfg, 0)?;
    load_checkpoint(checkpoint, &model).with_context(|| format!("restoring {}", checkpoint.display()))?;
    Ok(model)
}

fn student_index_of(container: &Container) -> Option<usize> {
    let words = container.state_entry("meta.student_index").ok()?.raw_words().ok()?;
    words.first().map(|&i| i as usize)
}

fn restored_student(cfg: &RunConfig, checkpoint: &Path, student: Option<usize>) -> anyhow::Result<StudentModel<f32>> {
    let container = Container::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    match student_index_of(&container) {
        Some(i) => {
            if student.is_some_and(|s| s != i) {
                return Err(invalid(format!("{} holds student {i}", checkpoint.display())));
            }
            let s = build_model(cfg, 0)?.extract_student(i)?;
            load_student(checkpoint, &s)?;
            Ok(s)
        }
        None => {
            let i = student.ok_or_else(|| invalid("an ensemble checkpoint needs --student"))?;
            check_student(cfg, i)?;
            Ok(restored_model(cfg, checkpoint)?.extract_student(i)?)
        }
    }
}

fn check_student(cfg: &RunConfig, i: usize) -> anyhow::Result<()> {
    if !(1..=cfg.students).contains(&i) {
        return Err(invalid(format!("--student must be in 1..={}, got {i}", cfg.students)));
    }
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { config, out, seed, resume } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| cfg.out.clone());
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let data = load_data(&cfg)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let model = build_model(&cfg, seed)?;
            let train = TrainConfig { seed, ..cfg.train.clone() };
            let mut trainer = Trainer::new(model, train, &data)?;
            let students = cfg.students;
            let metrics = out.join("metrics.csv");
            if let Some(path) = resume {
                let (state, history) =
                    load_checkpoint(&path, &trainer.model).with_context(|| format!("restoring {}", path.display()))?;
                trainer.set_state(state)?;
                trainer.history = history;
            }
            fs::write(&metrics, metrics_csv(students, &trainer.history))?;
            fs::write(out.join("config.used"), cfg.render())?;
            let (last, best) = (out.join("last.ckpt"), out.join("best.ckpt"));
            let mut best_teacher = trainer.history.iter().map(|r| r.test.teacher_top1).fold(f64::NEG_INFINITY, f64::max);
            trainer.run(|t, record| {
                append_metrics(&metrics, students, std::slice::from_ref(record))?;
                save_checkpoint(&last, &t.model, &t.state, &t.history)?;
                if record.test.teacher_top1 > best_teacher || !best.exists() {
                    best_teacher = best_teacher.max(record.test.teacher_top1);
                    save_checkpoint(&best, &t.model, &t.state, &t.history)?;
                }
                let accs: Vec<String> = record.test.per_student_top1.iter().map(|a| format!("{a:.2}")).collect();
                println!(
                    "epoch {:>3}  lr {:<8}  loss {:.4}  students [{}]  teacher {:.2}",
                    record.epoch + 1,
                    record.lr,
                    record.losses.combined,
                    accs.join(", "),
                    record.test.teacher_top1
                );
                Ok(())
            })?;
            println!("wrote {}", out.display());
        }
        Command::Eval { config, checkpoint, split } => {
            let cfg = load_config(&config)?;
            let data = load_data(&cfg)?;
            let bs = cfg.train.batch_size;
            let container = Container::read(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            if let Some(i) = student_index_of(&container) {
                let s = restored_student(&cfg, &checkpoint, Some(i))?;
                println!("student{i} {}", evaluate_student(&s, &data, split.into(), bs)?);
            } else {
                let model = restored_model(&cfg, &checkpoint)?;
                let m = evaluate(&model, &data, split.into(), bs)?;
                for (i, a) in m.per_student_top1.iter().enumerate() {
                    println!("student{} {a}", i + 1);
                }
                println!("teacher {}", m.teacher_top1);
                println!("weighted_average {}", m.weighted_average);
                println!("mean_accuracy {}", m.mean_accuracy);
            }
        }
        Command::Extract { config, checkpoint, student, output } => {
            let cfg = load_config(&config)?;
            check_student(&cfg, student)?;
            let s = restored_model(&cfg, &checkpoint)?.extract_student(student)?;
            save_student(&output, &s)?;
            println!("student{student}: {} parameters -> {}", s.param_count(), output.display());
        }
        Command::Compare { config, seeds, threads, out } => {
            let cfg = load_config(&config)?;
            let seeds = seeds.unwrap_or_else(|| cfg.seeds.clone());
            if seeds.is_empty() {
                return Err(invalid("no seeds given"));
            }
            let data = load_data(&cfg)?;
            let report = compare(
                &cfg.architecture,
                cfg.students,
                &data,
                &cfg.train,
                &seeds,
                threads.unwrap_or(cfg.threads).max(1),
            )?;
            let table = report.to_table();
            print!("{table}");
            let out = out.unwrap_or_else(|| cfg.out.clone());
            fs::create_dir_all(&out)?;
            fs::write(out.join("compare.txt"), &table)?;
            fs::write(out.join("compare.csv"), report.to_csv())?;
        }
        Command::Gradcheck { seed } => {
            let mut failed = Vec::new();
            for (name, r) in gradient_oracle_suite(seed)? {
                let status = if r.passed() { "ok  " } else { "FAIL" };
                println!("{status} {name:<28} {:>6} coords  max rel err {:.3e}", r.checked, r.max_rel_error);
                if !r.passed() {
                    failed.push(name);
                }
            }
            if !failed.is_empty() {
                return Err(CheckFailed(format!("gradient check failed: {}", failed.join(", "))).into());
            }
        }
        Command::Synth { config, output } => {
            let params = match config {
                Some(path) => match load_config(&path)?.data {
                    DataSource::Synth(p) => p,
                    DataSource::File(_) => return Err(invalid("config names a dataset file, not synthetic data")),
                },
                None => SynthParams::new(4, 400, 32, 32, 0),
            };
            let data = synth_with(&params)?;
            save_dataset(&data, &output)?;
            println!(
                "{} train / {} test images, nearest-centroid accuracy {:.2}% -> {}",
                data.train.len(),
                data.test.len(),
                nearest_centroid_accuracy(&data),
                output.display()
            );
        }
        Command::Size { config, students } => {
            let cfg = load_config(&config)?;
            let s = students.unwrap_or(cfg.students);
            if s < 1 {
                return Err(invalid("--students must be at least 1"));
            }
            print!("{}", size_report_for_spec(&cfg.architecture, s).to_csv());
        }
        Command::Gradcam { config, checkpoint, student, index, class, output } => {
            let cfg = load_config(&config)?;
            let data = load_data(&cfg)?;
            let s = restored_student(&cfg, &checkpoint, student)?;
            let n = data.test.len();
            let batch = data
                .batches::<f32>(SplitKind::Test, 1, None)
                .nth(index)
                .ok_or_else(|| invalid(format!("--index {index} outside the {n}-image test split")))?;
            let class = class.unwrap_or(batch.labels[0]);
            let map = grad_cam(&s, &batch.images, class)?;
            map.write_pgm(&output)?;
            println!("{}x{} map for class {class} -> {}", map.height, map.width, output.display());
        }
        Command::ImportCifar { dir, output } => {
            let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            let refs: Vec<&Path> = train.iter().map(PathBuf::as_path).collect();
            let data = import_cifar10(&refs, &dir.join("test_batch.bin"))?;
            save_dataset(&data, &output)?;
            println!("{} train / {} test images -> {}", data.train.len(), data.test.len(), output.display());
        }
    }
    Ok(())
}
