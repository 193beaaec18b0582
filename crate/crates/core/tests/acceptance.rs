//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{random_images, resnet20_like, small_spec};
use ensemble_kd::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use ensemble_kd::config::{load_config, DataSource};
use ensemble_kd::data::{nearest_centroid_accuracy, synth_dataset, synth_with};
use ensemble_kd::ensemble::{assign_channels, combine_logits, EnsembleModel};
use ensemble_kd::eval::{gradient_oracle_suite, size_report_for_spec, weighted_student_average};
use ensemble_kd::experiment::{compare, initial_ensemble};
use ensemble_kd::losses::{cross_entropy, ensemble_loss, intermediate_loss, kd_loss, softened_softmax, LossWeights};
use ensemble_kd::tensor::Tensor;
use ensemble_kd::trainer::{lr_at, metrics_csv, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for seed in 0..2 {
        for (name, report) in gradient_oracle_suite(seed).map_err(|e| e.to_string())? {
            ensure(report.passed(), || format!("seed {seed} {name}: max rel err {:e}", report.max_rel_error))?;
            worst = worst.max(report.max_rel_error);
            checks += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{checks} checks, max rel err {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

fn gradient_scope() -> Outcome {
    let grads = |m: &EnsembleModel<f64>| -> Vec<(String, Vec<f64>)> {
        m.parameters()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.grad().unwrap_or_else(|| vec![0.0; p.tensor.numel()])))
            .collect()
    };
    let model = EnsembleModel::<f64>::build(&small_spec(), 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let x = random_images::<f64>(6, &[4, 1, 8, 8]);

    let out = model.forward(&x).unwrap();
    let teacher_taps = out.taps[0].clone().map(|t| t.stop_gradient());
    intermediate_loss(&model, &out.taps[1..], &teacher_taps).unwrap().backward().unwrap();
    let mut g = grads(&model);
    model.zero_grad();
    let hint_only = LossWeights {
        alpha: 0.0,
        beta: 1.0,
        gamma: 0.0,
        ..LossWeights::default()
    };
    let out = model.forward(&x).unwrap();
    ensemble_loss(&model, &out, &[0, 1, 2, 0], &hint_only, None).unwrap().backward(&out).unwrap();
    g.extend(grads(&model));
    for (name, v) in &g {
        if name.starts_with("base.") || name.starts_with("student1.") {
            ensure(v.iter().all(|x| *x == 0.0), || format!("{name} received hint gradient"))?;
        }
    }
    ensure(g.iter().any(|(n, v)| n.starts_with("adapt") && v.iter().any(|x| *x != 0.0)), || {
        "no adaptation gradient".into()
    })?;

    let run = |teacher_of: &dyn Fn(&Tensor<f64>) -> Tensor<f64>| {
        model.zero_grad();
        let out = model.forward(&x).unwrap();
        let teacher = teacher_of(&out.teacher_logits);
        kd_loss(&out.logits, &teacher, 2.0, false).unwrap().backward().unwrap();
        out.propagate_to_base().unwrap();
        grads(&model)
    };
    let detached = run(&|t| t.clone());
    let constant = run(&|t| Tensor::new(t.to_vec(), t.shape()).unwrap());
    let shift = Tensor::parameter(vec![0.0; 3], &[3]).unwrap();
    let shifted = run(&|t| t.add(&shift).unwrap());
    ensure(detached == constant && detached == shifted, || "teacher path changed gradients".into())?;
    ensure(shift.grad().is_none_or(|g| g.iter().all(|v| *v == 0.0)), || "teacher path received gradient".into())?;
    Ok("hint and teacher paths exact".into())
}

fn weighted_average_rows() -> Outcome {
    let rows: [([f64; 5], f64); 12] = [
        ([69.58, 64.47, 63.21, 55.64, 39.57], 161.71),
        ([68.27, 65.36, 62.35, 57.54, 40.14], 163.38),
        ([71.32, 69.58, 67.92, 62.69, 45.16], 178.16),
        ([72.11, 67.82, 65.55, 60.93, 43.19], 172.81),
        ([71.25, 69.32, 67.29, 62.16, 47.23], 179.31),
        ([71.05, 70.21, 68.01, 62.61, 45.10], 178.29),
        ([69.21, 66.56, 63.12, 58.85, 45.76], 171.18),
        ([68.57, 66.69, 64.34, 59.92, 47.26], 174.19),
        ([68.72, 68.19, 65.94, 62.09, 44.88], 175.14),
        ([69.37, 68.39, 66.44, 62.17, 46.82], 177.65),
        ([66.79, 64.92, 62.46, 57.78, 41.34], 164.37),
        ([67.97, 67.22, 65.37, 61.08, 46.69], 175.26),
    ];
    let mut worst = 0.0f64;
    for (row, printed) in rows {
        let got = weighted_student_average(&row);
        worst = worst.max((got - printed).abs());
        ensure((got - printed).abs() <= 0.02, || format!("{row:?}: {got:.4} vs {printed}"))?;
    }
    Ok(format!("12 rows, max |diff| {worst:.4}"))
}

fn size_law() -> Outcome {
    let report = size_report_for_spec(&resnet20_like(), 5);
    let want = [100.0, 62.95, 35.61, 15.50, 3.95];
    for (got, w) in report.relative_pct.iter().zip(want) {
        ensure((got - w).abs() <= 3.0, || format!("{:?}", report.relative_pct))?;
    }
    let pct: Vec<String> = report.relative_pct.iter().map(|p| format!("{p:.2}")).collect();
    Ok(pct.join(", "))
}

fn channel_ratios() -> Outcome {
    for m in [3, 6, 9, 48, 96, 300] {
        let got: Vec<usize> = (1..=3).map(|i| assign_channels(m, 3, i)).collect();
        ensure(got == vec![m, 2 * m / 3, m / 3], || format!("S=3 M={m}: {got:?}"))?;
    }
    for c in [4, 16, 64, 128, 256] {
        let got: Vec<usize> = (1..=4).map(|i| assign_channels(c, 4, i)).collect();
        ensure(got == vec![c, 3 * c / 4, c / 2, c / 4], || format!("S=4 C={c}: {got:?}"))?;
    }
    Ok("S=3 and S=4 exact".into())
}

fn loss_closed_forms() -> Outcome {
    let p = softened_softmax(&Tensor::new(vec![2.0f64, 0.0], &[1, 2]).unwrap(), 2.0).unwrap().to_vec();
    ensure((p[0] - 0.7311).abs() <= 1e-4 && (p[1] - 0.2689).abs() <= 1e-4, || format!("softmax {p:?}"))?;

    let teacher = Tensor::new(vec![0.75f64.ln(), 0.25f64.ln()], &[1, 2]).unwrap();
    let student = Tensor::new(vec![0.0f64, 0.0], &[1, 2]).unwrap();
    let kl = kd_loss(&[student], &teacher, 1.0, false).unwrap().item();
    ensure((kl - 0.13081).abs() <= 1e-5, || format!("KL {kl}"))?;

    for c in [2usize, 4, 10, 1000] {
        let ce = cross_entropy(&Tensor::new(vec![1.5f64; 2 * c], &[2, c]).unwrap(), &[0, c - 1]).unwrap().item();
        ensure((ce - (c as f64).ln()).abs() <= 1e-9, || format!("CE {ce} for C={c}"))?;
    }

    let logits = random_images::<f64>(3, &[5, 4]);
    let all = vec![logits; 3];
    let kd = kd_loss(&all, &combine_logits(&all, None).unwrap(), 2.0, false).unwrap().item();
    ensure(kd == 0.0, || format!("identical-student KD {kd}"))?;
    Ok(format!("p=({:.4}, {:.4}), KL={kl:.5}", p[0], p[1]))
}

fn extraction_fidelity() -> Outcome {
    let model = EnsembleModel::<f32>::build(&small_spec(), 3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let students: Vec<_> = (1..=3).map(|i| model.extract_student(i).unwrap()).collect();
    for k in 0..100u64 {
        let x = random_images::<f32>(500 + k, &[1, 1, 8, 8]);
        let out = model.forward(&x).unwrap();
        for (i, s) in students.iter().enumerate() {
            let got = s.forward(&x).unwrap().to_vec();
            ensure(got.iter().map(|v| v.to_bits()).eq(out.logits[i].to_vec().iter().map(|v| v.to_bits())), || {
                format!("student {} differs on input {k}", i + 1)
            })?;
        }
    }
    Ok("3 students x 100 inputs bit-identical".into())
}

fn desk_config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg")
}

fn method_effect() -> Outcome {
    let start = Instant::now();
    let cfg = load_config(&desk_config_path()).map_err(|e| e.to_string())?;
    let DataSource::Synth(p) = &cfg.data else {
        return Err("desk config must use synthetic data".into());
    };
    let data = synth_with(p).map_err(|e| e.to_string())?;
    let centroid = nearest_centroid_accuracy(&data);
    let shape_ok = cfg.students == 3
        && cfg.seeds.len() == 5
        && cfg.train.epochs == 30
        && cfg.architecture.blocks.len() == 4
        && (p.classes, p.train_per_class, p.test_per_class, p.height, p.width) == (4, 400, 200, 32, 32);
    ensure(shape_ok, || "desk config does not describe the required setup".into())?;
    let report = compare(&cfg.architecture, cfg.students, &data, &cfg.train, &cfg.seeds, cfg.threads)
        .map_err(|e| e.to_string())?;
    print!("{}", report.to_table());
    let (b, e) = (&report.baseline_mean, &report.ensemble_mean);
    let best = e.iter().copied().fold(f64::MIN, f64::max);
    let detail = format!(
        "s2 {:.2} vs {:.2}, s3 {:.2} vs {:.2}, teacher {:.2} vs best student {best:.2}, centroid {centroid:.1}, {:.0}s",
        e[1],
        b[1],
        e[2],
        b[2],
        report.teacher_mean,
        start.elapsed().as_secs_f64()
    );
    ensure(e[1] >= b[1] && e[2] >= b[2], || detail.clone())?;
    ensure(report.teacher_mean >= best - 0.5, || detail.clone())?;
    Ok(detail)
}

fn determinism_and_persistence() -> Outcome {
    let data = synth_dataset(3, 12, 8, 8, 5).unwrap();
    let config = TrainConfig {
        epochs: 3,
        batch_size: 8,
        base_lr: 0.01,
        seed: 3,
        ..TrainConfig::default()
    };
    let params = |m: &EnsembleModel<f32>| -> Vec<Vec<u32>> {
        m.parameters().iter().map(|p| p.tensor.to_vec().iter().map(|v| v.to_bits()).collect()).collect()
    };
    let full = || {
        let mut t = Trainer::new(initial_ensemble(&small_spec(), 3, 3).unwrap(), config.clone(), &data).unwrap();
        t.run(|_, _| Ok(())).unwrap();
        (metrics_csv(3, &t.history), params(&t.model))
    };
    let (csv_a, params_a) = full();
    let (csv_b, params_b) = full();
    ensure(csv_a == csv_b && params_a == params_b, || "repeated runs differ".into())?;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.kdc");
    {
        let mut t = Trainer::new(initial_ensemble(&small_spec(), 3, 3).unwrap(), config.clone(), &data).unwrap();
        t.run_epoch().unwrap();
        t.step().unwrap();
        save_checkpoint(&path, &t.model, &t.state, &t.history).unwrap();
    }
    let model = initial_ensemble(&small_spec(), 3, 11).unwrap();
    let (state, history) = load_checkpoint(&path, &model).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(model, config.clone(), &data).unwrap();
    t.set_state(state).unwrap();
    t.history = history;
    t.run(|_, _| Ok(())).unwrap();
    ensure(metrics_csv(3, &t.history) == csv_a && params(&t.model) == params_a, || "resumed run diverged".into())?;

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&path, bytes).unwrap();
    let target = initial_ensemble(&small_spec(), 3, 3).unwrap();
    let err = load_checkpoint::<f32>(&path, &target);
    ensure(matches!(err, Err(CheckpointError::Checksum { .. })), || format!("corruption gave {err:?}"))?;
    Ok("repeat, mid-epoch resume and checksum rejection".into())
}

fn schedule_fidelity() -> Outcome {
    for epochs in 1..=500usize {
        let cfg = TrainConfig {
            epochs,
            ..TrainConfig::default()
        };
        for e in 0..epochs {
            let x = e as f64 / epochs as f64;
            let want = if x < 0.5 {
                0.1
            } else if x < 0.75 {
                0.01
            } else {
                0.001
            };
            let got = lr_at(&cfg, e).map_err(|e| e.to_string())?;
            ensure((got - want).abs() <= 1e-12, || format!("epoch {e}/{epochs}: {got}"))?;
        }
    }
    Ok("epoch counts 1..=500".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient oracle", gradient_oracle),
        ("gradient scope", gradient_scope),
        ("weighted average rows", weighted_average_rows),
        ("student size law", size_law),
        ("channel ratios", channel_ratios),
        ("loss closed forms", loss_closed_forms),
        ("extraction fidelity", extraction_fidelity),
        ("desk-scale method effect", method_effect),
        ("determinism and persistence", determinism_and_persistence),
        ("learning-rate schedule", schedule_fidelity),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|k| k != n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
