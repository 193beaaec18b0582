use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# small and quick
model.input = 1x16x16
model.classes = 3
model.base = conv:4:3:1, maxpool:2:2
model.block2 = res:6:3:1:1
model.block3 = res:9:3:2:1
model.block4 = conv:12:3:2
ensemble.students = 3
train.epochs = 2
train.batch_size = 16
train.lr = 0.01
data.synth.classes = 3
data.synth.per_class = 16
data.synth.test_per_class = 8
data.synth.size = 16x16
data.synth.seed = 4
run.seeds = 1,2
";

fn ekd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ekd")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, cfg: &Path, out: &str) -> PathBuf {
    let out = dir.join(out);
    let o = ekd(&["train", "--config", s(cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn train_extract_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let out = train(dir.path(), &cfg, "a");
    for f in ["metrics.csv", "best.ckpt", "last.ckpt", "config.used"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "# kdc-metrics v1");
    assert_eq!(lines[1], "epoch,lr,normal,intermediate,kd,combined,student1_acc,student2_acc,student3_acc,teacher_acc");
    assert_eq!(lines.len(), 4);

    let ckpt = out.join("last.ckpt");
    let eval = stdout(&ekd(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]));
    let student3 = eval.lines().find(|l| l.starts_with("student3 ")).unwrap().to_string();
    let file = dir.path().join("s3.kdc");
    let o = ekd(&["extract", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--student", "3", "--output", s(&file)]);
    assert_eq!(code(&o), 0);
    let alone = stdout(&ekd(&["eval", "--config", s(&cfg), "--checkpoint", s(&file)]));
    assert_eq!(alone.trim(), student3);

    let pgm = dir.path().join("cam.pgm");
    let o = ekd(&["gradcam", "--config", s(&cfg), "--checkpoint", s(&file), "--index", "2", "--output", s(&pgm)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5\n"));
}

#[test]
fn repeated_training_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let a = train(dir.path(), &cfg, "a");
    let b = train(dir.path(), &cfg, "b");
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("last.ckpt")).unwrap(), fs::read(b.join("last.ckpt")).unwrap());
}

#[test]
fn resuming_a_finished_run_keeps_its_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let a = train(dir.path(), &cfg, "a");
    let before = fs::read(a.join("metrics.csv")).unwrap();
    let o = ekd(&["train", "--config", s(&cfg), "--out", s(&a), "--resume", s(&a.join("last.ckpt"))]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), before);
}

#[test]
fn bad_inputs_exit_with_validation_or_runtime_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.cfg", "loss.alpha = 0.5\n");
    let o = ekd(&["size", "--config", s(&bad)]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 1") && err.contains("0.8"), "{err}");
    assert_eq!(code(&ekd(&["frobnicate"])), 1);
    assert_eq!(code(&ekd(&["--help"])), 0);

    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let out = train(dir.path(), &cfg, "a");
    let mut bytes = fs::read(out.join("last.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let broken = dir.path().join("broken.ckpt");
    fs::write(&broken, bytes).unwrap();
    let o = ekd(&["eval", "--config", s(&cfg), "--checkpoint", s(&broken)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));

    let five = write_config(dir.path(), "five.cfg", &TINY.replace("ensemble.students = 3", "ensemble.students = 5"));
    let o = ekd(&["eval", "--config", s(&five), "--checkpoint", s(&out.join("last.ckpt"))]);
    assert_eq!(code(&o), 1);
    let o = ekd(&["extract", "--config", s(&cfg), "--checkpoint", s(&out.join("last.ckpt")), "--student", "4", "--output", "x"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&ekd(&["eval", "--config", s(&cfg), "--checkpoint", "missing.ckpt"])), 2);
}

#[test]
fn gradcheck_size_and_synth() {
    let o = ekd(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("combined ensemble loss"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let size = stdout(&ekd(&["size", "--config", s(&cfg)]));
    assert!(size.starts_with("student,params,relative_pct\n1,"));
    assert_eq!(size.lines().count(), 4);

    let data = dir.path().join("tiny.dsb");
    assert_eq!(code(&ekd(&["synth", "--config", s(&cfg), "--output", s(&data)])), 0);
    let from_file = write_config(
        dir.path(),
        "file.cfg",
        &TINY
            .lines()
            .filter(|l| !l.starts_with("data."))
            .chain(["data.path = tiny.dsb"])
            .collect::<Vec<_>>()
            .join("\n"),
    );
    let a = train(dir.path(), &cfg, "synth");
    let b = train(dir.path(), &from_file, "file");
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn compare_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", &TINY.replace("train.epochs = 2", "train.epochs = 1"));
    let out = dir.path().join("cmp");
    let o = ekd(&["compare", "--config", s(&cfg), "--seeds", "1,2", "--threads", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert!(table.starts_with("seeds: 1,2\n"));
    assert!(table.contains("weighted average") && table.contains("ensemble teacher"));
    let csv = fs::read_to_string(out.join("compare.csv")).unwrap();
    // two seeds × (3 ensemble students + teacher + 3 baseline students) + header
    assert_eq!(csv.lines().count(), 1 + 2 * 7);
}
