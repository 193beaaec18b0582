//! KDC1 checkpoint container.
//!
//! Little-endian layout: magic `KDC1`, `u32` version, 32-byte model
//! fingerprint, a parameter table, a state table and a trailing `u64`
//! checksum over every preceding byte. Each table is a `u32` entry count
//! followed by entries of `u16` name length, UTF-8 name, `u8` rank, `u32`
//! extents and `f32` payload.
//!
//! Integer and `f64` state values do not fit an `f32` payload losslessly,
//! so they are stored as raw bit patterns split over two payload words.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::format_layers;
use crate::ensemble::{ArchitectureSpec, EnsembleModel, StudentModel};
use crate::eval::Metrics;
use crate::layers::Param;
use crate::losses::LossValues;
use crate::tensor::Element;
use crate::trainer::{EpochRecord, TrainingState};

pub const MAGIC: &[u8; 4] = b"KDC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a KDC1 checkpoint")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error("checkpoint was written for a different architecture or ensemble size")]
    Fingerprint,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

/// One named array. The payload is kept as `f32` bit patterns so raw
/// words survive untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: Vec<u32>,
}

impl Entry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Entry {
            name: name.into(),
            shape,
            bits: data.into_iter().map(f32::to_bits).collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.bits.iter().map(|b| f32::from_bits(*b))
    }

    fn from_param<T: Element>(p: &Param<T>) -> Self {
        Entry::new(&p.name, p.tensor.shape().to_vec(), p.tensor.data().iter().map(|v| Element::to_f64(*v) as f32).collect())
    }

    /// Stores 64-bit words losslessly, two payload slots per word.
    pub fn raw(name: impl Into<String>, words: &[u64]) -> Self {
        Entry {
            name: name.into(),
            shape: vec![words.len(), 2],
            bits: words.iter().flat_map(|w| [*w as u32, (*w >> 32) as u32]).collect(),
        }
    }

    pub fn raw_words(&self) -> CkResult<Vec<u64>> {
        if self.shape.len() != 2 || self.shape[1] != 2 {
            return Err(CheckpointError::Malformed(format!("{} is not a raw word array", self.name)));
        }
        Ok(self
            .bits
            .chunks_exact(2)
            .map(|c| c[0] as u64 | ((c[1] as u64) << 32))
            .collect())
    }

    pub fn raw_f64(name: impl Into<String>, values: &[f64]) -> Self {
        Entry::raw(name, &values.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    }

    pub fn raw_f64s(&self) -> CkResult<Vec<f64>> {
        Ok(self.raw_words()?.into_iter().map(f64::from_bits).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub fingerprint: [u8; 32],
    pub params: Vec<Entry>,
    pub state: Vec<Entry>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

fn put_table(out: &mut Vec<u8>, entries: &[Entry]) -> CkResult<()> {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| CheckpointError::Malformed(format!("name too long: {}", e.name)))?;
        let rank = u8::try_from(e.shape.len()).map_err(|_| CheckpointError::Malformed(format!("rank too large: {}", e.name)))?;
        if e.shape.iter().product::<usize>() != e.bits.len() {
            return Err(CheckpointError::Malformed(format!("{}: payload does not match shape", e.name)));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &x in &e.shape {
            let x = u32::try_from(x).map_err(|_| CheckpointError::Malformed(format!("extent too large: {}", e.name)))?;
            out.extend_from_slice(&x.to_le_bytes());
        }
        for v in &e.bits {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CkResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> CkResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn table(&mut self) -> CkResult<Vec<Entry>> {
        let count = self.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?
                .to_string();
            let rank = self.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| self.u32().map(|x| x as usize)).collect::<CkResult<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &x| a.checked_mul(x))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: extents overflow")))?;
            let raw = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let bits = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            entries.push(Entry { name, shape, bits });
        }
        Ok(entries)
    }
}

impl Container {
    pub fn to_bytes(&self) -> CkResult<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        put_table(&mut out, &self.params)?;
        put_table(&mut out, &self.state)?;
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    /// Validates magic, checksum and version, then parses both tables.
    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 4 + 4 + 32 + 8 {
            return Err(CheckpointError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = checksum(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let params = r.table()?;
        let state = r.table()?;
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!("{} unexpected trailing bytes", body.len() - r.pos)));
        }
        Ok(Container { fingerprint, params, state })
    }

    pub fn write(&self, path: &Path) -> CkResult<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> CkResult<Self> {
        Container::from_bytes(&std::fs::read(path)?)
    }

    pub fn state_entry(&self, name: &str) -> CkResult<&Entry> {
        self.state
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("missing state entry {name}")))
    }
}

/// Hash of the architecture and ensemble size. Stored in every checkpoint
/// to catch loading into a differently configured model.
pub fn model_fingerprint(spec: &ArchitectureSpec, students: usize) -> [u8; 32] {
    let [c, h, w] = spec.input_shape;
    let mut text = format!("input={c}x{h}x{w};classes={};", spec.num_classes);
    for b in &spec.blocks {
        text.push_str(&format!("block{}={};", b.index, format_layers(&b.layers)));
    }
    text.push_str(&format!("students={students}"));
    Sha256::digest(text.as_bytes()).into()
}

/// Copies stored values into `params`, requiring identical names, order
/// and shapes.
fn load_params<T: Element>(entries: &[Entry], params: &[Param<T>]) -> CkResult<()> {
    if entries.len() != params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} stored parameters, model has {}",
            entries.len(),
            params.len()
        )));
    }
    for (e, p) in entries.iter().zip(params) {
        if e.name != p.name || e.shape != p.tensor.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "stored {} {:?} vs model {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.tensor.shape()
            )));
        }
    }
    for (e, p) in entries.iter().zip(params) {
        let mut d = p.tensor.data_mut();
        for (dst, src) in d.iter_mut().zip(e.values()) {
            *dst = T::from_f64(src as f64);
        }
    }
    Ok(())
}

const HISTORY_FIXED: usize = 6;

fn state_entries<T: Element>(params: &[Param<T>], state: &TrainingState<T>, history: &[EpochRecord]) -> Vec<Entry> {
    let mut out: Vec<Entry> = params
        .iter()
        .zip(&state.velocity)
        .map(|(p, v)| Entry::new(format!("velocity.{}", p.name), p.tensor.shape().to_vec(), v.iter().map(|x| Element::to_f64(*x) as f32).collect()))
        .collect();
    out.push(Entry::raw("state.counters", &[state.step, state.epoch as u64, state.batch_in_epoch as u64]));
    let r = &state.running;
    out.push(Entry::raw_f64("state.running", &[r.normal, r.intermediate, r.kd, r.combined]));
    out.push(Entry::raw_f64("state.best_student", &state.best_student));
    out.push(Entry::raw_f64("state.best_teacher", &[state.best_teacher]));
    let mut rows = Vec::new();
    for rec in history {
        let l = &rec.losses;
        rows.extend_from_slice(&[rec.epoch as f64, rec.lr, l.normal, l.intermediate, l.kd, l.combined]);
        rows.extend_from_slice(&rec.test.per_student_top1);
        rows.push(rec.test.teacher_top1);
    }
    out.push(Entry::raw_f64("state.history", &rows));
    out
}

fn restore_state<T: Element>(c: &Container, params: &[Param<T>], students: usize) -> CkResult<(TrainingState<T>, Vec<EpochRecord>)> {
    let mut state = TrainingState::new(params, students);
    for (p, v) in params.iter().zip(state.velocity.iter_mut()) {
        let e = c.state_entry(&format!("velocity.{}", p.name))?;
        if e.shape != p.tensor.shape() {
            return Err(CheckpointError::Mismatch(format!("velocity for {} has shape {:?}", p.name, e.shape)));
        }
        *v = e.values().map(|x| T::from_f64(x as f64)).collect();
    }
    let counters = c.state_entry("state.counters")?.raw_words()?;
    let running = c.state_entry("state.running")?.raw_f64s()?;
    let best = c.state_entry("state.best_student")?.raw_f64s()?;
    let teacher = c.state_entry("state.best_teacher")?.raw_f64s()?;
    if counters.len() != 3 || running.len() != 4 || best.len() != students || teacher.len() != 1 {
        return Err(CheckpointError::Malformed("training counters have unexpected lengths".into()));
    }
    state.step = counters[0];
    state.epoch = counters[1] as usize;
    state.batch_in_epoch = counters[2] as usize;
    state.running = LossValues {
        normal: running[0],
        intermediate: running[1],
        kd: running[2],
        combined: running[3],
    };
    state.best_student = best;
    state.best_teacher = teacher[0];
    let width = HISTORY_FIXED + students + 1;
    let rows = c.state_entry("state.history")?.raw_f64s()?;
    if rows.len() % width != 0 {
        return Err(CheckpointError::Malformed("history rows have unexpected width".into()));
    }
    let history = rows
        .chunks_exact(width)
        .map(|r| EpochRecord {
            epoch: r[0] as usize,
            lr: r[1],
            losses: LossValues {
                normal: r[2],
                intermediate: r[3],
                kd: r[4],
                combined: r[5],
            },
            test: Metrics::new(r[HISTORY_FIXED..width - 1].to_vec(), r[width - 1]),
        })
        .collect();
    Ok((state, history))
}

/// Serializes an ensemble with its optimizer state and metric history.
pub fn checkpoint_container<T: Element>(
    model: &EnsembleModel<T>,
    state: &TrainingState<T>,
    history: &[EpochRecord],
) -> Container {
    let params = model.parameters();
    Container {
        fingerprint: model_fingerprint(&model.spec, model.ensemble_size),
        params: params.iter().map(Entry::from_param).collect(),
        state: state_entries(&params, state, history),
    }
}

pub fn save_checkpoint<T: Element>(
    path: &Path,
    model: &EnsembleModel<T>,
    state: &TrainingState<T>,
    history: &[EpochRecord],
) -> CkResult<()> {
    checkpoint_container(model, state, history).write(path)
}

/// Loads parameters into `model` (built from the same config) and returns
/// the stored training state and history.
pub fn restore_container<T: Element>(
    c: &Container,
    model: &EnsembleModel<T>,
) -> CkResult<(TrainingState<T>, Vec<EpochRecord>)> {
    let params = model.parameters();
    load_params(&c.params, &params)?;
    if c.fingerprint != model_fingerprint(&model.spec, model.ensemble_size) {
        return Err(CheckpointError::Fingerprint);
    }
    restore_state(c, &params, model.num_students())
}

pub fn load_checkpoint<T: Element>(path: &Path, model: &EnsembleModel<T>) -> CkResult<(TrainingState<T>, Vec<EpochRecord>)> {
    restore_container(&Container::read(path)?, model)
}

/// Writes a standalone student. The state table records which student it
/// is so it can only be loaded into a matching build.
pub fn save_student<T: Element>(path: &Path, student: &StudentModel<T>) -> CkResult<()> {
    Container {
        fingerprint: model_fingerprint(&student.spec, student.ensemble_size),
        params: student.parameters().iter().map(Entry::from_param).collect(),
        state: vec![Entry::raw("meta.student_index", &[student.index() as u64])],
    }
    .write(path)
}

pub fn load_student<T: Element>(path: &Path, student: &StudentModel<T>) -> CkResult<()> {
    let c = Container::read(path)?;
    let index = c.state_entry("meta.student_index")?.raw_words()?;
    if index != [student.index() as u64] {
        return Err(CheckpointError::Mismatch(format!(
            "file holds student {:?}, expected {}",
            index,
            student.index()
        )));
    }
    load_params(&c.params, &student.parameters())?;
    if c.fingerprint != model_fingerprint(&student.spec, student.ensemble_size) {
        return Err(CheckpointError::Fingerprint);
    }
    Ok(())
}

/// Reads only the stored student index of a standalone student file.
pub fn student_file_index(path: &Path) -> CkResult<usize> {
    let c = Container::read(path)?;
    let w = c.state_entry("meta.student_index")?.raw_words()?;
    w.first().map(|&i| i as usize).ok_or_else(|| CheckpointError::Malformed("empty student index".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            fingerprint: [7; 32],
            params: vec![Entry::new("a.kernel", vec![2, 3], vec![0.5, -1.0, 2.0, 3.5, 0.0, -0.25])],
            state: vec![Entry::raw("counters", &[u64::MAX, 3]), Entry::raw_f64("x", &[0.1, f64::MIN_POSITIVE])],
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.state[0].raw_words().unwrap(), vec![u64::MAX, 3]);
        assert_eq!(back.state[1].raw_f64s().unwrap(), vec![0.1, f64::MIN_POSITIVE]);
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes().unwrap();
        for pos in [5, 50, bytes.len() - 12, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(matches!(Container::from_bytes(&bad), Err(CheckpointError::Checksum { .. })), "byte {pos}");
        }
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Checksum { .. })));
        assert!(matches!(Container::from_bytes(b"KDC0rest"), Err(CheckpointError::BadMagic)));
        assert!(matches!(Container::from_bytes(b"KDC1"), Err(CheckpointError::Truncated)));
    }

    #[test]
    fn version_checked_after_checksum() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        let n = bytes.len() - 8;
        let sum = checksum(&bytes[..n]);
        bytes[n..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 9, expected: 1 })
        ));
    }
}
