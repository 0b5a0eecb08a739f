//! Binary, little-endian, magic-versioned snapshots.
//!
//! Two formats share the layout conventions:
//!
//! - model file (`LDAUNN01`): encoder layer count, then per layer
//!   `out_dim: u32, in_dim: u32, activation: u8`, row-major weights and the
//!   bias as `f64`; classifier stack follows in the same shape.
//! - full checkpoint (`LDAUCKPT` + `version: u32`): the model section, the
//!   mixture (k, p, weights, means, covariances, reg epsilon), the replay
//!   buffer (budget, class count, entries), the completed time-step count,
//!   and the next global epoch index.
//!
//! A checkpoint written after every time-step makes a task stream resumable.

use std::fs;
use std::path::Path;

use crate::buffer::{BufferEntry, ReplayBuffer};
use crate::error::{Error, Result};
use crate::gmm::GmmState;
use crate::matrix::Matrix;
use crate::nn::{Activation, Layer, ModelParams};
use crate::trainer::TrainerState;

const MODEL_MAGIC: &[u8; 8] = b"LDAUNN01";
const CHECKPOINT_MAGIC: &[u8; 8] = b"LDAUCKPT";
const CHECKPOINT_VERSION: u32 = 1;

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { bytes: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let slice = self
            .bytes
            .get(self.offset..self.offset + len)
            .ok_or_else(|| self.fail(format!("truncated: expected {len} more bytes")))?;
        self.offset += len;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn expect_end(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            Err(self.fail(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.offset
            )))
        } else {
            Ok(())
        }
    }
}

fn write_layers(w: &mut Writer, layers: &[Layer]) {
    w.u32(layers.len() as u32);
    for layer in layers {
        w.u32(layer.out_dim() as u32);
        w.u32(layer.in_dim() as u32);
        w.bytes.push(layer.activation.tag());
        w.f64s(layer.weight.data());
        w.f64s(&layer.bias);
    }
}

fn read_layers(r: &mut Reader) -> Result<Vec<Layer>> {
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let out_dim = r.u32()? as usize;
        let in_dim = r.u32()? as usize;
        let tag = r.take(1)?[0];
        let activation = Activation::from_tag(tag)
            .ok_or_else(|| r.fail(format!("unknown activation tag {tag}")))?;
        let weight = Matrix::from_flat(out_dim, in_dim, r.f64s(out_dim * in_dim)?)?;
        weight.require_finite("layer weights")?;
        let bias = r.f64s(out_dim)?;
        layers.push(Layer::new(weight, bias, activation)?);
    }
    Ok(layers)
}

fn model_bytes(model: &ModelParams, w: &mut Writer) {
    w.bytes.extend_from_slice(MODEL_MAGIC);
    write_layers(w, &model.encoder_layers);
    write_layers(w, &model.classifier_layers);
}

fn model_from_reader(r: &mut Reader) -> Result<ModelParams> {
    let magic = r.take(8)?;
    if magic != MODEL_MAGIC {
        return Err(Error::Parse {
            path: r.path.to_path_buf(),
            offset: (r.offset - 8) as u64,
            message: format!("bad model magic {magic:02x?}"),
        });
    }
    let encoder = read_layers(r)?;
    let classifier = read_layers(r)?;
    ModelParams::new(encoder, classifier)
}

/// Writes just the network weights (`LDAUNN01` format).
pub fn write_model(model: &ModelParams, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    model_bytes(model, &mut w);
    fs::write(path, &w.bytes).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        offset: 0,
    };
    let model = model_from_reader(&mut r)?;
    r.expect_end()?;
    Ok(model)
}

/// Writes the resumable trainer snapshot: model, mixture, buffer,
/// time-step, and epoch counter.
pub fn write_checkpoint(state: &TrainerState, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.bytes.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);

    model_bytes(&state.model, &mut w);

    match &state.gmm {
        None => w.bytes.push(0),
        Some(gmm) => {
            w.bytes.push(1);
            w.u32(gmm.k() as u32);
            w.u32(gmm.p() as u32);
            w.f64s(&gmm.weights);
            w.f64s(gmm.means.data());
            for cov in &gmm.covariances {
                w.f64s(cov.data());
            }
            w.f64(gmm.reg_epsilon);
        }
    }

    w.u32(state.buffer.per_task_budget() as u32);
    w.u32(state.buffer.num_classes() as u32);
    w.u64(state.buffer.len() as u64);
    let input_dim = state
        .buffer
        .entries()
        .first()
        .map_or(0, |e| e.input.len());
    w.u32(input_dim as u32);
    for e in state.buffer.entries() {
        w.f64s(&e.input);
        w.u32(e.pseudo_label as u32);
        w.u32(e.source_task as u32);
        w.f64(e.distance_to_mean);
    }

    w.u64(state.time_step as u64);
    w.u64(state.global_epoch as u64);
    fs::write(path, &w.bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint written by [`write_checkpoint`]. The metrics history
/// is not part of the snapshot; the returned state starts with an empty one.
pub fn read_checkpoint(path: &Path, run_id: impl Into<String>) -> Result<TrainerState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        offset: 0,
    };
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad checkpoint magic {magic:02x?}"),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }

    let model = model_from_reader(&mut r)?;

    let gmm = match r.take(1)?[0] {
        0 => None,
        1 => {
            let k = r.u32()? as usize;
            let p = r.u32()? as usize;
            let weights = r.f64s(k)?;
            let means = Matrix::from_flat(k, p, r.f64s(k * p)?)?;
            let mut covariances = Vec::with_capacity(k);
            for _ in 0..k {
                covariances.push(Matrix::from_flat(p, p, r.f64s(p * p)?)?);
            }
            let reg_epsilon = r.f64()?;
            let gmm = GmmState {
                weights,
                means,
                covariances,
                reg_epsilon,
            };
            gmm.validate()?;
            Some(gmm)
        }
        tag => return Err(r.fail(format!("bad mixture presence tag {tag}"))),
    };

    let per_task_budget = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let entry_count = r.u64()? as usize;
    let input_dim = r.u32()? as usize;
    let mut entries = Vec::with_capacity(entry_count);
    for _ in 0..entry_count {
        let input = r.f64s(input_dim)?;
        let pseudo_label = r.u32()? as usize;
        let source_task = r.u32()? as usize;
        let distance_to_mean = r.f64()?;
        entries.push(BufferEntry {
            input,
            pseudo_label,
            source_task,
            distance_to_mean,
        });
    }
    let buffer = ReplayBuffer::from_parts(entries, per_task_budget, num_classes)?;

    let time_step = r.u64()? as usize;
    let global_epoch = r.u64()? as usize;
    r.expect_end()?;

    Ok(TrainerState {
        model,
        gmm,
        buffer,
        time_step,
        history: Vec::new(),
        run_id: run_id.into(),
        global_epoch,
        learning_rate: 1e-3,
    })
}
