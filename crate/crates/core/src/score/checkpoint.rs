//! `TPDMCKPT1` checkpoints for [`NeuralScore`].
//!
//! Layout: the 9 ASCII bytes `TPDMCKPT1`, a little-endian `u32` header
//! length, a UTF-8 JSON [`CheckpointHeader`], then `param_count`
//! little-endian f32 parameters. Parameters follow the convolution order;
//! within a layer the weights are `[cout][cin][ky][kx]` followed by the
//! `cout` biases. When `optimizer_state` is set, the Adam first and second
//! moments follow in the same order and layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::neural::{Architecture, NeuralScore};
use super::train::{LossPoint, TrainState};
use crate::container::write_file;
use crate::error::{Error, Result};
use crate::sde::NoiseSchedule;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"TPDMCKPT1";

const MAX_HEADER_LEN: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    /// Completed optimiser steps.
    pub iterations: u64,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Which slice family the model was trained on, e.g. `"axis3"`.
    pub slice_axis: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    pub schedule: NoiseSchedule,
    pub training: TrainingMeta,
    pub param_count: usize,
    pub optimizer_state: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: NeuralScore,
    pub state: Option<TrainState>,
}

fn push_f32s(out: &mut Vec<u8>, vals: &[f64]) {
    for &v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::CorruptFile(msg.into()))
}

impl Checkpoint {
    pub fn new(model: NeuralScore, state: Option<TrainState>, training: TrainingMeta) -> Self {
        Self {
            header: CheckpointHeader {
                architecture: *model.architecture(),
                schedule: *crate::score::ScoreModel::schedule(&model),
                training,
                param_count: model.param_count(),
                optimizer_state: state.is_some(),
            },
            model,
            state,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        push_f32s(&mut out, self.model.params());
        if let Some(s) = &self.state {
            push_f32s(&mut out, &s.m);
            push_f32s(&mut out, &s.v);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let m = CHECKPOINT_MAGIC.len();
        if bytes.len() < m + 4 || &bytes[..m] != CHECKPOINT_MAGIC {
            return corrupt("bad checkpoint magic, expected TPDMCKPT1");
        }
        let hlen = u32::from_le_bytes(bytes[m..m + 4].try_into().unwrap()) as usize;
        let body_start = m + 4 + hlen;
        if hlen > MAX_HEADER_LEN || body_start > bytes.len() {
            return corrupt(format!("checkpoint header length {hlen} exceeds file"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[m + 4..body_start])
            .map_err(|e| Error::CorruptFile(format!("bad checkpoint header: {e}")))?;
        header
            .architecture
            .validate()
            .map_err(|e| Error::CorruptFile(e.to_string()))?;
        header
            .schedule
            .validate()
            .map_err(|e| Error::CorruptFile(e.to_string()))?;
        let n = header.architecture.param_count();
        if n != header.param_count {
            return corrupt(format!(
                "header param_count {} disagrees with architecture ({n})",
                header.param_count
            ));
        }
        let blocks = if header.optimizer_state { 3 } else { 1 };
        let body = &bytes[body_start..];
        if Some(body.len()) != n.checked_mul(4 * blocks) {
            return corrupt(format!(
                "checkpoint payload is {} bytes, expected {}",
                body.len(),
                n * 4 * blocks
            ));
        }
        let vals: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let model =
            NeuralScore::from_params(header.architecture, header.schedule, vals[..n].to_vec())
                .map_err(|e| Error::CorruptFile(e.to_string()))?;
        let state = header.optimizer_state.then(|| TrainState {
            step: header.training.iterations,
            m: vals[n..2 * n].to_vec(),
            v: vals[2 * n..].to_vec(),
        });
        Ok(Checkpoint {
            header,
            model,
            state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::decode(&std::fs::read(path)?)
    }
}

/// Loss trace as CSV with header `iteration,loss`.
pub fn loss_csv(trace: &[LossPoint]) -> String {
    let mut out = String::from("iteration,loss\n");
    for p in trace {
        out.push_str(&format!("{},{:e}\n", p.iteration, p.loss));
    }
    out
}
