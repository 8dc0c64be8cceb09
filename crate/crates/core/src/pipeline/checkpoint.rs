//! Versioned checkpoint container: a single-line JSON header (model
//! config, parameter names/labels/shapes, training counters) followed by
//! raw little-endian f64 tensor payloads. Headers stay diffable; payloads
//! round-trip bit-exactly.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, PlannerModel};
use crate::tensor::ParamLabel;

use super::PipelineError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub sft_epochs_done: usize,
    pub rft_steps_done: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    label: ParamLabel,
    rows: usize,
    cols: usize,
    adam_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    model_seed: u64,
    params: Vec<ParamMeta>,
    optimizer_step: u64,
    has_optimizer_state: bool,
    progress: Progress,
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f64s(r: &mut impl Read, count: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Serialize the model, optimizer state, and progress counters.
pub fn save_checkpoint(
    model: &PlannerModel,
    model_seed: u64,
    progress: Progress,
    path: &Path,
) -> Result<(), PipelineError> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        model_config: model.cfg.clone(),
        model_seed,
        params: model
            .store
            .params()
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                label: p.label,
                rows: p.rows,
                cols: p.cols,
                adam_step: p.step,
            })
            .collect(),
        optimizer_step: model.store.step,
        has_optimizer_state: true,
        progress,
    };
    let file = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| PipelineError::io(path, e);
    serde_json::to_writer(&mut w, &header).map_err(|e| PipelineError::Format(e.to_string()))?;
    w.write_all(b"\n").map_err(io)?;
    for p in model.store.params() {
        write_f64s(&mut w, &p.data).map_err(|e| PipelineError::io(path, e))?;
    }
    for p in model.store.params() {
        write_f64s(&mut w, &p.m).map_err(|e| PipelineError::io(path, e))?;
        write_f64s(&mut w, &p.v).map_err(|e| PipelineError::io(path, e))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))?;
    Ok(())
}

/// Rebuild a model from a checkpoint; forward outputs are bit-identical to
/// the saved model's.
pub fn load_checkpoint(path: &Path) -> Result<(PlannerModel, Progress), PipelineError> {
    let file = std::fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(|e| PipelineError::io(path, e))?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| PipelineError::Format(format!("bad checkpoint header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(PipelineError::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }

    let mut model = PlannerModel::new(header.model_config.clone(), header.model_seed)
        .map_err(|e| PipelineError::Format(e.to_string()))?;
    if model.store.len() != header.params.len() {
        return Err(PipelineError::Format(format!(
            "checkpoint has {} parameters, architecture expects {}",
            header.params.len(),
            model.store.len()
        )));
    }
    for (i, meta) in header.params.iter().enumerate() {
        let p = model.store.param(crate::tensor::ParamId(i));
        if p.name != meta.name || p.label != meta.label || (p.rows, p.cols) != (meta.rows, meta.cols)
        {
            return Err(PipelineError::Format(format!(
                "parameter {i} mismatch: checkpoint {} vs architecture {}",
                meta.name, p.name
            )));
        }
    }
    let counts: Vec<usize> = header.params.iter().map(|m| m.rows * m.cols).collect();
    for (i, &count) in counts.iter().enumerate() {
        let data = read_f64s(&mut r, count).map_err(|e| PipelineError::io(path, e))?;
        model.store.set_data(crate::tensor::ParamId(i), data);
    }
    if header.has_optimizer_state {
        for (i, &count) in counts.iter().enumerate() {
            let m = read_f64s(&mut r, count).map_err(|e| PipelineError::io(path, e))?;
            let v = read_f64s(&mut r, count).map_err(|e| PipelineError::io(path, e))?;
            model.store.set_optimizer_state(crate::tensor::ParamId(i), m, v);
        }
        for (i, meta) in header.params.iter().enumerate() {
            model.store.set_adam_step(crate::tensor::ParamId(i), meta.adam_step);
        }
    }
    model.store.step = header.optimizer_step;
    Ok((model, header.progress))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::MASK_TOKEN;
    use crate::model::{BatchItem, ExpertId, ModelConfig, SceneContext};
    use crate::tensor::Mat;

    fn tiny_model() -> PlannerModel {
        let cfg = ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_shared_blocks: 1,
            n_expert_blocks: 1,
            vocab_size: 24,
            max_context_len: 8,
            response_len: 6,
            mlp_ratio: 2,
            patch_size: 4,
            grid_size: 8,
            grid_channels: 2,
            strict_confinement: true,
        };
        let mut m = PlannerModel::new(cfg, 17).unwrap();
        m.init_refinement_from_generation();
        m
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let progress = Progress { sft_epochs_done: 7, rft_steps_done: 3 };
        save_checkpoint(&model, 17, progress, &path).unwrap();
        let (loaded, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(progress, p2);
        assert_eq!(loaded.store.step, model.store.step);
        for (a, b) in model.store.params().iter().zip(loaded.store.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.label, b.label);
            assert_eq!(a.data.as_slice(), b.data.as_slice());
        }

        let ctx = SceneContext {
            patches: Mat::from_fn(4, 32, |i, j| (i as f64 - j as f64) * 0.03),
            command: 1,
        };
        let resp = vec![MASK_TOKEN; 6];
        let item = BatchItem { ctx: &ctx, response: &resp };
        let a = model.logits(&[item], ExpertId::Generation).unwrap();
        let b = loaded.logits(&[item], ExpertId::Generation).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn corrupted_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"{not json}\n").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(PipelineError::Format(_))));
    }
}
