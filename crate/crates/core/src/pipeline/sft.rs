//! Supervised fine-tuning: masked-diffusion objective on the generation
//! branch and denoising cross-entropy on the refinement branch, per batch,
//! with cosine learning-rate decay. Training state is fully determined by
//! `(RunConfig, seed, epoch)`, so a run resumed from a checkpoint
//! continues bit-identically.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::codec::{clamp_to_range, encode_trajectory, Axis, Trajectory};
use crate::diffusion::{corrupt, refine_sft_pair, sample, sft_loss_batch, Schedule, ScheduleKind};
use crate::model::{encode_context, BatchItem, ExpertId, PlannerModel};
use crate::rl::SceneBundle;
use crate::rng::{derive, Stream};
use crate::sim::{expert_plan, rasterize, Scene};
use crate::tensor::{AdamW, ParamLabel, Tape};

use super::checkpoint::{load_checkpoint, save_checkpoint, Progress};
use super::config::RunConfig;
use super::scenes::load_scenes;
use super::PipelineError;

/// A scene with its cached conditioning and expert-token target.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub bundle: SceneBundle,
    pub expert_tokens: Vec<u32>,
}

/// Rasterize, plan, and tokenize every feasible scene. Infeasible entries
/// are skipped with a warning.
pub fn prepare_examples(
    scenes: &[Scene],
    cfg: &RunConfig,
) -> Result<Vec<TrainExample>, PipelineError> {
    let codec = cfg.codec();
    let sim_cfg = cfg.sim();
    let model_cfg = cfg.model();
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let expert = match expert_plan(scene, &sim_cfg) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("warning: skipping scene seed {}: {e}", scene.seed);
                continue;
            }
        };
        let clamped = Trajectory::new(
            expert
                .waypoints
                .iter()
                .map(|w| crate::codec::Waypoint {
                    x: clamp_to_range(w.x, Axis::Spatial, &codec),
                    y: clamp_to_range(w.y, Axis::Spatial, &codec),
                    heading: clamp_to_range(w.heading, Axis::Heading, &codec),
                })
                .collect(),
            expert.dt,
        );
        let expert_tokens =
            encode_trajectory(&clamped, &codec).map_err(|e| PipelineError::Format(e.to_string()))?;
        let grid = rasterize(scene, &sim_cfg);
        let ctx = encode_context(&grid, scene.command, &model_cfg);
        out.push(TrainExample { bundle: SceneBundle { scene: scene.clone(), ctx }, expert_tokens });
    }
    if out.is_empty() {
        return Err(PipelineError::Format("no feasible scenes to train on".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftLogRow {
    pub epoch: usize,
    pub gen_loss: f64,
    pub refine_loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct SftOutcome {
    pub epochs_done: usize,
    pub rows: Vec<SftLogRow>,
}

pub struct SftOptions<'a> {
    pub scenes_path: &'a Path,
    pub out_ckpt: &'a Path,
    pub resume: Option<&'a Path>,
    pub log_path: Option<&'a Path>,
    /// Stop after this many epochs in this invocation (training can be
    /// continued later via `resume`); `None` runs to `sft_epochs`.
    pub max_epochs_this_call: Option<usize>,
}

fn cosine_lr(cfg: &RunConfig, epoch: usize) -> f64 {
    if !cfg.sft_cosine_decay || cfg.sft_epochs <= 1 {
        return cfg.sft_lr;
    }
    let frac = epoch as f64 / (cfg.sft_epochs - 1) as f64;
    cfg.sft_lr_min
        + 0.5 * (cfg.sft_lr - cfg.sft_lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Fisher–Yates with a derived stream; identical for identical epochs.
fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = derive(seed, Stream::SftShuffle, &[epoch as u64]);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

pub fn cmd_sft(cfg: &RunConfig, opts: &SftOptions<'_>) -> Result<SftOutcome, PipelineError> {
    cfg.validate()?;
    let scenes = load_scenes(opts.scenes_path)?;
    let examples = prepare_examples(&scenes, cfg)?;
    let codec = cfg.codec();

    let (mut model, mut progress) = match opts.resume {
        Some(path) => load_checkpoint(path)?,
        None => {
            let mut m = PlannerModel::new(cfg.model(), cfg.seed)
                .map_err(|e| PipelineError::Format(e.to_string()))?;
            m.init_refinement_from_generation();
            (m, Progress::default())
        }
    };

    let hyper_base = cfg.adamw();
    let warmup_epochs = (cfg.refine_warmup_frac * cfg.sft_epochs as f64).round() as usize;
    let gen_input_schedule = Schedule::new(
        ScheduleKind::Cosine,
        cfg.refine_gen_input_steps.max(1),
        codec.response_len(),
    );
    let train_refiner = cfg.n_expert_blocks > 0;

    let target_epoch = match opts.max_epochs_this_call {
        Some(m) => (progress.sft_epochs_done + m).min(cfg.sft_epochs),
        None => cfg.sft_epochs,
    };

    let mut rows = Vec::new();
    while progress.sft_epochs_done < target_epoch {
        let epoch = progress.sft_epochs_done;
        let lr = cosine_lr(cfg, epoch);
        let hyper = AdamW { lr, ..hyper_base };
        let order = shuffled_indices(examples.len(), cfg.seed, epoch);
        let mut gen_loss_sum = 0.0;
        let mut refine_loss_sum = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.sft_batch.max(1)) {
            // Generation branch: masked cross-entropy, Eq.-style 1/t weights.
            let mut rts: Vec<Vec<u32>> = Vec::with_capacity(chunk.len());
            let mut ts = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let mut rng = derive(cfg.seed, Stream::SftCorrupt, &[epoch as u64, si as u64]);
                let t = cfg.sft_t_min + (1.0 - cfg.sft_t_min) * rng.gen::<f64>();
                let rt = corrupt(&examples[si].expert_tokens, t, &mut rng)
                    .map_err(|e| PipelineError::Format(e.to_string()))?;
                rts.push(rt);
                ts.push(t);
            }
            let items: Vec<BatchItem<'_>> = chunk
                .iter()
                .zip(&rts)
                .map(|(&si, rt)| BatchItem { ctx: &examples[si].bundle.ctx, response: rt })
                .collect();
            let r0s: Vec<&[u32]> =
                chunk.iter().map(|&si| examples[si].expert_tokens.as_slice()).collect();
            let rt_refs: Vec<&[u32]> = rts.iter().map(|r| r.as_slice()).collect();
            let mut tape = Tape::new();
            let logits = model
                .forward(&mut tape, &items, ExpertId::Generation)
                .map_err(|e| PipelineError::Format(e.to_string()))?;
            let loss = sft_loss_batch(&mut tape, logits, &r0s, &rt_refs, &ts)
                .map_err(|e| PipelineError::Format(e.to_string()))?;
            gen_loss_sum += tape.value(loss).item();
            tape.backward(loss, &mut model.store)
                .map_err(|e| PipelineError::Format(e.to_string()))?;
            model
                .store
                .optimizer_step(&[ParamLabel::Shared, ParamLabel::GenerationExpert], &hyper)
                .map_err(|e| PipelineError::Format(e.to_string()))?;

            // Refinement branch: denoising cross-entropy over all positions.
            if train_refiner {
                let mut inputs: Vec<Vec<u32>> = Vec::with_capacity(chunk.len());
                for &si in chunk {
                    let mut rng =
                        derive(cfg.seed, Stream::SftRefinePair, &[epoch as u64, si as u64]);
                    let use_model_input = epoch >= warmup_epochs
                        && rng.gen::<f64>() < cfg.refine_model_input_frac;
                    let input = if use_model_input {
                        let mut gen_rng =
                            derive(cfg.seed, Stream::SftGenInput, &[epoch as u64, si as u64]);
                        sample(
                            &model,
                            &examples[si].bundle.ctx,
                            &gen_input_schedule,
                            1.0,
                            gen_input_schedule.steps,
                            &mut gen_rng,
                        )
                        .map_err(|e| PipelineError::Format(e.to_string()))?
                        .tokens
                    } else {
                        refine_sft_pair(
                            &examples[si].expert_tokens,
                            &mut rng,
                            cfg.refine_corruption_rate,
                            &codec,
                        )
                        .map_err(|e| PipelineError::Format(e.to_string()))?
                        .0
                    };
                    inputs.push(input);
                }
                let items: Vec<BatchItem<'_>> = chunk
                    .iter()
                    .zip(&inputs)
                    .map(|(&si, input)| BatchItem { ctx: &examples[si].bundle.ctx, response: input })
                    .collect();
                let mut targets = Vec::new();
                for &si in chunk {
                    targets.extend(examples[si].expert_tokens.iter().map(|&t| t as usize));
                }
                let l = codec.response_len();
                let weights = vec![1.0 / (chunk.len() * l) as f64; chunk.len() * l];
                let mut tape = Tape::new();
                let logits = model
                    .forward(&mut tape, &items, ExpertId::Refinement)
                    .map_err(|e| PipelineError::Format(e.to_string()))?;
                let loss = tape
                    .cross_entropy_with_logits(logits, &targets, &weights)
                    .map_err(|e| PipelineError::Format(e.to_string()))?;
                refine_loss_sum += tape.value(loss).item();
                tape.backward(loss, &mut model.store)
                    .map_err(|e| PipelineError::Format(e.to_string()))?;
                model
                    .store
                    .optimizer_step(&[ParamLabel::RefinementExpert], &hyper)
                    .map_err(|e| PipelineError::Format(e.to_string()))?;
            }
            batches += 1;
        }

        progress.sft_epochs_done += 1;
        rows.push(SftLogRow {
            epoch,
            gen_loss: gen_loss_sum / batches as f64,
            refine_loss: if train_refiner { refine_loss_sum / batches as f64 } else { 0.0 },
            lr,
        });
    }

    save_checkpoint(&model, cfg.seed, progress, opts.out_ckpt)?;
    if let Some(log_path) = opts.log_path {
        append_log(log_path, &rows)?;
    }
    Ok(SftOutcome { epochs_done: progress.sft_epochs_done, rows })
}

fn append_log(path: &Path, rows: &[SftLogRow]) -> Result<(), PipelineError> {
    let new_file = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| PipelineError::io(path, e))?;
    if new_file {
        writeln!(f, "epoch,gen_loss,refine_loss,lr").map_err(|e| PipelineError::io(path, e))?;
    }
    for r in rows {
        writeln!(f, "{},{},{},{}", r.epoch, r.gen_loss, r.refine_loss, r.lr)
            .map_err(|e| PipelineError::io(path, e))?;
    }
    Ok(())
}
