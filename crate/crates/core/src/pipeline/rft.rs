//! Reinforcement fine-tuning driver: iterates synchronous GRPO + hybrid
//! steps over a scene set, logs per-step metrics, and keeps both the final
//! and the best-mean-reward checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::model::{encode_context, PlannerModel};
use crate::rl::{rft_step, RftMetrics, SceneBundle};
use crate::rng::{derive, Stream};
use crate::sim::rasterize;
use crate::tensor::AdamW;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::RunConfig;
use super::scenes::load_scenes;
use super::PipelineError;

pub struct RftOptions<'a> {
    pub sft_ckpt: &'a Path,
    pub scenes_path: &'a Path,
    pub out_ckpt: &'a Path,
    pub metrics_path: Option<&'a Path>,
}

#[derive(Debug)]
pub struct RftOutcome {
    pub steps_done: usize,
    pub metrics: Vec<RftMetrics>,
    pub best_ckpt: PathBuf,
    pub best_mean_reward: f64,
}

/// Path of the best-reward sibling checkpoint.
pub fn best_ckpt_path(out_ckpt: &Path) -> PathBuf {
    let mut os = out_ckpt.as_os_str().to_owned();
    os.push(".best");
    PathBuf::from(os)
}

pub fn cmd_rft(cfg: &RunConfig, opts: &RftOptions<'_>) -> Result<RftOutcome, PipelineError> {
    cfg.validate()?;
    let scenes = load_scenes(opts.scenes_path)?;
    let sim_cfg = cfg.sim();
    let codec = cfg.codec();
    let model_cfg = cfg.model();
    let bundles: Vec<SceneBundle> = scenes
        .iter()
        .map(|scene| {
            let grid = rasterize(scene, &sim_cfg);
            let ctx = encode_context(&grid, scene.command, &model_cfg);
            SceneBundle { scene: scene.clone(), ctx }
        })
        .collect();

    let (mut model, mut progress) = load_checkpoint(opts.sft_ckpt)?;
    // Reference policy: frozen snapshot taken at RFT start.
    let rft_cfg = cfg.rft();
    let ref_model: Option<PlannerModel> =
        (rft_cfg.kl_beta > 0.0 && rft_cfg.grpo).then(|| model.clone());

    let hyper_base = AdamW { weight_decay: 0.0, ..AdamW::default() };
    let batch = cfg.rft_scene_batch.max(1);
    let mut metrics = Vec::new();
    let mut best_mean_reward = f64::NEG_INFINITY;
    let best_path = best_ckpt_path(opts.out_ckpt);

    for epoch in 0..cfg.rft_epochs {
        let order = {
            let mut rng = derive(cfg.seed, Stream::RftShuffle, &[epoch as u64]);
            let mut idx: Vec<usize> = (0..bundles.len()).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            idx
        };
        for chunk in order.chunks(batch) {
            let step_bundles: Vec<SceneBundle> =
                chunk.iter().map(|&i| bundles[i].clone()).collect();
            let step = progress.rft_steps_done;
            let m = rft_step(
                &mut model,
                ref_model.as_ref(),
                &step_bundles,
                &codec,
                &sim_cfg,
                &rft_cfg,
                &hyper_base,
                cfg.seed,
                step,
            )
            .map_err(|e| PipelineError::Format(e.to_string()))?;
            progress.rft_steps_done += 1;
            if m.mean_reward > best_mean_reward {
                best_mean_reward = m.mean_reward;
                save_checkpoint(&model, cfg.seed, progress, &best_path)?;
            }
            metrics.push(m);
        }
    }

    save_checkpoint(&model, cfg.seed, progress, opts.out_ckpt)?;
    if let Some(path) = opts.metrics_path {
        write_metrics(path, &metrics)?;
    }
    Ok(RftOutcome {
        steps_done: progress.rft_steps_done,
        metrics,
        best_ckpt: best_path,
        best_mean_reward,
    })
}

fn write_metrics(path: &Path, metrics: &[RftMetrics]) -> Result<(), PipelineError> {
    let mut f = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    writeln!(f, "step,mean_r,mean_r_refined,clip_frac,kl,grpo_loss,hybrid_loss")
        .map_err(|e| PipelineError::io(path, e))?;
    for m in metrics {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            m.step, m.mean_reward, m.mean_refined_reward, m.clip_fraction, m.kl, m.grpo_loss, m.hybrid_loss
        )
        .map_err(|e| PipelineError::io(path, e))?;
    }
    Ok(())
}
