//! Evaluation: sample (optionally refine) each scene, score, and report
//! per-criterion means plus best-of-k. Scenes evaluate in parallel; the
//! JSON report and per-scene CSV are byte-deterministic for a fixed
//! `(config, seed)`. Wall-clock latency, when requested, goes to a
//! separate sidecar file so it never perturbs the deterministic report.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{refine, sample, RefineMode, Schedule};
use crate::model::{encode_context, PlannerModel};
use crate::rl::reward_of;
use crate::rng::{derive, Stream};
use crate::sim::{rasterize, RewardBreakdown, Scene};

use super::checkpoint::load_checkpoint;
use super::config::RunConfig;
use super::scenes::load_scenes;
use super::PipelineError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneResult {
    pub seed: u64,
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub ep: f64,
    pub pdms: f64,
    pub best_of_k: f64,
    pub malformed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub refine: bool,
    pub samples_per_scene: usize,
    pub num_scenes: usize,
    pub mean_nc: f64,
    pub mean_dac: f64,
    pub mean_ttc: f64,
    pub mean_comfort: f64,
    pub mean_ep: f64,
    pub mean_pdms: f64,
    pub mean_best_of_k: f64,
    pub scenes: Vec<SceneResult>,
}

#[derive(Debug, Clone, Copy)]
pub struct LatencySummary {
    /// Median wall-clock seconds of sample()+refine() per scene.
    pub median_s: f64,
    pub mean_s: f64,
}

pub struct EvalOptions<'a> {
    pub ckpt: &'a Path,
    pub scenes_path: &'a Path,
    pub steps: usize,
    pub refine: bool,
    pub samples_per_scene: usize,
    pub out_report: Option<&'a Path>,
    pub out_csv: Option<&'a Path>,
    /// Measure wall-clock latency into `out_latency` (non-deterministic by
    /// nature, hence a separate file).
    pub out_latency: Option<&'a Path>,
}

pub fn cmd_eval(
    cfg: &RunConfig,
    opts: &EvalOptions<'_>,
) -> Result<(EvalReport, Option<LatencySummary>), PipelineError> {
    cfg.validate()?;
    let (model, _) = load_checkpoint(opts.ckpt)?;
    let scenes = load_scenes(opts.scenes_path)?;
    let schedule = cfg.sample_schedule(opts.steps)?;
    let report = evaluate(cfg, &model, &scenes, &schedule, opts)
        .map(|(report, latency)| (finish_report(cfg, opts, report), latency))?;
    let (report, latencies) = report;

    if let Some(path) = opts.out_report {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| PipelineError::Format(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| PipelineError::io(path, e))?;
    }
    if let Some(path) = opts.out_csv {
        write_scene_csv(path, &report)?;
    }
    let latency_summary = match (&latencies, opts.out_latency) {
        (Some(lat), out) => {
            let summary = summarize_latency(lat);
            if let Some(path) = out {
                write_latency_csv(path, lat, opts.steps)?;
            }
            Some(summary)
        }
        _ => None,
    };
    Ok((report, latency_summary))
}

fn evaluate(
    cfg: &RunConfig,
    model: &PlannerModel,
    scenes: &[Scene],
    schedule: &Schedule,
    opts: &EvalOptions<'_>,
) -> Result<(Vec<SceneResult>, Option<Vec<f64>>), PipelineError> {
    let sim_cfg = cfg.sim();
    let codec = cfg.codec();
    let model_cfg = cfg.model();
    let k = opts.samples_per_scene.max(1);
    let measure = opts.out_latency.is_some();

    let results: Result<Vec<(SceneResult, f64)>, PipelineError> = scenes
        .par_iter()
        .enumerate()
        .map(|(scene_idx, scene)| {
            let grid = rasterize(scene, &sim_cfg);
            let ctx = encode_context(&grid, scene.command, &model_cfg);
            let mut first: Option<RewardBreakdown> = None;
            let mut best = 0.0f64;
            let t0 = Instant::now();
            for sample_idx in 0..k {
                let mut rng =
                    derive(cfg.seed, Stream::Eval, &[scene_idx as u64, sample_idx as u64]);
                let temperature = if k == 1 { cfg.eval_temperature } else {
                    cfg.eval_temperature.max(0.7)
                };
                let out = sample(model, &ctx, schedule, temperature, cfg.tau.min(opts.steps), &mut rng)
                    .map_err(|e| PipelineError::Format(e.to_string()))?;
                let tokens = if opts.refine {
                    refine(model, &ctx, &out.tokens, RefineMode::Argmax, &mut rng)
                        .map_err(|e| PipelineError::Format(e.to_string()))?
                } else {
                    out.tokens
                };
                let breakdown = reward_of(&tokens, scene, &codec, &sim_cfg);
                best = best.max(breakdown.pdms);
                if first.is_none() {
                    first = Some(breakdown);
                }
            }
            let elapsed = if measure { t0.elapsed().as_secs_f64() / k as f64 } else { 0.0 };
            let b = first.unwrap();
            Ok((
                SceneResult {
                    seed: scene.seed,
                    nc: b.nc,
                    dac: b.dac,
                    ttc: b.ttc,
                    comfort: b.comfort,
                    ep: b.ep,
                    pdms: b.pdms,
                    best_of_k: best,
                    malformed: b.malformed,
                },
                elapsed,
            ))
        })
        .collect();
    let pairs = results?;
    let latencies = measure.then(|| pairs.iter().map(|(_, t)| *t).collect());
    Ok((pairs.into_iter().map(|(r, _)| r).collect(), latencies))
}

fn finish_report(cfg: &RunConfig, opts: &EvalOptions<'_>, scenes: Vec<SceneResult>) -> EvalReport {
    let n = scenes.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SceneResult) -> f64| scenes.iter().map(|s| f(s)).sum::<f64>() / n;
    EvalReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        steps: opts.steps,
        refine: opts.refine,
        samples_per_scene: opts.samples_per_scene.max(1),
        num_scenes: scenes.len(),
        mean_nc: mean(&|s| s.nc),
        mean_dac: mean(&|s| s.dac),
        mean_ttc: mean(&|s| s.ttc),
        mean_comfort: mean(&|s| s.comfort),
        mean_ep: mean(&|s| s.ep),
        mean_pdms: mean(&|s| s.pdms),
        mean_best_of_k: mean(&|s| s.best_of_k),
        scenes,
    }
}

fn write_scene_csv(path: &Path, report: &EvalReport) -> Result<(), PipelineError> {
    let mut f = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    writeln!(f, "seed,nc,dac,ttc,comfort,ep,pdms,best_of_k,malformed")
        .map_err(|e| PipelineError::io(path, e))?;
    for s in &report.scenes {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            s.seed, s.nc, s.dac, s.ttc, s.comfort, s.ep, s.pdms, s.best_of_k, s.malformed
        )
        .map_err(|e| PipelineError::io(path, e))?;
    }
    Ok(())
}

fn summarize_latency(latencies: &[f64]) -> LatencySummary {
    let mut sorted = latencies.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_s = if sorted.is_empty() {
        0.0
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let mean_s = if sorted.is_empty() { 0.0 } else { sorted.iter().sum::<f64>() / sorted.len() as f64 };
    LatencySummary { median_s, mean_s }
}

fn write_latency_csv(path: &Path, latencies: &[f64], steps: usize) -> Result<(), PipelineError> {
    let mut f = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    writeln!(f, "scene_index,steps,latency_s").map_err(|e| PipelineError::io(path, e))?;
    for (i, l) in latencies.iter().enumerate() {
        writeln!(f, "{i},{steps},{l}").map_err(|e| PipelineError::io(path, e))?;
    }
    Ok(())
}
