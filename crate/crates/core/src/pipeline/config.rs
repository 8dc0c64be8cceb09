//! Run configuration: one flat key-value document (TOML) covering the
//! codec, model, simulator, schedule, and both training stages. A run is
//! reproducible from `(RunConfig, seed)` alone; every key can be
//! overridden by a CLI flag of the same name.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::diffusion::{Schedule, ScheduleKind};
use crate::model::ModelConfig;
use crate::rl::RftConfig;
use crate::sim::SimConfig;
use crate::tensor::AdamW;

use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // codec
    pub spatial_min: f64,
    pub spatial_max: f64,
    pub spatial_bins: usize,
    pub heading_min: f64,
    pub heading_max: f64,
    pub heading_bins: usize,
    pub waypoints: usize,
    pub dt: f64,
    pub base_vocab: usize,

    // model
    pub d_model: usize,
    pub n_heads: usize,
    pub n_shared_blocks: usize,
    pub n_expert_blocks: usize,
    pub max_context_len: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub strict_confinement: bool,

    // simulator / scorer
    pub grid_size: usize,
    pub grid_cell_m: f64,
    pub w_ttc: f64,
    pub w_comfort: f64,
    pub w_ep: f64,
    pub ttc_horizon_s: f64,
    pub accel_limit: f64,
    pub yaw_rate_limit: f64,
    pub dac_exit_limit_m: f64,
    pub easy_expert_pdms: f64,
    pub ego_half_len: f64,
    pub ego_half_wid: f64,
    pub expert_margin: f64,
    pub speed_norm: f64,

    // unmasking schedule
    pub steps: usize,
    pub schedule: String,
    pub tau: usize,

    // supervised fine-tuning
    pub sft_epochs: usize,
    pub sft_batch: usize,
    pub sft_lr: f64,
    pub sft_lr_min: f64,
    pub sft_cosine_decay: bool,
    pub sft_weight_decay: f64,
    pub sft_t_min: f64,
    pub refine_corruption_rate: f64,
    pub refine_model_input_frac: f64,
    pub refine_warmup_frac: f64,
    pub refine_gen_input_steps: usize,

    // reinforcement fine-tuning
    pub rft_epochs: usize,
    pub rft_scene_batch: usize,
    pub rft_group_size: usize,
    pub rft_online_samples: usize,
    pub rft_clip_eps: f64,
    pub rft_kl_beta: f64,
    pub rft_lr_generation: f64,
    pub rft_lr_refinement: f64,
    pub rft_rollout_temperature: f64,
    pub rft_refine_temperature: f64,
    pub rft_clip_hybrid: bool,
    pub rft_grpo: bool,
    pub rft_offline: bool,
    pub rft_online: bool,

    // evaluation
    pub eval_temperature: f64,
    pub eval_samples_per_scene: usize,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            spatial_min: -100.0,
            spatial_max: 100.0,
            spatial_bins: 4000,
            heading_min: -90.0,
            heading_max: 90.0,
            heading_bins: 1800,
            waypoints: 8,
            dt: 0.5,
            base_vocab: 8,

            d_model: 128,
            n_heads: 4,
            n_shared_blocks: 6,
            n_expert_blocks: 2,
            max_context_len: 256,
            mlp_ratio: 4,
            patch_size: 16,
            strict_confinement: true,

            grid_size: 64,
            grid_cell_m: 0.5,
            w_ttc: 5.0,
            w_comfort: 2.0,
            w_ep: 5.0,
            ttc_horizon_s: 1.0,
            accel_limit: 4.0,
            yaw_rate_limit: 0.6,
            dac_exit_limit_m: 1.0,
            easy_expert_pdms: 0.9,
            ego_half_len: 2.3,
            ego_half_wid: 0.95,
            expert_margin: 0.35,
            speed_norm: 15.0,

            steps: 12,
            schedule: "cosine".into(),
            tau: 4,

            sft_epochs: 100,
            sft_batch: 16,
            sft_lr: 1e-3,
            sft_lr_min: 1e-4,
            sft_cosine_decay: true,
            sft_weight_decay: 0.0,
            sft_t_min: 0.15,
            refine_corruption_rate: 0.15,
            refine_model_input_frac: 0.3,
            refine_warmup_frac: 0.5,
            refine_gen_input_steps: 4,

            rft_epochs: 1,
            rft_scene_batch: 1,
            rft_group_size: 10,
            rft_online_samples: 6,
            rft_clip_eps: 0.2,
            rft_kl_beta: 0.01,
            rft_lr_generation: 1e-4,
            rft_lr_refinement: 1e-4,
            rft_rollout_temperature: 1.0,
            rft_refine_temperature: 0.7,
            rft_clip_hybrid: false,
            rft_grpo: true,
            rft_offline: true,
            rft_online: true,

            eval_temperature: 0.0,
            eval_samples_per_scene: 1,

            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical serialization; echoed into every report.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            spatial_min: self.spatial_min,
            spatial_max: self.spatial_max,
            spatial_bins: self.spatial_bins,
            heading_min: self.heading_min,
            heading_max: self.heading_max,
            heading_bins: self.heading_bins,
            waypoints: self.waypoints,
            dt: self.dt,
            base_vocab: self.base_vocab,
        }
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            w_ttc: self.w_ttc,
            w_comfort: self.w_comfort,
            w_ep: self.w_ep,
            ttc_horizon_s: self.ttc_horizon_s,
            accel_limit: self.accel_limit,
            yaw_rate_limit: self.yaw_rate_limit,
            dac_exit_limit_m: self.dac_exit_limit_m,
            easy_expert_pdms: self.easy_expert_pdms,
            grid_size: self.grid_size,
            grid_cell_m: self.grid_cell_m,
            ego_half_len: self.ego_half_len,
            ego_half_wid: self.ego_half_wid,
            expert_margin: self.expert_margin,
            speed_norm: self.speed_norm,
        }
    }

    pub fn model(&self) -> ModelConfig {
        let codec = self.codec();
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_shared_blocks: self.n_shared_blocks,
            n_expert_blocks: self.n_expert_blocks,
            vocab_size: codec.vocab_size(),
            max_context_len: self.max_context_len,
            response_len: codec.response_len(),
            mlp_ratio: self.mlp_ratio,
            patch_size: self.patch_size,
            grid_size: self.grid_size,
            grid_channels: crate::sim::GRID_CHANNELS,
            strict_confinement: self.strict_confinement,
        }
    }

    pub fn schedule_kind(&self) -> Result<ScheduleKind, PipelineError> {
        self.schedule
            .parse()
            .map_err(|e: String| PipelineError::Config(e))
    }

    pub fn sample_schedule(&self, steps: usize) -> Result<Schedule, PipelineError> {
        Ok(Schedule::new(self.schedule_kind()?, steps, self.codec().response_len()))
    }

    pub fn rft(&self) -> RftConfig {
        RftConfig {
            group_size: self.rft_group_size,
            online_samples: self.rft_online_samples,
            steps: self.steps,
            tau: self.tau,
            clip_eps: self.rft_clip_eps,
            kl_beta: self.rft_kl_beta,
            lr_generation: self.rft_lr_generation,
            lr_refinement: self.rft_lr_refinement,
            rollout_temperature: self.rft_rollout_temperature,
            refine_temperature: self.rft_refine_temperature,
            grpo: self.rft_grpo,
            offline: self.rft_offline,
            online: self.rft_online,
            clip_hybrid: self.rft_clip_hybrid,
        }
    }

    pub fn adamw(&self) -> AdamW {
        AdamW { lr: self.sft_lr, weight_decay: self.sft_weight_decay, ..AdamW::default() }
    }

    pub fn horizon_s(&self) -> f64 {
        self.waypoints as f64 * self.dt
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.codec().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.model().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.rft().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.schedule_kind()?;
        if self.tau == 0 || self.tau > self.steps {
            return Err(PipelineError::Config(format!(
                "tau {} must be within [1, steps = {}]",
                self.tau, self.steps
            )));
        }
        Ok(())
    }

    /// Apply `key=value` overrides (the CLI's `--set`).
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<(), PipelineError> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut doc: toml::Table = toml::from_str(&self.to_toml())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        for (key, value) in overrides {
            let existing = doc.get(key).ok_or_else(|| {
                PipelineError::Config(format!("unknown config key `{key}`"))
            })?;
            let parsed: toml::Value = match existing {
                toml::Value::String(_) => toml::Value::String(value.clone()),
                toml::Value::Boolean(_) => toml::Value::Boolean(value.parse().map_err(|_| {
                    PipelineError::Config(format!("key `{key}` expects a boolean, got `{value}`"))
                })?),
                toml::Value::Integer(_) => toml::Value::Integer(value.parse().map_err(|_| {
                    PipelineError::Config(format!("key `{key}` expects an integer, got `{value}`"))
                })?),
                toml::Value::Float(_) => toml::Value::Float(value.parse().map_err(|_| {
                    PipelineError::Config(format!("key `{key}` expects a number, got `{value}`"))
                })?),
                other => {
                    return Err(PipelineError::Config(format!(
                        "key `{key}` has unsupported type {other:?}"
                    )))
                }
            };
            doc.insert(key.clone(), parsed);
        }
        *self = toml::from_str(&doc.to_string())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }
}
