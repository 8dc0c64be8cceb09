//! Reinforcement fine-tuning: GRPO over generation rollouts and the hybrid
//! offline/online objective for the refinement expert.
//!
//! Per scene, the generation expert samples a group of G trajectories whose
//! snapshot paths provide the ratio eligibility structure: a position
//! enters the loss exactly once, at the snapshot transition where it was
//! decoded. The refiner is then supervised by pairwise reward differences
//! among the group (offline) and by rewards of its own K samples per
//! trajectory (online). Gradient confinement keeps the two updates from
//! touching each other's parameters; RNG streams are scoped so the
//! generator's trajectory is identical whether or not a refiner trains
//! alongside it.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{decode_trajectory, CodecConfig};
use crate::diffusion::{sample_group, DiffusionError, SamplePath, Schedule};
use crate::model::{BatchItem, ExpertId, ModelError, PlannerModel, SceneContext};
use crate::rng::{derive, Stream};
use crate::sim::{score, RewardBreakdown, Scene, SimConfig};
use crate::tensor::{softmax_slice, AdamW, Mat, ParamLabel, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("group size must be >= 2, got {0}")]
    GroupTooSmall(usize),
    #[error("online sample count must be >= 1, got {0}")]
    NoOnlineSamples(usize),
    #[error("advantage structures come from different groups ({left} vs {right} members)")]
    GroupMismatch { left: usize, right: usize },
    #[error("refinement expert required (n_expert_blocks >= 1)")]
    NoRefinementExpert,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Reinforcement fine-tuning hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RftConfig {
    /// Rollout group size G.
    pub group_size: usize,
    /// Online refinements per trajectory K.
    pub online_samples: usize,
    /// Sampling steps s during rollouts.
    pub steps: usize,
    /// Snapshot aggregation stride τ.
    pub tau: usize,
    /// Clip range ε.
    pub clip_eps: f64,
    /// KL penalty weight β (0 disables the reference-policy term).
    pub kl_beta: f64,
    pub lr_generation: f64,
    pub lr_refinement: f64,
    pub rollout_temperature: f64,
    pub refine_temperature: f64,
    /// Train the generation expert with GRPO.
    pub grpo: bool,
    /// Include the offline pairwise term in the refiner objective.
    pub offline: bool,
    /// Include the online sampled term in the refiner objective.
    pub online: bool,
    /// Apply ε-clipping to the hybrid ratios (the objective as written
    /// carries none).
    pub clip_hybrid: bool,
}

impl Default for RftConfig {
    fn default() -> Self {
        Self {
            group_size: 10,
            online_samples: 6,
            steps: 12,
            tau: 4,
            clip_eps: 0.2,
            kl_beta: 0.01,
            lr_generation: 1e-4,
            lr_refinement: 1e-4,
            rollout_temperature: 1.0,
            refine_temperature: 0.7,
            grpo: true,
            offline: true,
            online: true,
            clip_hybrid: false,
        }
    }
}

impl RftConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if self.group_size < 2 {
            return Err(RlError::GroupTooSmall(self.group_size));
        }
        if self.online && self.online_samples < 1 {
            return Err(RlError::NoOnlineSamples(self.online_samples));
        }
        if self.tau == 0 || self.tau > self.steps {
            return Err(RlError::Diffusion(DiffusionError::BadTau {
                tau: self.tau,
                steps: self.steps,
            }));
        }
        Ok(())
    }

    pub fn train_refinement(&self) -> bool {
        self.offline || self.online
    }
}

/// One sampled trajectory with its snapshot path, reward, and the
/// sampling-time log-probabilities at the eligible positions of every
/// snapshot transition.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub tokens: Vec<u32>,
    pub path: SamplePath,
    pub reward: f64,
    pub breakdown: RewardBreakdown,
    /// Per transition j: (position k, log π_old(final token at k | x^j)).
    pub old_logprobs: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub scene_seed: u64,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

/// Decode tokens and score them; structural failures score 0 instead of
/// aborting so group statistics stay well-defined at fixed G.
pub fn reward_of(
    tokens: &[u32],
    scene: &Scene,
    codec: &CodecConfig,
    sim_cfg: &SimConfig,
) -> RewardBreakdown {
    match decode_trajectory(tokens, codec) {
        Ok(traj) => score(scene, &traj, sim_cfg),
        Err(_) => RewardBreakdown::malformed(),
    }
}

/// Sample G trajectories, score them, and capture old log-probs at the
/// eligibility positions of every snapshot transition.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group(
    model: &PlannerModel,
    scene: &Scene,
    ctx: &SceneContext,
    codec: &CodecConfig,
    sim_cfg: &SimConfig,
    schedule: &Schedule,
    cfg: &RftConfig,
    member_rngs: &mut [ChaCha8Rng],
) -> Result<RolloutGroup, RlError> {
    cfg.validate()?;
    let outputs =
        sample_group(model, ctx, schedule, cfg.rollout_temperature, cfg.tau, member_rngs)?;
    let l = model.cfg.response_len;

    // One batched forward re-evaluates every snapshot under the sampling
    // policy; numerator and denominator of the ratio then share the same
    // conditioning x^j.
    let transitions = outputs[0].path.num_transitions();
    let mut items = Vec::with_capacity(outputs.len() * transitions);
    for out in &outputs {
        for j in 0..transitions {
            items.push(BatchItem { ctx, response: &out.path.snapshots[j] });
        }
    }
    let logits = model.logits(&items, ExpertId::Generation)?;

    let mut rollouts = Vec::with_capacity(outputs.len());
    for (m, out) in outputs.iter().enumerate() {
        let breakdown = reward_of(&out.tokens, scene, codec, sim_cfg);
        let mut old_logprobs = Vec::with_capacity(transitions);
        for j in 0..transitions {
            let pair = m * transitions + j;
            let lps = out
                .path
                .eligible_positions(j)
                .into_iter()
                .map(|k| {
                    let row = logits.row(pair * l + k);
                    let probs = softmax_slice(row);
                    (k, probs[out.tokens[k] as usize].ln())
                })
                .collect();
            old_logprobs.push(lps);
        }
        rollouts.push(Rollout {
            tokens: out.tokens.clone(),
            path: out.path.clone(),
            reward: breakdown.pdms,
            breakdown,
            old_logprobs,
        });
    }
    Ok(RolloutGroup { scene_seed: scene.seed, rollouts })
}

/// Group-relative advantages: reward minus group mean, no normalization.
pub fn grpo_advantages(rewards: &[f64]) -> Vec<f64> {
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    rewards.iter().map(|r| r - mean).collect()
}

/// Pairwise offline reward matrix Â_ij = r_i − r_j.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineAdvantage {
    pub group_size: usize,
    matrix: Vec<f64>,
}

impl OfflineAdvantage {
    pub fn from_rewards(rewards: &[f64]) -> Result<Self, RlError> {
        let g = rewards.len();
        if g < 2 {
            return Err(RlError::GroupTooSmall(g));
        }
        let mut matrix = Vec::with_capacity(g * g);
        for &ri in rewards {
            for &rj in rewards {
                matrix.push(ri - rj);
            }
        }
        Ok(Self { group_size: g, matrix })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.group_size + j]
    }
}

/// Per-token clipped surrogate terms `min(ρ·Â, clip(ρ, 1−ε, 1+ε)·Â)` as a
/// column vector; `new_lp` is the differentiable log-prob column.
pub fn ppo_terms(
    tape: &mut Tape,
    new_lp: Var,
    old_lp: &[f64],
    adv: &[f64],
    eps: f64,
) -> Result<Var, RlError> {
    let old = tape.input(Mat::column(old_lp));
    let delta = tape.sub(new_lp, old)?;
    let ratio = tape.exp(delta);
    let advv = tape.input(Mat::column(adv));
    let unclipped = tape.mul(ratio, advv)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = tape.mul(clipped_ratio, advv)?;
    Ok(tape.minimum(unclipped, clipped)?)
}

/// Weighted importance-ratio sum `Σ w·ρ` (optionally ε-clipped), the
/// building block of the hybrid objective.
pub fn weighted_ratio_sum(
    tape: &mut Tape,
    new_lp: Var,
    old_lp: &[f64],
    weights: &[f64],
    clip_eps: Option<f64>,
) -> Result<Var, RlError> {
    let old = tape.input(Mat::column(old_lp));
    let delta = tape.sub(new_lp, old)?;
    let mut ratio = tape.exp(delta);
    if let Some(eps) = clip_eps {
        ratio = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
    }
    let w = tape.input(Mat::column(weights));
    let weighted = tape.mul(ratio, w)?;
    Ok(tape.sum(weighted))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GrpoStats {
    pub clip_fraction: f64,
    pub kl: f64,
    pub empty_transitions: usize,
}

/// Negated clipped-surrogate objective with an exact per-position KL
/// penalty against a frozen reference policy. Gradients flow to Shared and
/// GenerationExpert parameters.
pub fn grpo_loss(
    model: &PlannerModel,
    ref_model: Option<&PlannerModel>,
    ctx: &SceneContext,
    group: &RolloutGroup,
    cfg: &RftConfig,
    tape: &mut Tape,
) -> Result<(Var, GrpoStats), RlError> {
    cfg.validate()?;
    let g = group.rollouts.len();
    if g < 2 {
        return Err(RlError::GroupTooSmall(g));
    }
    let l = model.cfg.response_len;
    let advantages = grpo_advantages(&group.rewards());

    // Batch every (trajectory, snapshot) pair into one forward.
    let mut items = Vec::new();
    let mut row_ids = Vec::new();
    let mut targets = Vec::new();
    let mut old_lp = Vec::new();
    let mut advs = Vec::new();
    let mut stats = GrpoStats::default();
    for (i, rollout) in group.rollouts.iter().enumerate() {
        for (j, lps) in rollout.old_logprobs.iter().enumerate() {
            if lps.is_empty() {
                stats.empty_transitions += 1;
            }
            let pair = items.len();
            items.push(BatchItem { ctx, response: &rollout.path.snapshots[j] });
            for &(k, lp) in lps {
                row_ids.push(pair * l + k);
                targets.push(rollout.tokens[k] as usize);
                old_lp.push(lp);
                advs.push(advantages[i]);
            }
        }
    }

    let logits = model.forward(tape, &items, ExpertId::Generation)?;
    let rows = tape.index_select(logits, &row_ids)?;
    let new_lp = tape.select_log_prob(rows, &targets)?;
    let terms = ppo_terms(tape, new_lp, &old_lp, &advs, cfg.clip_eps)?;
    // Every response position is eligible exactly once across transitions,
    // so 1/(G·L) realizes both normalizations at once.
    let norm = 1.0 / (g as f64 * l as f64);
    let weights = tape.input(Mat::column(&vec![norm; row_ids.len()]));
    let weighted = tape.mul(terms, weights)?;
    let objective = tape.sum(weighted);
    let mut loss = tape.scale(objective, -1.0);

    // Clip-fraction diagnostic from forward values.
    {
        let vals = tape.value(new_lp);
        let mut clipped = 0usize;
        for (r, &o) in old_lp.iter().enumerate() {
            let ratio = (vals.get(r, 0) - o).exp();
            if ratio < 1.0 - cfg.clip_eps || ratio > 1.0 + cfg.clip_eps {
                clipped += 1;
            }
        }
        stats.clip_fraction = clipped as f64 / old_lp.len().max(1) as f64;
    }

    if cfg.kl_beta > 0.0 {
        let reference = ref_model.unwrap_or(model);
        let ref_logits = reference.logits(&items, ExpertId::Generation)?;
        let v = model.cfg.vocab_size;
        let mut ref_lp = Vec::with_capacity(row_ids.len() * v);
        for &r in &row_ids {
            let row = ref_logits.row(r);
            let probs = softmax_slice(row);
            ref_lp.extend(probs.iter().map(|p| p.ln()));
        }
        let kl = tape.kl_vs_ref(rows, Mat::new(row_ids.len(), v, ref_lp))?;
        let klw = tape.input(Mat::column(&vec![norm; row_ids.len()]));
        let klsum = tape.mul(kl, klw)?;
        let klterm = tape.sum(klsum);
        stats.kl = tape.value(klterm).item();
        let penalty = tape.scale(klterm, cfg.kl_beta);
        loss = tape.add(loss, penalty)?;
    }
    Ok((loss, stats))
}

/// Refined samples, their advantages over the anchors, and the
/// sampling-time log-probabilities for both hybrid terms.
#[derive(Debug, Clone)]
pub struct OnlineRefinement {
    pub group_size: usize,
    pub online_samples: usize,
    /// Â_ik = r̂_ik − r_i, row-major [G × K]. Empty when K = 0.
    pub advantages: Vec<f64>,
    pub refined_tokens: Vec<Vec<Vec<u32>>>,
    pub refined_rewards: Vec<Vec<f64>>,
    /// log π_old(x̂_ik[pos] | x_i), indexed [i][k][pos].
    pub old_online_lp: Vec<Vec<Vec<f64>>>,
    /// log π_old(x_i[pos] | x_j), indexed [j][i][pos] (input-major).
    pub old_offline_lp: Vec<Vec<Vec<f64>>>,
}

impl OnlineRefinement {
    pub fn advantage(&self, i: usize, k: usize) -> f64 {
        self.advantages[i * self.online_samples + k]
    }
}

/// One refiner forward per trajectory: records old log-probs of every
/// group member's tokens (offline pairs) and, when K >= 1, samples K
/// refined trajectories per anchor and scores them.
#[allow(clippy::too_many_arguments)]
pub fn online_refine(
    model: &PlannerModel,
    scene: &Scene,
    ctx: &SceneContext,
    codec: &CodecConfig,
    sim_cfg: &SimConfig,
    group: &RolloutGroup,
    k_samples: usize,
    temperature: f64,
    member_rngs: &mut [ChaCha8Rng],
) -> Result<OnlineRefinement, RlError> {
    if model.cfg.n_expert_blocks == 0 {
        return Err(RlError::NoRefinementExpert);
    }
    let g = group.rollouts.len();
    let l = model.cfg.response_len;
    let items: Vec<BatchItem<'_>> = group
        .rollouts
        .iter()
        .map(|r| BatchItem { ctx, response: &r.tokens })
        .collect();
    let logits = model.logits(&items, ExpertId::Refinement)?;

    // Native (untempered) per-position log-probabilities; temperature only
    // shapes exploration, ratios always compare the model distribution.
    let log_probs: Vec<Vec<Vec<f64>>> = (0..g)
        .map(|j| {
            (0..l)
                .map(|pos| {
                    softmax_slice(logits.row(j * l + pos)).iter().map(|p| p.ln()).collect()
                })
                .collect()
        })
        .collect();

    let old_offline_lp: Vec<Vec<Vec<f64>>> = (0..g)
        .map(|j| {
            (0..g)
                .map(|i| {
                    (0..l)
                        .map(|pos| log_probs[j][pos][group.rollouts[i].tokens[pos] as usize])
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut advantages = Vec::with_capacity(g * k_samples);
    let mut refined_tokens = Vec::with_capacity(g);
    let mut refined_rewards = Vec::with_capacity(g);
    let mut old_online_lp = Vec::with_capacity(g);
    for (i, rollout) in group.rollouts.iter().enumerate() {
        let mut toks_i = Vec::with_capacity(k_samples);
        let mut rewards_i = Vec::with_capacity(k_samples);
        let mut lps_i = Vec::with_capacity(k_samples);
        for _ in 0..k_samples {
            let mut tokens = Vec::with_capacity(l);
            let mut lps = Vec::with_capacity(l);
            for pos in 0..l {
                let row = logits.row(i * l + pos);
                let (tok, _) = sample_tempered(row, temperature, &mut member_rngs[i]);
                tokens.push(tok);
                lps.push(log_probs[i][pos][tok as usize]);
            }
            let reward = reward_of(&tokens, scene, codec, sim_cfg).pdms;
            advantages.push(reward - rollout.reward);
            rewards_i.push(reward);
            toks_i.push(tokens);
            lps_i.push(lps);
        }
        refined_tokens.push(toks_i);
        refined_rewards.push(rewards_i);
        old_online_lp.push(lps_i);
    }

    Ok(OnlineRefinement {
        group_size: g,
        online_samples: k_samples,
        advantages,
        refined_tokens,
        refined_rewards,
        old_online_lp,
        old_offline_lp,
    })
}

fn sample_tempered(row: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> (u32, f64) {
    use rand::Rng;
    if temperature <= 0.0 {
        let probs = softmax_slice(row);
        let (best, &p) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap();
        return (best as u32, p);
    }
    let scaled: Vec<f64> = row.iter().map(|&z| z / temperature).collect();
    let probs = softmax_slice(&scaled);
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (idx, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return (idx as u32, p);
        }
    }
    ((probs.len() - 1) as u32, *probs.last().unwrap())
}

/// Hybrid refiner loss: offline pairwise term plus online sampled term,
/// both as importance-weighted log-likelihood ascent. Gradients are
/// confined to RefinementExpert parameters by construction.
pub fn hybrid_loss(
    model: &PlannerModel,
    ctx: &SceneContext,
    group: &RolloutGroup,
    off: &OfflineAdvantage,
    on: &OnlineRefinement,
    cfg: &RftConfig,
    tape: &mut Tape,
) -> Result<Var, RlError> {
    let g = group.rollouts.len();
    if off.group_size != g || on.group_size != g {
        return Err(RlError::GroupMismatch { left: off.group_size, right: g });
    }
    if model.cfg.n_expert_blocks == 0 {
        return Err(RlError::NoRefinementExpert);
    }
    let l = model.cfg.response_len;
    let clip = cfg.clip_hybrid.then_some(cfg.clip_eps);

    let items: Vec<BatchItem<'_>> = group
        .rollouts
        .iter()
        .map(|r| BatchItem { ctx, response: &r.tokens })
        .collect();
    let logits = model.forward(tape, &items, ExpertId::Refinement)?;

    let mut terms: Vec<Var> = Vec::new();
    if cfg.offline {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut old = Vec::new();
        let mut weights = Vec::new();
        let norm = 1.0 / (g as f64 * g as f64 * l as f64);
        for j in 0..g {
            for i in 0..g {
                if i == j {
                    continue; // zero-weight diagonal
                }
                let adv = off.get(i, j);
                for pos in 0..l {
                    rows.push(j * l + pos);
                    targets.push(group.rollouts[i].tokens[pos] as usize);
                    old.push(on.old_offline_lp[j][i][pos]);
                    weights.push(adv * norm);
                }
            }
        }
        let sel = tape.index_select(logits, &rows)?;
        let new_lp = tape.select_log_prob(sel, &targets)?;
        terms.push(weighted_ratio_sum(tape, new_lp, &old, &weights, clip)?);
    }
    if cfg.online && on.online_samples > 0 {
        let k_n = on.online_samples;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut old = Vec::new();
        let mut weights = Vec::new();
        let norm = 1.0 / (g as f64 * k_n as f64 * l as f64);
        for i in 0..g {
            for k in 0..k_n {
                let adv = on.advantage(i, k);
                for pos in 0..l {
                    rows.push(i * l + pos);
                    targets.push(on.refined_tokens[i][k][pos] as usize);
                    old.push(on.old_online_lp[i][k][pos]);
                    weights.push(adv * norm);
                }
            }
        }
        let sel = tape.index_select(logits, &rows)?;
        let new_lp = tape.select_log_prob(sel, &targets)?;
        terms.push(weighted_ratio_sum(tape, new_lp, &old, &weights, clip)?);
    }

    let objective = match terms.len() {
        0 => tape.scalar(0.0),
        1 => terms[0],
        _ => tape.add(terms[0], terms[1])?,
    };
    Ok(tape.scale(objective, -1.0))
}

/// Per-step training metrics, one CSV row each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RftMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_refined_reward: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub grpo_loss: f64,
    pub hybrid_loss: f64,
}

/// Scene plus its cached model conditioning.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub scene: Scene,
    pub ctx: SceneContext,
}

/// One synchronous training step over a batch of scenes: per scene, GRPO
/// updates Shared + GenerationExpert, then the hybrid objective updates
/// RefinementExpert from the same rollouts.
#[allow(clippy::too_many_arguments)]
pub fn rft_step(
    model: &mut PlannerModel,
    ref_model: Option<&PlannerModel>,
    scenes: &[SceneBundle],
    codec: &CodecConfig,
    sim_cfg: &SimConfig,
    cfg: &RftConfig,
    hyper_base: &AdamW,
    seed: u64,
    step: usize,
) -> Result<RftMetrics, RlError> {
    cfg.validate()?;
    let schedule = Schedule::new(
        crate::diffusion::ScheduleKind::Cosine,
        cfg.steps,
        model.cfg.response_len,
    );
    let mut metrics = RftMetrics {
        step,
        mean_reward: 0.0,
        mean_refined_reward: 0.0,
        clip_fraction: 0.0,
        kl: 0.0,
        grpo_loss: 0.0,
        hybrid_loss: 0.0,
    };
    let mut refined_count = 0usize;

    for (scene_idx, bundle) in scenes.iter().enumerate() {
        let path_base = [step as u64, scene_idx as u64];
        let mut rollout_rngs: Vec<ChaCha8Rng> = (0..cfg.group_size)
            .map(|m| derive(seed, Stream::Rollout, &[path_base[0], path_base[1], m as u64]))
            .collect();
        let group = rollout_group(
            model,
            &bundle.scene,
            &bundle.ctx,
            codec,
            sim_cfg,
            &schedule,
            cfg,
            &mut rollout_rngs,
        )?;
        metrics.mean_reward += group.rewards().iter().sum::<f64>() / cfg.group_size as f64;

        if cfg.grpo {
            let mut tape = Tape::new();
            let (loss, stats) = grpo_loss(model, ref_model, &bundle.ctx, &group, cfg, &mut tape)?;
            metrics.grpo_loss += tape.value(loss).item();
            metrics.clip_fraction += stats.clip_fraction;
            metrics.kl += stats.kl;
            tape.backward(loss, &mut model.store)?;
            let hyper = AdamW { lr: cfg.lr_generation, ..*hyper_base };
            model
                .store
                .optimizer_step(&[ParamLabel::Shared, ParamLabel::GenerationExpert], &hyper)?;
        }

        if cfg.train_refinement() && model.cfg.n_expert_blocks > 0 {
            let off = OfflineAdvantage::from_rewards(&group.rewards())?;
            let k_n = if cfg.online { cfg.online_samples } else { 0 };
            let mut refine_rngs: Vec<ChaCha8Rng> = (0..cfg.group_size)
                .map(|m| {
                    derive(seed, Stream::OnlineRefine, &[path_base[0], path_base[1], m as u64])
                })
                .collect();
            let on = online_refine(
                model,
                &bundle.scene,
                &bundle.ctx,
                codec,
                sim_cfg,
                &group,
                k_n,
                cfg.refine_temperature,
                &mut refine_rngs,
            )?;
            if k_n > 0 {
                let total: f64 = on.refined_rewards.iter().flatten().sum();
                metrics.mean_refined_reward += total / (cfg.group_size * k_n) as f64;
                refined_count += 1;
            }
            let mut tape = Tape::new();
            let loss = hybrid_loss(model, &bundle.ctx, &group, &off, &on, cfg, &mut tape)?;
            metrics.hybrid_loss += tape.value(loss).item();
            tape.backward(loss, &mut model.store)?;
            let hyper = AdamW { lr: cfg.lr_refinement, ..*hyper_base };
            model.store.optimizer_step(&[ParamLabel::RefinementExpert], &hyper)?;
        }
    }

    let n = scenes.len().max(1) as f64;
    metrics.mean_reward /= n;
    metrics.grpo_loss /= n;
    metrics.clip_fraction /= n;
    metrics.kl /= n;
    metrics.hybrid_loss /= n;
    if refined_count > 0 {
        metrics.mean_refined_reward /= refined_count as f64;
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sim::{generate_scene, rasterize, Difficulty};
    use crate::tensor::ParamId;

    fn tiny_setup() -> (PlannerModel, SceneBundle, CodecConfig, SimConfig) {
        let codec = CodecConfig {
            spatial_bins: 200,
            heading_bins: 90,
            waypoints: 4,
            ..CodecConfig::default()
        };
        let sim_cfg = SimConfig { grid_size: 16, ..SimConfig::default() };
        let mcfg = ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_shared_blocks: 2,
            n_expert_blocks: 1,
            vocab_size: codec.vocab_size(),
            max_context_len: 32,
            response_len: codec.response_len(),
            mlp_ratio: 2,
            patch_size: 8,
            grid_size: 16,
            grid_channels: crate::sim::GRID_CHANNELS,
            strict_confinement: true,
        };
        let mut model = PlannerModel::new(mcfg.clone(), 21).unwrap();
        model.init_refinement_from_generation();
        let scene =
            generate_scene(77, Difficulty::Easy, codec.waypoints as f64 * codec.dt, codec.dt, &sim_cfg)
                .unwrap();
        let grid = rasterize(&scene, &sim_cfg);
        let ctx = crate::model::encode_context(&grid, scene.command, &mcfg);
        (model, SceneBundle { scene, ctx }, codec, sim_cfg)
    }

    fn tiny_cfg() -> RftConfig {
        RftConfig {
            group_size: 3,
            online_samples: 2,
            steps: 4,
            tau: 2,
            kl_beta: 0.0,
            rollout_temperature: 1.0,
            ..RftConfig::default()
        }
    }

    #[test]
    fn grpo_advantages_match_hand_values_and_sum_to_zero() {
        let adv = grpo_advantages(&[0.8, 0.6, 1.0]);
        assert!((adv[0] - 0.0).abs() < 1e-12);
        assert!((adv[1] + 0.2).abs() < 1e-12);
        assert!((adv[2] - 0.2).abs() < 1e-12);
        assert!(adv.iter().sum::<f64>().abs() < 1e-12);
        assert!(grpo_advantages(&[0.5, 0.5, 0.5]).iter().all(|&a| a == 0.0));
    }

    #[test]
    fn offline_matrix_is_antisymmetric_with_zero_mean() {
        let off = OfflineAdvantage::from_rewards(&[1.0, 0.5]).unwrap();
        assert_eq!(off.get(0, 1), 0.5);
        assert_eq!(off.get(1, 0), -0.5);
        assert_eq!(off.get(0, 0), 0.0);
        let off = OfflineAdvantage::from_rewards(&[0.9, 0.2, 0.4, 0.7]).unwrap();
        let mut total = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                assert!((off.get(i, j) + off.get(j, i)).abs() < 1e-12);
                total += off.get(i, j);
            }
        }
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn clipped_surrogate_hand_case() {
        // π_old = 0.5, π_θ = 0.8, Â = 1, ε = 0.2 -> min(1.6, 1.2) = 1.2
        let mut tape = Tape::new();
        let new_lp = tape.input(Mat::column(&[0.8f64.ln()]));
        let term = ppo_terms(&mut tape, new_lp, &[0.5f64.ln()], &[1.0], 0.2).unwrap();
        assert!((tape.value(term).get(0, 0) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn rollout_group_shapes_and_reward_range() {
        let (model, bundle, codec, sim_cfg) = tiny_setup();
        let cfg = tiny_cfg();
        let schedule = Schedule::new(crate::diffusion::ScheduleKind::Cosine, cfg.steps, 12);
        let mut rngs: Vec<ChaCha8Rng> =
            (0..3).map(|m| derive(5, Stream::Rollout, &[0, 0, m])).collect();
        let group = rollout_group(
            &model, &bundle.scene, &bundle.ctx, &codec, &sim_cfg, &schedule, &cfg, &mut rngs,
        )
        .unwrap();
        assert_eq!(group.rollouts.len(), 3);
        for r in &group.rollouts {
            assert!((0.0..=1.0).contains(&r.reward));
            assert_eq!(r.path.num_transitions(), 2); // ⌊4/2⌋
            // Eligibility exactness: every position decoded exactly once.
            let mut seen = vec![false; 12];
            for (j, lps) in r.old_logprobs.iter().enumerate() {
                let eligible = r.path.eligible_positions(j);
                assert_eq!(eligible.len(), lps.len());
                for (&k, &(kk, _)) in eligible.iter().zip(lps) {
                    assert_eq!(k, kk);
                    assert!(!seen[k]);
                    seen[k] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn grpo_zero_advantages_give_zero_loss_and_grads() {
        let (mut model, bundle, codec, sim_cfg) = tiny_setup();
        let cfg = tiny_cfg();
        let schedule = Schedule::new(crate::diffusion::ScheduleKind::Cosine, cfg.steps, 12);
        let mut rngs: Vec<ChaCha8Rng> =
            (0..3).map(|m| derive(6, Stream::Rollout, &[0, 0, m])).collect();
        let mut group = rollout_group(
            &model, &bundle.scene, &bundle.ctx, &codec, &sim_cfg, &schedule, &cfg, &mut rngs,
        )
        .unwrap();
        // 0.75 sums and divides exactly in binary, so advantages are 0.0.
        for r in &mut group.rollouts {
            r.reward = 0.75;
        }
        let mut tape = Tape::new();
        let (loss, _) = grpo_loss(&model, None, &bundle.ctx, &group, &cfg, &mut tape).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-15);
        tape.backward(loss, &mut model.store).unwrap();
        for p in model.store.params() {
            assert!(p.grad.iter().all(|&g| g == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn ratio_one_matches_policy_gradient_direction() {
        // At π_θ == π_old with β = 0 the surrogate's value equals Σ Â·1 and
        // its gradient reduces to Σ Â·∇log π.
        let (mut model, bundle, codec, sim_cfg) = tiny_setup();
        let cfg = tiny_cfg();
        let schedule = Schedule::new(crate::diffusion::ScheduleKind::Cosine, cfg.steps, 12);
        let mut rngs: Vec<ChaCha8Rng> =
            (0..3).map(|m| derive(7, Stream::Rollout, &[0, 0, m])).collect();
        let mut group = rollout_group(
            &model, &bundle.scene, &bundle.ctx, &codec, &sim_cfg, &schedule, &cfg, &mut rngs,
        )
        .unwrap();
        // Hand-set distinct rewards.
        for (i, r) in group.rollouts.iter_mut().enumerate() {
            r.reward = 0.2 + 0.3 * i as f64;
        }
        let advantages = grpo_advantages(&group.rewards());

        let mut tape = Tape::new();
        let (loss, _) = grpo_loss(&model, None, &bundle.ctx, &group, &cfg, &mut tape).unwrap();
        tape.backward(loss, &mut model.store).unwrap();
        let surrogate_grads: Vec<Vec<f64>> =
            model.store.params().iter().map(|p| p.grad.clone()).collect();
        model.store.zero_grads();

        // Reference: plain weighted negative log-likelihood.
        let l = model.cfg.response_len;
        let mut tape2 = Tape::new();
        let mut items = Vec::new();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for (i, rollout) in group.rollouts.iter().enumerate() {
            for (j, lps) in rollout.old_logprobs.iter().enumerate() {
                let pair = items.len();
                items.push(BatchItem { ctx: &bundle.ctx, response: &rollout.path.snapshots[j] });
                for &(k, _) in lps {
                    rows.push(pair * l + k);
                    targets.push(rollout.tokens[k] as usize);
                    weights.push(advantages[i] / (3.0 * l as f64));
                }
            }
        }
        let logits = model.forward(&mut tape2, &items, ExpertId::Generation).unwrap();
        let sel = tape2.index_select(logits, &rows).unwrap();
        let lp = tape2.select_log_prob(sel, &targets).unwrap();
        let w = tape2.input(Mat::column(&weights));
        let weighted = tape2.mul(lp, w).unwrap();
        let obj = tape2.sum(weighted);
        let loss2 = tape2.scale(obj, -1.0);
        tape2.backward(loss2, &mut model.store).unwrap();
        for (p, sg) in model.store.params().iter().zip(&surrogate_grads) {
            for (a, b) in p.grad.iter().zip(sg) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{}", p.name);
            }
        }
    }

    #[test]
    fn online_refinement_shapes_and_identity_advantage() {
        let (model, bundle, codec, sim_cfg) = tiny_setup();
        let cfg = tiny_cfg();
        let schedule = Schedule::new(crate::diffusion::ScheduleKind::Cosine, cfg.steps, 12);
        let mut rngs: Vec<ChaCha8Rng> =
            (0..3).map(|m| derive(8, Stream::Rollout, &[0, 0, m])).collect();
        let group = rollout_group(
            &model, &bundle.scene, &bundle.ctx, &codec, &sim_cfg, &schedule, &cfg, &mut rngs,
        )
        .unwrap();
        let mut rrngs: Vec<ChaCha8Rng> =
            (0..3).map(|m| derive(8, Stream::OnlineRefine, &[0, 0, m])).collect();
        let on = online_refine(
            &model, &bundle.scene, &bundle.ctx, &codec, &sim_cfg, &group, 2, 0.7, &mut rrngs,
        )
        .unwrap();
        assert_eq!(on.advantages.len(), 6);
        for a in &on.advantages {
            assert!((-1.0..=1.0).contains(a));
        }
        // Argmax-equivalent refinement that reproduces the anchor has
        // advantage exactly zero.
        let mut rrngs: Vec<ChaCha8Rng> =
            (0..3).map(|m| derive(9, Stream::OnlineRefine, &[0, 0, m])).collect();
        let mut on0 = online_refine(
            &model, &bundle.scene, &bundle.ctx, &codec, &sim_cfg, &group, 1, 0.0, &mut rrngs,
        )
        .unwrap();
        for i in 0..3 {
            on0.refined_tokens[i][0] = group.rollouts[i].tokens.clone();
            let r = reward_of(&on0.refined_tokens[i][0], &bundle.scene, &codec, &sim_cfg).pdms;
            assert!((r - group.rollouts[i].reward).abs() < 1e-12);
        }
    }

    #[test]
    fn hybrid_loss_zero_advantages_zero_gradients() {
        let (mut model, bundle, codec, sim_cfg) = tiny_setup();
        let cfg = tiny_cfg();
        let schedule = Schedule::new(crate::diffusion::ScheduleKind::Cosine, cfg.steps, 12);
        let mut rngs: Vec<ChaCha8Rng> =
            (0..3).map(|m| derive(10, Stream::Rollout, &[0, 0, m])).collect();
        let mut group = rollout_group(
            &model, &bundle.scene, &bundle.ctx, &codec, &sim_cfg, &schedule, &cfg, &mut rngs,
        )
        .unwrap();
        for r in &mut group.rollouts {
            r.reward = 0.5;
        }
        let off = OfflineAdvantage::from_rewards(&group.rewards()).unwrap();
        let mut rrngs: Vec<ChaCha8Rng> =
            (0..3).map(|m| derive(10, Stream::OnlineRefine, &[0, 0, m])).collect();
        let mut on = online_refine(
            &model, &bundle.scene, &bundle.ctx, &codec, &sim_cfg, &group, 2, 0.7, &mut rrngs,
        )
        .unwrap();
        for (i, row) in on.refined_rewards.iter().enumerate() {
            for (k, _) in row.iter().enumerate() {
                on.advantages[i * 2 + k] = 0.0;
            }
        }
        let mut tape = Tape::new();
        let loss = hybrid_loss(&model, &bundle.ctx, &group, &off, &on, &cfg, &mut tape).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-15);
        tape.backward(loss, &mut model.store).unwrap();
        for p in model.store.params() {
            assert!(p.grad.iter().all(|&g| g == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn hybrid_toy_instance_matches_hand_computation() {
        // G = 2, K = 1, L = 1 with hand-set probabilities.
        let mut tape = Tape::new();
        // Offline pairs (i≠j): (i=0,j=1) and (i=1,j=0).
        let new_lp = tape.input(Mat::column(&[0.6f64.ln(), 0.3f64.ln()]));
        let old = [0.5f64.ln(), 0.25f64.ln()];
        let adv = [0.4, -0.4]; // r0 - r1 = 0.4
        let norm = 1.0 / (2.0 * 2.0 * 1.0);
        let weights: Vec<f64> = adv.iter().map(|a| a * norm).collect();
        let off_term = weighted_ratio_sum(&mut tape, new_lp, &old, &weights, None).unwrap();
        let hand_off = norm * ((0.6 / 0.5) * 0.4 + (0.3 / 0.25) * -0.4);
        assert!((tape.value(off_term).item() - hand_off).abs() < 1e-12);

        // Online: one refined sample per anchor.
        let new_lp_on = tape.input(Mat::column(&[0.9f64.ln(), 0.2f64.ln()]));
        let old_on = [0.8f64.ln(), 0.4f64.ln()];
        let adv_on = [0.25, -0.1];
        let norm_on = 1.0 / (2.0 * 1.0 * 1.0);
        let w_on: Vec<f64> = adv_on.iter().map(|a| a * norm_on).collect();
        let on_term = weighted_ratio_sum(&mut tape, new_lp_on, &old_on, &w_on, None).unwrap();
        let hand_on = norm_on * ((0.9 / 0.8) * 0.25 + (0.2 / 0.4) * -0.1);
        assert!((tape.value(on_term).item() - hand_on).abs() < 1e-12);

        let total = tape.add(off_term, on_term).unwrap();
        let loss = tape.scale(total, -1.0);
        assert!((tape.value(loss).item() + (hand_off + hand_on)).abs() < 1e-12);
    }

    #[test]
    fn hybrid_step_confines_to_refinement_parameters() {
        let (mut model, bundle, codec, sim_cfg) = tiny_setup();
        let cfg = tiny_cfg();
        let schedule = Schedule::new(crate::diffusion::ScheduleKind::Cosine, cfg.steps, 12);
        let mut rngs: Vec<ChaCha8Rng> =
            (0..3).map(|m| derive(11, Stream::Rollout, &[0, 0, m])).collect();
        let mut group = rollout_group(
            &model, &bundle.scene, &bundle.ctx, &codec, &sim_cfg, &schedule, &cfg, &mut rngs,
        )
        .unwrap();
        for (i, r) in group.rollouts.iter_mut().enumerate() {
            r.reward = 0.1 + 0.4 * i as f64;
        }
        let off = OfflineAdvantage::from_rewards(&group.rewards()).unwrap();
        let mut rrngs: Vec<ChaCha8Rng> =
            (0..3).map(|m| derive(11, Stream::OnlineRefine, &[0, 0, m])).collect();
        let on = online_refine(
            &model, &bundle.scene, &bundle.ctx, &codec, &sim_cfg, &group, 2, 0.7, &mut rrngs,
        )
        .unwrap();

        let part = model.parameter_partition();
        let frozen: Vec<(ParamId, Vec<f64>)> = part
            .ids_with(ParamLabel::Shared)
            .into_iter()
            .chain(part.ids_with(ParamLabel::GenerationExpert))
            .map(|id| (id, model.store.param(id).data.to_vec()))
            .collect();

        let mut tape = Tape::new();
        let loss = hybrid_loss(&model, &bundle.ctx, &group, &off, &on, &cfg, &mut tape).unwrap();
        tape.backward(loss, &mut model.store).unwrap();
        model
            .store
            .optimizer_step(&[ParamLabel::RefinementExpert], &AdamW::default())
            .unwrap();
        for (id, data) in &frozen {
            assert_eq!(model.store.param(*id).data.as_slice(), data.as_slice());
        }
    }

    #[test]
    fn positive_advantage_pair_increases_target_logprob() {
        let (mut model, bundle, codec, sim_cfg) = tiny_setup();
        let mut cfg = tiny_cfg();
        cfg.online = false;
        let schedule = Schedule::new(crate::diffusion::ScheduleKind::Cosine, cfg.steps, 12);
        let mut rngs: Vec<ChaCha8Rng> =
            (0..3).map(|m| derive(12, Stream::Rollout, &[0, 0, m])).collect();
        let group = rollout_group(
            &model, &bundle.scene, &bundle.ctx, &codec, &sim_cfg, &schedule, &cfg, &mut rngs,
        )
        .unwrap();

        // Single positive-advantage pair: target i=0 given input j=1.
        let mut off = OfflineAdvantage::from_rewards(&[0.0, 0.0, 0.0]).unwrap();
        off.matrix[1] = 1.0; // (i=0, j=1)
        let mut rrngs: Vec<ChaCha8Rng> =
            (0..3).map(|m| derive(12, Stream::OnlineRefine, &[0, 0, m])).collect();
        let on = online_refine(
            &model, &bundle.scene, &bundle.ctx, &codec, &sim_cfg, &group, 0, 0.7, &mut rrngs,
        )
        .unwrap();

        let target_lp = |model: &PlannerModel| -> f64 {
            let items = [BatchItem { ctx: &bundle.ctx, response: &group.rollouts[1].tokens }];
            let logits = model.logits(&items, ExpertId::Refinement).unwrap();
            (0..model.cfg.response_len)
                .map(|pos| {
                    softmax_slice(logits.row(pos))[group.rollouts[0].tokens[pos] as usize].ln()
                })
                .sum()
        };
        let before = target_lp(&model);
        let mut tape = Tape::new();
        let loss = hybrid_loss(&model, &bundle.ctx, &group, &off, &on, &cfg, &mut tape).unwrap();
        tape.backward(loss, &mut model.store).unwrap();
        // Sign-update degenerate AdamW: first-order ascent is guaranteed.
        let hyper = AdamW { lr: 1e-4, beta1: 0.0, beta2: 0.0, eps: 1e-12, weight_decay: 0.0 };
        model.store.optimizer_step(&[ParamLabel::RefinementExpert], &hyper).unwrap();
        let after = target_lp(&model);
        assert!(after > before, "log-prob did not increase: {before} -> {after}");
    }

    #[test]
    fn rft_step_is_deterministic_and_partitions_updates() {
        let (model, bundle, codec, sim_cfg) = tiny_setup();
        let cfg = tiny_cfg();
        let hyper = AdamW::default();

        let run = |mut m: PlannerModel| -> (RftMetrics, Vec<Vec<f64>>) {
            let metrics = rft_step(
                &mut m,
                None,
                std::slice::from_ref(&bundle),
                &codec,
                &sim_cfg,
                &cfg,
                &hyper,
                99,
                0,
            )
            .unwrap();
            let data = m.store.params().iter().map(|p| p.data.to_vec()).collect();
            (metrics, data)
        };
        let (ma, da) = run(model.clone());
        let (mb, db) = run(model.clone());
        assert_eq!(ma, mb);
        assert_eq!(da, db);

        // Disabling the refiner must not change the generator's update.
        let mut cfg_gen_only = cfg.clone();
        cfg_gen_only.offline = false;
        cfg_gen_only.online = false;
        let mut m2 = model.clone();
        rft_step(
            &mut m2,
            None,
            std::slice::from_ref(&bundle),
            &codec,
            &sim_cfg,
            &cfg_gen_only,
            &hyper,
            99,
            0,
        )
        .unwrap();
        let part = m2.parameter_partition();
        for id in part
            .ids_with(ParamLabel::Shared)
            .into_iter()
            .chain(part.ids_with(ParamLabel::GenerationExpert))
        {
            let full = &da[id.0];
            assert_eq!(m2.store.param(id).data.as_slice(), full.as_slice());
        }
    }
}
