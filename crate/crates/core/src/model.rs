//! Bidirectional transformer planner with block-level mixture-of-experts.
//!
//! A shared trunk (patch/command/token embeddings plus the first
//! `n_shared_blocks` transformer blocks) feeds one of two tails selected
//! explicitly per call: the generation tail decodes masked responses, the
//! replicated refinement tail re-emits fully decoded ones. The output head
//! is shared; under strict confinement the refinement branch sees the
//! trunk and head through gradient-blocking views, so training the
//! refinement branch can never move Shared or GenerationExpert weights.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng::{derive, Stream};
use crate::sim::{Command, Grid};
use crate::tensor::{Mat, ParamId, ParamLabel, ParamStore, ParameterPartition, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence length {got} exceeds maximum {max}")]
    SequenceTooLong { got: usize, max: usize },
    #[error("response has {got} tokens, model expects {want}")]
    ResponseLen { got: usize, want: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Which expert tail a forward pass routes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertId {
    Generation,
    Refinement,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_shared_blocks: usize,
    /// Expert tail depth n; 0 collapses both experts to the same function.
    pub n_expert_blocks: usize,
    pub vocab_size: usize,
    pub max_context_len: usize,
    pub response_len: usize,
    pub mlp_ratio: usize,
    /// Side length of square grid patches fed to the linear embedding.
    pub patch_size: usize,
    pub grid_size: usize,
    pub grid_channels: usize,
    /// Route refinement-branch gradients through blocking views of the
    /// shared trunk and head.
    pub strict_confinement: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_shared_blocks: 6,
            n_expert_blocks: 2,
            vocab_size: 5808,
            max_context_len: 256,
            response_len: 24,
            mlp_ratio: 4,
            patch_size: 16,
            grid_size: 64,
            grid_channels: crate::sim::GRID_CHANNELS,
            strict_confinement: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config("d_model must be divisible by n_heads".into()));
        }
        if self.grid_size % self.patch_size != 0 {
            return Err(ModelError::Config("grid_size must be divisible by patch_size".into()));
        }
        let ctx = self.context_len();
        if ctx > self.max_context_len {
            return Err(ModelError::SequenceTooLong { got: ctx, max: self.max_context_len });
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.grid_size / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.grid_channels * self.patch_size * self.patch_size
    }

    /// Patch tokens plus one command token.
    pub fn context_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn seq_len(&self) -> usize {
        self.context_len() + self.response_len
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Scene conditioning prepared for the model: linear patch features plus
/// the command token id.
#[derive(Debug, Clone)]
pub struct SceneContext {
    pub patches: Mat,
    pub command: u32,
}

/// Extract per-patch feature vectors from an occupancy grid, channel-major
/// within each patch.
pub fn encode_context(grid: &Grid, command: Command, cfg: &ModelConfig) -> SceneContext {
    let ps = cfg.patch_size;
    let per_side = cfg.grid_size / ps;
    let mut data = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for pr in 0..per_side {
        for pc in 0..per_side {
            for c in 0..cfg.grid_channels {
                for dy in 0..ps {
                    for dx in 0..ps {
                        data.push(grid.get(c, pr * ps + dy, pc * ps + dx));
                    }
                }
            }
        }
    }
    SceneContext {
        patches: Mat::new(cfg.n_patches(), cfg.patch_dim(), data),
        command: command.token(),
    }
}

/// One batched forward item: shared scene context plus a response state
/// (masked positions hold [`crate::codec::MASK_TOKEN`]).
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub ctx: &'a SceneContext,
    pub response: &'a [u32],
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    tok_embed: ParamId,
    pos_embed: ParamId,
    patch_w: ParamId,
    patch_b: ParamId,
    shared: Vec<BlockIds>,
    gen: Vec<BlockIds>,
    refine: Vec<BlockIds>,
    final_ln_g: ParamId,
    final_ln_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// The planner: owns the parameter store and the architecture wiring.
#[derive(Debug, Clone)]
pub struct PlannerModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    ids: Ids,
}

fn init_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    (0..rows * cols).map(|_| normal.sample(rng)).collect()
}

fn add_block(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    label: ParamLabel,
    d: usize,
    hid: usize,
) -> BlockIds {
    let std = 0.02;
    let p = |store: &mut ParamStore, name: String, r, c, data| store.add_param(name, r, c, label, data);
    BlockIds {
        ln1_g: p(store, format!("{prefix}.ln1.g"), 1, d, vec![1.0; d]),
        ln1_b: p(store, format!("{prefix}.ln1.b"), 1, d, vec![0.0; d]),
        wq: p(store, format!("{prefix}.attn.wq"), d, d, init_mat(rng, d, d, std)),
        bq: p(store, format!("{prefix}.attn.bq"), 1, d, vec![0.0; d]),
        wk: p(store, format!("{prefix}.attn.wk"), d, d, init_mat(rng, d, d, std)),
        bk: p(store, format!("{prefix}.attn.bk"), 1, d, vec![0.0; d]),
        wv: p(store, format!("{prefix}.attn.wv"), d, d, init_mat(rng, d, d, std)),
        bv: p(store, format!("{prefix}.attn.bv"), 1, d, vec![0.0; d]),
        wo: p(store, format!("{prefix}.attn.wo"), d, d, init_mat(rng, d, d, std)),
        bo: p(store, format!("{prefix}.attn.bo"), 1, d, vec![0.0; d]),
        ln2_g: p(store, format!("{prefix}.ln2.g"), 1, d, vec![1.0; d]),
        ln2_b: p(store, format!("{prefix}.ln2.b"), 1, d, vec![0.0; d]),
        w1: p(store, format!("{prefix}.mlp.w1"), d, hid, init_mat(rng, d, hid, std)),
        b1: p(store, format!("{prefix}.mlp.b1"), 1, hid, vec![0.0; hid]),
        w2: p(store, format!("{prefix}.mlp.w2"), hid, d, init_mat(rng, hid, d, std)),
        b2: p(store, format!("{prefix}.mlp.b2"), 1, d, vec![0.0; d]),
    }
}

impl PlannerModel {
    /// Fresh model with random weights; the refinement tail starts as an
    /// independent random init until [`Self::init_refinement_from_generation`].
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = derive(seed, Stream::ModelInit, &[]);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let hid = cfg.mlp_ratio * d;
        let std = 0.02;

        let tok_embed = store.add_param(
            "embed.tok",
            cfg.vocab_size,
            d,
            ParamLabel::Shared,
            init_mat(&mut rng, cfg.vocab_size, d, std),
        );
        let pos_embed = store.add_param(
            "embed.pos",
            cfg.max_context_len + cfg.response_len,
            d,
            ParamLabel::Shared,
            init_mat(&mut rng, cfg.max_context_len + cfg.response_len, d, std),
        );
        let patch_w = store.add_param(
            "embed.patch.w",
            cfg.patch_dim(),
            d,
            ParamLabel::Shared,
            init_mat(&mut rng, cfg.patch_dim(), d, std),
        );
        let patch_b =
            store.add_param("embed.patch.b", 1, d, ParamLabel::Shared, vec![0.0; d]);

        let shared = (0..cfg.n_shared_blocks)
            .map(|i| add_block(&mut store, &mut rng, &format!("shared.{i}"), ParamLabel::Shared, d, hid))
            .collect();
        let gen = (0..cfg.n_expert_blocks)
            .map(|i| {
                add_block(&mut store, &mut rng, &format!("gen.{i}"), ParamLabel::GenerationExpert, d, hid)
            })
            .collect();
        let refine = (0..cfg.n_expert_blocks)
            .map(|i| {
                add_block(
                    &mut store,
                    &mut rng,
                    &format!("refine.{i}"),
                    ParamLabel::RefinementExpert,
                    d,
                    hid,
                )
            })
            .collect();

        let final_ln_g = store.add_param("final_ln.g", 1, d, ParamLabel::Shared, vec![1.0; d]);
        let final_ln_b = store.add_param("final_ln.b", 1, d, ParamLabel::Shared, vec![0.0; d]);
        let head_w = store.add_param(
            "head.w",
            d,
            cfg.vocab_size,
            ParamLabel::Shared,
            init_mat(&mut rng, d, cfg.vocab_size, std),
        );
        let head_b =
            store.add_param("head.b", 1, cfg.vocab_size, ParamLabel::Shared, vec![0.0; cfg.vocab_size]);

        Ok(Self {
            cfg,
            store,
            ids: Ids {
                tok_embed,
                pos_embed,
                patch_w,
                patch_b,
                shared,
                gen,
                refine,
                final_ln_g,
                final_ln_b,
                head_w,
                head_b,
            },
        })
    }

    /// Warm-start the refinement tail as a deep copy of the generation tail.
    pub fn init_refinement_from_generation(&mut self) {
        let pairs: Vec<(ParamId, ParamId)> = self
            .ids
            .gen
            .iter()
            .zip(&self.ids.refine)
            .flat_map(|(g, r)| block_param_pairs(g, r))
            .collect();
        for (src, dst) in pairs {
            let data = self.store.param(src).data.to_vec();
            self.store.set_data(dst, data);
        }
    }

    pub fn parameter_partition(&self) -> ParameterPartition {
        self.store.partition()
    }

    /// Parameter-count arithmetic helpers for the partition bookkeeping.
    pub fn block_scalar_count(&self) -> usize {
        let d = self.cfg.d_model;
        let hid = self.cfg.mlp_ratio * d;
        4 * (d * d + d) + 4 * d + d * hid + hid + hid * d + d
    }

    /// Batched forward: logits at every response position, shape
    /// `[batch * response_len, vocab_size]`, example-major row order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        items: &[BatchItem<'_>],
        expert: ExpertId,
    ) -> Result<Var, ModelError> {
        let cfg = &self.cfg;
        let b = items.len();
        let p_ct = cfg.n_patches();
        let l = cfg.response_len;
        let s_len = cfg.seq_len();
        for item in items {
            if item.response.len() != l {
                return Err(ModelError::ResponseLen { got: item.response.len(), want: l });
            }
        }

        // Patch features for the whole batch in one projection.
        let mut patch_data = Vec::with_capacity(b * p_ct * cfg.patch_dim());
        for item in items {
            patch_data.extend_from_slice(item.ctx.patches.data());
        }
        let patches = tape.input(Mat::new(b * p_ct, cfg.patch_dim(), patch_data));
        let patch_w = tape.param(&self.store, self.ids.patch_w);
        let patch_b = tape.param(&self.store, self.ids.patch_b);
        let patch_proj = tape.matmul(patches, patch_w)?;
        let patch_proj = tape.add_row(patch_proj, patch_b)?;

        // Command + response token embeddings.
        let mut tok_indices = Vec::with_capacity(b * (1 + l));
        for item in items {
            tok_indices.push(item.ctx.command as usize);
            tok_indices.extend(item.response.iter().map(|&t| t as usize));
        }
        let tok_embed = tape.param(&self.store, self.ids.tok_embed);
        let tok_part = tape.embedding_lookup(tok_embed, &tok_indices)?;

        // Interleave patches and tokens into example-major sequence order.
        let stacked = tape.concat_rows(&[patch_proj, tok_part])?;
        let mut perm = Vec::with_capacity(b * s_len);
        for e in 0..b {
            for s in 0..s_len {
                if s < p_ct {
                    perm.push(e * p_ct + s);
                } else {
                    perm.push(b * p_ct + e * (1 + l) + (s - p_ct));
                }
            }
        }
        let mut x = tape.index_select(stacked, &perm)?;

        // Learned absolute positions.
        let pos_embed = tape.param(&self.store, self.ids.pos_embed);
        let pos_indices: Vec<usize> = (0..b * s_len).map(|r| r % s_len).collect();
        let pos = tape.embedding_lookup(pos_embed, &pos_indices)?;
        x = tape.add(x, pos)?;

        for blk in &self.ids.shared {
            x = self.block_forward(tape, x, blk, b, s_len, false)?;
        }

        let frozen = expert == ExpertId::Refinement
            && cfg.strict_confinement
            && cfg.n_expert_blocks > 0;
        if frozen {
            x = tape.stop_gradient(x);
        }
        let tail = match expert {
            ExpertId::Generation => &self.ids.gen,
            ExpertId::Refinement => &self.ids.refine,
        };
        for blk in tail {
            x = self.block_forward(tape, x, blk, b, s_len, false)?;
        }

        // Only response rows reach the vocabulary head.
        let mut resp_rows = Vec::with_capacity(b * l);
        for e in 0..b {
            for t in 0..l {
                resp_rows.push(e * s_len + p_ct + 1 + t);
            }
        }
        let x = tape.index_select(x, &resp_rows)?;

        let pp = |tape: &mut Tape, id: ParamId| -> Var {
            if frozen {
                tape.param_frozen(&self.store, id)
            } else {
                tape.param(&self.store, id)
            }
        };
        let g = pp(tape, self.ids.final_ln_g);
        let bta = pp(tape, self.ids.final_ln_b);
        let x = tape.layer_norm(x, g, bta)?;
        let hw = pp(tape, self.ids.head_w);
        let hb = pp(tape, self.ids.head_b);
        let logits = tape.matmul(x, hw)?;
        Ok(tape.add_row(logits, hb)?)
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        x: Var,
        blk: &BlockIds,
        b: usize,
        s_len: usize,
        frozen: bool,
    ) -> Result<Var, ModelError> {
        let cfg = &self.cfg;
        let pp = |tape: &mut Tape, id: ParamId| -> Var {
            if frozen {
                tape.param_frozen(&self.store, id)
            } else {
                tape.param(&self.store, id)
            }
        };

        let g1 = pp(tape, blk.ln1_g);
        let b1 = pp(tape, blk.ln1_b);
        let xn = tape.layer_norm(x, g1, b1)?;
        let wq = pp(tape, blk.wq);
        let bq = pp(tape, blk.bq);
        let wk = pp(tape, blk.wk);
        let bk = pp(tape, blk.bk);
        let wv = pp(tape, blk.wv);
        let bv = pp(tape, blk.bv);
        let q = tape.matmul(xn, wq)?;
        let q = tape.add_row(q, bq)?;
        let k = tape.matmul(xn, wk)?;
        let k = tape.add_row(k, bk)?;
        let v = tape.matmul(xn, wv)?;
        let v = tape.add_row(v, bv)?;

        // Full bidirectional attention, fused across examples and heads.
        let ctx = tape.attention(q, k, v, cfg.n_heads, s_len)?;
        let wo = pp(tape, blk.wo);
        let bo = pp(tape, blk.bo);
        let proj = tape.matmul(ctx, wo)?;
        let proj = tape.add_row(proj, bo)?;
        let x = tape.add(x, proj)?;

        let g2 = pp(tape, blk.ln2_g);
        let b2 = pp(tape, blk.ln2_b);
        let xn2 = tape.layer_norm(x, g2, b2)?;
        let w1 = pp(tape, blk.w1);
        let b1m = pp(tape, blk.b1);
        let w2 = pp(tape, blk.w2);
        let b2m = pp(tape, blk.b2);
        let h1 = tape.matmul(xn2, w1)?;
        let h1 = tape.add_row(h1, b1m)?;
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, w2)?;
        let h2 = tape.add_row(h2, b2m)?;
        Ok(tape.add(x, h2)?)
    }

    /// Forward without gradient bookkeeping; returns owned logits.
    pub fn logits(&self, items: &[BatchItem<'_>], expert: ExpertId) -> Result<Mat, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, items, expert)?;
        Ok(tape.value(out).clone())
    }
}

fn block_param_pairs(a: &BlockIds, b: &BlockIds) -> Vec<(ParamId, ParamId)> {
    vec![
        (a.ln1_g, b.ln1_g),
        (a.ln1_b, b.ln1_b),
        (a.wq, b.wq),
        (a.bq, b.bq),
        (a.wk, b.wk),
        (a.bk, b.bk),
        (a.wv, b.wv),
        (a.bv, b.bv),
        (a.wo, b.wo),
        (a.bo, b.bo),
        (a.ln2_g, b.ln2_g),
        (a.ln2_b, b.ln2_b),
        (a.w1, b.w1),
        (a.b1, b.b1),
        (a.w2, b.w2),
        (a.b2, b.b2),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::MASK_TOKEN;
    use crate::tensor::AdamW;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_shared_blocks: 2,
            n_expert_blocks: 1,
            vocab_size: 40,
            max_context_len: 8,
            response_len: 6,
            mlp_ratio: 2,
            patch_size: 4,
            grid_size: 8,
            grid_channels: 2,
            strict_confinement: true,
        }
    }

    fn tiny_ctx(cfg: &ModelConfig, fill: f64) -> SceneContext {
        SceneContext {
            patches: Mat::from_fn(cfg.n_patches(), cfg.patch_dim(), |i, j| {
                fill + (i * 7 + j) as f64 * 0.01
            }),
            command: 1,
        }
    }

    #[test]
    fn refinement_replication_makes_experts_identical() {
        let cfg = tiny_cfg();
        let mut model = PlannerModel::new(cfg.clone(), 3).unwrap();
        let ctx = tiny_ctx(&cfg, 0.2);
        let resp = vec![MASK_TOKEN; cfg.response_len];
        let item = BatchItem { ctx: &ctx, response: &resp };

        let gen = model.logits(&[item], ExpertId::Generation).unwrap();
        let refine = model.logits(&[item], ExpertId::Refinement).unwrap();
        assert_ne!(gen.data(), refine.data());

        model.init_refinement_from_generation();
        let gen = model.logits(&[item], ExpertId::Generation).unwrap();
        let refine = model.logits(&[item], ExpertId::Refinement).unwrap();
        assert_eq!(gen.data(), refine.data());
    }

    #[test]
    fn zero_expert_blocks_collapse_the_experts() {
        let cfg = ModelConfig { n_expert_blocks: 0, ..tiny_cfg() };
        let model = PlannerModel::new(cfg.clone(), 4).unwrap();
        let ctx = tiny_ctx(&cfg, -0.1);
        let resp: Vec<u32> = (0..cfg.response_len as u32).map(|i| 8 + i).collect();
        let item = BatchItem { ctx: &ctx, response: &resp };
        let gen = model.logits(&[item], ExpertId::Generation).unwrap();
        let refine = model.logits(&[item], ExpertId::Refinement).unwrap();
        assert_eq!(gen.data(), refine.data());
        assert!(model.parameter_partition().ids_with(ParamLabel::RefinementExpert).is_empty());
    }

    #[test]
    fn partition_is_total_and_matches_arithmetic() {
        let cfg = tiny_cfg();
        let model = PlannerModel::new(cfg.clone(), 5).unwrap();
        let part = model.parameter_partition();
        assert_eq!(part.len(), model.store.len());
        let blk = model.block_scalar_count();
        assert_eq!(model.store.scalar_count(ParamLabel::GenerationExpert), cfg.n_expert_blocks * blk);
        assert_eq!(model.store.scalar_count(ParamLabel::RefinementExpert), cfg.n_expert_blocks * blk);
        let d = cfg.d_model;
        let expected_shared = cfg.vocab_size * d
            + (cfg.max_context_len + cfg.response_len) * d
            + cfg.patch_dim() * d
            + d
            + cfg.n_shared_blocks * blk
            + 2 * d
            + d * cfg.vocab_size
            + cfg.vocab_size;
        assert_eq!(model.store.scalar_count(ParamLabel::Shared), expected_shared);
    }

    #[test]
    fn refinement_training_leaves_generation_tail_untouched() {
        let cfg = tiny_cfg();
        let mut model = PlannerModel::new(cfg.clone(), 6).unwrap();
        model.init_refinement_from_generation();
        let ctx = tiny_ctx(&cfg, 0.3);
        let resp: Vec<u32> = (0..cfg.response_len as u32).map(|i| 8 + 2 * i).collect();
        let item = BatchItem { ctx: &ctx, response: &resp };

        let part = model.parameter_partition();
        let before: Vec<(ParamId, Vec<f64>)> = part
            .ids_with(ParamLabel::Shared)
            .into_iter()
            .chain(part.ids_with(ParamLabel::GenerationExpert))
            .map(|id| (id, model.store.param(id).data.to_vec()))
            .collect();

        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &[item], ExpertId::Refinement).unwrap();
        let targets: Vec<usize> = resp.iter().map(|&t| t as usize).collect();
        let weights = vec![1.0 / targets.len() as f64; targets.len()];
        let loss = tape.cross_entropy_with_logits(logits, &targets, &weights).unwrap();
        tape.backward(loss, &mut model.store).unwrap();

        // Strict confinement: no shared or generation grads at all.
        for (id, _) in &before {
            assert!(!model.store.param(*id).grad_touched, "{}", model.store.param(*id).name);
        }
        model
            .store
            .optimizer_step(&[ParamLabel::RefinementExpert], &AdamW::default())
            .unwrap();
        for (id, data) in &before {
            assert_eq!(model.store.param(*id).data.as_slice(), data.as_slice());
        }
    }

    #[test]
    fn changing_a_later_token_changes_earlier_logits() {
        let cfg = tiny_cfg();
        let model = PlannerModel::new(cfg.clone(), 7).unwrap();
        let ctx = tiny_ctx(&cfg, 0.0);
        let mut resp: Vec<u32> = vec![MASK_TOKEN; cfg.response_len];
        resp[0] = 9;
        let a = model.logits(&[BatchItem { ctx: &ctx, response: &resp }], ExpertId::Generation).unwrap();
        resp[cfg.response_len - 1] = 17;
        let b = model.logits(&[BatchItem { ctx: &ctx, response: &resp }], ExpertId::Generation).unwrap();
        // Bidirectional attention: logits at position 0 must move.
        let v = cfg.vocab_size;
        assert_ne!(&a.data()[..v], &b.data()[..v]);
    }

    #[test]
    fn positional_encoding_distinguishes_identical_mask_tokens() {
        let cfg = tiny_cfg();
        let model = PlannerModel::new(cfg.clone(), 8).unwrap();
        let ctx = tiny_ctx(&cfg, 0.5);
        let resp = vec![MASK_TOKEN; cfg.response_len];
        let out = model.logits(&[BatchItem { ctx: &ctx, response: &resp }], ExpertId::Generation).unwrap();
        let v = cfg.vocab_size;
        assert_ne!(&out.data()[..v], &out.data()[v..2 * v]);
    }

    #[test]
    fn oversized_context_is_rejected() {
        let cfg = ModelConfig { max_context_len: 2, ..tiny_cfg() };
        assert!(matches!(
            PlannerModel::new(cfg, 0),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn batched_forward_matches_single_forward() {
        let cfg = tiny_cfg();
        let model = PlannerModel::new(cfg.clone(), 9).unwrap();
        let ctx_a = tiny_ctx(&cfg, 0.1);
        let ctx_b = tiny_ctx(&cfg, -0.4);
        let resp_a: Vec<u32> = (0..cfg.response_len as u32).map(|i| 8 + i).collect();
        let resp_b = vec![MASK_TOKEN; cfg.response_len];
        let items =
            [BatchItem { ctx: &ctx_a, response: &resp_a }, BatchItem { ctx: &ctx_b, response: &resp_b }];
        let batched = model.logits(&items, ExpertId::Generation).unwrap();
        let solo_a = model.logits(&items[..1], ExpertId::Generation).unwrap();
        let solo_b = model.logits(&items[1..], ExpertId::Generation).unwrap();
        let l = cfg.response_len * cfg.vocab_size;
        for i in 0..l {
            assert!((batched.data()[i] - solo_a.data()[i]).abs() < 1e-12);
            assert!((batched.data()[l + i] - solo_b.data()[i]).abs() < 1e-12);
        }
    }
}
