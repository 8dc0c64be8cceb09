//! Desk-scale laboratory for a refinement-augmented masked-diffusion
//! trajectory planner.
//!
//! The crate is organized around seven subsystems:
//!
//! - [`codec`] — bidirectional mapping between continuous trajectories and
//!   discrete token sequences over an extended vocabulary.
//! - [`tensor`] — minimal dense-tensor engine with reverse-mode
//!   differentiation, stop-gradient boundaries, and labeled parameters.
//! - [`model`] — bidirectional transformer with block-level
//!   mixture-of-experts (shared trunk, generation tail, refinement tail).
//! - [`diffusion`] — masked-diffusion training objective, iterative
//!   unmasking sampler, and the single-pass refinement step.
//! - [`sim`] — procedural 2D driving scenes, a lattice expert planner, and
//!   a deterministic multi-criterion trajectory scorer.
//! - [`rl`] — GRPO over generation rollouts plus the hybrid offline/online
//!   objective for the refinement expert.
//! - [`pipeline`] — configuration, dataset builds, two-stage training,
//!   evaluation, checkpointing, and plot emission behind the CLI.

pub mod codec;
pub mod diffusion;
pub mod model;
pub mod pipeline;
pub mod rl;
pub mod rng;
pub mod sim;
pub mod tensor;
