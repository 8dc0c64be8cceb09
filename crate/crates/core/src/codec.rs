//! Trajectory tokenization: uniform binning of coordinates and headings
//! into a contiguous extended vocabulary, and the inverse decode.
//!
//! Vocabulary layout is `[special tokens][spatial bins][heading bins]`.
//! Token id 0 is the mask token; route-command ids live in the special
//! region as well. Spatial bins are shared between the x and y axes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token id of the mask symbol.
pub const MASK_TOKEN: u32 = 0;
/// Token ids of the three route commands, in `Command` discriminant order.
pub const COMMAND_TOKENS: [u32; 3] = [1, 2, 3];

/// Which sub-vocabulary a coordinate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Spatial,
    Heading,
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("non-finite value on {axis:?} axis")]
    NonFinite { axis: Axis },
    #[error("bin {bin} out of range for {axis:?} axis with {bins} bins")]
    BinOutOfRange { bin: usize, axis: Axis, bins: usize },
    #[error("trajectory has {got} waypoints, codec expects {want}")]
    WaypointCount { got: usize, want: usize },
    #[error("response has {got} tokens, codec expects {want}")]
    ResponseLen { got: usize, want: usize },
    #[error("mask token present at response position {pos}")]
    MaskedToken { pos: usize },
    #[error("token {token} at response position {pos} is outside the {axis:?} sub-vocabulary")]
    SubVocab { token: u32, pos: usize, axis: Axis },
    #[error("invalid codec config: {0}")]
    Config(String),
}

/// Uniform-binning configuration plus the vocabulary layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub spatial_min: f64,
    pub spatial_max: f64,
    pub spatial_bins: usize,
    pub heading_min: f64,
    pub heading_max: f64,
    pub heading_bins: usize,
    /// Waypoints per trajectory (H). Response length is 3·H.
    pub waypoints: usize,
    /// Time step between waypoints, seconds.
    pub dt: f64,
    /// Special + context token ids preceding the bin tokens.
    pub base_vocab: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        // Spatial/heading ranges and bin counts follow the reference setup:
        // 0.05 m and 0.1 degree resolution.
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
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        if !(self.spatial_min < self.spatial_max) {
            return Err(CodecError::Config("spatial_min must be < spatial_max".into()));
        }
        if !(self.heading_min < self.heading_max) {
            return Err(CodecError::Config("heading_min must be < heading_max".into()));
        }
        if self.spatial_bins < 2 || self.heading_bins < 2 {
            return Err(CodecError::Config("bin counts must be >= 2".into()));
        }
        if self.waypoints == 0 {
            return Err(CodecError::Config("waypoints must be >= 1".into()));
        }
        if self.base_vocab <= COMMAND_TOKENS[2] as usize {
            return Err(CodecError::Config("base_vocab must cover mask and command ids".into()));
        }
        if !(self.dt > 0.0) {
            return Err(CodecError::Config("dt must be positive".into()));
        }
        Ok(())
    }

    pub fn resolution(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Spatial => (self.spatial_max - self.spatial_min) / self.spatial_bins as f64,
            Axis::Heading => (self.heading_max - self.heading_min) / self.heading_bins as f64,
        }
    }

    fn range(&self, axis: Axis) -> (f64, f64, usize) {
        match axis {
            Axis::Spatial => (self.spatial_min, self.spatial_max, self.spatial_bins),
            Axis::Heading => (self.heading_min, self.heading_max, self.heading_bins),
        }
    }

    /// Total vocabulary: `[0, base)` special, then spatial, then heading bins.
    pub fn vocab_size(&self) -> usize {
        self.base_vocab + self.spatial_bins + self.heading_bins
    }

    /// Response length L = 3·H (x, y, heading per waypoint).
    pub fn response_len(&self) -> usize {
        3 * self.waypoints
    }

    /// First global token id of the spatial sub-vocabulary.
    pub fn spatial_offset(&self) -> u32 {
        self.base_vocab as u32
    }

    /// First global token id of the heading sub-vocabulary.
    pub fn heading_offset(&self) -> u32 {
        (self.base_vocab + self.spatial_bins) as u32
    }

    /// Sub-vocabulary for a response position: x, y, heading repeating.
    pub fn position_axis(&self, pos: usize) -> Axis {
        if pos % 3 == 2 {
            Axis::Heading
        } else {
            Axis::Spatial
        }
    }

    /// Global token id range (start, end-exclusive) valid at a response position.
    pub fn position_token_range(&self, pos: usize) -> (u32, u32) {
        match self.position_axis(pos) {
            Axis::Spatial => (self.spatial_offset(), self.heading_offset()),
            Axis::Heading => (self.heading_offset(), self.vocab_size() as u32),
        }
    }
}

/// One planned pose in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    /// Degrees.
    pub heading: f64,
}

/// Fixed-horizon trajectory: H waypoints spaced `dt` seconds apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Waypoint>, dt: f64) -> Self {
        Self { waypoints, dt }
    }
}

/// Context prefix plus the fixed-length trajectory response region.
///
/// Masked response positions hold [`MASK_TOKEN`]; `mask_flags` is derived
/// from the response contents rather than stored separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub context: Vec<u32>,
    pub response: Vec<u32>,
}

impl TokenSequence {
    pub fn fully_masked(context: Vec<u32>, response_len: usize) -> Self {
        Self { context, response: vec![MASK_TOKEN; response_len] }
    }

    pub fn mask_flags(&self) -> Vec<bool> {
        self.response.iter().map(|&t| t == MASK_TOKEN).collect()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.response
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == MASK_TOKEN).then_some(i))
            .collect()
    }

    pub fn num_masked(&self) -> usize {
        self.response.iter().filter(|&&t| t == MASK_TOKEN).count()
    }
}

/// Wrap a heading into (-180, 180] and clamp any value to the axis range.
pub fn clamp_to_range(value: f64, axis: Axis, cfg: &CodecConfig) -> f64 {
    let (min, max, _) = cfg.range(axis);
    let v = match axis {
        Axis::Spatial => value,
        Axis::Heading => {
            let mut w = (value + 180.0).rem_euclid(360.0) - 180.0;
            if w == -180.0 {
                w = 180.0;
            }
            w
        }
    };
    v.clamp(min, max)
}

/// Map an in-range value to its uniform bin: `floor((v - min)/res)`,
/// clamped so the closed upper boundary lands in the last bin.
pub fn encode_coord(value: f64, axis: Axis, cfg: &CodecConfig) -> Result<usize, CodecError> {
    if !value.is_finite() {
        return Err(CodecError::NonFinite { axis });
    }
    let (min, _, bins) = cfg.range(axis);
    let res = cfg.resolution(axis);
    let bin = ((value - min) / res).floor();
    let bin = if bin < 0.0 { 0 } else { bin as usize };
    Ok(bin.min(bins - 1))
}

/// Bin center: `min + (bin + 0.5)·res`.
pub fn decode_bin(bin: usize, axis: Axis, cfg: &CodecConfig) -> Result<f64, CodecError> {
    let (min, _, bins) = cfg.range(axis);
    if bin >= bins {
        return Err(CodecError::BinOutOfRange { bin, axis, bins });
    }
    Ok(min + (bin as f64 + 0.5) * cfg.resolution(axis))
}

/// Emit `(x, y, heading)` tokens per waypoint, offset into the global
/// vocabulary. Output length is 3·H.
pub fn encode_trajectory(traj: &Trajectory, cfg: &CodecConfig) -> Result<Vec<u32>, CodecError> {
    if traj.waypoints.len() != cfg.waypoints {
        return Err(CodecError::WaypointCount { got: traj.waypoints.len(), want: cfg.waypoints });
    }
    let mut tokens = Vec::with_capacity(cfg.response_len());
    for wp in &traj.waypoints {
        let bx = encode_coord(wp.x, Axis::Spatial, cfg)?;
        let by = encode_coord(wp.y, Axis::Spatial, cfg)?;
        let bh = encode_coord(wp.heading, Axis::Heading, cfg)?;
        tokens.push(cfg.spatial_offset() + bx as u32);
        tokens.push(cfg.spatial_offset() + by as u32);
        tokens.push(cfg.heading_offset() + bh as u32);
    }
    Ok(tokens)
}

/// Inverse of [`encode_trajectory`] up to quantization; every decoded
/// coordinate is the corresponding bin center.
///
/// A mask token or a token outside its position's sub-vocabulary is an
/// error carrying the offending position; callers in the RL layer map
/// that to reward 0 instead of aborting.
pub fn decode_trajectory(tokens: &[u32], cfg: &CodecConfig) -> Result<Trajectory, CodecError> {
    let want = cfg.response_len();
    if tokens.len() != want {
        return Err(CodecError::ResponseLen { got: tokens.len(), want });
    }
    let mut waypoints = Vec::with_capacity(cfg.waypoints);
    for (w, chunk) in tokens.chunks_exact(3).enumerate() {
        let mut vals = [0.0f64; 3];
        for (k, &tok) in chunk.iter().enumerate() {
            let pos = 3 * w + k;
            if tok == MASK_TOKEN {
                return Err(CodecError::MaskedToken { pos });
            }
            let axis = cfg.position_axis(pos);
            let (lo, hi) = cfg.position_token_range(pos);
            if tok < lo || tok >= hi {
                return Err(CodecError::SubVocab { token: tok, pos, axis });
            }
            vals[k] = decode_bin((tok - lo) as usize, axis, cfg)?;
        }
        waypoints.push(Waypoint { x: vals[0], y: vals[1], heading: vals[2] });
    }
    Ok(Trajectory { waypoints, dt: cfg.dt })
}
