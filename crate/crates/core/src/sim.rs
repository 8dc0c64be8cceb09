//! Procedural 2D driving scenes, a lattice expert planner, and a
//! deterministic multi-criterion trajectory scorer.
//!
//! Scenes live in the ego frame at t=0: the ego starts at the origin with
//! heading 0 at the start of a corridor centerline. Obstacles are oriented
//! boxes, either static or constant-velocity. The scorer aggregates
//! no-collision, drivable-area, time-to-collision, comfort, and progress
//! terms into a single [0, 1] score with hard multiplicative gates.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Trajectory, Waypoint, COMMAND_TOKENS};
use crate::rng::{derive, Stream};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no feasible lattice trajectory for scene seed {seed}")]
    Infeasible { seed: u64 },
    #[error("scene generation failed after {attempts} attempts (seed {seed})")]
    GenerationFailed { seed: u64, attempts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl std::str::FromStr for Difficulty {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Self::Easy),
            "medium" => Ok(Self::Medium),
            "hard" => Ok(Self::Hard),
            other => Err(format!("unknown difficulty `{other}`")),
        }
    }
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Easy => write!(f, "easy"),
            Self::Medium => write!(f, "medium"),
            Self::Hard => write!(f, "hard"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Straight,
    Left,
    Right,
}

impl Command {
    pub fn token(self) -> u32 {
        COMMAND_TOKENS[self as usize]
    }
}

/// Oriented box with constant velocity. Heading in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub cx: f64,
    pub cy: f64,
    pub heading: f64,
    pub half_len: f64,
    pub half_wid: f64,
    pub vx: f64,
    pub vy: f64,
}

impl Obstacle {
    fn at(&self, t: f64) -> ObbPose {
        ObbPose {
            cx: self.cx + self.vx * t,
            cy: self.cy + self.vy * t,
            heading_rad: self.heading.to_radians(),
            half_len: self.half_len,
            half_wid: self.half_wid,
        }
    }

    pub fn is_static(&self) -> bool {
        self.vx == 0.0 && self.vy == 0.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ObbPose {
    cx: f64,
    cy: f64,
    heading_rad: f64,
    half_len: f64,
    half_wid: f64,
}

impl ObbPose {
    fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.heading_rad.sin_cos();
        let axes = [
            (c * self.half_len, s * self.half_len),
            (-s * self.half_wid, c * self.half_wid),
        ];
        [
            (self.cx + axes[0].0 + axes[1].0, self.cy + axes[0].1 + axes[1].1),
            (self.cx + axes[0].0 - axes[1].0, self.cy + axes[0].1 - axes[1].1),
            (self.cx - axes[0].0 - axes[1].0, self.cy - axes[0].1 - axes[1].1),
            (self.cx - axes[0].0 + axes[1].0, self.cy - axes[0].1 + axes[1].1),
        ]
    }

    fn inflate(&self, margin: f64) -> ObbPose {
        ObbPose { half_len: self.half_len + margin, half_wid: self.half_wid + margin, ..*self }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.heading_rad.sin_cos();
        let dx = px - self.cx;
        let dy = py - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.half_len && v.abs() <= self.half_wid
    }
}

/// Separating-axis test for two oriented boxes.
fn obb_intersect(a: &ObbPose, b: &ObbPose) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    for pose in [a, b] {
        let (s, c) = pose.heading_rad.sin_cos();
        for axis in [(c, s), (-s, c)] {
            let proj = |pts: &[(f64, f64); 4]| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &(x, y) in pts {
                    let p = x * axis.0 + y * axis.1;
                    lo = lo.min(p);
                    hi = hi.max(p);
                }
                (lo, hi)
            };
            let (alo, ahi) = proj(&ca);
            let (blo, bhi) = proj(&cb);
            if ahi < blo || bhi < alo {
                return false;
            }
        }
    }
    true
}

/// Centerline polyline with uniform half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub centerline: Vec<(f64, f64)>,
    pub half_width: f64,
}

impl Corridor {
    fn cumulative(&self) -> Vec<f64> {
        let mut acc = Vec::with_capacity(self.centerline.len());
        let mut s = 0.0;
        acc.push(0.0);
        for w in self.centerline.windows(2) {
            let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            s += (dx * dx + dy * dy).sqrt();
            acc.push(s);
        }
        acc
    }

    pub fn length(&self) -> f64 {
        *self.cumulative().last().unwrap_or(&0.0)
    }

    /// Position and unit tangent at arc length `s` (clamped to the line).
    pub fn point_at(&self, s: f64) -> ((f64, f64), (f64, f64)) {
        let cum = self.cumulative();
        let total = *cum.last().unwrap();
        let s = s.clamp(0.0, total);
        let mut i = match cum.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if i + 1 >= self.centerline.len() {
            i = self.centerline.len() - 2;
        }
        let (a, b) = (self.centerline[i], self.centerline[i + 1]);
        let seg = (b.0 - a.0, b.1 - a.1);
        let seg_len = (seg.0 * seg.0 + seg.1 * seg.1).sqrt().max(1e-12);
        let f = ((s - cum[i]) / seg_len).clamp(0.0, 1.0);
        ((a.0 + seg.0 * f, a.1 + seg.1 * f), (seg.0 / seg_len, seg.1 / seg_len))
    }

    /// Project a point onto the centerline: (arc length, signed lateral).
    /// Positive lateral is to the left of travel.
    pub fn project(&self, px: f64, py: f64) -> (f64, f64) {
        let cum = self.cumulative();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for (i, w) in self.centerline.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let seg = (b.0 - a.0, b.1 - a.1);
            let len2 = seg.0 * seg.0 + seg.1 * seg.1;
            if len2 < 1e-18 {
                continue;
            }
            let t = (((px - a.0) * seg.0 + (py - a.1) * seg.1) / len2).clamp(0.0, 1.0);
            let (qx, qy) = (a.0 + seg.0 * t, a.1 + seg.1 * t);
            let (dx, dy) = (px - qx, py - qy);
            let d2 = dx * dx + dy * dy;
            if d2 < best.0 {
                let len = len2.sqrt();
                let cross = seg.0 * dy - seg.1 * dx;
                best = (d2, cum[i] + len * t, cross.signum() * d2.sqrt());
            }
        }
        (best.1, best.2)
    }

    pub fn distance(&self, px: f64, py: f64) -> f64 {
        self.project(px, py).1.abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    /// Degrees.
    pub heading: f64,
    pub speed: f64,
}

/// One generated driving situation; the conditioning context and the
/// ground truth the scorer works against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub schema_version: u32,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub command: Command,
    pub corridor: Corridor,
    pub ego: EgoState,
    pub obstacles: Vec<Obstacle>,
    /// Planning horizon in seconds (H·dt).
    pub horizon_s: f64,
    /// Waypoint spacing in seconds.
    pub dt: f64,
    /// Arc progress of the lattice expert, cached at generation time so
    /// that scoring stays a pure function of (scene, trajectory).
    pub expert_progress: f64,
}

pub const SCENE_SCHEMA_VERSION: u32 = 1;

/// Thresholds and weights of the scorer plus rasterization geometry.
/// All values are configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub w_ttc: f64,
    pub w_comfort: f64,
    pub w_ep: f64,
    pub ttc_horizon_s: f64,
    pub accel_limit: f64,
    pub yaw_rate_limit: f64,
    pub dac_exit_limit_m: f64,
    /// Calibration gate: expert score on easy scenes.
    pub easy_expert_pdms: f64,
    pub grid_size: usize,
    pub grid_cell_m: f64,
    pub ego_half_len: f64,
    pub ego_half_wid: f64,
    /// Extra clearance the expert planner keeps around obstacles.
    pub expert_margin: f64,
    pub speed_norm: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            w_ttc: 5.0,
            w_comfort: 2.0,
            w_ep: 5.0,
            ttc_horizon_s: 1.0,
            accel_limit: 4.0,
            yaw_rate_limit: 0.6,
            dac_exit_limit_m: 1.0,
            easy_expert_pdms: 0.9,
            grid_size: 64,
            grid_cell_m: 0.5,
            ego_half_len: 2.3,
            ego_half_wid: 0.95,
            expert_margin: 0.35,
            speed_norm: 15.0,
        }
    }
}

/// Per-criterion sub-scores and the aggregated scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub ep: f64,
    pub pdms: f64,
    /// True when the trajectory was structurally invalid (wrong length,
    /// non-finite, or undecodable tokens); the score is 0 in that case.
    pub malformed: bool,
}

impl RewardBreakdown {
    pub fn malformed() -> Self {
        Self { nc: 0.0, dac: 0.0, ttc: 0.0, comfort: 0.0, ep: 0.0, pdms: 0.0, malformed: true }
    }
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

fn ego_box_at(wp: &Waypoint, cfg: &SimConfig) -> ObbPose {
    ObbPose {
        cx: wp.x,
        cy: wp.y,
        heading_rad: wp.heading.to_radians(),
        half_len: cfg.ego_half_len,
        half_wid: cfg.ego_half_wid,
    }
}

fn wrap_deg(d: f64) -> f64 {
    let mut w = (d + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        w = 180.0;
    }
    w
}

/// Deterministic multi-criterion score of a trajectory in a scene.
pub fn score(scene: &Scene, traj: &Trajectory, cfg: &SimConfig) -> RewardBreakdown {
    let h = (scene.horizon_s / scene.dt).round() as usize;
    if traj.waypoints.len() != h
        || traj
            .waypoints
            .iter()
            .any(|w| !w.x.is_finite() || !w.y.is_finite() || !w.heading.is_finite())
    {
        return RewardBreakdown::malformed();
    }
    let dt = scene.dt;
    let wps = &traj.waypoints;

    // No collision: ego box against every obstacle advanced to waypoint time.
    let mut nc = 1.0;
    'outer: for (k, wp) in wps.iter().enumerate() {
        let t = (k as f64 + 1.0) * dt;
        let ego = ego_box_at(wp, cfg);
        for ob in &scene.obstacles {
            if obb_intersect(&ego, &ob.at(t)) {
                nc = 0.0;
                break 'outer;
            }
        }
    }

    // Drivable area compliance.
    let hw = scene.corridor.half_width;
    let mut inside = 0usize;
    let mut dac = 0.0;
    let mut hard_exit = false;
    for wp in wps {
        let d = scene.corridor.distance(wp.x, wp.y);
        if d <= hw {
            inside += 1;
        }
        if d > hw + cfg.dac_exit_limit_m {
            hard_exit = true;
        }
    }
    if !hard_exit {
        dac = inside as f64 / wps.len() as f64;
    }

    // Time to collision along the instantaneous heading.
    let mut ttc = 1.0;
    'ttc: for (k, wp) in wps.iter().enumerate() {
        let t = (k as f64 + 1.0) * dt;
        let prev = if k == 0 { (scene.ego.x, scene.ego.y) } else { (wps[k - 1].x, wps[k - 1].y) };
        let v = ((wp.x - prev.0).powi(2) + (wp.y - prev.1).powi(2)).sqrt() / dt;
        if v < 1e-6 {
            continue;
        }
        let (hs, hc) = wp.heading.to_radians().sin_cos();
        let steps = 4;
        for q in 1..=steps {
            let delta = cfg.ttc_horizon_s * q as f64 / steps as f64;
            let probe = Waypoint {
                x: wp.x + hc * v * delta,
                y: wp.y + hs * v * delta,
                heading: wp.heading,
            };
            let ego = ego_box_at(&probe, cfg);
            for ob in &scene.obstacles {
                if obb_intersect(&ego, &ob.at(t + delta)) {
                    ttc = 0.0;
                    break 'ttc;
                }
            }
        }
    }

    // Comfort: vector acceleration from position second differences and
    // yaw rate from heading first differences, waypoints only.
    let mut comfort = 1.0;
    for k in 0..wps.len().saturating_sub(2) {
        let ax = (wps[k + 2].x - 2.0 * wps[k + 1].x + wps[k].x) / (dt * dt);
        let ay = (wps[k + 2].y - 2.0 * wps[k + 1].y + wps[k].y) / (dt * dt);
        if (ax * ax + ay * ay).sqrt() > cfg.accel_limit {
            comfort = 0.0;
        }
    }
    for k in 0..wps.len().saturating_sub(1) {
        let dyaw = wrap_deg(wps[k + 1].heading - wps[k].heading).to_radians().abs() / dt;
        if dyaw > cfg.yaw_rate_limit {
            comfort = 0.0;
        }
    }

    // Ego progress along the corridor, normalized by the expert's.
    let last = wps.last().unwrap();
    let (s_end, _) = scene.corridor.project(last.x, last.y);
    let ep = if scene.expert_progress > 1e-9 {
        (s_end / scene.expert_progress).clamp(0.0, 1.0)
    } else {
        1.0
    };

    let soft = (cfg.w_ttc * ttc + cfg.w_comfort * comfort + cfg.w_ep * ep)
        / (cfg.w_ttc + cfg.w_comfort + cfg.w_ep);
    RewardBreakdown { nc, dac, ttc, comfort, ep, pdms: nc * dac * soft, malformed: false }
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

/// Channels-first occupancy grid, ego-centered and heading-aligned.
/// Channel order: drivable mask, obstacles at t=0, obstacles extrapolated
/// to the horizon midpoint, constant ego-speed plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub size: usize,
    pub channels: usize,
    pub cell_m: f64,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.size + row) * self.size + col]
    }
}

pub const GRID_CHANNELS: usize = 4;

/// Rasterize a scene into a fixed grid. Row index grows with the ego-frame
/// lateral (+y, left of heading); column index grows with longitudinal +x.
pub fn rasterize(scene: &Scene, cfg: &SimConfig) -> Grid {
    let n = cfg.grid_size;
    let mut data = vec![0.0; GRID_CHANNELS * n * n];
    let (hs, hc) = scene.ego.heading.to_radians().sin_cos();
    let t_mid = scene.horizon_s / 2.0;
    let obstacles_now: Vec<ObbPose> = scene.obstacles.iter().map(|o| o.at(0.0)).collect();
    let obstacles_mid: Vec<ObbPose> = scene.obstacles.iter().map(|o| o.at(t_mid)).collect();
    let speed_val = (scene.ego.speed / cfg.speed_norm).clamp(0.0, 1.0);
    let half = n as f64 / 2.0;
    for row in 0..n {
        let gy = (row as f64 - half + 0.5) * cfg.grid_cell_m;
        for col in 0..n {
            let gx = (col as f64 - half + 0.5) * cfg.grid_cell_m;
            // ego frame -> world frame
            let wx = scene.ego.x + hc * gx - hs * gy;
            let wy = scene.ego.y + hs * gx + hc * gy;
            let idx = row * n + col;
            if scene.corridor.distance(wx, wy) <= scene.corridor.half_width {
                data[idx] = 1.0;
            }
            if obstacles_now.iter().any(|o| o.contains(wx, wy)) {
                data[n * n + idx] = 1.0;
            }
            if obstacles_mid.iter().any(|o| o.contains(wx, wy)) {
                data[2 * n * n + idx] = 1.0;
            }
            data[3 * n * n + idx] = speed_val;
        }
    }
    Grid { size: n, channels: GRID_CHANNELS, cell_m: cfg.grid_cell_m, data }
}

// ---------------------------------------------------------------------------
// Expert planner
// ---------------------------------------------------------------------------

pub const N_OFFSETS: usize = 9;
const N_PROFILES: usize = 5;
/// Maximum lateral index step per waypoint; keeps the expert comfortable.
pub const MAX_LAT_STEP: usize = 1;

/// Accelerations of the candidate speed profiles, preference order first.
const PROFILE_ACCELS: [f64; N_PROFILES] = [0.0, 1.0, -1.0, -2.0, -3.0];

fn profile_speeds(v0: f64, accel: f64, steps: usize, dt: f64) -> Vec<f64> {
    let mut v = v0;
    (0..steps)
        .map(|_| {
            v = (v + accel * dt).clamp(0.0, v0 + 4.0);
            v
        })
        .collect()
}

/// Waypoints for a given speed profile and per-step lateral offsets,
/// following the corridor centerline. Shared by the planner and the
/// brute-force lattice enumeration used in tests.
pub fn lattice_trajectory(scene: &Scene, speeds: &[f64], offsets: &[f64]) -> Trajectory {
    let dt = scene.dt;
    let mut s = scene.corridor.project(scene.ego.x, scene.ego.y).0;
    let mut prev = (scene.ego.x, scene.ego.y);
    let mut prev_heading = scene.ego.heading;
    let mut wps = Vec::with_capacity(speeds.len());
    for (k, &v) in speeds.iter().enumerate() {
        s += v * dt;
        let ((cx, cy), (tx, ty)) = scene.corridor.point_at(s);
        // normal points left of travel
        let (nx, ny) = (-ty, tx);
        let x = cx + nx * offsets[k];
        let y = cy + ny * offsets[k];
        let dist = ((x - prev.0).powi(2) + (y - prev.1).powi(2)).sqrt();
        let heading = if dist > 1e-6 {
            (y - prev.1).atan2(x - prev.0).to_degrees()
        } else {
            prev_heading
        };
        wps.push(Waypoint { x, y, heading });
        prev = (x, y);
        prev_heading = heading;
    }
    Trajectory::new(wps, dt)
}

pub fn offset_samples(half_width: f64) -> [f64; N_OFFSETS] {
    let mut out = [0.0; N_OFFSETS];
    for (i, o) in out.iter_mut().enumerate() {
        *o = -half_width + 2.0 * half_width * i as f64 / (N_OFFSETS - 1) as f64;
    }
    out
}

pub fn speed_profiles(scene: &Scene) -> Vec<Vec<f64>> {
    let steps = (scene.horizon_s / scene.dt).round() as usize;
    PROFILE_ACCELS
        .iter()
        .map(|&a| profile_speeds(scene.ego.speed, a, steps, scene.dt))
        .collect()
}

fn node_feasible(
    scene: &Scene,
    cfg: &SimConfig,
    pos: (f64, f64),
    heading_deg: f64,
    t: f64,
    offset: f64,
) -> bool {
    // Stay clear of the boundary: at |offset| == half_width the projected
    // distance can land epsilon outside on curved segments.
    if offset.abs() > scene.corridor.half_width - cfg.expert_margin {
        return false;
    }
    let ego = ObbPose {
        cx: pos.0,
        cy: pos.1,
        heading_rad: heading_deg.to_radians(),
        half_len: cfg.ego_half_len,
        half_wid: cfg.ego_half_wid,
    };
    for ob in &scene.obstacles {
        if obb_intersect(&ego, &ob.at(t).inflate(cfg.expert_margin)) {
            return false;
        }
    }
    true
}

/// Dynamic-programming search over lateral offsets and speed profiles.
///
/// Hard constraints prune nodes and transitions that would fail any scorer
/// gate: collision (with margin), off-corridor, projected time-to-collision,
/// yaw rate, and vector acceleration. Soft cost: lateral deviation from the
/// centerline plus lateral jerk. Profiles are tried in preference order, so
/// an obstacle-free corridor yields a constant-speed centerline trajectory.
pub fn expert_plan(scene: &Scene, cfg: &SimConfig) -> Result<Trajectory, SimError> {
    let steps = (scene.horizon_s / scene.dt).round() as usize;
    let offsets = offset_samples(scene.corridor.half_width);
    let dt = scene.dt;
    let w_dev = 1.0;
    let w_jerk = 2.0;
    let accel_cap = cfg.accel_limit * 0.95;
    let yaw_cap = cfg.yaw_rate_limit * 0.95;

    let heading_of = |from: (f64, f64), to: (f64, f64), fallback: f64| -> f64 {
        let d = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
        if d > 1e-6 {
            (to.1 - from.1).atan2(to.0 - from.0).to_degrees()
        } else {
            fallback
        }
    };

    let ttc_clear = |pos: (f64, f64), heading_deg: f64, v: f64, t: f64| -> bool {
        if v < 1e-6 {
            return true;
        }
        let (hs, hc) = heading_deg.to_radians().sin_cos();
        for q in 1..=4 {
            let delta = cfg.ttc_horizon_s * q as f64 / 4.0;
            let probe = ObbPose {
                cx: pos.0 + hc * v * delta,
                cy: pos.1 + hs * v * delta,
                heading_rad: heading_deg.to_radians(),
                half_len: cfg.ego_half_len,
                half_wid: cfg.ego_half_wid,
            };
            for ob in &scene.obstacles {
                if obb_intersect(&probe, &ob.at(t + delta).inflate(cfg.expert_margin / 2.0)) {
                    return false;
                }
            }
        }
        true
    };

    let mut best: Option<(f64, Trajectory)> = None;
    for speeds in speed_profiles(scene) {
        // Precompute node geometry for this profile.
        let mut s = scene.corridor.project(scene.ego.x, scene.ego.y).0;
        let mut stations = Vec::with_capacity(steps);
        for &v in &speeds {
            s += v * dt;
            stations.push(scene.corridor.point_at(s));
        }

        let node_pos = |k: usize, j: usize| -> (f64, f64) {
            let ((cx, cy), (tx, ty)) = stations[k];
            (cx - ty * offsets[j], cy + tx * offsets[j])
        };

        // DP over (stage, current offset, previous offset).
        const INF: f64 = f64::INFINITY;
        let center_idx = N_OFFSETS / 2;
        let ego_pos = (scene.ego.x, scene.ego.y);
        let mut cost = vec![[[INF; N_OFFSETS]; N_OFFSETS]; steps];
        let mut from = vec![[[usize::MAX; N_OFFSETS]; N_OFFSETS]; steps];

        for k in 0..steps {
            let t = (k as f64 + 1.0) * dt;
            for j in 0..N_OFFSETS {
                let pos = node_pos(k, j);
                for i in 0..N_OFFSETS {
                    if k == 0 && i != center_idx {
                        continue;
                    }
                    if i.abs_diff(j) > MAX_LAT_STEP {
                        continue;
                    }
                    let prev_pos = if k == 0 { ego_pos } else { node_pos(k - 1, i) };
                    let heading = heading_of(prev_pos, pos, scene.ego.heading);
                    if !node_feasible(scene, cfg, pos, heading, t, offsets[j]) {
                        continue;
                    }
                    // Midpoint sweep check so fast hops cannot pass through
                    // a thin obstacle between waypoint times.
                    let midpos = ((prev_pos.0 + pos.0) / 2.0, (prev_pos.1 + pos.1) / 2.0);
                    if !node_feasible(scene, cfg, midpos, heading, t - dt / 2.0, offsets[j]) {
                        continue;
                    }
                    // Scorer-aligned time-to-collision gate.
                    let v_here =
                        ((pos.0 - prev_pos.0).powi(2) + (pos.1 - prev_pos.1).powi(2)).sqrt() / dt;
                    if !ttc_clear(pos, heading, v_here, t) {
                        continue;
                    }
                    let step_cost = w_dev * offsets[j].abs();
                    if k == 0 {
                        let c = step_cost + w_jerk * offsets[j].abs();
                        if c < cost[0][j][i] {
                            cost[0][j][i] = c;
                            from[0][j][i] = center_idx;
                        }
                    } else {
                        let prevprev_base = if k == 1 { ego_pos } else { (0.0, 0.0) };
                        for h in 0..N_OFFSETS {
                            let prev = cost[k - 1][i][h];
                            if !prev.is_finite() {
                                continue;
                            }
                            let pp = if k == 1 { prevprev_base } else { node_pos(k - 2, h) };
                            // Yaw-rate gate between consecutive segments.
                            let prev_heading = heading_of(pp, prev_pos, scene.ego.heading);
                            let dyaw =
                                wrap_deg(heading - prev_heading).to_radians().abs() / dt;
                            if dyaw > yaw_cap {
                                continue;
                            }
                            // Vector-acceleration gate over waypoint triples
                            // (the scorer only sees planned waypoints).
                            if k >= 2 {
                                let ax = (pos.0 - 2.0 * prev_pos.0 + pp.0) / (dt * dt);
                                let ay = (pos.1 - 2.0 * prev_pos.1 + pp.1) / (dt * dt);
                                if (ax * ax + ay * ay).sqrt() > accel_cap {
                                    continue;
                                }
                            }
                            let jerk = (offsets[j] - 2.0 * offsets[i] + offsets[h]).abs();
                            let c = prev + step_cost + w_jerk * jerk;
                            if c < cost[k][j][i] {
                                cost[k][j][i] = c;
                                from[k][j][i] = h;
                            }
                        }
                    }
                }
            }
        }

        // Pick the best terminal state and backtrack.
        let mut terminal = None;
        for j in 0..N_OFFSETS {
            for i in 0..N_OFFSETS {
                let c = cost[steps - 1][j][i];
                if c.is_finite() && terminal.map_or(true, |(tc, _, _)| c < tc) {
                    terminal = Some((c, j, i));
                }
            }
        }
        let Some((total, mut j, mut i)) = terminal else { continue };

        let mut idx_path = vec![0usize; steps];
        idx_path[steps - 1] = j;
        for k in (1..steps).rev() {
            let h = from[k][j][i];
            idx_path[k - 1] = i;
            j = i;
            i = h;
        }
        let offs: Vec<f64> = idx_path.iter().map(|&ix| offsets[ix]).collect();
        let traj = lattice_trajectory(scene, &speeds, &offs);
        if best.as_ref().map_or(true, |(bc, _)| total < *bc) {
            best = Some((total, traj));
        }
        // Profiles are ordered by preference; the first feasible profile
        // wins so an empty corridor keeps constant speed.
        if best.is_some() {
            break;
        }
    }

    best.map(|(_, t)| t).ok_or(SimError::Infeasible { seed: scene.seed })
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct DifficultyParams {
    obstacles: (usize, usize),
    curvature: f64,
    half_width: (f64, f64),
    speed: (f64, f64),
    /// Minimum clearance between obstacle centers and the centerline.
    clearance: f64,
}

fn difficulty_params(d: Difficulty) -> DifficultyParams {
    match d {
        Difficulty::Easy => DifficultyParams {
            obstacles: (1, 2),
            curvature: 0.008,
            half_width: (3.5, 4.5),
            speed: (4.0, 8.0),
            clearance: 3.0,
        },
        Difficulty::Medium => DifficultyParams {
            obstacles: (3, 4),
            curvature: 0.02,
            half_width: (3.0, 4.0),
            speed: (4.0, 9.0),
            clearance: 1.8,
        },
        Difficulty::Hard => DifficultyParams {
            obstacles: (5, 6),
            curvature: 0.035,
            half_width: (2.6, 3.6),
            speed: (5.0, 10.0),
            clearance: 0.8,
        },
    }
}

/// Deterministic procedural scene. Regenerates internally (bounded) until
/// the lattice expert finds a feasible trajectory with real progress.
pub fn generate_scene(
    seed: u64,
    difficulty: Difficulty,
    horizon_s: f64,
    dt: f64,
    cfg: &SimConfig,
) -> Result<Scene, SimError> {
    const MAX_ATTEMPTS: usize = 100;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = derive(seed, Stream::SceneGen, &[attempt as u64]);
        let mut scene = candidate_scene(&mut rng, seed, difficulty, horizon_s, dt);
        if let Ok(traj) = expert_plan(&scene, cfg) {
            let last = traj.waypoints.last().unwrap();
            let (progress, _) = scene.corridor.project(last.x, last.y);
            if progress <= 0.5 {
                continue;
            }
            scene.expert_progress = progress;
            return Ok(scene);
        }
    }
    Err(SimError::GenerationFailed { seed, attempts: MAX_ATTEMPTS })
}

fn candidate_scene(
    rng: &mut impl Rng,
    seed: u64,
    difficulty: Difficulty,
    horizon_s: f64,
    dt: f64,
) -> Scene {
    let p = difficulty_params(difficulty);
    let command = match rng.gen_range(0..10) {
        0..=3 => Command::Straight,
        4..=6 => Command::Left,
        _ => Command::Right,
    };
    let speed = rng.gen_range(p.speed.0..p.speed.1);
    let half_width = rng.gen_range(p.half_width.0..p.half_width.1);

    // Centerline by heading integration: straight lead-in, then command-
    // signed curvature. Total turn capped so headings stay in codec range.
    let total_len = speed * horizon_s + 40.0;
    let step = 1.0;
    let n_pts = (total_len / step).ceil() as usize + 1;
    let kappa = match command {
        Command::Straight => rng.gen_range(-0.002..0.002),
        Command::Left => rng.gen_range(p.curvature * 0.4..p.curvature),
        Command::Right => -rng.gen_range(p.curvature * 0.4..p.curvature),
    };
    let lead_in = rng.gen_range(8.0..15.0);
    let max_turn: f64 = 1.0; // radians
    let mut pts = Vec::with_capacity(n_pts);
    let (mut x, mut y, mut th) = (0.0f64, 0.0f64, 0.0f64);
    let mut turned = 0.0f64;
    pts.push((x, y));
    for i in 1..n_pts {
        let s = i as f64 * step;
        if s > lead_in && turned.abs() < max_turn {
            th += kappa * step;
            turned += kappa * step;
        }
        x += th.cos() * step;
        y += th.sin() * step;
        pts.push((x, y));
    }
    let corridor = Corridor { centerline: pts, half_width };
    let ego = EgoState { x: 0.0, y: 0.0, heading: 0.0, speed };

    let n_obs = rng.gen_range(p.obstacles.0..=p.obstacles.1);
    let mut obstacles = Vec::with_capacity(n_obs);
    for _ in 0..n_obs {
        let s_o = rng.gen_range(12.0..(speed * horizon_s + 20.0));
        let ((cx, cy), (tx, ty)) = corridor.point_at(s_o);
        let (nx, ny) = (-ty, tx);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = side * rng.gen_range(p.clearance..(half_width + 2.5));
        let small = rng.gen_bool(0.25);
        let (hl, hw_o) = if small { (0.5, 0.5) } else { (2.25, 0.9) };
        let moving = rng.gen_bool(0.3);
        let (vx, vy, heading) = if moving {
            if rng.gen_bool(0.5) {
                // Lead vehicle along the corridor tangent.
                let sp = speed * rng.gen_range(0.3..0.7);
                (tx * sp, ty * sp, ty.atan2(tx).to_degrees())
            } else {
                // Crossing the corridor from its offset side.
                let sp = rng.gen_range(0.8..2.5);
                (-nx * side * sp, -ny * side * sp, (-ny * side).atan2(-nx * side).to_degrees())
            }
        } else {
            (0.0, 0.0, ty.atan2(tx).to_degrees())
        };
        obstacles.push(Obstacle {
            cx: cx + nx * lateral,
            cy: cy + ny * lateral,
            heading,
            half_len: hl,
            half_wid: hw_o,
            vx,
            vy,
        });
    }

    Scene {
        schema_version: SCENE_SCHEMA_VERSION,
        seed,
        difficulty,
        command,
        corridor,
        ego,
        obstacles,
        horizon_s,
        dt,
        expert_progress: 0.0,
    }
}
