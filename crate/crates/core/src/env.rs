//! Deterministic 2D point-mass reach task rendered by several cameras.
//!
//! The agent and goal live in the unit square. The egocentric camera shows a
//! crop centred on the agent with a bright goal; the static camera shows the
//! whole arena with a faint goal among equally faint distractors that differ
//! only in hue.

use std::path::Path;

use rand::{Rng as _, RngCore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;

pub const CHANNELS: usize = 3;

const ARENA_BG: [f64; 3] = [0.35, 0.35, 0.35];
const OUTSIDE: [f64; 3] = [0.0, 0.0, 0.0];
const AGENT: [f64; 3] = [0.95, 0.95, 0.95];
const EGO_GOAL: [f64; 3] = [1.0, 0.85, 0.1];
const GOAL_HUE: [f64; 3] = [1.0, 0.5, 0.0];
const DISTRACTOR_HUES: [[f64; 3]; 6] = [
    [0.0, 0.5, 1.0],
    [0.5, 1.0, 0.0],
    [1.0, 0.0, 0.5],
    [0.0, 1.0, 0.5],
    [0.5, 0.0, 1.0],
    [1.0, 1.0, 0.0],
];
const SIDE_CONTRAST: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    Egocentric,
    StaticFull,
    StaticSide,
}

/// Rendering parameters shared by every camera of an environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvParams {
    pub image_size: usize,
    pub episode_length: u32,
    pub step_size: f64,
    pub success_threshold: f64,
    /// Goal brightness above the background on the static camera.
    pub contrast: f64,
    pub distractors: usize,
    pub distractor_contrast: f64,
    /// Half-width of the egocentric crop in arena units.
    pub ego_half_width: f64,
    pub proprio: bool,
    pub action_repeat: u32,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            image_size: 48,
            episode_length: 50,
            step_size: 0.05,
            success_threshold: 0.05,
            contrast: 0.15,
            distractors: 6,
            distractor_contrast: 0.15,
            ego_half_width: 0.25,
            proprio: false,
            action_repeat: 1,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::config("env.image_size", "must be at least 8"));
        }
        if self.episode_length == 0 {
            return Err(Error::config("env.episode_length", "must be positive"));
        }
        if self.action_repeat == 0 {
            return Err(Error::config("env.action_repeat", "must be positive"));
        }
        for (key, v) in [
            ("env.step_size", self.step_size),
            ("env.success_threshold", self.success_threshold),
            ("env.ego_half_width", self.ego_half_width),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        for (key, v) in [("env.contrast", self.contrast), ("env.distractor_contrast", self.distractor_contrast)] {
            if !(0.0..=0.65).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 0.65]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub id: String,
    pub kind: CameraKind,
}

impl CameraSpec {
    /// Known ids: `ego`, `static`, `side`.
    pub fn from_id(id: &str) -> Result<Self> {
        let kind = match id {
            "ego" => CameraKind::Egocentric,
            "static" => CameraKind::StaticFull,
            "side" => CameraKind::StaticSide,
            _ => return Err(Error::UnknownCamera(id.to_string())),
        };
        Ok(CameraSpec { id: id.to_string(), kind })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agent: [f64; 2],
    pub goal: [f64; 2],
    pub step: u32,
    pub distractor_seed: u64,
}

impl WorldState {
    pub fn distance(&self) -> f64 {
        ((self.agent[0] - self.goal[0]).powi(2) + (self.agent[1] - self.goal[1]).powi(2)).sqrt()
    }
}

/// One 8-bit `[3, size, size]` image per camera, plus the optional agent position.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewObservation {
    pub image_size: usize,
    pub frames: Vec<Vec<u8>>,
    pub proprio: Option<[f32; 2]>,
}

impl MultiViewObservation {
    pub fn frame_len(&self) -> usize {
        CHANNELS * self.image_size * self.image_size
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: MultiViewObservation,
    pub reward: f64,
    pub done: bool,
    /// Latched: true once the goal has been reached during the episode.
    pub success: bool,
}

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(size: usize, fill: [f64; 3]) -> Self {
        Canvas {
            size,
            px: vec![fill; size * size],
        }
    }

    fn set(&mut self, row: i64, col: i64, c: [f64; 3]) {
        let s = self.size as i64;
        if (0..s).contains(&row) && (0..s).contains(&col) {
            self.px[(row * s + col) as usize] = c;
        }
    }

    /// `n x n` block whose centre is nearest to `(u, v)` in pixel units.
    fn block(&mut self, u: f64, v: f64, n: usize, c: [f64; 3]) {
        let half = (n as f64 - 1.0) / 2.0;
        let c0 = (u - half).round() as i64;
        let r0 = (v - half).round() as i64;
        for dr in 0..n as i64 {
            for dc in 0..n as i64 {
                self.set(r0 + dr, c0 + dc, c);
            }
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let n = self.size * self.size;
        let mut out = vec![0u8; CHANNELS * n];
        for (i, p) in self.px.iter().enumerate() {
            for ch in 0..CHANNELS {
                out[ch * n + i] = (p[ch].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }
}

fn tint(base: [f64; 3], hue: [f64; 3], amount: f64) -> [f64; 3] {
    [base[0] + amount * hue[0], base[1] + amount * hue[1], base[2] + amount * hue[2]]
}

struct Distractor {
    pos: [f64; 2],
    hue: [f64; 3],
}

fn distractors(seed: u64, count: usize) -> Vec<Distractor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Distractor {
            pos: [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)],
            hue: DISTRACTOR_HUES[rng.random_range(0..DISTRACTOR_HUES.len())],
        })
        .collect()
}

/// Pixel coordinates `(col, row)` of an arena point on a full-arena camera.
fn arena_to_pixel(p: [f64; 2], size: usize, skew: bool) -> (f64, f64) {
    let s = (size - 1) as f64;
    let (x, y) = if skew {
        (0.1 + 0.8 * p[0] + 0.1 * (p[1] - 0.5), 0.15 + 0.7 * p[1])
    } else {
        (p[0], p[1])
    };
    (x * s, (1.0 - y) * s)
}

fn render_static(state: &WorldState, params: &EnvParams, skew: bool) -> Canvas {
    let size = params.image_size;
    let mut cv = Canvas::new(size, ARENA_BG);
    if !skew {
        for d in distractors(state.distractor_seed, params.distractors) {
            let (u, v) = arena_to_pixel(d.pos, size, false);
            cv.block(u, v, 2, tint(ARENA_BG, d.hue, params.distractor_contrast));
        }
    }
    let (u, v) = arena_to_pixel(state.agent, size, skew);
    cv.block(u, v, 3, AGENT);
    let contrast = if skew { SIDE_CONTRAST } else { params.contrast };
    let (u, v) = arena_to_pixel(state.goal, size, skew);
    cv.block(u, v, 2, tint(ARENA_BG, GOAL_HUE, contrast));
    cv
}

fn render_ego(state: &WorldState, params: &EnvParams) -> Canvas {
    let size = params.image_size;
    let r = params.ego_half_width;
    let scale = size as f64 / (2.0 * r);
    let mut cv = Canvas::new(size, OUTSIDE);
    // Pixel (row, col) covers arena point agent + ((col + 0.5) / scale - r, r - (row + 0.5) / scale).
    for row in 0..size {
        let y = state.agent[1] + r - (row as f64 + 0.5) / scale;
        for col in 0..size {
            let x = state.agent[0] - r + (col as f64 + 0.5) / scale;
            if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
                cv.px[row * size + col] = ARENA_BG;
            }
        }
    }
    let to_px = |p: [f64; 2]| ((p[0] - state.agent[0] + r) * scale - 0.5, (state.agent[1] + r - p[1]) * scale - 0.5);
    let (gu, gv) = to_px(state.goal);
    let last = (size - 1) as f64;
    if (0.0..=last).contains(&gu) && (0.0..=last).contains(&gv) {
        cv.block(gu, gv, 3, EGO_GOAL);
    } else {
        // Project the goal direction onto the crop border.
        let c = last / 2.0;
        let (du, dv) = (gu - c, gv - c);
        let t = (c / du.abs().max(dv.abs())).min(1.0);
        let bu = (c + du * t).clamp(0.0, last - 1.0);
        let bv = (c + dv * t).clamp(0.0, last - 1.0);
        cv.block(bu + 0.5, bv + 0.5, 2, EGO_GOAL);
    }
    cv
}

/// Render one camera as 8-bit planar RGB.
pub fn render_camera(state: &WorldState, spec: &CameraSpec, params: &EnvParams) -> Vec<u8> {
    let cv = match spec.kind {
        CameraKind::Egocentric => render_ego(state, params),
        CameraKind::StaticFull => render_static(state, params, false),
        CameraKind::StaticSide => render_static(state, params, true),
    };
    cv.to_bytes()
}

#[derive(Clone, Debug)]
pub struct ReachEnv {
    pub params: EnvParams,
    pub cameras: Vec<CameraSpec>,
    state: WorldState,
    done: bool,
    success: bool,
}

impl ReachEnv {
    pub fn new(params: EnvParams, camera_ids: &[String]) -> Result<Self> {
        params.validate()?;
        if camera_ids.is_empty() {
            return Err(Error::config("env.cameras", "at least one camera is required"));
        }
        let cameras = camera_ids.iter().map(|id| CameraSpec::from_id(id)).collect::<Result<Vec<_>>>()?;
        Ok(ReachEnv {
            params,
            cameras,
            state: WorldState {
                agent: [0.5, 0.5],
                goal: [0.5, 0.5],
                step: 0,
                distractor_seed: 0,
            },
            done: true,
            success: false,
        })
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn success(&self) -> bool {
        self.success
    }

    /// Restore an exact mid-episode state.
    pub fn restore(&mut self, state: WorldState, done: bool, success: bool) {
        self.state = state;
        self.done = done;
        self.success = success;
    }

    pub fn camera_index(&self, id: &str) -> Result<usize> {
        self.cameras
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| Error::UnknownCamera(id.to_string()))
    }

    pub fn observe(&self) -> MultiViewObservation {
        observe(&self.state, &self.cameras, &self.params)
    }

    pub fn reset(&mut self, rng: &mut Rng) -> StepResult {
        self.state = WorldState {
            agent: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
            goal: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
            step: 0,
            distractor_seed: rng.next_u64(),
        };
        self.done = false;
        self.success = self.state.distance() < self.params.success_threshold;
        StepResult {
            observation: self.observe(),
            reward: -self.state.distance(),
            done: false,
            success: self.success,
        }
    }

    /// Apply `action` (clipped to `[-1, 1]^2`) for `action_repeat` ticks.
    pub fn step(&mut self, action: &[f32]) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if action.len() != 2 {
            return Err(Error::dim("env.step", format!("action of length {}", action.len())));
        }
        let mut reward = 0.0;
        for _ in 0..self.params.action_repeat {
            for (p, &a) in self.state.agent.iter_mut().zip(action) {
                let a = if a.is_nan() { 0.0 } else { (a as f64).clamp(-1.0, 1.0) };
                *p = (*p + self.params.step_size * a).clamp(0.0, 1.0);
            }
            self.state.step += 1;
            let d = self.state.distance();
            reward -= d;
            if d < self.params.success_threshold {
                self.success = true;
            }
            if self.state.step >= self.params.episode_length {
                self.done = true;
                break;
            }
        }
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.done,
            success: self.success,
        })
    }
}

pub fn observe(state: &WorldState, cameras: &[CameraSpec], params: &EnvParams) -> MultiViewObservation {
    MultiViewObservation {
        image_size: params.image_size,
        frames: cameras.iter().map(|c| render_camera(state, c, params)).collect(),
        proprio: params.proprio.then(|| [state.agent[0] as f32, state.agent[1] as f32]),
    }
}

#[derive(Serialize)]
struct RawSidecar<'a> {
    camera: &'a str,
    channels: usize,
    height: usize,
    width: usize,
    layout: &'static str,
    dtype: &'static str,
    file: String,
}

/// Write one PNG and one raw planar `.u8` file (with JSON sidecar) per camera.
pub fn export_observation(
    obs: &MultiViewObservation,
    cameras: &[CameraSpec],
    dir: &Path,
    stem: &str,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = obs.image_size;
    let mut written = Vec::new();
    for (frame, cam) in obs.frames.iter().zip(cameras) {
        let png = dir.join(format!("{stem}_{}.png", cam.id));
        let img = image::RgbImage::from_fn(s as u32, s as u32, |x, y| {
            let i = y as usize * s + x as usize;
            image::Rgb([frame[i], frame[s * s + i], frame[2 * s * s + i]])
        });
        img.save(&png)?;
        let raw_name = format!("{stem}_{}.u8", cam.id);
        let raw = dir.join(&raw_name);
        std::fs::write(&raw, frame).map_err(|e| Error::io(&raw, e))?;
        let meta = RawSidecar {
            camera: &cam.id,
            channels: CHANNELS,
            height: s,
            width: s,
            layout: "planar-chw",
            dtype: "u8",
            file: raw_name,
        };
        let json = dir.join(format!("{stem}_{}.json", cam.id));
        std::fs::write(&json, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&json, e))?;
        written.extend([png, raw, json]);
    }
    Ok(written)
}

/// Read back a raw planar frame written by [`export_observation`].
pub fn load_raw_frame(path: &Path, image_size: usize) -> Result<Vec<u8>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() != CHANNELS * image_size * image_size {
        return Err(Error::dim(
            "load_raw_frame",
            format!("{} bytes for a {image_size}x{image_size} image", data.len()),
        ));
    }
    Ok(data)
}
