//! Point-mass reaching task rendered to small RGB frames.
//!
//! The agent is a double integrator in `[-1, 1]²` that must reach a goal.
//! Three background tiers change only the pixels behind the sprites, never
//! the physics, so policies trained on one tier can be tested on another.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BitError, Result};
use crate::observation::Observation;
use crate::seeding;

pub const ACTION_DIM: usize = 2;

/// Minimum start distance between agent and goal, arena units.
pub const MIN_START_DISTANCE: f64 = 0.5;

pub const AGENT_RADIUS_PX: f64 = 4.0;
pub const GOAL_SIDE_PX: i64 = 8;
pub const AGENT_COLOR: [u8; 3] = [235, 64, 52];
pub const GOAL_COLOR: [u8; 3] = [64, 214, 84];
const CLEAN_COLOR: [f64; 3] = [0.24, 0.26, 0.32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub height: usize,
    pub width: usize,
    pub frame_stack: usize,
    pub dt: f64,
    pub force_scale: f64,
    pub max_speed: f64,
    pub horizon: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            height: 64,
            width: 64,
            frame_stack: 3,
            dt: 0.1,
            force_scale: 1.0,
            max_speed: 1.0,
            horizon: 100,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frame_stack == 0 {
            return Err(BitError::Config(format!(
                "height, width and frame_stack must be positive, got {}x{}x{}",
                self.height, self.width, self.frame_stack
            )));
        }
        if self.horizon == 0 {
            return Err(BitError::Config("horizon must be positive".into()));
        }
        if !(self.dt > 0.0 && self.force_scale > 0.0 && self.max_speed > 0.0) {
            return Err(BitError::Config(
                "dt, force_scale and max_speed must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(3k, H, W)`
    pub fn obs_shape(&self) -> [usize; 3] {
        [3 * self.frame_stack, self.height, self.width]
    }

    /// Lower bound of an episode return.
    pub fn min_return(&self) -> f64 {
        -2.0 * 2f64.sqrt() * self.horizon as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundTier {
    Clean,
    Easy,
    Hard,
}

impl BackgroundTier {
    pub const ALL: [BackgroundTier; 3] = [BackgroundTier::Clean, BackgroundTier::Easy, BackgroundTier::Hard];

    pub fn name(self) -> &'static str {
        match self {
            BackgroundTier::Clean => "clean",
            BackgroundTier::Easy => "easy",
            BackgroundTier::Hard => "hard",
        }
    }
}

impl fmt::Display for BackgroundTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackgroundTier {
    type Err = BitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clean" => Ok(BackgroundTier::Clean),
            "easy" => Ok(BackgroundTier::Easy),
            "hard" => Ok(BackgroundTier::Hard),
            other => Err(BitError::Argument(format!(
                "unknown background `{other}` (expected clean, easy or hard)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackgroundMode {
    pub tier: BackgroundTier,
    pub seed: u64,
}

impl BackgroundMode {
    pub fn new(tier: BackgroundTier, seed: u64) -> Self {
        BackgroundMode { tier, seed }
    }

    pub fn clean() -> Self {
        Self::new(BackgroundTier::Clean, 0)
    }
}

/// Underlying physical state. Never shown to the agent.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub goal: [f64; 2],
    pub step_index: usize,
    pub rng: ChaCha8Rng,
}

/// One rendered RGB frame, planar `3 x H x W` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn pixel(&self, channel: usize, row: usize, col: usize) -> u8 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    /// Interleaved `RGBRGB...` bytes for image encoders.
    pub fn to_rgb_interleaved(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            out.extend_from_slice(&[self.data[i], self.data[plane + i], self.data[2 * plane + i]]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Sinusoid `amplitude * sin(2π(fx·u + fy·v) + phase + speed·t)`.
#[derive(Clone, Debug, PartialEq)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    speed: f64,
    amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
enum Background {
    Clean,
    /// Smooth, slowly moving color waves of bounded contrast.
    Easy {
        base: [f64; 3],
        waves: Vec<[Wave; 2]>,
    },
    /// Blocky saturated texture that drifts every step.
    Hard {
        texture: Vec<[f64; 3]>,
        blocks: usize,
        block_px: f64,
        origin: [f64; 2],
        drift: [f64; 2],
    },
}

impl Background {
    fn sample(mode: BackgroundMode, episode_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::mix(mode.seed, episode_seed));
        match mode.tier {
            BackgroundTier::Clean => Background::Clean,
            BackgroundTier::Easy => {
                let base = [0.0; 3].map(|_: f64| rng.random_range(0.35..0.55));
                let waves = (0..3)
                    .map(|_| {
                        [0, 1].map(|_| Wave {
                            fx: rng.random_range(-1.5..1.5),
                            fy: rng.random_range(-1.5..1.5),
                            phase: rng.random_range(0.0..2.0 * PI),
                            speed: rng.random_range(0.05..0.25),
                            amplitude: 0.12,
                        })
                    })
                    .collect();
                Background::Easy { base, waves }
            }
            BackgroundTier::Hard => {
                let blocks = 16;
                let texture = (0..blocks * blocks)
                    .map(|_| {
                        [0.0; 3].map(|_: f64| {
                            if rng.random_bool(0.5) {
                                rng.random_range(0.0..0.25)
                            } else {
                                rng.random_range(0.75..1.0)
                            }
                        })
                    })
                    .collect();
                let angle = rng.random_range(0.0..2.0 * PI);
                let speed = rng.random_range(0.5..1.5);
                Background::Hard {
                    texture,
                    blocks,
                    block_px: 4.0,
                    origin: [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)],
                    drift: [speed * angle.cos(), speed * angle.sin()],
                }
            }
        }
    }

    fn fill(&self, frame: &mut [f64], height: usize, width: usize, step: usize) {
        let plane = height * width;
        match self {
            Background::Clean => {
                for c in 0..3 {
                    frame[c * plane..(c + 1) * plane].fill(CLEAN_COLOR[c]);
                }
            }
            Background::Easy { base, waves } => {
                let t = step as f64;
                for c in 0..3 {
                    for row in 0..height {
                        let v = row as f64 / height as f64;
                        for col in 0..width {
                            let u = col as f64 / width as f64;
                            let mut value = base[c];
                            for w in &waves[c] {
                                value += w.amplitude * (2.0 * PI * (w.fx * u + w.fy * v) + w.phase + w.speed * t).sin();
                            }
                            frame[c * plane + row * width + col] = value;
                        }
                    }
                }
            }
            Background::Hard {
                texture,
                blocks,
                block_px,
                origin,
                drift,
            } => {
                let t = step as f64;
                let period = *blocks as f64 * block_px;
                let ox = (origin[0] + drift[0] * t).round();
                let oy = (origin[1] + drift[1] * t).round();
                for row in 0..height {
                    let ty = (row as f64 + oy).rem_euclid(period);
                    let by = (ty / block_px) as usize % blocks;
                    for col in 0..width {
                        let tx = (col as f64 + ox).rem_euclid(period);
                        let bx = (tx / block_px) as usize % blocks;
                        let color = texture[by * blocks + bx];
                        for c in 0..3 {
                            frame[c * plane + row * width + col] = color[c];
                        }
                    }
                }
            }
        }
    }
}

/// Pixel-space center `(row, col)` of an arena position.
pub fn to_pixel(position: [f64; 2], height: usize, width: usize) -> (f64, f64) {
    let col = (position[0] + 1.0) * 0.5 * (width as f64 - 1.0);
    let row = (1.0 - position[1]) * 0.5 * (height as f64 - 1.0);
    (row, col)
}

/// Pixels covered by the agent disc, row-major `H x W`.
pub fn agent_mask(state: &EnvState, height: usize, width: usize) -> Vec<bool> {
    let (cy, cx) = to_pixel(state.position, height, width);
    let r2 = AGENT_RADIUS_PX * AGENT_RADIUS_PX;
    (0..height * width)
        .map(|i| {
            let (row, col) = ((i / width) as f64, (i % width) as f64);
            (row - cy).powi(2) + (col - cx).powi(2) <= r2
        })
        .collect()
}

/// Pixels covered by the goal square, row-major `H x W`.
pub fn goal_mask(state: &EnvState, height: usize, width: usize) -> Vec<bool> {
    let (cy, cx) = to_pixel(state.goal, height, width);
    let half = GOAL_SIDE_PX as f64 / 2.0;
    let (r0, c0) = ((cy - half).round() as i64, (cx - half).round() as i64);
    (0..height * width)
        .map(|i| {
            let (row, col) = ((i / width) as i64, (i % width) as i64);
            row >= r0 && row < r0 + GOAL_SIDE_PX && col >= c0 && col < c0 + GOAL_SIDE_PX
        })
        .collect()
}

fn render(state: &EnvState, background: &Background, height: usize, width: usize) -> Frame {
    let plane = height * width;
    let mut canvas = vec![0.0f64; 3 * plane];
    background.fill(&mut canvas, height, width, state.step_index);
    let mut data: Vec<u8> = canvas
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    for (mask, color) in [
        (goal_mask(state, height, width), GOAL_COLOR),
        (agent_mask(state, height, width), AGENT_COLOR),
    ] {
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            for c in 0..3 {
                data[c * plane + i] = color[c];
            }
        }
    }
    Frame { height, width, data }
}

/// The reaching environment. Create with [`PointMassEnv::new`], then
/// [`reset`](PointMassEnv::reset) before stepping.
#[derive(Clone, Debug)]
pub struct PointMassEnv {
    config: EnvConfig,
    state: Option<EnvState>,
    background: Background,
    frames: VecDeque<Frame>,
    done: bool,
}

impl PointMassEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(PointMassEnv {
            config,
            state: None,
            background: Background::Clean,
            frames: VecDeque::new(),
            done: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Starts an episode: agent and goal uniform in the arena, at least
    /// [`MIN_START_DISTANCE`] apart, agent at rest.
    pub fn reset(&mut self, seed: u64, background: BackgroundMode) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (position, goal) = loop {
            let p: [f64; 2] = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            let g: [f64; 2] = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            if ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt() >= MIN_START_DISTANCE {
                break (p, g);
            }
        };
        let state = EnvState {
            position,
            velocity: [0.0, 0.0],
            goal,
            step_index: 0,
            rng,
        };
        self.background = Background::sample(background, seed);
        let frame = render(&state, &self.background, self.config.height, self.config.width);
        self.frames.clear();
        for _ in 0..self.config.frame_stack {
            self.frames.push_back(frame.clone());
        }
        self.state = Some(state);
        self.done = false;
        self.observation()
    }

    /// Advances one control step. Action components are clipped to `[-1, 1]`.
    pub fn step(&mut self, action: [f32; ACTION_DIM]) -> Result<StepOutcome> {
        if action.iter().any(|a| !a.is_finite()) {
            return Err(BitError::Argument(format!("non-finite action {action:?}")));
        }
        let cfg = &self.config;
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| BitError::Usage("step called before reset".into()))?;
        if self.done {
            return Err(BitError::Usage("step called after episode end; reset first".into()));
        }
        for (i, &ai) in action.iter().enumerate() {
            let a = (ai as f64).clamp(-1.0, 1.0);
            state.velocity[i] = (state.velocity[i] + a * cfg.dt * cfg.force_scale).clamp(-cfg.max_speed, cfg.max_speed);
            state.position[i] = (state.position[i] + state.velocity[i] * cfg.dt).clamp(-1.0, 1.0);
        }
        state.step_index += 1;
        let reward = -distance(state.position, state.goal);
        self.done = state.step_index >= cfg.horizon;
        let frame = render(state, &self.background, cfg.height, cfg.width);
        self.frames.pop_front();
        self.frames.push_back(frame);
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            done: self.done,
        })
    }

    /// Copy of the current physical state, `None` before the first reset.
    pub fn ground_truth_state(&self) -> Option<EnvState> {
        self.state.clone()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Most recent render.
    pub fn last_frame(&self) -> Option<&Frame> {
        self.frames.back()
    }

    /// Current stacked observation (zeros before the first reset).
    pub fn observation(&self) -> Observation {
        let [c, h, w] = self.config.obs_shape();
        let mut data = Vec::with_capacity(c * h * w);
        for f in &self.frames {
            data.extend(f.data.iter().map(|&b| b as f32 / 255.0));
        }
        if data.is_empty() {
            return Observation::zeros(c, h, w);
        }
        Observation::new(c, h, w, data).expect("frame stack matches config")
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
