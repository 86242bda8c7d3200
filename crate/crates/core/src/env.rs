//! Planar active-tracking task.
//!
//! A camera with position and yaw moves in the workspace `[-1, 1]^2` while a
//! target cube travels around a square at constant speed. The camera is
//! commanded by a velocity in its own frame plus a yaw rate. Per-step reward
//! is `C - (|p - p_c| + lambda * |theta|)` where `p` is the cube in normalized
//! image coordinates (image center `p_c = 0`) and `theta` is the misorientation
//! between the camera heading and the bearing to the cube. Leaving the frame
//! does not end the episode.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::error::{Error, Result};

pub const ENV_TAG: &str = "activetrack2d-v1";

/// Length of [`state_vector`]:
/// `[cam_x, cam_y, cos(yaw), sin(yaw), cube_x, cube_y, img_x, img_y, misorientation]`.
pub const STATE_DIM: usize = 9;
/// `[vel_x, vel_y, yaw_rate]`, velocity in the camera frame.
pub const ACTION_DIM: usize = 3;

pub const WORKSPACE_MIN: f64 = -1.0;
pub const WORKSPACE_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub horizon: usize,
    /// Steps per full lap of the square.
    pub lap_period: usize,
    pub square_side: f64,
    /// Half-width of the visible region in plane units; image coordinates are
    /// camera-frame offsets divided by this.
    pub half_frame: f64,
    /// Bound on every action component.
    pub v_max: f64,
    pub reward_c: f64,
    pub reward_lambda: f64,
    pub distractor_count: usize,
    pub distractor_clearance: f64,
    pub reset_position_noise: f64,
    pub reset_yaw_noise: f64,
    pub expert_position_gain: f64,
    pub expert_yaw_gain: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 200,
            lap_period: 400,
            square_side: 0.5,
            half_frame: 0.5,
            v_max: 0.1,
            reward_c: 1.0,
            reward_lambda: 0.1,
            distractor_count: 3,
            distractor_clearance: 0.2,
            reset_position_noise: 0.002,
            reset_yaw_noise: 0.05,
            expert_position_gain: 0.8,
            expert_yaw_gain: 0.5,
        }
    }
}

impl EnvConfig {
    pub fn paper() -> Self {
        Self {
            horizon: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("env: {m}")));
        if self.horizon == 0 || self.lap_period == 0 {
            return fail("horizon and lap_period must be positive");
        }
        if !(self.square_side > 0.0 && self.square_side < WORKSPACE_MAX - WORKSPACE_MIN) {
            return fail("square_side must fit inside the workspace");
        }
        if !(self.half_frame > 0.0 && self.v_max > 0.0) {
            return fail("half_frame and v_max must be positive");
        }
        if self.reset_position_noise < 0.0 || self.reset_yaw_noise < 0.0 {
            return fail("reset noise must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub camera_pos: [f64; 2],
    pub camera_yaw: f64,
    pub cube_pos: [f64; 2],
    /// Corner the cube most recently passed, 0..4 counterclockwise from lower-left.
    pub cube_waypoint_index: usize,
    pub step_index: usize,
    pub distractor_positions: Vec<[f64; 2]>,
    /// Lower-left corner of the cube's square path.
    pub path_origin: [f64; 2],
    pub start_corner: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub velocity: [f64; 2],
    pub yaw_rate: f64,
}

impl Action {
    pub const ZERO: Action = Action {
        velocity: [0.0, 0.0],
        yaw_rate: 0.0,
    };

    pub fn from_slice(a: &[f64]) -> Result<Self> {
        match a {
            [vx, vy, w] => Ok(Self {
                velocity: [*vx, *vy],
                yaw_rate: *w,
            }),
            _ => Err(Error::Dimension(format!(
                "action has {} components, expected {ACTION_DIM}",
                a.len()
            ))),
        }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.velocity[0], self.velocity[1], self.yaw_rate]
    }

    pub fn clamped(self, bound: f64) -> Self {
        let c = |x: f64| x.clamp(-bound, bound);
        Self {
            velocity: [c(self.velocity[0]), c(self.velocity[1])],
            yaw_rate: c(self.yaw_rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image_point: [f64; 2],
    pub in_frame: bool,
    pub misorientation: f64,
    pub camera_pos: [f64; 2],
    pub camera_yaw: f64,
    pub cube_pos: [f64; 2],
    pub step_index: usize,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub state: EnvState,
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Per-step tracking reward.
pub fn tracking_reward(image_point: [f64; 2], misorientation: f64, c: f64, lambda: f64) -> f64 {
    c - (image_point[0].hypot(image_point[1]) + lambda * misorientation.abs())
}

/// Heading of the side leaving `corner` (counterclockwise traversal).
fn side_heading(corner: usize) -> f64 {
    [0.0, PI / 2.0, PI, -PI / 2.0][corner % 4]
}

thread_local! {
    static CONSTRUCTED: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Number of environments built on the current thread. Lets tests check that
/// offline stages never create one.
pub fn constructed_on_this_thread() -> usize {
    CONSTRUCTED.with(|c| c.get())
}

#[derive(Debug, Clone)]
pub struct ActiveTrack {
    config: EnvConfig,
}

impl ActiveTrack {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        CONSTRUCTED.with(|c| c.set(c.get() + 1));
        Ok(Self { config })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn corners(&self, origin: [f64; 2]) -> [[f64; 2]; 4] {
        let l = self.config.square_side;
        [
            origin,
            [origin[0] + l, origin[1]],
            [origin[0] + l, origin[1] + l],
            [origin[0], origin[1] + l],
        ]
    }

    /// Cube position and current side's starting corner after `step` steps.
    pub fn cube_position(&self, origin: [f64; 2], start_corner: usize, step: usize) -> ([f64; 2], usize) {
        let period = self.config.lap_period;
        let phase = (step % period) as f64 / period as f64 * 4.0;
        let side = (phase.floor() as usize).min(3);
        let frac = phase - side as f64;
        let corners = self.corners(origin);
        let a = (start_corner + side) % 4;
        let b = (a + 1) % 4;
        let pos = [
            corners[a][0] + frac * (corners[b][0] - corners[a][0]),
            corners[a][1] + frac * (corners[b][1] - corners[a][1]),
        ];
        (pos, a)
    }

    fn distance_to_path(&self, origin: [f64; 2], p: [f64; 2]) -> f64 {
        let corners = self.corners(origin);
        (0..4)
            .map(|k| segment_distance(p, corners[k], corners[(k + 1) % 4]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn reset(&self, seed: u64) -> (EnvState, Observation) {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hi = WORKSPACE_MAX - cfg.square_side;
        let origin = [
            rng.random_range(WORKSPACE_MIN..=hi),
            rng.random_range(WORKSPACE_MIN..=hi),
        ];
        let start_corner = rng.random_range(0..4usize);

        let mut distractors = Vec::with_capacity(cfg.distractor_count);
        let mut attempts = 0;
        while distractors.len() < cfg.distractor_count && attempts < 10_000 {
            attempts += 1;
            let p = [
                rng.random_range(WORKSPACE_MIN..=WORKSPACE_MAX),
                rng.random_range(WORKSPACE_MIN..=WORKSPACE_MAX),
            ];
            if self.distance_to_path(origin, p) >= cfg.distractor_clearance {
                distractors.push(p);
            }
        }

        let (cube_pos, waypoint) = self.cube_position(origin, start_corner, 0);
        let pos_noise = Normal::new(0.0, cfg.reset_position_noise).expect("validated noise");
        let yaw_noise = Normal::new(0.0, cfg.reset_yaw_noise).expect("validated noise");
        let camera_pos = [
            (cube_pos[0] + pos_noise.sample(&mut rng)).clamp(WORKSPACE_MIN, WORKSPACE_MAX),
            (cube_pos[1] + pos_noise.sample(&mut rng)).clamp(WORKSPACE_MIN, WORKSPACE_MAX),
        ];
        let camera_yaw = wrap_angle(side_heading(start_corner) + yaw_noise.sample(&mut rng));
        let state = EnvState {
            camera_pos,
            camera_yaw,
            cube_pos,
            cube_waypoint_index: waypoint,
            step_index: 0,
            distractor_positions: distractors,
            path_origin: origin,
            start_corner,
        };
        let obs = self.observe(&state);
        (state, obs)
    }

    pub fn observe(&self, state: &EnvState) -> Observation {
        let offset = [
            state.cube_pos[0] - state.camera_pos[0],
            state.cube_pos[1] - state.camera_pos[1],
        ];
        let cam = rotate(offset, -state.camera_yaw);
        let image_point = [cam[0] / self.config.half_frame, cam[1] / self.config.half_frame];
        // With the cube exactly at the image center there is no line of sight to deviate from.
        let misorientation = if offset[0].hypot(offset[1]) < 1e-12 {
            0.0
        } else {
            wrap_angle(state.camera_yaw - offset[1].atan2(offset[0]))
        };
        Observation {
            image_point,
            in_frame: image_point[0].abs().max(image_point[1].abs()) <= 1.0,
            misorientation,
            camera_pos: state.camera_pos,
            camera_yaw: state.camera_yaw,
            cube_pos: state.cube_pos,
            step_index: state.step_index,
        }
    }

    pub fn reward(&self, obs: &Observation) -> f64 {
        tracking_reward(
            obs.image_point,
            obs.misorientation,
            self.config.reward_c,
            self.config.reward_lambda,
        )
    }

    pub fn step(&self, state: &EnvState, action: &Action) -> Result<StepResult> {
        let cfg = &self.config;
        if state.step_index >= cfg.horizon {
            return Err(Error::State(format!(
                "episode finished at step {}; call reset",
                state.step_index
            )));
        }
        let a = action.clamped(cfg.v_max);
        let v_world = rotate(a.velocity, state.camera_yaw);
        let mut next = state.clone();
        next.camera_pos = [
            (state.camera_pos[0] + v_world[0]).clamp(WORKSPACE_MIN, WORKSPACE_MAX),
            (state.camera_pos[1] + v_world[1]).clamp(WORKSPACE_MIN, WORKSPACE_MAX),
        ];
        next.camera_yaw = wrap_angle(state.camera_yaw + a.yaw_rate);
        next.step_index = state.step_index + 1;
        let (cube_pos, waypoint) = self.cube_position(state.path_origin, state.start_corner, next.step_index);
        next.cube_pos = cube_pos;
        next.cube_waypoint_index = waypoint;
        let observation = self.observe(&next);
        let reward = self.reward(&observation);
        let done = next.step_index == cfg.horizon;
        Ok(StepResult {
            state: next,
            observation,
            reward,
            done,
        })
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    };
    (ap[0] - t * ab[0]).hypot(ap[1] - t * ab[1])
}

pub fn state_vector(obs: &Observation) -> Vec<f64> {
    vec![
        obs.camera_pos[0],
        obs.camera_pos[1],
        obs.camera_yaw.cos(),
        obs.camera_yaw.sin(),
        obs.cube_pos[0],
        obs.cube_pos[1],
        obs.image_point[0],
        obs.image_point[1],
        obs.misorientation,
    ]
}

/// Index ranges of [`state_vector`] entries, for consumers that read it back.
pub mod state_index {
    pub const CAMERA: [usize; 2] = [0, 1];
    pub const CUBE: [usize; 2] = [4, 5];
    pub const IMAGE: [usize; 2] = [6, 7];
    pub const MISORIENTATION: usize = 8;
}

pub trait Policy {
    fn act(&mut self, obs: &Observation) -> Action;
}

/// Proportional controller on the camera-frame cube offset and the misorientation.
#[derive(Debug, Clone)]
pub struct ScriptedExpert {
    pub position_gain: f64,
    pub yaw_gain: f64,
    pub half_frame: f64,
    pub v_max: f64,
}

impl ScriptedExpert {
    pub fn new(config: &EnvConfig) -> Self {
        Self {
            position_gain: config.expert_position_gain,
            yaw_gain: config.expert_yaw_gain,
            half_frame: config.half_frame,
            v_max: config.v_max,
        }
    }
}

pub fn scripted_expert(expert: &ScriptedExpert, obs: &Observation) -> Action {
    // image_point * half_frame is the cube offset in the camera frame
    Action {
        velocity: [
            expert.position_gain * obs.image_point[0] * expert.half_frame,
            expert.position_gain * obs.image_point[1] * expert.half_frame,
        ],
        yaw_rate: -expert.yaw_gain * obs.misorientation,
    }
    .clamped(expert.v_max)
}

impl Policy for ScriptedExpert {
    fn act(&mut self, obs: &Observation) -> Action {
        scripted_expert(self, obs)
    }
}

/// Uniform actions over the action box.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    v_max: f64,
}

impl RandomPolicy {
    pub fn new(seed: u64, v_max: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            v_max,
        }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _obs: &Observation) -> Action {
        let mut u = || self.rng.random_range(-self.v_max..=self.v_max);
        Action {
            velocity: [u(), u()],
            yaw_rate: u(),
        }
    }
}

/// Runs one full episode. The returned trajectory carries `horizon + 1` states,
/// the executed (clamped) actions and the per-step rewards.
pub fn rollout(env: &ActiveTrack, policy: &mut dyn Policy, seed: u64, episode_id: u64) -> Result<Trajectory> {
    let (mut state, mut obs) = env.reset(seed);
    let horizon = env.config().horizon;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    states.push(state_vector(&obs));
    loop {
        let action = policy.act(&obs).clamped(env.config().v_max);
        let step = env.step(&state, &action)?;
        actions.push(action.to_vec());
        rewards.push(step.reward);
        states.push(state_vector(&step.observation));
        state = step.state;
        obs = step.observation;
        if step.done {
            break;
        }
    }
    Trajectory::new(episode_id, ENV_TAG, states, actions, Some(rewards))
}
