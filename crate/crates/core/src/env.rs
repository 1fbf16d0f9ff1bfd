//! Two procedurally rendered point-mass tasks with analytic experts.
//!
//! `point_reach`: drive the agent onto the goal. `point_push`: push a disc
//! onto the goal. Dynamics are `v <- 0.8 v + 0.1 a`, `p <- clamp(p + v)`.

use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::EnvId;
use crate::error::{param_err, Result};
use crate::vision::Frame;
use crate::Rng;

pub const ACTION_DIM: usize = 2;
pub const SUCCESS_RADIUS: f64 = 0.05;
pub const MIN_SEPARATION: f64 = 0.3;
pub const GOAL_RADIUS: f64 = 0.1;
pub const AGENT_RADIUS: f64 = 0.06;
pub const OBJECT_RADIUS: f64 = 0.07;

const BACKGROUND: [u8; 3] = [28, 30, 44];
const GOAL_COLOR: [u8; 3] = [60, 200, 90];
const AGENT_COLOR: [u8; 3] = [235, 70, 50];
const OBJECT_COLOR: [u8; 3] = [70, 120, 240];

pub type Vec2 = [f64; 2];

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Vec2) -> f64 {
    libm::hypot(a[0], a[1])
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

fn clamp_unit(p: Vec2) -> Vec2 {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub env: EnvId,
    pub agent: Vec2,
    pub velocity: Vec2,
    pub goal: Vec2,
    /// Present for `point_push` only.
    pub object: Option<Vec2>,
    pub step: usize,
}

/// Result of one transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub reward: f64,
    /// Set when the action had to be clamped into `[-1, 1]`.
    pub action_clamped: bool,
}

/// SplitMix64 finalizer; derives per-episode seeds from a dataset seed.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform_point(rng: &mut Rng, lo: f64, hi: f64) -> Vec2 {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Seeded initial state. The goal is at least [`MIN_SEPARATION`] from the
/// agent (reach) or from the object (push).
pub fn reset(env: EnvId, seed: u64) -> EnvState {
    let mut rng = crate::rng_from_seed(mix_seed(seed, 0x5eed));
    match env {
        EnvId::PointReach => {
            let agent = uniform_point(&mut rng, 0.1, 0.9);
            let goal = loop {
                let g = uniform_point(&mut rng, 0.1, 0.9);
                if dist(g, agent) >= MIN_SEPARATION {
                    break g;
                }
            };
            EnvState {
                env,
                agent,
                velocity: [0.0; 2],
                goal,
                object: None,
                step: 0,
            }
        }
        EnvId::PointPush => {
            let object = uniform_point(&mut rng, 0.25, 0.75);
            let goal = loop {
                let g = uniform_point(&mut rng, 0.1, 0.9);
                if dist(g, object) >= MIN_SEPARATION {
                    break g;
                }
            };
            let agent = loop {
                let a = uniform_point(&mut rng, 0.1, 0.9);
                if dist(a, object) >= MIN_SEPARATION && dist(a, goal) >= MIN_SEPARATION {
                    break a;
                }
            };
            EnvState {
                env,
                agent,
                velocity: [0.0; 2],
                goal,
                object: Some(object),
                step: 0,
            }
        }
    }
}

/// Task reward of a state: 1 inside the success radius, else 0.
pub fn task_reward(state: &EnvState) -> f64 {
    let pos = state.object.unwrap_or(state.agent);
    if dist(pos, state.goal) < SUCCESS_RADIUS {
        1.0
    } else {
        0.0
    }
}

/// Advances one step; the reward is that of the new state.
pub fn step(state: &EnvState, action: [f64; 2]) -> (EnvState, StepInfo) {
    let clamped = action.map(|a| if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) });
    let action_clamped = clamped != action;
    let mut next = state.clone();
    for i in 0..2 {
        next.velocity[i] = 0.8 * state.velocity[i] + 0.1 * clamped[i];
    }
    let target = clamp_unit([
        state.agent[0] + next.velocity[0],
        state.agent[1] + next.velocity[1],
    ]);
    match state.object {
        None => next.agent = target,
        Some(obj) => {
            // Sub-stepped so a fast agent cannot tunnel through the object.
            let travel = dist(target, state.agent);
            let n = libm::ceil(travel / PUSH_SUBSTEP).max(1.0) as usize;
            let mut obj = obj;
            for k in 1..=n {
                let f = k as f64 / n as f64;
                let a = [
                    state.agent[0] + (target[0] - state.agent[0]) * f,
                    state.agent[1] + (target[1] - state.agent[1]) * f,
                ];
                obj = resolve_contact(a, obj, next.velocity);
            }
            next.agent = target;
            next.object = Some(obj);
        }
    }
    next.step += 1;
    let reward = task_reward(&next);
    (
        next,
        StepInfo {
            reward,
            action_clamped,
        },
    )
}

const PUSH_SUBSTEP: f64 = 0.01;
const PUSH_AUTHORITY: f64 = 0.5;

/// Moves the object out of contact along the agent-to-object direction.
fn resolve_contact(agent: Vec2, obj: Vec2, velocity: Vec2) -> Vec2 {
    let reach = AGENT_RADIUS + OBJECT_RADIUS;
    let d = sub(obj, agent);
    let n = norm(d);
    if n >= reach {
        return obj;
    }
    let dir = if n > 1e-12 {
        [d[0] / n, d[1] / n]
    } else {
        let v = norm(velocity);
        if v > 1e-12 {
            [velocity[0] / v, velocity[1] / v]
        } else {
            [1.0, 0.0]
        }
    };
    clamp_unit([agent[0] + dir[0] * reach, agent[1] + dir[1] * reach])
}

fn pd(target: Vec2, state: &EnvState, kp: f64, kd: f64) -> [f64; 2] {
    let mut a = [0.0; 2];
    for i in 0..2 {
        a[i] = (kp * (target[i] - state.agent[i]) - kd * state.velocity[i]).clamp(-1.0, 1.0);
    }
    a
}

/// Analytic expert. Reach: PD control onto the goal. Push: approach a point
/// behind the object (detouring around it when on the wrong side), then
/// drive to the spot that leaves the object on the goal.
pub fn expert_action(state: &EnvState, kp: f64, kd: f64) -> [f64; 2] {
    let Some(obj) = state.object else {
        return pd(state.goal, state, kp, kd);
    };
    let to_goal = sub(state.goal, obj);
    let n = norm(to_goal);
    if n < 1e-9 {
        return pd(state.agent, state, kp, kd);
    }
    let u = [to_goal[0] / n, to_goal[1] / n];
    let standoff = AGENT_RADIUS + OBJECT_RADIUS + 0.02;
    let behind = [obj[0] - u[0] * standoff, obj[1] - u[1] * standoff];
    let rel = sub(state.agent, obj);
    let along = rel[0] * u[0] + rel[1] * u[1];
    let target = if dist(state.agent, behind) < 0.04 || (along < 0.0 && norm(rel) < standoff + 0.01) {
        // Pushing is done at reduced authority so the object is not overshot.
        let reach = AGENT_RADIUS + OBJECT_RADIUS;
        let spot = clamp_unit([state.goal[0] - u[0] * reach, state.goal[1] - u[1] * reach]);
        return pd(spot, state, kp, kd).map(|a| a * PUSH_AUTHORITY);
    } else if along > -0.02 {
        // Wrong side: go around on the side the agent already is.
        let perp = [-u[1], u[0]];
        let side = if rel[0] * perp[0] + rel[1] * perp[1] >= 0.0 { 1.0 } else { -1.0 };
        let off = standoff + 0.06;
        [
            obj[0] + perp[0] * side * off - u[0] * 0.05,
            obj[1] + perp[1] * side * off - u[1] * 0.05,
        ]
    } else {
        behind
    };
    pd(clamp_unit(target), state, kp, kd)
}

fn disc(frame: &mut Frame, center: Vec2, radius: f64, color: [u8; 3]) {
    let (h, w) = (frame.height, frame.width);
    for y in 0..h {
        let cy = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let cx = (x as f64 + 0.5) / w as f64;
            let (dx, dy) = (cx - center[0], cy - center[1]);
            if dx * dx + dy * dy <= radius * radius {
                frame.set_pixel(y, x, color);
            }
        }
    }
}

/// Rasterizes goal, object and agent (in that order) without anti-aliasing.
pub fn render(state: &EnvState, size: usize) -> Frame {
    let mut frame = Frame::filled(size, size, BACKGROUND);
    disc(&mut frame, state.goal, GOAL_RADIUS, GOAL_COLOR);
    if let Some(obj) = state.object {
        disc(&mut frame, obj, OBJECT_RADIUS, OBJECT_COLOR);
    }
    disc(&mut frame, state.agent, AGENT_RADIUS, AGENT_COLOR);
    frame
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Expert,
    Random,
    Agent,
}

impl Label {
    pub fn code(self) -> u32 {
        match self {
            Label::Expert => 0,
            Label::Random => 1,
            Label::Agent => 2,
        }
    }

    pub fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Label::Expert),
            1 => Ok(Label::Random),
            2 => Ok(Label::Agent),
            _ => Err(param_err!("unknown trajectory label {}", c)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Expert => "expert",
            Label::Random => "random",
            Label::Agent => "agent",
        }
    }
}

impl core::str::FromStr for Label {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Label::Expert),
            "random" => Ok(Label::Random),
            "agent" => Ok(Label::Agent),
            _ => Err(param_err!("unknown policy '{}'", s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `T + 1` frames.
    pub frames: Vec<Frame>,
    /// `T` actions when recorded.
    pub actions: Option<Vec<[f32; 2]>>,
    /// Hidden task return, for evaluation only.
    pub true_return: f64,
    pub label: Label,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Source of actions for a rollout.
pub trait Controller {
    fn act(&mut self, state: &EnvState, frame: &Frame) -> [f64; 2];
}

pub struct ExpertController {
    pub kp: f64,
    pub kd: f64,
}

impl Controller for ExpertController {
    fn act(&mut self, state: &EnvState, _: &Frame) -> [f64; 2] {
        expert_action(state, self.kp, self.kd)
    }
}

pub struct RandomController {
    pub rng: Rng,
}

impl Controller for RandomController {
    fn act(&mut self, _: &EnvState, _: &Frame) -> [f64; 2] {
        [self.rng.gen_range(-1.0..=1.0), self.rng.gen_range(-1.0..=1.0)]
    }
}

/// Runs `steps` actions from `reset(env, seed)`.
pub fn rollout(
    env: EnvId,
    seed: u64,
    steps: usize,
    size: usize,
    controller: &mut dyn Controller,
    label: Label,
) -> Trajectory {
    let mut state = reset(env, seed);
    let mut frames = Vec::with_capacity(steps + 1);
    let mut actions = Vec::with_capacity(steps);
    let mut ret = 0.0;
    frames.push(render(&state, size));
    for _ in 0..steps {
        let a = controller.act(&state, frames.last().expect("non-empty"));
        let (next, info) = step(&state, a);
        actions.push([a[0].clamp(-1.0, 1.0) as f32, a[1].clamp(-1.0, 1.0) as f32]);
        ret += info.reward;
        state = next;
        frames.push(render(&state, size));
    }
    Trajectory {
        frames,
        actions: Some(actions),
        true_return: ret,
        label,
    }
}

/// A set of rendered trajectories sharing one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: EnvId,
    pub policy: Label,
    pub episode_len: usize,
    pub frame_size: usize,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

/// Episode `i` of a dataset seeded with `seed` starts from `reset(env, episode_seed(seed, i))`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    mix_seed(seed, index as u64)
}

#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    env: EnvId,
    policy: Label,
    count: usize,
    episode_len: usize,
    frame_size: usize,
    seed: u64,
    kp: f64,
    kd: f64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(param_err!("dataset needs at least one trajectory"));
    }
    if episode_len < 2 {
        return Err(param_err!("episode length must be at least 2, got {}", episode_len));
    }
    if frame_size == 0 {
        return Err(param_err!("frame size must be positive"));
    }
    let mut trajectories = Vec::with_capacity(count);
    for i in 0..count {
        let ep = episode_seed(seed, i);
        let traj = match policy {
            Label::Expert => rollout(env, ep, episode_len, frame_size, &mut ExpertController { kp, kd }, policy),
            Label::Random => {
                let mut c = RandomController {
                    rng: crate::rng_from_seed(mix_seed(ep, 0xac7)),
                };
                rollout(env, ep, episode_len, frame_size, &mut c, policy)
            }
            Label::Agent => return Err(param_err!("datasets are generated by the expert or random policy")),
        };
        trajectories.push(traj);
    }
    Ok(Dataset {
        env,
        policy,
        episode_len,
        frame_size,
        seed,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_seeded_and_separated() {
        for env in EnvId::ALL {
            assert_eq!(reset(env, 11), reset(env, 11));
            for seed in 0..1000 {
                let s = reset(env, seed);
                let anchor = s.object.unwrap_or(s.agent);
                assert!(dist(anchor, s.goal) >= MIN_SEPARATION);
            }
        }
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let s = reset(EnvId::PointReach, 3);
        let (n, info) = step(&s, [0.0, 0.0]);
        assert_eq!(n.agent, s.agent);
        assert!(!info.action_clamped);
        let (_, info) = step(&s, [2.0, 0.0]);
        assert!(info.action_clamped);
    }

    #[test]
    fn constant_action_matches_geometric_series() {
        let mut s = reset(EnvId::PointReach, 0);
        s.agent = [0.0, 0.5];
        s.goal = [1.0, 1.0];
        let mut expected = 0.0;
        for k in 1..=20 {
            s = step(&s, [1.0, 0.0]).0;
            // v_k = 0.1 (1 - 0.8^k) / 0.2
            expected += 0.5 * (1.0 - libm::pow(0.8, k as f64));
            assert!((s.agent[0] - expected.min(1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn goal_reward_and_expert_at_rest() {
        let mut s = reset(EnvId::PointReach, 5);
        s.agent = s.goal;
        assert_eq!(task_reward(&s), 1.0);
        assert_eq!(expert_action(&s, 4.0, 2.0), [0.0, 0.0]);
    }

    #[test]
    fn rendering_is_deterministic_and_distinct() {
        let s = reset(EnvId::PointReach, 9);
        assert_eq!(render(&s, 32), render(&s, 32));
        let f = render(&s, 32);
        let count = |c: [u8; 3]| {
            (0..32)
                .flat_map(|y| (0..32).map(move |x| (y, x)))
                .filter(|&(y, x)| f.pixel(y, x) == c)
                .count()
        };
        assert!(count(GOAL_COLOR) > 0 && count(AGENT_COLOR) > 0);
    }

    #[test]
    fn push_moves_the_object() {
        let mut s = reset(EnvId::PointPush, 1);
        s.object = Some([0.5, 0.5]);
        s.agent = [0.5 - AGENT_RADIUS - OBJECT_RADIUS - 0.01, 0.5];
        s.velocity = [0.05, 0.0];
        let (n, _) = step(&s, [1.0, 0.0]);
        assert!(n.object.unwrap()[0] > 0.5);
    }

    #[test]
    fn datasets_are_reproducible() {
        let a = generate_dataset(EnvId::PointReach, Label::Random, 3, 5, 16, 7, 4.0, 2.0).unwrap();
        let b = generate_dataset(EnvId::PointReach, Label::Random, 3, 5, 16, 7, 4.0, 2.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectories[0].frames.len(), 6);
        assert!(generate_dataset(EnvId::PointReach, Label::Random, 0, 5, 16, 7, 4.0, 2.0).is_err());
    }
}
