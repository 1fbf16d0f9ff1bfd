//! Interactive phase: actor-critic training against the learned trajectory
//! distance, with periodic encoder fine-tuning on the agent's own rollouts.

use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::align::{encoder_step, sample_indices};
use crate::config::{AgentConfig, EnvConfig, RunConfig};
use crate::env::{self, mix_seed, Controller, EnvState, ExpertController, Label, RandomController, ACTION_DIM};
use crate::error::{contract_err, Error, Result};
use crate::losses::LossReport;
use crate::nets::{AgentNets, EncoderBundle, SequenceCarry};
use crate::tensor::{Adam, AdamConfig, Graph, Module, Scalar, Tensor};
use crate::vision::{Frame, LabSequence};
use crate::Rng;

/// Replay record. `frames` holds `stack + 1` consecutive planar RGB frames:
/// the first `stack` form `o`, the last `stack` form `o'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    frames: Vec<u8>,
    frame_len: usize,
    stack: usize,
    pub action: [f32; 2],
    pub reward: f32,
}

impl Transition {
    pub fn new(frames: &[&Frame], action: [f32; 2], reward: f32) -> Result<Self> {
        if frames.len() < 2 {
            return Err(contract_err!("a transition needs at least two frames"));
        }
        if !(reward <= 0.0) {
            return Err(contract_err!("learned rewards are non-positive, got {reward}"));
        }
        if action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(contract_err!("action {:?} outside [-1, 1]", action));
        }
        let frame_len = frames[0].rgb.len();
        if frames.iter().any(|f| f.rgb.len() != frame_len) {
            return Err(contract_err!("transition frames differ in size"));
        }
        let mut bytes = Vec::with_capacity(frame_len * frames.len());
        frames.iter().for_each(|f| bytes.extend_from_slice(&f.rgb));
        Ok(Self {
            frames: bytes,
            frame_len,
            stack: frames.len() - 1,
            action,
            reward,
        })
    }

    pub fn o(&self) -> &[u8] {
        &self.frames[..self.stack * self.frame_len]
    }

    pub fn o_next(&self) -> &[u8] {
        &self.frames[self.frame_len..]
    }
}

/// Affine map applied to stored rewards before they enter critic targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardNorm {
    pub mean: f64,
    pub std: f64,
}

impl RewardNorm {
    pub const IDENTITY: Self = Self { mean: 0.0, std: 1.0 };

    pub fn apply(&self, r: f64) -> f64 {
        (r - self.mean) / self.std
    }
}

/// Bounded FIFO of transitions with uniform sampling. Also keeps running
/// statistics of every reward ever pushed.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    pushed: u64,
    reward_mean: f64,
    reward_m2: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            pushed: 0,
            reward_mean: 0.0,
            reward_m2: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        self.pushed += 1;
        let r = t.reward as f64;
        let delta = r - self.reward_mean;
        self.reward_mean += delta / self.pushed as f64;
        self.reward_m2 += delta * (r - self.reward_mean);
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// Standardises rewards by the mean and deviation of all pushed rewards.
    /// Episodes have a fixed length and never terminate early, so the shift
    /// leaves the optimal policy unchanged; it only keeps Q near zero.
    pub fn reward_norm(&self) -> RewardNorm {
        if self.pushed < 2 {
            return RewardNorm::IDENTITY;
        }
        let std = libm::sqrt(self.reward_m2 / self.pushed as f64);
        RewardNorm {
            mean: self.reward_mean,
            std: if std > 1e-6 { std } else { 1.0 },
        }
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<Vec<&Transition>> {
        if self.items.len() < n {
            return Err(contract_err!("replay holds {} transitions, batch needs {}", self.items.len(), n));
        }
        Ok((0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect())
    }
}

/// The `k` most recent frames; starts filled with the first frame.
#[derive(Debug, Clone)]
pub struct FrameStack {
    frames: VecDeque<Frame>,
    k: usize,
}

impl FrameStack {
    pub fn new(first: &Frame, k: usize) -> Self {
        Self {
            frames: core::iter::repeat(first.clone()).take(k).collect(),
            k,
        }
    }

    pub fn push(&mut self, frame: Frame) {
        if self.frames.len() == self.k {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter()
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.frames.iter().flat_map(|f| f.rgb.iter().copied()).collect()
    }
}

/// `[n, channels, size, size]` observation tensor scaled to `[0, 1]`.
pub fn obs_tensor<'a, T: Scalar>(
    obs: impl Iterator<Item = &'a [u8]>,
    channels: usize,
    size: usize,
) -> Result<Tensor<T>> {
    let scale = T::lit(1.0 / 255.0);
    let mut data = Vec::new();
    let mut n = 0;
    for o in obs {
        data.extend(o.iter().map(|&v| T::lit(v as f64) * scale));
        n += 1;
    }
    Tensor::new(&[n, channels, size, size], data)
}

fn frame_geometry<T: Scalar>(nets: &AgentNets<T>, bytes: usize) -> Result<(usize, usize)> {
    let channels = nets.policy.encoder.conv0.in_channels();
    let plane = bytes / channels;
    let size = libm::sqrt(plane as f64) as usize;
    if size * size * channels != bytes {
        return Err(contract_err!("observation of {bytes} bytes is not {channels} square planes"));
    }
    Ok((channels, size))
}

/// Deterministic policy output for one stacked observation.
pub fn policy_action<T: Scalar>(nets: &AgentNets<T>, obs: &[u8]) -> Result<[f64; 2]> {
    let (channels, size) = frame_geometry(nets, obs.len())?;
    let mut g = Graph::inference();
    let x = g.constant(obs_tensor(core::iter::once(obs), channels, size)?);
    let h = nets.features(&mut g, x)?;
    let a = nets.act(&mut g, h)?;
    let d = g.data(a);
    Ok([d[0].as_f64(), d[1].as_f64()])
}

/// Optimisers of the actor and of critic plus frame encoder. A zero
/// learning rate disables the corresponding update.
#[derive(Debug, Clone)]
pub struct AgentOptimizers<T: Scalar = f32> {
    pub critic: Option<Adam<T>>,
    pub actor: Option<Adam<T>>,
}

impl<T: Scalar> AgentOptimizers<T> {
    pub fn new(cfg: &AgentConfig) -> Result<Self> {
        let make = |lr: f64| -> Result<Option<Adam<T>>> {
            if lr > 0.0 {
                Ok(Some(Adam::new(AdamConfig::with_lr(lr))?))
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            critic: make(cfg.critic_lr)?,
            actor: make(cfg.actor_lr)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
}

const TARGET_NOISE_CLIP: f64 = 0.3;

/// One critic step, one actor step and a polyak blend of the target critic.
///
/// The critic regresses `norm(r) + discount * min(Q1', Q2')(o', pi(o') + noise)`
/// and its gradient also trains the frame encoder; the actor ascends `Q1`
/// on detached features.
pub fn actor_critic_update<T: Scalar>(
    nets: &mut AgentNets<T>,
    opt: &mut AgentOptimizers<T>,
    batch: &[&Transition],
    norm: RewardNorm,
    cfg: &AgentConfig,
    rng: &mut Rng,
) -> Result<UpdateReport> {
    if batch.is_empty() {
        return Err(contract_err!("empty update batch"));
    }
    let (channels, size) = frame_geometry(nets, batch[0].o().len())?;
    let n = batch.len();
    let obs = obs_tensor::<T>(batch.iter().map(|t| t.o()), channels, size)?;
    let next = obs_tensor::<T>(batch.iter().map(|t| t.o_next()), channels, size)?;
    let actions: Vec<T> = batch.iter().flat_map(|t| t.action.map(|a| T::lit(a as f64))).collect();

    let target = {
        let mut g = Graph::inference();
        let x = g.constant(next);
        let h = nets.features(&mut g, x)?;
        let a = nets.act(&mut g, h)?;
        let noisy: Vec<T> = g
            .data(a)
            .iter()
            .map(|&v| {
                let eps: f64 = StandardNormal.sample(rng);
                let eps = (eps * cfg.noise_std).clamp(-TARGET_NOISE_CLIP, TARGET_NOISE_CLIP);
                T::lit((v.as_f64() + eps).clamp(-1.0, 1.0))
            })
            .collect();
        let a = g.constant(Tensor::new(&[n, ACTION_DIM], noisy)?);
        let (q1, q2) = nets.critic_target.forward(&mut g, h, a)?;
        let y: Vec<T> = g
            .data(q1)
            .iter()
            .zip(g.data(q2))
            .zip(batch)
            .map(|((&a, &b), t)| T::lit(norm.apply(t.reward as f64) + cfg.discount * a.min(b).as_f64()))
            .collect();
        Tensor::new(&[n, 1], y)?
    };

    let mut g = Graph::new();
    let x = g.constant(obs);
    let h = nets.features(&mut g, x)?;
    let a = g.constant(Tensor::new(&[n, ACTION_DIM], actions)?);
    let (q1, q2) = nets.critic.forward(&mut g, h, a)?;
    let y = g.constant(target);
    let d1 = g.sub(q1, y)?;
    let d2 = g.sub(q2, y)?;
    let l1 = g.square(d1);
    let l1 = g.mean(l1);
    let l2 = g.square(d2);
    let l2 = g.mean(l2);
    let critic_loss = g.add(l1, l2)?;
    let features = g.value(h).clone();
    let critic_value = g.item(critic_loss).as_f64();
    if let Some(adam) = opt.critic.as_mut() {
        g.backward(critic_loss)?;
        nets.critic.collect_grads(&g);
        nets.policy.encoder.collect_grads(&g);
        adam.step(&mut [&mut nets.critic as &mut dyn Module<T>, &mut nets.policy.encoder])?;
    }

    let mut g = Graph::new();
    let h = g.constant(features);
    let a = nets.act(&mut g, h)?;
    let (q1, _) = nets.critic.forward(&mut g, h, a)?;
    let q = g.mean(q1);
    let actor_loss = g.neg(q);
    let actor_value = g.item(actor_loss).as_f64();
    if let Some(adam) = opt.actor.as_mut() {
        g.backward(actor_loss)?;
        nets.policy.actor.collect_grads(&g);
        adam.step(&mut [&mut nets.policy.actor as &mut dyn Module<T>])?;
    }

    polyak_update(&mut nets.critic_target, &nets.critic, cfg.polyak)?;
    Ok(UpdateReport {
        critic_loss: critic_value,
        actor_loss: actor_value,
    })
}

/// `target <- keep * target + (1 - keep) * online`.
pub fn polyak_update<T: Scalar>(target: &mut dyn Module<T>, online: &dyn Module<T>, keep: f64) -> Result<()> {
    let mut values = Vec::new();
    online.visit(&mut |p| values.push(p.value.clone()));
    let mut it = values.into_iter();
    let (k, m) = (T::lit(keep), T::lit(1.0 - keep));
    let mut bad = false;
    target.visit_mut(&mut |p| match it.next() {
        Some(src) if src.shape() == p.value.shape() => {
            p.data_mut().iter_mut().zip(src.data()).for_each(|(t, &s)| *t = k * *t + m * s);
        }
        _ => bad = true,
    });
    if bad {
        return Err(contract_err!("target and online networks differ in layout"));
    }
    Ok(())
}

/// Advances both carries by one state and returns `-||z_agent - z_expert||`.
pub fn learned_reward<T: Scalar>(
    bundle: &EncoderBundle<T>,
    agent: &mut SequenceCarry<T>,
    agent_state: &[T],
    expert: &mut SequenceCarry<T>,
    expert_state: &[T],
) -> Result<f64> {
    if agent.steps != expert.steps {
        return Err(contract_err!(
            "agent carry is at step {}, expert carry at {}",
            agent.steps,
            expert.steps
        ));
    }
    let za = bundle.extend_sequence(agent, agent_state)?;
    let ze = bundle.extend_sequence(expert, expert_state)?;
    Ok(-distance(&za, &ze))
}

/// Frame-level form of [`learned_reward`].
pub fn learned_reward_frames<T: Scalar>(
    bundle: &mut EncoderBundle<T>,
    agent: &mut SequenceCarry<T>,
    agent_frame: &Frame,
    expert: &mut SequenceCarry<T>,
    expert_frame: &Frame,
) -> Result<f64> {
    let sa = bundle.encode_frame(agent_frame)?;
    let se = bundle.encode_frame(expert_frame)?;
    learned_reward(bundle, agent, &sa, expert, &se)
}

/// Reward recomputed from the full prefixes.
pub fn prefix_reward<T: Scalar>(bundle: &mut EncoderBundle<T>, agent: &[Frame], expert: &[Frame]) -> Result<f64> {
    if agent.len() != expert.len() {
        return Err(contract_err!("prefixes of {} and {} frames", agent.len(), expert.len()));
    }
    let za = bundle.embed_trajectory(agent)?;
    let ze = bundle.embed_trajectory(expert)?;
    Ok(-distance(&za, &ze))
}

fn distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    libm::sqrt(
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum(),
    )
}

/// Stacks frames and queries an agent; optional Gaussian exploration.
pub struct AgentController<'a, T: Scalar = f32> {
    nets: &'a AgentNets<T>,
    stack: Option<FrameStack>,
    noise: Option<(f64, Rng)>,
    k: usize,
}

impl<'a, T: Scalar> AgentController<'a, T> {
    pub fn new(nets: &'a AgentNets<T>) -> Self {
        let k = nets.policy.encoder.conv0.in_channels() / 3;
        Self {
            nets,
            stack: None,
            noise: None,
            k,
        }
    }

    pub fn with_noise(mut self, std: f64, rng: Rng) -> Self {
        self.noise = Some((std, rng));
        self
    }
}

impl<T: Scalar> Controller for AgentController<'_, T> {
    fn act(&mut self, _: &EnvState, frame: &Frame) -> [f64; 2] {
        match self.stack.as_mut() {
            Some(s) => s.push(frame.clone()),
            None => self.stack = Some(FrameStack::new(frame, self.k)),
        }
        let obs = self.stack.as_ref().expect("initialised above").bytes();
        let mut a = policy_action(self.nets, &obs).unwrap_or([0.0; 2]);
        if let Some((std, rng)) = self.noise.as_mut() {
            for v in &mut a {
                let eps: f64 = StandardNormal.sample(rng);
                *v = (*v + *std * eps).clamp(-1.0, 1.0);
            }
        }
        a
    }
}

/// True-return summary of a set of noise-free evaluation episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub scaled_return: f64,
    pub scaled_std: f64,
    pub expert_return: f64,
    pub random_return: f64,
}

/// Mean true returns of the analytic expert and the random policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baselines {
    pub expert: f64,
    pub random: f64,
}

impl Baselines {
    pub fn measure(env: &EnvConfig, frame_size: usize, episodes: usize, seed: u64) -> Result<Self> {
        let expert = mean(&evaluate_label(env, frame_size, Label::Expert, episodes, seed)?);
        let random = mean(&evaluate_label(env, frame_size, Label::Random, episodes, seed)?);
        if expert == random {
            return Err(Error::Evaluation(alloc::format!(
                "expert and random policies both return {expert}"
            )));
        }
        Ok(Self { expert, random })
    }

    pub fn scale(&self, ret: f64) -> f64 {
        (ret - self.random) / (self.expert - self.random)
    }

    pub fn report(&self, returns: &[f64]) -> EvalReport {
        let scaled: Vec<f64> = returns.iter().map(|&r| self.scale(r)).collect();
        EvalReport {
            episodes: returns.len(),
            mean_return: mean(returns),
            std_return: std_dev(returns),
            scaled_return: mean(&scaled),
            scaled_std: std_dev(&scaled),
            expert_return: self.expert,
            random_return: self.random,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    libm::sqrt(v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len().max(1) as f64)
}

/// True returns of `episodes` rollouts started from the evaluation seeds.
pub fn evaluate_controller<'c>(
    env: &EnvConfig,
    frame_size: usize,
    episodes: usize,
    seed: u64,
    make: &mut dyn FnMut(u64) -> Box<dyn Controller + 'c>,
) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(contract_err!("evaluation needs at least one episode"));
    }
    Ok((0..episodes)
        .map(|i| {
            let ep = env::episode_seed(seed, i);
            let mut c = make(ep);
            env::rollout(env.env, ep, env.episode_len, frame_size, c.as_mut(), Label::Agent).true_return
        })
        .collect())
}

/// Returns of the expert or random controller, seeded as in dataset generation.
pub fn evaluate_label(env: &EnvConfig, frame_size: usize, label: Label, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let (kp, kd) = (env.kp, env.kd);
    match label {
        Label::Expert => evaluate_controller(env, frame_size, episodes, seed, &mut |_| {
            Box::new(ExpertController { kp, kd })
        }),
        Label::Random => evaluate_controller(env, frame_size, episodes, seed, &mut |ep| {
            Box::new(RandomController {
                rng: crate::rng_from_seed(mix_seed(ep, 0xac7)),
            })
        }),
        Label::Agent => Err(contract_err!("agent returns need an agent")),
    }
}

/// Noise-free evaluation with returns scaled against expert and random
/// runs over the same seeds.
pub fn evaluate_agent<T: Scalar>(
    nets: &AgentNets<T>,
    env: &EnvConfig,
    frame_size: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let baselines = Baselines::measure(env, frame_size, episodes, seed)?;
    let returns = evaluate_controller(env, frame_size, episodes, seed, &mut |_| Box::new(AgentController::new(nets)))?;
    Ok(baselines.report(&returns))
}

/// Evaluation seed set shared by periodic and final evaluations.
pub fn eval_seed(seed: u64) -> u64 {
    mix_seed(seed, 0xe7a1)
}

/// Per-episode record of the interactive phase.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub episode: usize,
    /// Agent steps after this episode.
    pub step: usize,
    pub learned_return: f64,
    pub true_return: f64,
    /// Training-episode return scaled by the evaluation baselines.
    pub scaled_return: f64,
    pub encoder: Option<LossReport>,
    pub eval: Option<EvalReport>,
}

/// Everything the interactive loop mutates besides the networks.
#[derive(Debug, Clone)]
struct Loop<T: Scalar> {
    rng: Rng,
    replay: ReplayBuffer,
    agent_set: VecDeque<LabSequence>,
    agent_opt: AgentOptimizers<T>,
    encoder_opt: Option<Adam<T>>,
}

/// Runs the interactive phase for `cfg.interact.n_pi` agent steps, rounded
/// up to whole episodes. `observe` sees every episode's metrics together
/// with the networks as they stand after it.
pub fn run_interactive<T: Scalar>(
    bundle: &mut EncoderBundle<T>,
    nets: &mut AgentNets<T>,
    expert: &[LabSequence],
    cfg: &RunConfig,
    observe: &mut dyn FnMut(&EpisodeMetrics, &AgentNets<T>, &EncoderBundle<T>),
) -> Result<Vec<EpisodeMetrics>> {
    cfg.validate()?;
    let (ic, ac, ec) = (&cfg.interact, &cfg.agent, &cfg.env);
    let size = cfg.net.frame_size;
    let frames = ec.episode_len + 1;
    if expert.is_empty() {
        return Err(contract_err!("the interactive phase needs expert trajectories"));
    }
    if let Some(bad) = expert.iter().find(|s| s.frames != frames || s.height != size || s.width != size) {
        return Err(contract_err!(
            "expert trajectory of {} frames at {}x{}, expected {} at {}",
            bad.frames,
            bad.height,
            bad.width,
            frames,
            size
        ));
    }
    let mut metrics = Vec::new();
    if ic.n_pi == 0 {
        return Ok(metrics);
    }
    let baselines = Baselines::measure(ec, size, ic.eval_episodes, eval_seed(ic.seed))?;
    let mut lp = Loop {
        rng: crate::rng_from_seed(mix_seed(ic.seed, 3)),
        replay: ReplayBuffer::new(ac.replay_capacity),
        agent_set: VecDeque::new(),
        agent_opt: AgentOptimizers::new(ac)?,
        encoder_opt: if ic.lr > 0.0 {
            Some(Adam::new(AdamConfig::with_lr(ic.lr))?)
        } else {
            None
        },
    };
    let train_seed = mix_seed(ic.seed, 0x7a1);
    let mut step = 0;
    let mut episode = 0;
    while step < ic.n_pi {
        let before = step;
        let (learned_return, true_return, trajectory) =
            run_episode(bundle, nets, expert, cfg, env::episode_seed(train_seed, episode), &mut step, &mut lp)?;

        let mut encoder = None;
        if step <= ic.n_train && before / ic.n_update != step / ic.n_update {
            if lp.agent_set.len() == ic.agent_set_capacity {
                lp.agent_set.pop_front();
            }
            lp.agent_set.push_back(LabSequence::from_frames(&trajectory)?);
            let ei = sample_indices(&mut lp.rng, expert.len(), ic.batch_pairs);
            let ai = sample_indices(&mut lp.rng, lp.agent_set.len(), ic.batch_pairs);
            let first: Vec<&LabSequence> = ei.iter().map(|&i| &expert[i]).collect();
            let second: Vec<&LabSequence> = ai.iter().map(|&i| &lp.agent_set[i]).collect();
            encoder = Some(encoder_step(
                bundle,
                lp.encoder_opt.as_mut(),
                &first,
                &second,
                &cfg.loss,
                &mut lp.rng,
            )?);
        }

        let last = step >= ic.n_pi;
        let eval = if ic.eval_every > 0 && (before / ic.eval_every != step / ic.eval_every || last) {
            let returns = evaluate_controller(ec, size, ic.eval_episodes, eval_seed(ic.seed), &mut |_| {
                Box::new(AgentController::new(nets))
            })?;
            Some(baselines.report(&returns))
        } else {
            None
        };

        let m = EpisodeMetrics {
            episode,
            step,
            learned_return,
            true_return,
            scaled_return: baselines.scale(true_return),
            encoder,
            eval,
        };
        observe(&m, nets, bundle);
        metrics.push(m);
        episode += 1;
    }
    Ok(metrics)
}

/// One training episode; returns learned and true returns and the frames.
fn run_episode<T: Scalar>(
    bundle: &mut EncoderBundle<T>,
    nets: &mut AgentNets<T>,
    expert: &[LabSequence],
    cfg: &RunConfig,
    seed: u64,
    step: &mut usize,
    lp: &mut Loop<T>,
) -> Result<(f64, f64, Vec<Frame>)> {
    let (ac, ec) = (&cfg.agent, &cfg.env);
    let size = cfg.net.frame_size;
    let reference = lp.rng.gen_range(0..expert.len());
    let (ref_states, _) = bundle.embed_views(&expert[reference])?;

    let mut state = env::reset(ec.env, seed);
    let first = env::render(&state, size);
    let mut agent_carry = bundle.empty_carry();
    let mut expert_carry = bundle.empty_carry();
    let s0 = bundle.encode_frame(&first)?;
    learned_reward(bundle, &mut agent_carry, &s0, &mut expert_carry, &ref_states[0])?;
    let mut stack = FrameStack::new(&first, ac.frame_stack);
    let mut trajectory = Vec::with_capacity(ec.episode_len + 1);
    trajectory.push(first);
    let (mut learned_return, mut true_return) = (0.0, 0.0);

    for t in 0..ec.episode_len {
        let action = if *step < ac.warmup_steps {
            [lp.rng.gen_range(-1.0..=1.0), lp.rng.gen_range(-1.0..=1.0)]
        } else {
            let mut a = policy_action(nets, &stack.bytes())?;
            for v in &mut a {
                let eps: f64 = StandardNormal.sample(&mut lp.rng);
                *v = (*v + ac.noise_std * eps).clamp(-1.0, 1.0);
            }
            a
        };
        let (next, info) = env::step(&state, action);
        let frame = env::render(&next, size);
        true_return += info.reward;
        let s = bundle.encode_frame(&frame)?;
        let r = learned_reward(bundle, &mut agent_carry, &s, &mut expert_carry, &ref_states[t + 1])?;
        learned_return += r;

        let mut window: Vec<&Frame> = stack.frames().collect();
        window.push(&frame);
        let action32 = [action[0] as f32, action[1] as f32];
        let transition = Transition::new(&window, action32, r as f32)?;
        lp.replay.push(transition);
        stack.push(frame.clone());
        trajectory.push(frame);
        state = next;
        *step += 1;

        if *step >= ac.warmup_steps && *step % ac.update_every == 0 && lp.replay.len() >= ac.batch_size {
            let norm = if ac.normalize_rewards {
                lp.replay.reward_norm()
            } else {
                RewardNorm::IDENTITY
            };
            let batch = lp.replay.sample(&mut lp.rng, ac.batch_size)?;
            actor_critic_update(nets, &mut lp.agent_opt, &batch, norm, ac, &mut lp.rng)?;
        }
    }
    Ok((learned_return, true_return, trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(v: u8) -> Frame {
        Frame::filled(4, 4, [v, v, v])
    }

    #[test]
    fn transition_views_overlap() {
        let (a, b, c) = (frame(1), frame(2), frame(3));
        let t = Transition::new(&[&a, &b, &c], [0.5, -0.5], -1.0).unwrap();
        assert_eq!(&t.o()[..48], a.rgb.as_slice());
        assert_eq!(&t.o()[48..], b.rgb.as_slice());
        assert_eq!(&t.o_next()[..48], b.rgb.as_slice());
        assert_eq!(&t.o_next()[48..], c.rgb.as_slice());
        assert!(Transition::new(&[&a, &b], [0.0, 0.0], 0.5).is_err());
        assert!(Transition::new(&[&a, &b], [1.5, 0.0], -0.5).is_err());
    }

    #[test]
    fn replay_is_fifo() {
        let mut r = ReplayBuffer::new(3);
        for i in 0..5u8 {
            r.push(Transition::new(&[&frame(i), &frame(i)], [0.0, 0.0], -(i as f32)).unwrap());
        }
        assert_eq!(r.len(), 3);
        let rewards: Vec<f32> = r.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![-2.0, -3.0, -4.0]);
        let mut rng = crate::rng_from_seed(0);
        assert!(r.sample(&mut rng, 4).is_err());
        assert_eq!(r.sample(&mut rng, 3).unwrap().len(), 3);
    }

    #[test]
    fn reward_statistics_cover_evicted_transitions() {
        let mut r = ReplayBuffer::new(2);
        assert_eq!(r.reward_norm(), RewardNorm::IDENTITY);
        for v in [-1.0f32, -2.0, -3.0, -6.0] {
            r.push(Transition::new(&[&frame(0), &frame(0)], [0.0, 0.0], v).unwrap());
        }
        let n = r.reward_norm();
        let (mean, var) = (-3.0, (4.0 + 1.0 + 0.0 + 9.0) / 4.0);
        assert!((n.mean - mean).abs() < 1e-12);
        assert!((n.std - libm::sqrt(var)).abs() < 1e-12);
        assert!((n.apply(-3.0)).abs() < 1e-12);
    }

    #[test]
    fn frame_stack_starts_filled() {
        let mut s = FrameStack::new(&frame(7), 2);
        assert_eq!(s.bytes(), [frame(7).rgb, frame(7).rgb].concat());
        s.push(frame(9));
        assert_eq!(s.bytes(), [frame(7).rgb, frame(9).rgb].concat());
    }

    #[test]
    fn baselines_scale_to_zero_and_one() {
        let b = Baselines { expert: 30.0, random: 2.0 };
        assert_eq!(b.scale(30.0), 1.0);
        assert_eq!(b.scale(2.0), 0.0);
        assert_eq!(b.scale(16.0), 0.5);
    }
}
