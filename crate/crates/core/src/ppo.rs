//! Proximal policy optimisation for the control environment: rollouts,
//! generalised advantage estimation, the clipped surrogate and value losses
//! with analytic gradients, the per-episode update loop, checkpoints and
//! policy evaluation.
//!
//! The policy is a Gaussian over normalised actions in `[-1, 1]²`; the
//! environment action is `center + scale * a` and is clipped by the
//! environment. Log-probabilities always refer to the unclipped sample.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{episode_metrics, Env, EnvConfig, EpisodeMetrics, ObservationKind, Trajectory};
use crate::error::{Error, Result};
use crate::hamiltonian::ControlAction;
use crate::nn::{read_f64s, write_f64s, Adam, Dense, GaussianPolicy, Mlp};
use crate::observables::{Metric, Observer};

const CHECKPOINT_MAGIC: &[u8; 8] = b"NEPPOCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Independent RNG streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Rollout = 2,
    Shuffle = 3,
    Baseline = 4,
    Evaluation = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Per-item seed for parallel work, independent of evaluation order.
pub fn sub_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut x = master ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finaliser
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_epsilon: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub episodes: usize,
    pub entropy_coeff: f64,
    pub normalize_advantages: bool,
    /// Global gradient-norm clip per network; `None` disables it.
    pub max_grad_norm: Option<f64>,
    /// Save a checkpoint every this many episodes.
    pub checkpoint_interval: Option<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.997,
            lambda: 0.95,
            clip_epsilon: 0.2,
            epochs: 3,
            minibatches: 4,
            actor_lr: 5e-4,
            critic_lr: 5e-4,
            episodes: 500,
            entropy_coeff: 0.0,
            normalize_advantages: true,
            max_grad_norm: Some(0.5),
            checkpoint_interval: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(format!("agent.{field}"), msg));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma", format!("must lie in (0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda", format!("must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.clip_epsilon > 0.0) {
            return fail("clip_epsilon", format!("must be positive, got {}", self.clip_epsilon));
        }
        if self.epochs == 0 {
            return fail("epochs", "must be at least 1".into());
        }
        if self.minibatches == 0 {
            return fail("minibatches", "must be at least 1".into());
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(name, format!("must be positive, got {lr}"));
            }
        }
        if matches!(self.max_grad_norm, Some(g) if !(g > 0.0)) {
            return fail("max_grad_norm", "must be positive".into());
        }
        if self.checkpoint_interval == Some(0) {
            return fail("checkpoint_interval", "must be at least 1".into());
        }
        Ok(())
    }
}

/// Hidden layer widths shared by the actor and the critic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
}

impl NetConfig {
    /// Wide network, paired with learning rate `1e-4`.
    pub fn config_a() -> Self {
        NetConfig {
            hidden: vec![256, 128, 64],
        }
    }

    /// Narrow network, paired with learning rate `5e-4`.
    pub fn config_b() -> Self {
        NetConfig {
            hidden: vec![128, 64, 32],
        }
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(&self.hidden);
        sizes.push(output);
        sizes
    }
}

/// Learning rate that goes with a named preset.
pub fn preset_learning_rate(preset: &str) -> Option<f64> {
    match preset {
        "A" | "a" => Some(1e-4),
        "B" | "b" => Some(5e-4),
        _ => None,
    }
}

pub const ACTION_DIM: usize = 2;

/// Actor, critic and their optimisers.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub policy: GaussianPolicy,
    pub critic: Mlp,
    pub actor_adam: Adam,
    pub critic_adam: Adam,
    pub action_center: f64,
    pub action_scale: f64,
    /// The critic outputs `V / value_scale`. With rewards in `[-1, 0]`, a
    /// scale of `1 / (1 - γ)` keeps its targets in `[-1, 0]`.
    pub value_scale: f64,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        env: &EnvConfig,
        net: &NetConfig,
        ppo: &PpoConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let actor = Mlp::new(&net.sizes(obs_dim, ACTION_DIM), 0.01, rng)?;
        let critic = Mlp::new(&net.sizes(obs_dim, 1), 1.0, rng)?;
        let mut actor_lengths = actor.param_lengths();
        actor_lengths.push(ACTION_DIM);
        let critic_lengths = critic.param_lengths();
        Ok(Agent {
            policy: GaussianPolicy::new(actor),
            critic,
            actor_adam: Adam::new(ppo.actor_lr, &actor_lengths),
            critic_adam: Adam::new(ppo.critic_lr, &critic_lengths),
            action_center: env.action_center(),
            action_scale: env.action_scale(),
            value_scale: 1.0 / (1.0 - ppo.gamma),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.actor.input_dim()
    }

    pub fn to_env_action(&self, raw: &[f64]) -> ControlAction {
        ControlAction::new(
            self.action_center + self.action_scale * raw[0],
            self.action_center + self.action_scale * raw[1],
        )
    }

    /// Mean action for `obs`, in physical units.
    pub fn act_deterministic(&self, obs: &[f64]) -> Result<ControlAction> {
        Ok(self.to_env_action(&self.policy.mean(obs)?))
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.value_scale * self.critic.forward(obs)?[0])
    }

    /// Mean policy standard deviation in physical units.
    pub fn policy_std(&self) -> f64 {
        self.action_scale * self.policy.std().iter().sum::<f64>() / ACTION_DIM as f64
    }
}

/// One episode collected under a frozen policy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rollout {
    pub observations: Vec<Vec<f64>>,
    /// Unclipped normalised samples.
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub trajectory: Trajectory,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// How a rollout chooses its actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Mean,
}

pub fn collect_rollout<R: Rng + ?Sized>(
    env: &mut Env,
    agent: &Agent,
    mode: ActionMode,
    rng: &mut R,
) -> Result<Rollout> {
    if env.obs_dim() != agent.obs_dim() {
        return Err(Error::Validation(format!(
            "policy takes {} observations but the environment emits {}",
            agent.obs_dim(),
            env.obs_dim()
        )));
    }
    let mut rollout = Rollout::default();
    let mut obs = env.reset()?;
    loop {
        let (raw, log_prob) = match mode {
            ActionMode::Sample => agent.policy.sample(&obs, rng)?,
            ActionMode::Mean => {
                let mean = agent.policy.mean(&obs)?;
                let lp = agent.policy.log_prob(&obs, &mean)?;
                (mean, lp)
            }
        };
        let outcome = env.step(agent.to_env_action(&raw))?;
        rollout.observations.push(obs.clone());
        rollout.actions.push(raw);
        rollout.log_probs.push(log_prob);
        rollout.rewards.push(outcome.reward);
        rollout.trajectory.push(obs, &outcome);
        obs = outcome.observation;
        if outcome.done {
            break;
        }
    }
    let batch = DMatrix::from_fn(agent.obs_dim(), rollout.len(), |i, j| rollout.observations[j][i]);
    rollout.values = agent
        .critic
        .forward_batch(&batch)?
        .output()
        .iter()
        .map(|v| agent.value_scale * v)
        .collect();
    Ok(rollout)
}

/// `Â_t = Σ_{k≥t} (γλ)^{k-t} δ_k`, `δ_t = R_t + γ V_{t+1} - V_t`, with the
/// value after the last step taken as zero.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} rewards but {} values",
            rewards.len(),
            values.len()
        )));
    }
    let mut advantages = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        let next = values.get(t + 1).copied().unwrap_or(0.0);
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        advantages[t] = running;
    }
    Ok(advantages)
}

/// `Ĝ_t = Â_t + V_t`.
pub fn compute_returns(advantages: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    if advantages.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} advantages but {} values",
            advantages.len(),
            values.len()
        )));
    }
    Ok(advantages.iter().zip(values).map(|(a, v)| a + v).collect())
}

/// Shifts and scales to zero mean and unit variance (population variance).
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    values.iter().map(|v| (v - mean) * scale).collect()
}

/// Training samples, one column per decision step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub observations: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn from_rollout(rollout: &Rollout, ppo: &PpoConfig) -> Result<Self> {
        let advantages = compute_gae(&rollout.rewards, &rollout.values, ppo.gamma, ppo.lambda)?;
        let returns = compute_returns(&advantages, &rollout.values)?;
        let advantages = if ppo.normalize_advantages {
            normalize(&advantages)
        } else {
            advantages
        };
        let n = rollout.len();
        let obs_dim = rollout.observations.first().map_or(0, Vec::len);
        Ok(Batch {
            observations: DMatrix::from_fn(obs_dim, n, |i, j| rollout.observations[j][i]),
            actions: DMatrix::from_fn(ACTION_DIM, n, |i, j| rollout.actions[j][i]),
            old_log_probs: rollout.log_probs.clone(),
            advantages,
            returns,
        })
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        let cols = |m: &DMatrix<f64>| m.select_columns(idx);
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect();
        Batch {
            observations: cols(&self.observations),
            actions: cols(&self.actions),
            old_log_probs: pick(&self.old_log_probs),
            advantages: pick(&self.advantages),
            returns: pick(&self.returns),
        }
    }
}

/// Losses and their gradients for one batch. Gradients are of the
/// quantities to minimise: `-(L^CLIP + c·H)` for the actor and
/// `L^VF / value_scale²` for the critic.
#[derive(Clone, Debug)]
pub struct LossOutput {
    /// `L^CLIP` (to be maximised).
    pub clip_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Fraction of samples whose ratio left `[1-ε, 1+ε]`.
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub actor_grads: Vec<Dense>,
    pub log_std_grad: Vec<f64>,
    pub critic_grads: Vec<Dense>,
}

pub fn ppo_losses(batch: &Batch, agent: &Agent, clip_epsilon: f64, entropy_coeff: f64) -> Result<LossOutput> {
    let n = batch.len() as f64;
    let policy = &agent.policy;
    let log_std = policy.log_std();
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();

    let (means, actor_cache) = policy.mean_batch(&batch.observations)?;
    let mut grad_mean = DMatrix::zeros(ACTION_DIM, batch.len());
    let mut log_std_grad = vec![0.0; ACTION_DIM];
    let (mut clip_loss, mut clipped, mut approx_kl) = (0.0, 0usize, 0.0);
    for j in 0..batch.len() {
        let action: Vec<f64> = batch.actions.column(j).iter().copied().collect();
        let mean: Vec<f64> = means.column(j).iter().copied().collect();
        let new_lp = crate::nn::gaussian_log_prob(&action, &mean, log_std);
        let log_ratio = new_lp - batch.old_log_probs[j];
        let ratio = log_ratio.exp();
        let adv = batch.advantages[j];
        let clipped_ratio = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
        let (unclipped_term, clipped_term) = (ratio * adv, clipped_ratio * adv);
        clip_loss += unclipped_term.min(clipped_term);
        approx_kl += (ratio - 1.0) - log_ratio;
        if clipped_ratio != ratio {
            clipped += 1;
        }
        // d min(...)/d logπ = r·A where the unclipped term is selected.
        if unclipped_term <= clipped_term {
            let w = -ratio * adv / n;
            for k in 0..ACTION_DIM {
                let diff = action[k] - mean[k];
                grad_mean[(k, j)] = w * diff * inv_var[k];
                log_std_grad[k] += w * (diff * diff * inv_var[k] - 1.0);
            }
        }
    }
    let entropy: f64 = log_std
        .iter()
        .map(|ls| ls + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln())
        .sum();
    for g in log_std_grad.iter_mut() {
        *g -= entropy_coeff;
    }
    let actor_grads = policy.backward_mean(&actor_cache, &grad_mean)?;

    let critic_cache = agent.critic.forward_batch(&batch.observations)?;
    let values = critic_cache.output();
    let mut value_loss = 0.0;
    let mut grad_value = DMatrix::zeros(1, batch.len());
    let scale = agent.value_scale;
    for j in 0..batch.len() {
        let diff = values[(0, j)] - batch.returns[j] / scale;
        value_loss += scale * scale * diff * diff / n;
        grad_value[(0, j)] = 2.0 * diff / n;
    }
    let critic_grads = agent.critic.backward(&critic_cache, &grad_value)?;

    Ok(LossOutput {
        clip_loss: clip_loss / n,
        value_loss,
        entropy,
        clip_fraction: clipped as f64 / n,
        approx_kl: approx_kl / n,
        actor_grads,
        log_std_grad,
        critic_grads,
    })
}

fn flatten(grads: &[Dense]) -> Vec<Vec<f64>> {
    grads
        .iter()
        .flat_map(|d| [d.weight.as_slice().to_vec(), d.bias.as_slice().to_vec()])
        .collect()
}

fn clip_global_norm(tensors: &mut [Vec<f64>], max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let norm = tensors.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        tensors.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Applies one optimiser step of both networks from `loss` gradients.
pub fn apply_gradients(agent: &mut Agent, loss: &LossOutput, max_grad_norm: Option<f64>) -> Result<()> {
    let mut actor = flatten(&loss.actor_grads);
    actor.push(loss.log_std_grad.clone());
    clip_global_norm(&mut actor, max_grad_norm);
    let mut critic = flatten(&loss.critic_grads);
    clip_global_norm(&mut critic, max_grad_norm);

    let grads: Vec<&[f64]> = actor.iter().map(Vec::as_slice).collect();
    agent.actor_adam.update(&mut agent.policy.param_slices_mut(), &grads)?;
    agent.policy.clamp_log_std();
    let mut params = agent.critic.param_slices_mut();
    let grads: Vec<&[f64]> = critic.iter().map(Vec::as_slice).collect();
    agent.critic_adam.update(&mut params, &grads)
}

/// Loss statistics averaged over the minibatch updates of one episode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub clip_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// `epochs` passes over `batch` in `minibatches` shuffled chunks.
pub fn ppo_update<R: Rng + ?Sized>(
    agent: &mut Agent,
    batch: &Batch,
    ppo: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut stats = UpdateStats::default();
    let mut updates = 0;
    for _ in 0..ppo.epochs {
        order.shuffle(rng);
        let chunk = batch.len().div_ceil(ppo.minibatches).max(1);
        for idx in order.chunks(chunk) {
            let mini = batch.select(idx);
            let loss = ppo_losses(&mini, agent, ppo.clip_epsilon, ppo.entropy_coeff)?;
            if !(loss.clip_loss.is_finite() && loss.value_loss.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss (clip {}, value {}); batch of {}: advantage range [{:.3e}, {:.3e}], return range [{:.3e}, {:.3e}], log-std {:?}",
                    loss.clip_loss,
                    loss.value_loss,
                    mini.len(),
                    mini.advantages.iter().copied().fold(f64::INFINITY, f64::min),
                    mini.advantages.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    mini.returns.iter().copied().fold(f64::INFINITY, f64::min),
                    mini.returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    agent.policy.log_std(),
                )));
            }
            apply_gradients(agent, &loss, ppo.max_grad_norm)?;
            stats.clip_loss += loss.clip_loss;
            stats.value_loss += loss.value_loss;
            stats.clip_fraction += loss.clip_fraction;
            stats.approx_kl += loss.approx_kl;
            updates += 1;
        }
    }
    let k = updates.max(1) as f64;
    Ok(UpdateStats {
        clip_loss: stats.clip_loss / k,
        value_loss: stats.value_loss / k,
        clip_fraction: stats.clip_fraction / k,
        approx_kl: stats.approx_kl / k,
    })
}

/// One row of the training report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub episode: usize,
    pub mean_reward: f64,
    pub mean_metric: f64,
    pub clip_loss: f64,
    pub value_loss: f64,
    pub policy_std: f64,
    pub env_steps: u64,
    #[serde(skip)]
    pub mean_full_fidelity: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    pub rows: Vec<ReportRow>,
}

impl TrainingReport {
    pub const HEADER: [&'static str; 7] = [
        "episode",
        "mean_reward",
        "mean_metric",
        "clip_loss",
        "value_loss",
        "policy_std",
        "env_steps",
    ];

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(Self::HEADER)?;
        for r in &self.rows {
            out.write_record([
                r.episode.to_string(),
                format!("{:.11e}", r.mean_reward),
                format!("{:.11e}", r.mean_metric),
                format!("{:.11e}", r.clip_loss),
                format!("{:.11e}", r.value_loss),
                format!("{:.11e}", r.policy_std),
                r.env_steps.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Mean of `mean_metric` over the last `k` episodes.
    pub fn tail_mean(&self, k: usize, pick: impl Fn(&ReportRow) -> f64) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(k)..];
        tail.iter().map(pick).sum::<f64>() / tail.len() as f64
    }
}

/// Everything needed to evaluate or resume a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub agent: Agent,
    pub episode: u64,
    pub env_steps: u64,
    pub rollout_rng: ChaCha8Rng,
    pub shuffle_rng: ChaCha8Rng,
}

fn write_rng<W: Write>(out: &mut W, rng: &ChaCha8Rng) -> Result<()> {
    out.write_all(&rng.get_seed())?;
    out.write_u64::<LittleEndian>(rng.get_stream())?;
    out.write_u128::<LittleEndian>(rng.get_word_pos())?;
    Ok(())
}

fn read_rng<R: Read>(input: &mut R) -> Result<ChaCha8Rng> {
    let mut seed = [0u8; 32];
    input.read_exact(&mut seed)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(input.read_u64::<LittleEndian>()?);
    rng.set_word_pos(input.read_u128::<LittleEndian>()?);
    Ok(rng)
}

impl Checkpoint {
    /// Layout (little endian): magic `NEPPOCKP`, `u32` version, action center
    /// and scale, value scale (`f64`), actor network, `u32` count + `f64` log-std, critic
    /// network, actor Adam, critic Adam, `u64` episode, `u64` env steps,
    /// rollout and shuffle RNG states (32-byte seed, `u64` stream, `u128` word
    /// position). Networks are `u32` layer count, `u32` sizes, then per layer
    /// row-major weights and biases.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        out.write_f64::<LittleEndian>(self.agent.action_center)?;
        out.write_f64::<LittleEndian>(self.agent.action_scale)?;
        out.write_f64::<LittleEndian>(self.agent.value_scale)?;
        self.agent.policy.actor.write_to(out)?;
        out.write_u32::<LittleEndian>(self.agent.policy.log_std().len() as u32)?;
        write_f64s(out, self.agent.policy.log_std())?;
        self.agent.critic.write_to(out)?;
        self.agent.actor_adam.write_to(out)?;
        self.agent.critic_adam.write_to(out)?;
        out.write_u64::<LittleEndian>(self.episode)?;
        out.write_u64::<LittleEndian>(self.env_steps)?;
        write_rng(out, &self.rollout_rng)?;
        write_rng(out, &self.shuffle_rng)?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let bad = |e: Error| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
                Error::Checkpoint("file is truncated".into())
            }
            other => other,
        };
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|e| bad(e.into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a policy checkpoint".into()));
        }
        let version = input.read_u32::<LittleEndian>().map_err(|e| bad(e.into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut body = || -> Result<Checkpoint> {
            let action_center = input.read_f64::<LittleEndian>()?;
            let action_scale = input.read_f64::<LittleEndian>()?;
            let value_scale = input.read_f64::<LittleEndian>()?;
            let actor = Mlp::read_from(input)?;
            let n = input.read_u32::<LittleEndian>()? as usize;
            let log_std = read_f64s(input, n.min(16))?;
            let policy = GaussianPolicy::with_log_std(actor, log_std)?;
            let critic = Mlp::read_from(input)?;
            let actor_adam = Adam::read_from(input)?;
            let critic_adam = Adam::read_from(input)?;
            let episode = input.read_u64::<LittleEndian>()?;
            let env_steps = input.read_u64::<LittleEndian>()?;
            let rollout_rng = read_rng(input)?;
            let shuffle_rng = read_rng(input)?;
            Ok(Checkpoint {
                agent: Agent {
                    policy,
                    critic,
                    actor_adam,
                    critic_adam,
                    action_center,
                    action_scale,
                    value_scale,
                },
                episode,
                env_steps,
                rollout_rng,
                shuffle_rng,
            })
        };
        let ckpt = body().map_err(bad)?;
        let mut actor_lengths = ckpt.agent.policy.actor.param_lengths();
        actor_lengths.push(ckpt.agent.policy.action_dim());
        if ckpt.agent.actor_adam.lengths() != actor_lengths
            || ckpt.agent.critic_adam.lengths() != ckpt.agent.critic.param_lengths()
            || ckpt.agent.critic.input_dim() != ckpt.agent.policy.actor.input_dim()
        {
            return Err(Error::Checkpoint("optimiser state does not match the networks".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::MissingArtifact {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        Self::read_from(&mut BufReader::new(file))
    }
}

/// The sequential train loop: one rollout and one update per episode.
pub struct Trainer {
    env: Env,
    env_config: EnvConfig,
    ppo: PpoConfig,
    agent: Agent,
    rollout_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    episode: u64,
    env_steps: u64,
    report: TrainingReport,
}

impl Trainer {
    pub fn new(env_config: EnvConfig, ppo: PpoConfig, net: &NetConfig, seed: u64) -> Result<Self> {
        ppo.validate()?;
        let env = Env::new(env_config.clone())?;
        let agent = Agent::new(
            env.obs_dim(),
            &env_config,
            net,
            &ppo,
            &mut stream_rng(seed, Stream::Init),
        )?;
        Ok(Trainer {
            env,
            env_config,
            ppo,
            agent,
            rollout_rng: stream_rng(seed, Stream::Rollout),
            shuffle_rng: stream_rng(seed, Stream::Shuffle),
            episode: 0,
            env_steps: 0,
            report: TrainingReport::default(),
        })
    }

    pub fn resume(env_config: EnvConfig, ppo: PpoConfig, checkpoint: Checkpoint) -> Result<Self> {
        ppo.validate()?;
        let env = Env::new(env_config.clone())?;
        if env.obs_dim() != checkpoint.agent.obs_dim() {
            return Err(Error::Validation(
                "checkpoint observation size does not match the environment".into(),
            ));
        }
        Ok(Trainer {
            env,
            env_config,
            ppo,
            agent: checkpoint.agent,
            rollout_rng: checkpoint.rollout_rng,
            shuffle_rng: checkpoint.shuffle_rng,
            episode: checkpoint.episode,
            env_steps: checkpoint.env_steps,
            report: TrainingReport::default(),
        })
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn report(&self) -> &TrainingReport {
        &self.report
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn run_episode(&mut self) -> Result<&ReportRow> {
        let rollout = collect_rollout(&mut self.env, &self.agent, ActionMode::Sample, &mut self.rollout_rng)?;
        let metrics = episode_metrics(&rollout.trajectory, &self.env_config)?;
        let batch = Batch::from_rollout(&rollout, &self.ppo)?;
        let stats = ppo_update(&mut self.agent, &batch, &self.ppo, &mut self.shuffle_rng)?;
        self.episode += 1;
        self.env_steps += rollout.len() as u64;
        self.report.rows.push(ReportRow {
            episode: self.episode as usize,
            mean_reward: metrics.mean_reward,
            mean_metric: metrics.mean_metric,
            clip_loss: stats.clip_loss,
            value_loss: stats.value_loss,
            policy_std: self.agent.policy_std(),
            env_steps: self.env_steps,
            mean_full_fidelity: metrics.mean_full_fidelity,
        });
        Ok(self.report.rows.last().unwrap())
    }

    /// Runs the configured number of episodes. `on_checkpoint` is called at
    /// every checkpoint interval.
    pub fn train(&mut self, mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>) -> Result<()> {
        for _ in 0..self.ppo.episodes {
            self.run_episode()?;
            if let Some(every) = self.ppo.checkpoint_interval {
                if self.episode.is_multiple_of(every as u64) {
                    on_checkpoint(&self.checkpoint())?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            agent: self.agent.clone(),
            episode: self.episode,
            env_steps: self.env_steps,
            rollout_rng: self.rollout_rng.clone(),
            shuffle_rng: self.shuffle_rng.clone(),
        }
    }
}

pub fn train(
    env_config: EnvConfig,
    ppo: PpoConfig,
    net: &NetConfig,
    seed: u64,
) -> Result<(Checkpoint, TrainingReport)> {
    let mut trainer = Trainer::new(env_config, ppo, net, seed)?;
    trainer.train(|_| Ok(()))?;
    Ok((trainer.checkpoint(), trainer.report))
}

/// Episode means of a policy that draws each action uniformly within the
/// action bounds.
pub fn random_baseline(env_config: &EnvConfig, episodes: usize, seed: u64) -> Result<Vec<EpisodeMetrics>> {
    let probe = Env::new(env_config.clone())?;
    let (chain, lo, hi) = (probe.chain().clone(), env_config.action_low, env_config.action_high);
    let stepper = std::sync::Arc::new(chain.stepper(env_config.dt)?);
    (0..episodes)
        .into_par_iter()
        .map(|k| {
            let mut env = Env::with_shared(env_config.clone(), chain.clone(), stepper.clone())?;
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, Stream::Baseline as u64, k as u64));
            let mut traj = Trajectory::default();
            let mut obs = env.reset()?;
            loop {
                let action = ControlAction::new(rng.random_range(lo..=hi), rng.random_range(lo..=hi));
                let out = env.step(action)?;
                traj.push(obs, &out);
                obs = out.observation.clone();
                if out.done {
                    break;
                }
            }
            episode_metrics(&traj, env_config)
        })
        .collect()
}

/// Per-time mean and standard deviation of the nonergodic metrics over
/// evaluation episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Vec<Metric>,
    /// `t = 0` and after every decision step.
    pub times: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub episodes: Vec<EpisodeMetrics>,
}

impl Evaluation {
    pub fn mean_reward(&self) -> f64 {
        self.episodes.iter().map(|e| e.mean_reward).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn mean_full_fidelity(&self) -> f64 {
        self.episodes.iter().map(|e| e.mean_full_fidelity).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn mean_metric(&self) -> f64 {
        self.episodes.iter().map(|e| e.mean_metric).sum::<f64>() / self.episodes.len() as f64
    }

    /// `t,<metric>_mean,<metric>_std,...`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        for m in &self.metrics {
            header.push(format!("{}_mean", m.name()));
            header.push(format!("{}_std", m.name()));
        }
        out.write_record(&header)?;
        for (k, t) in self.times.iter().enumerate() {
            let mut row = vec![format!("{t:.11e}")];
            for (mean, std) in self.mean.iter().zip(&self.std) {
                row.push(format!("{:.11e}", mean[k]));
                row.push(format!("{:.11e}", std[k]));
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs the frozen policy for `episodes` episodes in parallel. Episode `k`
/// draws from its own seed, so results do not depend on scheduling.
pub fn evaluate_policy(
    agent: &Agent,
    env_config: &EnvConfig,
    episodes: usize,
    mode: ActionMode,
    seed: u64,
) -> Result<Evaluation> {
    if episodes == 0 {
        return Err(Error::config("evaluate.episodes", "must be at least 1"));
    }
    let probe = Env::new(env_config.clone())?;
    if probe.obs_dim() != agent.obs_dim() {
        return Err(Error::Validation(format!(
            "checkpoint expects {} observations, environment `{}` emits {}",
            agent.obs_dim(),
            env_config.observation,
            probe.obs_dim()
        )));
    }
    let chain = probe.chain().clone();
    let stepper = std::sync::Arc::new(chain.stepper(env_config.dt)?);
    let mut metrics = Metric::PROTOCOL_SET.to_vec();
    if let ObservationKind::SubFidelity { n_left } = env_config.observation {
        metrics.push(Metric::SubFidelity { n_left });
    }
    let initial = crate::fock::StateMatrix::from_pattern(chain.basis().clone(), &env_config.pattern)?;
    let observer = Observer::new(initial.clone(), &metrics)?;

    let runs: Vec<(Vec<Vec<f64>>, EpisodeMetrics)> = (0..episodes)
        .into_par_iter()
        .map(|k| {
            let mut env = Env::with_shared(env_config.clone(), chain.clone(), stepper.clone())?;
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, Stream::Evaluation as u64, k as u64));
            let mut samples = vec![observer.observe(&initial)?];
            let mut traj = Trajectory::default();
            let mut obs = env.reset()?;
            loop {
                let raw = match mode {
                    ActionMode::Sample => agent.policy.sample(&obs, &mut rng)?.0,
                    ActionMode::Mean => agent.policy.mean(&obs)?,
                };
                let out = env.step(agent.to_env_action(&raw))?;
                traj.push(obs, &out);
                samples.push(observer.observe(&env.state())?);
                obs = out.observation.clone();
                if out.done {
                    break;
                }
            }
            Ok((samples, episode_metrics(&traj, env_config)?))
        })
        .collect::<Result<_>>()?;

    let steps = runs[0].0.len();
    let interval = env_config.dt * env_config.interval_steps as f64;
    let z = episodes as f64;
    let mut mean = vec![vec![0.0; steps]; metrics.len()];
    let mut std = vec![vec![0.0; steps]; metrics.len()];
    for m in 0..metrics.len() {
        for t in 0..steps {
            let mu = runs.iter().map(|r| r.0[t][m]).sum::<f64>() / z;
            let var = runs.iter().map(|r| (r.0[t][m] - mu).powi(2)).sum::<f64>() / z;
            mean[m][t] = mu;
            std[m][t] = var.sqrt();
        }
    }
    Ok(Evaluation {
        metrics,
        times: (0..steps).map(|k| k as f64 * interval).collect(),
        mean,
        std,
        episodes: runs.into_iter().map(|r| r.1).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::SpinPattern;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    fn small_env(horizon: f64) -> EnvConfig {
        EnvConfig::new(SpinPattern::minus_plus(4), horizon, ObservationKind::FullFidelity)
    }

    fn small_agent(seed: u64) -> Agent {
        let cfg = small_env(0.05);
        Agent::new(
            1,
            &cfg,
            &NetConfig { hidden: vec![8, 6] },
            &PpoConfig::default(),
            &mut stream_rng(seed, Stream::Init),
        )
        .unwrap()
    }

    /// `Σ_{k≥t} (γλ)^{k-t} δ_k` evaluated directly.
    fn gae_double_sum(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = rewards.len();
        let delta: Vec<f64> = (0..n)
            .map(|t| rewards[t] + gamma * values.get(t + 1).copied().unwrap_or(0.0) - values[t])
            .collect();
        (0..n)
            .map(|t| (t..n).map(|k| (gamma * lambda).powi((k - t) as i32) * delta[k]).sum())
            .collect()
    }

    #[test]
    fn gae_hand_cases() {
        assert_eq!(compute_gae(&[1.0, 1.0], &[0.0, 0.0], 1.0, 1.0).unwrap(), vec![2.0, 1.0]);
        let (r, v) = ([0.5, -1.0, 2.0], [0.1, 0.7, -0.3]);
        let one_step = compute_gae(&r, &v, 0.9, 0.0).unwrap();
        let delta = [0.5 + 0.9 * 0.7 - 0.1, -1.0 + 0.9 * -0.3 - 0.7, 2.0 - -0.3];
        for (a, d) in one_step.iter().zip(delta) {
            assert!((a - d).abs() < 1e-15);
        }
        let adv = compute_gae(&[1.0; 3], &[0.0; 3], 0.5, 1.0).unwrap();
        assert_eq!(compute_returns(&adv, &[0.0; 3]).unwrap(), vec![1.75, 1.5, 1.0]);
        assert!(compute_returns(&[1.0], &[]).is_err());
    }

    proptest! {
        #[test]
        fn gae_recursion_equals_double_sum(
            seed in 0u64..1_000_000,
            gamma in 0.5f64..0.999,
            lambda in 0.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rewards: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..0.0)).collect();
            let values: Vec<f64> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
            let fast = compute_gae(&rewards, &values, gamma, lambda).unwrap();
            let slow = gae_double_sum(&rewards, &values, gamma, lambda);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn random_batch(agent: &Agent, n: usize, seed: u64, perturb: f64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = DMatrix::from_fn(1, n, |_, _| rng.random_range(0.0..1.0));
        let actions = DMatrix::from_fn(2, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let old_log_probs = (0..n)
            .map(|j| {
                let a: Vec<f64> = actions.column(j).iter().copied().collect();
                agent.policy.log_prob(&[obs[(0, j)]], &a).unwrap() + perturb * rng.random_range(-1.0..1.0)
            })
            .collect();
        Batch {
            observations: obs,
            actions,
            old_log_probs,
            advantages: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            returns: (0..n).map(|_| rng.random_range(-3.0..0.0)).collect(),
        }
    }

    #[test]
    fn clip_loss_at_unit_ratio_is_mean_advantage() {
        let agent = small_agent(1);
        let batch = random_batch(&agent, 32, 2, 0.0);
        let out = ppo_losses(&batch, &agent, 0.2, 0.0).unwrap();
        let mean_adv = batch.advantages.iter().sum::<f64>() / 32.0;
        assert!((out.clip_loss - mean_adv).abs() < 1e-14);
        assert_eq!(out.clip_fraction, 0.0);
    }

    #[test]
    fn clip_arithmetic() {
        // One sample with r = 1.5 and A = 2: the clipped term 1.2·A is chosen.
        let agent = small_agent(1);
        let mut batch = random_batch(&agent, 1, 3, 0.0);
        batch.old_log_probs[0] -= 1.5f64.ln();
        batch.advantages[0] = 2.0;
        let out = ppo_losses(&batch, &agent, 0.2, 0.0).unwrap();
        assert!((out.clip_loss - 2.4).abs() < 1e-12);
        assert_eq!(out.clip_fraction, 1.0);
        assert!(out.log_std_grad.iter().all(|&g| g == 0.0));
    }

    fn objective(agent: &Agent, batch: &Batch, eps: f64) -> f64 {
        -ppo_losses(batch, agent, eps, 0.0).unwrap().clip_loss
    }

    /// Relative error of the analytic actor gradient along random directions.
    fn clip_gradient_error(agent: &Agent, batch: &Batch, eps: f64, seed: u64) -> f64 {
        let out = ppo_losses(batch, agent, eps, 0.0).unwrap();
        let mut grads = flatten(&out.actor_grads);
        grads.push(out.log_std_grad.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let dirs: Vec<Vec<f64>> = grads
                .iter()
                .map(|g| (0..g.len()).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let shifted = |sign: f64| {
                let mut a = agent.clone();
                let mut slices = a.policy.actor.param_slices_mut();
                for (s, d) in slices.iter_mut().zip(&dirs) {
                    for (v, dv) in s.iter_mut().zip(d) {
                        *v += sign * h * dv;
                    }
                }
                for (v, dv) in a.policy.log_std_mut().iter_mut().zip(dirs.last().unwrap()) {
                    *v += sign * h * dv;
                }
                objective(&a, batch, eps)
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            let analytic: f64 = grads
                .iter()
                .flatten()
                .zip(dirs.iter().flatten())
                .map(|(g, d)| g * d)
                .sum();
            worst = worst.max((numeric - analytic).abs() / analytic.abs().max(1e-8));
        }
        worst
    }

    #[test]
    fn clip_gradient_matches_finite_differences() {
        let agent = small_agent(5);
        // Ratios near 1 and far from 1, away from the kinks at 1 ± ε.
        for (seed, perturb) in [(7, 0.0), (8, 0.05)] {
            let batch = random_batch(&agent, 4, seed, perturb);
            let err = clip_gradient_error(&agent, &batch, 0.2, seed + 100);
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let agent = small_agent(6);
        let batch = random_batch(&agent, 8, 9, 0.0);
        let out = ppo_losses(&batch, &agent, 0.2, 0.0).unwrap();
        let grads = flatten(&out.critic_grads);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dirs: Vec<Vec<f64>> = grads
            .iter()
            .map(|g| (0..g.len()).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let h = 1e-6;
        let shifted = |sign: f64| {
            let mut a = agent.clone();
            for (s, d) in a.critic.param_slices_mut().iter_mut().zip(&dirs) {
                for (v, dv) in s.iter_mut().zip(d) {
                    *v += sign * h * dv;
                }
            }
            ppo_losses(&batch, &a, 0.2, 0.0).unwrap().value_loss / (a.value_scale * a.value_scale)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        let analytic: f64 = grads
            .iter()
            .flatten()
            .zip(dirs.iter().flatten())
            .map(|(g, d)| g * d)
            .sum();
        assert!((numeric - analytic).abs() / analytic.abs() < 1e-5);
    }

    #[test]
    fn unclipped_update_is_the_policy_gradient() {
        // With a huge ε the first update of the surrogate at r = 1 is
        // A ∇logπ, the vanilla policy gradient.
        let agent = small_agent(11);
        let batch = random_batch(&agent, 64, 12, 0.0);
        let out = ppo_losses(&batch, &agent, 1e9, 0.0).unwrap();
        let mut ppo_dir = flatten(&out.actor_grads);
        ppo_dir.push(out.log_std_grad.clone());

        let n = batch.len() as f64;
        let (means, cache) = agent.policy.mean_batch(&batch.observations).unwrap();
        let inv_var: Vec<f64> = agent.policy.log_std().iter().map(|l| (-2.0 * l).exp()).collect();
        let mut gm = DMatrix::zeros(2, batch.len());
        let mut gs = vec![0.0; 2];
        for j in 0..batch.len() {
            for k in 0..2 {
                let d = batch.actions[(k, j)] - means[(k, j)];
                gm[(k, j)] = -batch.advantages[j] * d * inv_var[k] / n;
                gs[k] += -batch.advantages[j] * (d * d * inv_var[k] - 1.0) / n;
            }
        }
        let mut pg = flatten(&agent.policy.backward_mean(&cache, &gm).unwrap());
        pg.push(gs);
        let dot: f64 = ppo_dir
            .iter()
            .flatten()
            .zip(pg.iter().flatten())
            .map(|(a, b)| a * b)
            .sum();
        let na = ppo_dir.iter().flatten().map(|a| a * a).sum::<f64>().sqrt();
        let nb = pg.iter().flatten().map(|a| a * a).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.999);
    }

    #[test]
    fn normalisation_preserves_ranking() {
        let adv = [0.3, -1.2, 4.0, 0.0, 2.2];
        let norm = normalize(&adv);
        let mean = norm.iter().sum::<f64>() / 5.0;
        let var = norm.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-6);
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(argmax(&adv), argmax(&norm));
    }

    #[test]
    fn rollout_shape_and_determinism() {
        let cfg = small_env(0.1);
        let mut env = Env::new(cfg.clone()).unwrap();
        let agent = small_agent(3);
        let a = collect_rollout(
            &mut env,
            &agent,
            ActionMode::Sample,
            &mut stream_rng(9, Stream::Rollout),
        )
        .unwrap();
        let b = collect_rollout(
            &mut env,
            &agent,
            ActionMode::Sample,
            &mut stream_rng(9, Stream::Rollout),
        )
        .unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, b);
        assert!(a.rewards.iter().all(|&r| (-1.0..=0.0).contains(&r)));
        assert_eq!(a.values.len(), 20);

        let five_tau = EnvConfig::new(SpinPattern::minus_plus(4), 5.0, ObservationKind::FullFidelity);
        assert_eq!(five_tau.episode_len().unwrap(), 1000);
    }

    #[test]
    fn training_is_deterministic_and_counts_steps() {
        let cfg = small_env(0.1);
        let ppo = PpoConfig {
            episodes: 4,
            ..PpoConfig::default()
        };
        let net = NetConfig { hidden: vec![8, 8] };
        let (c1, r1) = train(cfg.clone(), ppo.clone(), &net, 42).unwrap();
        let (c2, r2) = train(cfg, ppo, &net, 42).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(c1, c2);
        for (k, row) in r1.rows.iter().enumerate() {
            assert_eq!(row.env_steps, 20 * (k as u64 + 1));
            assert!(row.mean_reward <= 0.0 && row.mean_reward >= -1.0);
        }
    }

    #[test]
    fn resume_continues_the_same_run() {
        let cfg = small_env(0.1);
        let ppo = PpoConfig {
            episodes: 6,
            ..PpoConfig::default()
        };
        let net = NetConfig { hidden: vec![8] };
        let (_, full) = train(cfg.clone(), ppo.clone(), &net, 5).unwrap();

        let mut first = Trainer::new(
            cfg.clone(),
            PpoConfig {
                episodes: 3,
                ..ppo.clone()
            },
            &net,
            5,
        )
        .unwrap();
        first.train(|_| Ok(())).unwrap();
        let mut buf = Vec::new();
        first.checkpoint().write_to(&mut buf).unwrap();
        let ckpt = Checkpoint::read_from(&mut &buf[..]).unwrap();
        assert_eq!(ckpt, first.checkpoint());
        let mut second = Trainer::resume(cfg, PpoConfig { episodes: 3, ..ppo }, ckpt).unwrap();
        second.train(|_| Ok(())).unwrap();
        assert_eq!(&full.rows[3..], &second.report().rows[..]);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let mut buf = Vec::new();
        Trainer::new(small_env(0.05), PpoConfig::default(), &NetConfig { hidden: vec![4] }, 1)
            .unwrap()
            .checkpoint()
            .write_to(&mut buf)
            .unwrap();
        assert!(matches!(
            Checkpoint::read_from(&mut &b"NOTACKPT...."[..]),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            Checkpoint::read_from(&mut &buf[..buf.len() / 2]),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn config_validation_names_the_field() {
        let bad = PpoConfig {
            gamma: 1.0,
            ..PpoConfig::default()
        };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "agent.gamma"),
            other => panic!("{other:?}"),
        }
        assert!(PpoConfig {
            epochs: 0,
            ..PpoConfig::default()
        }
        .validate()
        .is_err());
        assert!(PpoConfig::default().validate().is_ok());
    }

    #[test]
    fn evaluation_cases() {
        let agent = small_agent(2);
        let cfg = small_env(0.05);
        let single = evaluate_policy(&agent, &cfg, 1, ActionMode::Mean, 0).unwrap();
        assert!(single.std.iter().flatten().all(|&s| s == 0.0));
        assert_eq!(single.times.len(), 11);
        let longer = EnvConfig {
            horizon: 0.1,
            ..cfg.clone()
        };
        let a = evaluate_policy(&agent, &longer, 4, ActionMode::Sample, 3).unwrap();
        let b = evaluate_policy(&agent, &longer, 4, ActionMode::Sample, 3).unwrap();
        assert_eq!(a, b);
        let wrong = EnvConfig {
            observation: ObservationKind::ImbalancePair,
            ..cfg
        };
        assert!(evaluate_policy(&agent, &wrong, 1, ActionMode::Mean, 0).is_err());
    }

    #[test]
    fn baseline_is_seeded() {
        let cfg = small_env(0.05);
        let a = random_baseline(&cfg, 3, 8).unwrap();
        assert_eq!(a, random_baseline(&cfg, 3, 8).unwrap());
        assert_ne!(a[0], a[1]);
    }
}
