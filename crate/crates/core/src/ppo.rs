//! Clipped-surrogate PPO with generalized advantage estimation.
//!
//! Per-sample gradients of a minibatch are computed in parallel and summed
//! in sample order, so results do not depend on the thread count.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, Tape};
use crate::env::{Env, EnvError, EnvSnapshot, Observation};
use crate::policy::{self, Policy, PolicyError};
use crate::rng::{self, RngState};
use crate::scenario::OutageScenario;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("non-finite loss at step {step} (policy {policy_loss}, value {value_loss}, entropy {entropy})")]
    NonFiniteLoss {
        step: u64,
        policy_loss: f64,
        value_loss: f64,
        entropy: f64,
    },
    #[error("training pool is empty")]
    EmptyPool,
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("corrupt trainer state: {0}")]
    State(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub rollout_len: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Env steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Episodes in the curve's moving average.
    pub moving_avg_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 200_000,
            rollout_len: 2048,
            minibatch: 256,
            epochs: 10,
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            lr: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            seed: 0,
            checkpoint_interval: 0,
            moving_avg_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if self.total_steps == 0 || self.rollout_len == 0 || self.minibatch == 0 || self.epochs == 0
        {
            return bad("step counts and batch sizes must be positive");
        }
        if !(self.lr > 0.0) || self.moving_avg_window == 0 {
            return bad("learning rate and moving-average window must be positive");
        }
        if self.max_grad_norm < 0.0 || self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("coefficients must be non-negative");
        }
        Ok(())
    }
}

/// `δ_t = r_t + γ v_{t+1} (1 - done_t) - v_t`,
/// `A_t = δ_t + γ λ (1 - done_t) A_{t+1}`, returns `A + v`.
/// `values` carries one extra bootstrap entry for the state after the last
/// transition.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(TrainError::Length(format!(
            "{n} rewards, {} values, {} dones",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// `min(ρ A, clip(ρ, 1-ε, 1+ε) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub observation: Observation,
    pub action: Vec<bool>,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    /// Value of the state following the last transition (0 when it ended
    /// an episode).
    pub bootstrap_value: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<(), TrainError> {
        let rewards: Vec<f64> = self.transitions.iter().map(|t| t.reward).collect();
        let mut values: Vec<f64> = self.transitions.iter().map(|t| t.value).collect();
        values.push(self.bootstrap_value);
        let dones: Vec<bool> = self.transitions.iter().map(|t| t.done).collect();
        let (adv, ret) = gae(&rewards, &values, &dones, gamma, lambda)?;
        if adv.iter().any(|a| !a.is_finite()) {
            return Err(TrainError::State("non-finite advantage".into()));
        }
        self.advantages = adv;
        self.returns = ret;
        Ok(())
    }
}

/// Adam with bias correction; moments are kept in parameter-store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, params: &policy::ParamStore) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, p)| Matrix::zeros(p.nrows(), p.ncols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut policy::ParamStore, grads: &[Matrix]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.at_mut(i);
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

struct SampleOut {
    grads: Vec<Option<Matrix>>,
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    ratio: f64,
}

fn sample_gradient(
    pol: &Policy,
    tr: &Transition,
    advantage: f64,
    ret: f64,
    cfg: &TrainConfig,
    weight: f64,
) -> Result<SampleOut, TrainError> {
    let mut t = Tape::new();
    let vars = pol.forward(&mut t, &tr.observation.policy_input())?;
    let lp = policy::log_prob_on_tape(&mut t, &vars, &tr.action);
    let lp = t.add_scalar(lp, -tr.log_prob);
    let ratio = t.exp(lp);
    let s1 = t.scale(ratio, advantage);
    let clipped = t.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let s2 = t.scale(clipped, advantage);
    let surr = t.min(s1, s2);
    let pl = t.scale(surr, -1.0);
    let dv = t.add_scalar(vars.value, -ret);
    let vl = t.powi(dv, 2);
    let ent = policy::entropy_on_tape(&mut t, &vars);
    let a = t.scale(vl, cfg.value_coef);
    let b = t.scale(ent, -cfg.entropy_coef);
    let total = t.add(pl, a);
    let total = t.add(total, b);
    let loss = t.scale(total, weight);
    let grads = t.backward(loss, pol.params.len())?.grads;
    Ok(SampleOut {
        grads,
        policy_loss: t.scalar(pl),
        value_loss: t.scalar(vl),
        entropy: t.scalar(ent),
        ratio: t.scalar(ratio),
    })
}

/// Runs `cfg.epochs` passes of shuffled minibatch updates over the buffer.
/// Advantages are normalized over the whole buffer first.
pub fn ppo_update(
    pol: &mut Policy,
    adam: &mut Adam,
    buffer: &RolloutBuffer,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<UpdateMetrics, TrainError> {
    let n = buffer.len();
    if buffer.advantages.len() != n || buffer.returns.len() != n {
        return Err(TrainError::Length("advantages not computed".into()));
    }
    let mean = buffer.advantages.iter().sum::<f64>() / n as f64;
    let var = buffer
        .advantages
        .iter()
        .map(|a| (a - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt().max(1e-8);
    let adv: Vec<f64> = buffer.advantages.iter().map(|a| (a - mean) / std).collect();

    let mut totals = UpdateMetrics::default();
    let mut counted = 0usize;
    let mut clipped = 0usize;
    let mut batches = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let weight = 1.0 / chunk.len() as f64;
            let policy_ref = &*pol;
            let outs: Vec<SampleOut> = chunk
                .par_iter()
                .map(|&i| {
                    sample_gradient(
                        policy_ref,
                        &buffer.transitions[i],
                        adv[i],
                        buffer.returns[i],
                        cfg,
                        weight,
                    )
                })
                .collect::<Result<_, _>>()?;
            let mut grads: Vec<Matrix> = pol
                .params
                .iter()
                .map(|(_, p)| Matrix::zeros(p.nrows(), p.ncols()))
                .collect();
            let (mut pl, mut vl, mut en) = (0.0, 0.0, 0.0);
            for o in &outs {
                for (acc, g) in grads.iter_mut().zip(&o.grads) {
                    if let Some(g) = g {
                        *acc += g;
                    }
                }
                pl += o.policy_loss * weight;
                vl += o.value_loss * weight;
                en += o.entropy * weight;
                totals.mean_ratio += o.ratio;
                if (o.ratio - 1.0).abs() > cfg.clip {
                    clipped += 1;
                }
                counted += 1;
            }
            let norm = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
            if !(pl.is_finite() && vl.is_finite() && en.is_finite() && norm.is_finite()) {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    policy_loss: pl,
                    value_loss: vl,
                    entropy: en,
                });
            }
            if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                let s = cfg.max_grad_norm / norm;
                for g in &mut grads {
                    *g *= s;
                }
            }
            adam.step(&mut pol.params, &grads);
            totals.policy_loss += pl;
            totals.value_loss += vl;
            totals.entropy += en;
            totals.grad_norm += norm;
            batches += 1;
        }
    }
    let b = batches.max(1) as f64;
    Ok(UpdateMetrics {
        policy_loss: totals.policy_loss / b,
        value_loss: totals.value_loss / b,
        entropy: totals.entropy / b,
        mean_ratio: totals.mean_ratio / counted.max(1) as f64,
        clip_fraction: clipped as f64 / counted.max(1) as f64,
        grad_norm: totals.grad_norm / b,
    })
}

/// One finished episode on the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// Env steps taken when the episode ended.
    pub step: u64,
    pub episode: u64,
    /// Mean per-step reward of the episode.
    pub reward: f64,
    pub moving_avg: f64,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("step,episode,reward,moving_avg\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{:?}\n",
            r.step, r.episode, r.reward, r.moving_avg
        ));
    }
    out
}

/// Serializable trainer position, excluding parameters and moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub step: u64,
    pub episode: u64,
    pub updates: u64,
    pub rollout_rng: RngState,
    pub minibatch_rng: RngState,
    pub env: Option<EnvSnapshot>,
    pub episode_reward_sum: f64,
    pub episode_len: u64,
    pub curve: Vec<CurveRow>,
    pub adam_t: u64,
    /// Digest of the training pool, checked on resume.
    pub pool_digest: String,
}

pub fn pool_digest(pool: &[OutageScenario]) -> String {
    let text = crate::scenario::write_scenarios("", pool);
    crate::grid::hex_digest(text.as_bytes())
}

pub struct Trainer {
    pub config: TrainConfig,
    pub policy: Policy,
    pub adam: Adam,
    env: Env,
    pool: Arc<Vec<OutageScenario>>,
    rollout_rng: ChaCha8Rng,
    minibatch_rng: ChaCha8Rng,
    step: u64,
    episode: u64,
    updates: u64,
    current: Option<Observation>,
    episode_reward_sum: f64,
    episode_len: u64,
    curve: Vec<CurveRow>,
    last_metrics: Option<UpdateMetrics>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        policy: Policy,
        env: Env,
        pool: Arc<Vec<OutageScenario>>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if pool.is_empty() {
            return Err(TrainError::EmptyPool);
        }
        let adam = Adam::new(config.lr, &policy.params);
        Ok(Self {
            rollout_rng: rng::stream(config.seed, "rollout"),
            minibatch_rng: rng::stream(config.seed, "minibatch"),
            config,
            policy,
            adam,
            env,
            pool,
            step: 0,
            episode: 0,
            updates: 0,
            current: None,
            episode_reward_sum: 0.0,
            episode_len: 0,
            curve: Vec::new(),
            last_metrics: None,
        })
    }

    /// Continues from a saved position. `config` may differ from the saved
    /// one only in `total_steps` and `checkpoint_interval`.
    pub fn resume(
        config: TrainConfig,
        policy: Policy,
        adam: Adam,
        mut env: Env,
        pool: Arc<Vec<OutageScenario>>,
        state: &TrainerState,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let comparable = TrainConfig {
            total_steps: state.config.total_steps,
            checkpoint_interval: state.config.checkpoint_interval,
            ..config.clone()
        };
        if comparable != state.config {
            return Err(TrainError::State(
                "train config differs from the checkpoint".into(),
            ));
        }
        if pool_digest(&pool) != state.pool_digest {
            return Err(TrainError::State(
                "training scenarios differ from the checkpoint".into(),
            ));
        }
        let restore = |r: &RngState| {
            r.restore()
                .ok_or_else(|| TrainError::State("bad rng state".into()))
        };
        let current = match &state.env {
            Some(snap) => Some(env.restore(snap)?),
            None => None,
        };
        Ok(Self {
            rollout_rng: restore(&state.rollout_rng)?,
            minibatch_rng: restore(&state.minibatch_rng)?,
            config,
            policy,
            adam,
            env,
            pool,
            step: state.step,
            episode: state.episode,
            updates: state.updates,
            current,
            episode_reward_sum: state.episode_reward_sum,
            episode_len: state.episode_len,
            curve: state.curve.clone(),
            last_metrics: None,
        })
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            config: self.config.clone(),
            step: self.step,
            episode: self.episode,
            updates: self.updates,
            rollout_rng: RngState::capture(&self.rollout_rng),
            minibatch_rng: RngState::capture(&self.minibatch_rng),
            env: if self.current.is_some() {
                self.env.snapshot()
            } else {
                None
            },
            episode_reward_sum: self.episode_reward_sum,
            episode_len: self.episode_len,
            curve: self.curve.clone(),
            adam_t: self.adam.t,
            pool_digest: pool_digest(&self.pool),
        }
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn curve(&self) -> &[CurveRow] {
        &self.curve
    }

    pub fn last_metrics(&self) -> Option<UpdateMetrics> {
        self.last_metrics
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.total_steps
    }

    fn finish_episode(&mut self) {
        self.episode += 1;
        let reward = self.episode_reward_sum / self.episode_len.max(1) as f64;
        let window = self.config.moving_avg_window;
        let start = self.curve.len().saturating_sub(window - 1);
        let tail = &self.curve[start..];
        let moving_avg =
            (tail.iter().map(|r| r.reward).sum::<f64>() + reward) / (tail.len() + 1) as f64;
        self.curve.push(CurveRow {
            step: self.step,
            episode: self.episode,
            reward,
            moving_avg,
        });
        self.episode_reward_sum = 0.0;
        self.episode_len = 0;
    }

    /// Steps the environment `length` times with sampled actions,
    /// resetting to a uniformly drawn training scenario after each episode.
    pub fn collect_rollouts(&mut self, length: usize) -> Result<RolloutBuffer, TrainError> {
        let mut buffer = RolloutBuffer::default();
        for _ in 0..length {
            let obs = match self.current.take() {
                Some(o) => o,
                None => {
                    let idx = self.rollout_rng.gen_range(0..self.pool.len());
                    let scenario = self.pool[idx].clone();
                    self.env.reset(&scenario)?
                }
            };
            let out = self.policy.evaluate(&obs.policy_input())?;
            let (action, log_prob) =
                policy::sample_action(&out.probs, &obs.action_mask, &mut self.rollout_rng);
            let step = self.env.step(&action)?;
            self.step += 1;
            self.episode_reward_sum += step.reward;
            self.episode_len += 1;
            buffer.transitions.push(Transition {
                observation: obs,
                action,
                log_prob,
                reward: step.reward,
                value: out.value,
                done: step.done,
            });
            if step.done {
                self.finish_episode();
            } else {
                self.current = Some(step.observation);
            }
        }
        buffer.bootstrap_value = match &self.current {
            Some(o) => self.policy.evaluate(&o.policy_input())?.value,
            None => 0.0,
        };
        buffer.compute_advantages(self.config.gamma, self.config.lambda)?;
        Ok(buffer)
    }

    /// One collect-and-update cycle. Returns false once `total_steps` is
    /// reached.
    pub fn iterate(&mut self) -> Result<bool, TrainError> {
        if self.is_finished() {
            return Ok(false);
        }
        let remaining = (self.config.total_steps - self.step) as usize;
        let len = self.config.rollout_len.min(remaining);
        let buffer = self.collect_rollouts(len)?;
        let metrics = ppo_update(
            &mut self.policy,
            &mut self.adam,
            &buffer,
            &self.config,
            &mut self.minibatch_rng,
            self.step,
        )?;
        self.updates += 1;
        self.last_metrics = Some(metrics);
        Ok(!self.is_finished())
    }

    /// Trains to `total_steps`, calling `checkpoint` whenever another
    /// `checkpoint_interval` steps have passed.
    pub fn run<E>(&mut self, mut checkpoint: impl FnMut(&Trainer) -> Result<(), E>) -> Result<(), E>
    where
        E: From<TrainError>,
    {
        let interval = self.config.checkpoint_interval;
        while !self.is_finished() {
            let before = self.step;
            self.iterate()?;
            if interval > 0 && self.step / interval > before / interval {
                checkpoint(self)?;
            }
        }
        Ok(())
    }
}
