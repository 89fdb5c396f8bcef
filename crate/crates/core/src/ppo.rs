//! Episode collection and the clipped policy-gradient update.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centering::AverageTracker;
use crate::env::{FactorEnv, RewardSource};
use crate::error::{PolicyError, TrainError};
use crate::par::{map_indices, Exec};
use crate::policy::{masked_log_softmax, sample_action, PolicyModel};
use crate::shaping::Shaper;
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    /// Environment steps collected per update; episodes are never cut.
    pub batch_steps: usize,
    /// Approximate steps per minibatch; minibatches hold whole episodes.
    pub minibatch_steps: usize,
    pub lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            epochs: 4,
            batch_steps: 2048,
            minibatch_steps: 512,
            lr: 3e-4,
            gamma: 1.0,
            gae_lambda: 0.95,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            normalize_advantages: true,
        }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One descent step along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// One environment step as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub action: usize,
    pub mask: Vec<bool>,
    pub logp: f64,
    pub value: f64,
    pub base_reward: f64,
    pub shaped_reward: f64,
    /// Average-reward estimate in effect when the reward arrived.
    pub r_bar: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> Vec<TokenId> {
        self.steps
            .iter()
            .map(|s| TokenId(s.action as u16))
            .collect()
    }

    /// Reward of the finished formula.
    pub fn terminal_reward(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.base_reward)
    }

    /// Model inputs: the begin token, then every action but the last.
    pub fn inputs(&self, model: &PolicyModel) -> Vec<usize> {
        std::iter::once(model.begin_input())
            .chain(self.steps[..self.steps.len() - 1].iter().map(|s| s.action))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub episodes: Vec<Trajectory>,
}

impl Batch {
    pub fn n_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    pub fn mean_length(&self) -> f64 {
        self.n_steps() as f64 / self.episodes.len().max(1) as f64
    }

    pub fn mean_terminal_reward(&self) -> f64 {
        self.episodes
            .iter()
            .map(|e| e.terminal_reward())
            .sum::<f64>()
            / self.episodes.len().max(1) as f64
    }
}

/// Generalized advantage estimates on centered rewards. Fills `advantage`
/// and `ret` (the value target) of every step.
pub fn compute_advantages(traj: &mut Trajectory, gamma: f64, lambda: f64) {
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for s in traj.steps.iter_mut().rev() {
        let delta = (s.shaped_reward - s.r_bar) + gamma * next_value - s.value;
        s.advantage = delta + gamma * lambda * next_adv;
        s.ret = s.advantage + s.value;
        next_adv = s.advantage;
        next_value = s.value;
    }
}

/// Plays one episode with the current parameters (dropout off).
pub fn play_episode<R: RewardSource, G: Rng + ?Sized>(
    model: &PolicyModel,
    env: &mut FactorEnv<R>,
    rng: &mut G,
) -> Result<Trajectory, TrainError> {
    env.reset();
    let mut state = model.initial_state();
    let mut input = model.begin_input();
    let mut steps = Vec::new();
    loop {
        let mask = env.legal_actions();
        let (logits, value) = model.step(&mut state, input);
        let (action, logp) = sample_action(&logits, &mask, rng)?;
        let out = env.step(TokenId(action as u16))?;
        steps.push(Step {
            action,
            mask,
            logp,
            value,
            base_reward: out.reward,
            shaped_reward: out.reward,
            r_bar: 0.0,
            advantage: 0.0,
            ret: 0.0,
        });
        if out.done {
            return Ok(Trajectory { steps });
        }
        input = action;
    }
}

/// Collects whole episodes until at least `n_steps` steps are gathered.
/// Rewards are shaped per episode, the average-reward tracker (if any) is
/// updated once per step, and advantages are filled in.
pub fn rollout<R: RewardSource, G: Rng + ?Sized>(
    model: &PolicyModel,
    env: &mut FactorEnv<R>,
    shaper: &Shaper,
    mut tracker: Option<&mut AverageTracker>,
    n_steps: usize,
    cfg: &PpoConfig,
    rng: &mut G,
) -> Result<Batch, TrainError> {
    let mut episodes = Vec::new();
    let mut collected = 0;
    while collected < n_steps.max(1) {
        let mut traj = play_episode(model, env, rng)?;
        let base: Vec<f64> = traj.steps.iter().map(|s| s.base_reward).collect();
        let shaped = shaper.shape_episode(&traj.actions(), &base);
        for (s, sh) in traj.steps.iter_mut().zip(&shaped) {
            s.shaped_reward = sh.shaped;
            if let Some(t) = tracker.as_deref_mut() {
                s.r_bar = t.mean;
                t.update(sh.shaped)?;
            }
        }
        compute_advantages(&mut traj, cfg.gamma, cfg.gae_lambda);
        collected += traj.len();
        episodes.push(traj);
    }
    Ok(Batch { episodes })
}

/// Loss terms summed over the steps of some episodes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub steps: usize,
}

impl LossStats {
    fn add(&mut self, o: &LossStats) {
        self.loss += o.loss;
        self.surrogate += o.surrogate;
        self.value_loss += o.value_loss;
        self.entropy += o.entropy;
        self.approx_kl += o.approx_kl;
        self.clip_fraction += o.clip_fraction;
        self.steps += o.steps;
    }
}

/// The PPO loss of one episode, scaled by `weight`, and its gradient with
/// respect to the model outputs.
///
/// `loss = -min(psi A, clip(psi) A) + c_v (V - R)^2 - c_e H`, with
/// `psi = exp(logp - logp_behavior)`.
fn episode_loss(
    traj: &Trajectory,
    advantages: &[f64],
    logits: &[Vec<f64>],
    values: &[f64],
    cfg: &PpoConfig,
    weight: f64,
) -> Result<(LossStats, Vec<Vec<f64>>, Vec<f64>), PolicyError> {
    let mut stats = LossStats::default();
    let mut dlogits = Vec::with_capacity(traj.len());
    let mut dvalues = Vec::with_capacity(traj.len());
    for (t, s) in traj.steps.iter().enumerate() {
        let logp = masked_log_softmax(&logits[t], &s.mask)?;
        let lp = logp[s.action];
        let ratio = (lp - s.logp).exp();
        let a = advantages[t];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a;
        let surr = unclipped.min(clipped);
        // d surr / d lp: only the unclipped branch carries gradient
        let dsurr = if unclipped <= clipped { a * ratio } else { 0.0 };
        let mut entropy = 0.0;
        for &l in &logp {
            if l != f64::NEG_INFINITY {
                entropy -= l.exp() * l;
            }
        }
        let verr = values[t] - s.ret;
        let loss = -surr + cfg.value_coef * verr * verr - cfg.entropy_coef * entropy;
        let mut dl = vec![0.0; logits[t].len()];
        for (j, &l) in logp.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            let p = l.exp();
            let onehot = if j == s.action { 1.0 } else { 0.0 };
            dl[j] = weight * (-dsurr * (onehot - p) + cfg.entropy_coef * p * (l + entropy));
        }
        dlogits.push(dl);
        dvalues.push(weight * cfg.value_coef * 2.0 * verr);
        stats.loss += weight * loss;
        stats.surrogate += surr;
        stats.value_loss += verr * verr;
        stats.entropy += entropy;
        stats.approx_kl += (ratio - 1.0) - (lp - s.logp);
        stats.clip_fraction += f64::from(u8::from((ratio - 1.0).abs() > cfg.clip));
        stats.steps += 1;
    }
    Ok((stats, dlogits, dvalues))
}

/// Accumulates the gradient of a set of episodes into `grad`.
fn episodes_grad(
    model: &PolicyModel,
    episodes: &[(&Trajectory, &[f64])],
    cfg: &PpoConfig,
    weight: f64,
    dropout_seed: Option<(u64, u64)>,
    grad: &mut [f64],
) -> Result<LossStats, PolicyError> {
    let mut stats = LossStats::default();
    for (k, (traj, adv)) in episodes.iter().enumerate() {
        let inputs = traj.inputs(model);
        let fwd = match dropout_seed {
            Some((seed, base)) => {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(base + k as u64);
                model.forward_episode(&inputs, Some(&mut r))
            }
            None => model.forward_episode::<ChaCha8Rng>(&inputs, None),
        };
        let (s, dlogits, dvalues) = episode_loss(traj, adv, &fwd.logits, &fwd.values, cfg, weight)?;
        model.backward_episode(&fwd, &dlogits, &dvalues, grad);
        stats.add(&s);
    }
    Ok(stats)
}

/// Episodes per gradient work item. Fixed, so results do not depend on the
/// number of threads.
const GRAD_CHUNK: usize = 4;

/// Gradient of the mean per-step loss over `episodes`, summed chunk by
/// chunk in a fixed order.
fn minibatch_grad(
    model: &PolicyModel,
    episodes: &[(&Trajectory, &[f64])],
    cfg: &PpoConfig,
    dropout_seed: Option<u64>,
    exec: Exec,
) -> Result<(Vec<f64>, LossStats), PolicyError> {
    let n_steps: usize = episodes.iter().map(|(t, _)| t.len()).sum();
    if n_steps == 0 {
        return Err(PolicyError::EmptyBatch);
    }
    let weight = 1.0 / n_steps as f64;
    let n_chunks = episodes.len().div_ceil(GRAD_CHUNK);
    let parts = map_indices(exec, n_chunks, |c| {
        let lo = c * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(episodes.len());
        let mut g = vec![0.0; model.n_params()];
        let seed = dropout_seed.map(|s| (s, lo as u64));
        episodes_grad(model, &episodes[lo..hi], cfg, weight, seed, &mut g).map(|s| (g, s))
    });
    let mut grad = vec![0.0; model.n_params()];
    let mut stats = LossStats::default();
    for part in parts {
        let (g, s) = part?;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        stats.add(&s);
    }
    Ok((grad, stats))
}

/// Averages of the loss terms over one update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

fn normalized_advantages(batch: &Batch, normalize: bool) -> Vec<Vec<f64>> {
    let all: Vec<f64> = batch
        .episodes
        .iter()
        .flat_map(|e| e.steps.iter().map(|s| s.advantage))
        .collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    batch
        .episodes
        .iter()
        .map(|e| {
            e.steps
                .iter()
                .map(|s| {
                    if normalize && all.len() > 1 {
                        (s.advantage - mean) / (std + 1e-8)
                    } else {
                        s.advantage
                    }
                })
                .collect()
        })
        .collect()
}

/// Several epochs of clipped-surrogate updates over shuffled minibatches of
/// whole episodes. A non-finite gradient aborts the update and restores the
/// parameters and optimizer state from before it started.
pub fn ppo_update<G: Rng + ?Sized>(
    model: &mut PolicyModel,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &PpoConfig,
    exec: Exec,
    rng: &mut G,
) -> Result<UpdateStats, PolicyError> {
    if batch.episodes.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let advs = normalized_advantages(batch, cfg.normalize_advantages);
    let saved = (model.params.clone(), adam.clone());
    let mut out = UpdateStats::default();
    let mut total_steps = 0;
    let mut order: Vec<usize> = (0..batch.episodes.len()).collect();
    let use_dropout = model.config().dropout > 0.0 && model.config().layers > 1;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut start = 0;
        while start < order.len() {
            let mut end = start;
            let mut steps = 0;
            while end < order.len() && (steps < cfg.minibatch_steps || end == start) {
                steps += batch.episodes[order[end]].len();
                end += 1;
            }
            let items: Vec<(&Trajectory, &[f64])> = order[start..end]
                .iter()
                .map(|&i| (&batch.episodes[i], advs[i].as_slice()))
                .collect();
            let seed = if use_dropout {
                Some(rng.gen::<u64>())
            } else {
                None
            };
            let result = minibatch_grad(model, &items, cfg, seed, exec);
            let (mut grad, stats) = match result {
                Ok(r) => r,
                Err(e) => {
                    (model.params, *adam) = (saved.0, saved.1);
                    return Err(e);
                }
            };
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                (model.params, *adam) = (saved.0, saved.1);
                return Err(PolicyError::NonFiniteGradient);
            }
            if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                let k = cfg.max_grad_norm / norm;
                grad.iter_mut().for_each(|g| *g *= k);
            }
            adam.step(&mut model.params, &grad);
            out.surrogate += stats.surrogate;
            out.value_loss += stats.value_loss;
            out.entropy += stats.entropy;
            out.approx_kl += stats.approx_kl;
            out.clip_fraction += stats.clip_fraction;
            out.grad_norm += norm;
            out.minibatches += 1;
            total_steps += stats.steps;
            start = end;
        }
    }
    let n = total_steps.max(1) as f64;
    out.surrogate /= n;
    out.value_loss /= n;
    out.entropy /= n;
    out.approx_kl /= n;
    out.clip_fraction /= n;
    out.grad_norm /= out.minibatches.max(1) as f64;
    Ok(out)
}

/// Analytic gradient of the mean PPO loss over `batch` with dropout off;
/// advantages are used as stored.
pub fn loss_and_grad(
    model: &PolicyModel,
    batch: &Batch,
    cfg: &PpoConfig,
    exec: Exec,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let items: Vec<(&Trajectory, Vec<f64>)> = batch
        .episodes
        .iter()
        .map(|e| (e, e.steps.iter().map(|s| s.advantage).collect()))
        .collect();
    let refs: Vec<(&Trajectory, &[f64])> = items.iter().map(|(t, a)| (*t, a.as_slice())).collect();
    let (grad, stats) = minibatch_grad(model, &refs, cfg, None, exec)?;
    Ok((stats.loss, grad))
}

/// Random episodes over `n_actions` tokens with random legal masks, random
/// advantages and value targets, and behavior log-probabilities close to the
/// model's own so every ratio stays inside the clip range.
pub fn random_batch<G: Rng + ?Sized>(
    model: &PolicyModel,
    episodes: usize,
    max_len: usize,
    rng: &mut G,
) -> Batch {
    let n = model.n_actions();
    let mut out = Vec::new();
    for _ in 0..episodes {
        let len = rng.gen_range(1..=max_len);
        let mut steps = Vec::new();
        for _ in 0..len {
            let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
            let action = rng.gen_range(0..n);
            mask[action] = true;
            steps.push(Step {
                action,
                mask,
                logp: 0.0,
                value: 0.0,
                base_reward: 0.0,
                shaped_reward: 0.0,
                r_bar: 0.0,
                advantage: rng.gen_range(-1.0..1.0),
                ret: rng.gen_range(-1.0..1.0),
            });
        }
        let mut traj = Trajectory { steps };
        let fwd = model.forward_episode::<ChaCha8Rng>(&traj.inputs(model), None);
        for (t, s) in traj.steps.iter_mut().enumerate() {
            let logp = masked_log_softmax(&fwd.logits[t], &s.mask).expect("action is legal");
            s.logp = logp[s.action] + rng.gen_range(-0.05..0.05);
            s.value = fwd.values[t];
        }
        out.push(traj);
    }
    Batch { episodes: out }
}

/// Worst relative error between analytic and central-difference gradients
/// of the PPO loss, over `coords` randomly chosen parameters. Coordinates
/// where both gradients are below 1e-6 count as zero directions and are
/// skipped.
pub fn grad_check<G: Rng + ?Sized>(
    model: &PolicyModel,
    batch: &Batch,
    cfg: &PpoConfig,
    perturbation: f64,
    coords: usize,
    rng: &mut G,
) -> Result<f64, PolicyError> {
    let (_, grad) = loss_and_grad(model, batch, cfg, Exec::Sequential)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let mut picks: Vec<usize> = (0..model.n_params()).collect();
    picks.shuffle(rng);
    for &i in picks.iter().take(coords) {
        let orig = probe.params[i];
        probe.params[i] = orig + perturbation;
        let (up, _) = loss_and_grad(&probe, batch, cfg, Exec::Sequential)?;
        probe.params[i] = orig - perturbation;
        let (down, _) = loss_and_grad(&probe, batch, cfg, Exec::Sequential)?;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * perturbation);
        let scale = grad[i].abs().max(numeric.abs());
        // below this, central differences are dominated by rounding
        if scale < 1e-6 {
            continue;
        }
        worst = worst.max((grad[i] - numeric).abs() / scale);
    }
    Ok(worst)
}
