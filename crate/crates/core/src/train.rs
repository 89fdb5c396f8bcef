//! The training loop: collect a batch of episodes, then update the policy.

use rand_chacha::ChaCha8Rng;

use crate::centering::AverageTracker;
use crate::env::{FactorEnv, RewardSource};
use crate::error::TrainError;
use crate::par::Exec;
use crate::policy::PolicyModel;
use crate::ppo::{ppo_update, rollout, Adam, Batch, PpoConfig, UpdateStats};
use crate::shaping::Shaper;

/// Summary of one collect-and-update iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Iteration {
    pub env_steps: u64,
    pub episodes: usize,
    pub mean_length: f64,
    pub mean_terminal_reward: f64,
    pub r_bar: f64,
    pub update: UpdateStats,
}

pub struct Trainer<R> {
    pub model: PolicyModel,
    pub adam: Adam,
    pub env: FactorEnv<R>,
    pub shaper: Shaper,
    pub tracker: AverageTracker,
    /// Subtract the running average reward; when off the average stays 0.
    pub centering: bool,
    pub ppo: PpoConfig,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
    pub exec: Exec,
}

impl<R: RewardSource> Trainer<R> {
    pub fn new(
        model: PolicyModel,
        env: FactorEnv<R>,
        shaper: Shaper,
        tracker: AverageTracker,
        centering: bool,
        ppo: PpoConfig,
        rng: ChaCha8Rng,
        exec: Exec,
    ) -> Trainer<R> {
        Trainer {
            adam: Adam::new(model.n_params(), ppo.lr),
            model,
            env,
            shaper,
            tracker,
            centering,
            ppo,
            rng,
            env_steps: 0,
            exec,
        }
    }

    /// Collects one batch with the current policy.
    pub fn collect(&mut self) -> Result<Batch, TrainError> {
        let tracker = if self.centering {
            Some(&mut self.tracker)
        } else {
            None
        };
        let batch = rollout(
            &self.model,
            &mut self.env,
            &self.shaper,
            tracker,
            self.ppo.batch_steps,
            &self.ppo,
            &mut self.rng,
        )?;
        self.env_steps += batch.n_steps() as u64;
        Ok(batch)
    }

    pub fn iterate(&mut self) -> Result<Iteration, TrainError> {
        let batch = self.collect()?;
        let update = ppo_update(
            &mut self.model,
            &mut self.adam,
            &batch,
            &self.ppo,
            self.exec,
            &mut self.rng,
        )?;
        Ok(Iteration {
            env_steps: self.env_steps,
            episodes: batch.episodes.len(),
            mean_length: batch.mean_length(),
            mean_terminal_reward: batch.mean_terminal_reward(),
            r_bar: self.tracker.mean,
            update,
        })
    }
}
