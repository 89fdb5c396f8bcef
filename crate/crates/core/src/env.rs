//! The factor-mining MDP: states are token prefixes, actions are tokens,
//! transitions append the action, and only the final step is rewarded.

use std::ops::Range;
use std::sync::Arc;

use crate::data::{Panel, TargetMatrix};
use crate::error::EnvError;
use crate::expr::{parse_rpn, Grammar, StackState, TokenSequence};
use crate::pool::FactorPool;
use crate::vocab::{TokenId, Vocabulary};

/// Reward for an invalid or unevaluable formula.
pub const INVALID_REWARD: f64 = -1.0;

/// Scores completed formulas.
pub trait RewardSource {
    fn terminal_reward(&mut self, seq: &TokenSequence) -> f64;
}

impl<F: FnMut(&TokenSequence) -> f64> RewardSource for F {
    fn terminal_reward(&mut self, seq: &TokenSequence) -> f64 {
        self(seq)
    }
}

/// Rewards a formula with the pool's combination IC after admitting it.
#[derive(Debug, Clone)]
pub struct PoolReward {
    pub vocab: Arc<Vocabulary>,
    pub panel: Arc<Panel>,
    pub target: Arc<TargetMatrix>,
    pub pool: FactorPool,
}

impl PoolReward {
    pub fn train_days(&self) -> Range<usize> {
        self.pool.train_days()
    }
}

impl RewardSource for PoolReward {
    fn terminal_reward(&mut self, seq: &TokenSequence) -> f64 {
        let Ok(tree) = parse_rpn(seq, &self.vocab) else {
            return INVALID_REWARD;
        };
        match self
            .pool
            .admit(&tree, &self.vocab, &self.panel, &self.target)
        {
            Ok(ic) => ic,
            Err(e) => {
                log::trace!("rejected {}: {e}", seq.to_text(&self.vocab));
                INVALID_REWARD
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminal {
    None,
    Sep,
    /// The episode hit the length limit; its final SEP was forced.
    LengthCap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub prefix: TokenSequence,
    pub stack: StackState,
    pub done: bool,
    pub terminal: Terminal,
}

impl EnvState {
    pub fn t(&self) -> usize {
        self.prefix.len()
    }
}

impl Default for EnvState {
    fn default() -> Self {
        EnvState {
            prefix: TokenSequence::new(),
            stack: StackState::default(),
            done: false,
            terminal: Terminal::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

pub struct FactorEnv<R> {
    grammar: Arc<Grammar>,
    reward: R,
    state: EnvState,
}

impl<R: RewardSource> FactorEnv<R> {
    pub fn new(grammar: Arc<Grammar>, reward: R) -> FactorEnv<R> {
        FactorEnv {
            grammar,
            reward,
            state: EnvState::default(),
        }
    }

    pub fn grammar(&self) -> &Arc<Grammar> {
        &self.grammar
    }

    pub fn reward_source(&self) -> &R {
        &self.reward
    }

    pub fn reward_source_mut(&mut self) -> &mut R {
        &mut self.reward
    }

    pub fn into_reward_source(self) -> R {
        self.reward
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn reset(&mut self) -> &EnvState {
        self.state = EnvState::default();
        &self.state
    }

    pub fn legal_actions(&self) -> Vec<bool> {
        if self.state.done {
            return vec![false; self.grammar.vocab().len()];
        }
        self.grammar.mask_for(self.state.stack, self.state.t())
    }

    pub fn step(&mut self, action: TokenId) -> Result<StepOutcome, EnvError> {
        if self.state.done {
            return Err(EnvError::Finished);
        }
        if !self
            .grammar
            .legal_after(self.state.stack, self.state.t(), action)
        {
            return Err(EnvError::IllegalAction(action));
        }
        self.state.stack = self
            .grammar
            .transition(self.state.stack, action)
            .expect("legal actions have a transition");
        self.state.prefix.push(action);
        if action != self.grammar.vocab().sep() {
            return Ok(StepOutcome {
                reward: 0.0,
                done: false,
            });
        }
        self.state.done = true;
        self.state.terminal = if self.state.t() >= self.grammar.max_len() {
            Terminal::LengthCap
        } else {
            Terminal::Sep
        };
        let reward = self.terminal_reward(&self.state.prefix.clone());
        Ok(StepOutcome { reward, done: true })
    }

    /// Reward of a complete sequence; malformed or unevaluable ones get -1.
    pub fn terminal_reward(&mut self, seq: &TokenSequence) -> f64 {
        if parse_rpn(seq, self.grammar.vocab()).is_err() {
            return INVALID_REWARD;
        }
        let r = self.reward.terminal_reward(seq);
        if r.is_finite() {
            r
        } else {
            INVALID_REWARD
        }
    }
}
