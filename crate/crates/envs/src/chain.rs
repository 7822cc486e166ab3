//! Deterministic chain MDP for learning smoke tests.
//!
//! States `0..n` in a row, start at 0. Action 0 moves left, action 1 moves
//! right (clamped at the ends). Reward 1 on every step that lands in the
//! last state. Episodes last `horizon` steps.

use serde::{Deserialize, Serialize};

use crate::vocab::PAD;
use crate::{Action, ActionSpace, Env, EnvError, EnvStep, ImageKind, ObsSpace, Observation, StepInfo};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub states: usize,
    pub horizon: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { states: 3, horizon: 10 }
    }
}

#[derive(Clone, Debug)]
pub struct ChainEnv {
    config: ChainConfig,
    state: usize,
    t: usize,
}

impl ChainEnv {
    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;

    pub fn new(config: ChainConfig, _seed: u64) -> Result<Self, EnvError> {
        if config.states < 2 || config.horizon == 0 {
            return Err(EnvError::Config(format!(
                "chain needs >= 2 states and a positive horizon, got {config:?}"
            )));
        }
        Ok(Self { config, state: 0, t: 0 })
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Return of always moving right.
    pub fn expert_return(&self) -> f64 {
        let n = self.config.states;
        self.config.horizon.saturating_sub(n - 2) as f64
    }

    /// Exact expected return of the uniform random policy.
    pub fn random_return(&self) -> f64 {
        let n = self.config.states;
        let mut dist = vec![0.0; n];
        dist[0] = 1.0;
        let mut total = 0.0;
        for _ in 0..self.config.horizon {
            let mut next = vec![0.0; n];
            for (s, p) in dist.iter().enumerate() {
                next[s.saturating_sub(1)] += 0.5 * p;
                next[(s + 1).min(n - 1)] += 0.5 * p;
            }
            total += next[n - 1];
            dist = next;
        }
        total
    }

    fn observe(&self, reward: f64, is_first: bool) -> EnvStep {
        let mut image = vec![0u8; self.config.states];
        image[self.state] = 1;
        let last = self.t >= self.config.horizon;
        EnvStep {
            obs: Observation { image, token: PAD },
            reward,
            cont: !last,
            is_first,
            is_last: last,
            info: StepInfo::default(),
        }
    }
}

impl Env for ChainEnv {
    fn obs_space(&self) -> ObsSpace {
        ObsSpace {
            image: [self.config.states, 1, 1],
            kind: ImageKind::Symbols,
            vocab: 1,
        }
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace { moves: 2, tokens: 0 }
    }

    fn reset(&mut self) -> EnvStep {
        self.state = 0;
        self.t = 0;
        self.observe(0.0, true)
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep, EnvError> {
        let n = self.config.states;
        self.state = match action.movement {
            Self::LEFT => self.state.saturating_sub(1),
            Self::RIGHT => (self.state + 1).min(n - 1),
            m => return Err(EnvError::InvalidAction(format!("chain movement {m}"))),
        };
        if action.token != PAD {
            return Err(crate::invalid_token(action.token, 0));
        }
        self.t += 1;
        let reward = if self.state == n - 1 { 1.0 } else { 0.0 };
        Ok(self.observe(reward, false))
    }
}
