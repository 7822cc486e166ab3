//! Environments for language-conditioned agents.
//!
//! Every environment emits exactly one token per step alongside a small
//! image (a one-hot symbol grid or RGB pixels) and accepts a factored
//! action: a discrete movement/interaction choice plus an optional token.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod chain;
pub mod grammar;
pub mod homegrid;
pub mod langroom;
pub mod stream;
pub mod trace;
pub mod vocab;

pub use chain::{ChainConfig, ChainEnv};
pub use grammar::{Corpus, Grammar};
pub use homegrid::{HintMode, HomeGridConfig, HomeGridLite};
pub use langroom::{LangRoom, LangRoomConfig};
pub use stream::LanguageStream;
pub use vocab::{Vocab, PAD};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// How image bytes are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    /// One-hot channel planes with values in {0, 1}.
    Symbols,
    /// RGB bytes; divide by 255 for `[0, 1]` reals.
    Pixels,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsSpace {
    /// `[channels, height, width]`, stored channel-major.
    pub image: [usize; 3],
    pub kind: ImageKind,
    pub vocab: usize,
}

impl ObsSpace {
    pub fn image_len(&self) -> usize {
        self.image.iter().product()
    }
}

/// `moves` discrete choices plus, when `tokens > 0`, one token per step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub moves: usize,
    pub tokens: usize,
}

impl ActionSpace {
    pub fn has_tokens(&self) -> bool {
        self.tokens > 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub movement: usize,
    /// Spoken token; [`PAD`] is silence.
    pub token: usize,
}

impl Action {
    pub fn movement(movement: usize) -> Self {
        Self { movement, token: PAD }
    }

    pub fn new(movement: usize, token: usize) -> Self {
        Self { movement, token }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub image: Vec<u8>,
    pub token: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Current task instruction, if the environment has one.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub task: Option<String>,
    /// Event tags such as `answer_correct` or `task_done`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub events: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvStep {
    pub obs: Observation,
    pub reward: f64,
    /// 0 on the final step of an episode, 1 otherwise.
    pub cont: bool,
    pub is_first: bool,
    pub is_last: bool,
    pub info: StepInfo,
}

pub trait Env: Send {
    fn obs_space(&self) -> ObsSpace;
    fn action_space(&self) -> ActionSpace;
    /// Starts a new episode and returns its first observation.
    fn reset(&mut self) -> EnvStep;
    fn step(&mut self, action: &Action) -> Result<EnvStep, EnvError>;
}

/// Environment selection as it appears in run configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvConfig {
    Langroom(LangRoomConfig),
    Homegrid(HomeGridConfig),
    Chain(ChainConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Langroom(LangRoomConfig::default())
    }
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Langroom(_) => "langroom",
            EnvConfig::Homegrid(_) => "homegrid",
            EnvConfig::Chain(_) => "chain",
        }
    }

    pub fn build(&self, seed: u64) -> Result<Box<dyn Env>, EnvError> {
        Ok(match self {
            EnvConfig::Langroom(c) => Box::new(LangRoom::new(c.clone(), seed)?),
            EnvConfig::Homegrid(c) => Box::new(HomeGridLite::new(c.clone(), seed)?),
            EnvConfig::Chain(c) => Box::new(ChainEnv::new(c.clone(), seed)?),
        })
    }
}

pub(crate) fn invalid_token(token: usize, tokens: usize) -> EnvError {
    EnvError::InvalidAction(format!("token id {token} outside the {tokens}-token action space"))
}
