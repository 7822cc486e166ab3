//! Acting, replay, interleaved training, text pretraining, checkpoints
//! and metrics.

pub mod agent;
pub mod config;
pub mod inspect;
pub mod metrics;
pub mod pretrain;
pub mod replay;
pub mod trainer;

pub use agent::{ActMode, ActingState, Agent, UpdateMetrics};
pub use config::{PretrainConfig, RunConfig, TrainConfig, PRESETS};
pub use inspect::{agent_checkpoint, imagine_paths, load_agent, rollout_episode, ImaginedPath, RolloutStep};
pub use metrics::{Metrics, Record};
pub use pretrain::{pretrain_loop, PretrainReport, TextCorpus};
pub use replay::{ReplayBuffer, Transition};
pub use trainer::{evaluate_agent, substream, Collector, EpisodeDone, EvalReport, TrainSchedule, Trainer};
