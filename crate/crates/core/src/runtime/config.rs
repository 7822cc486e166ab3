use serde::{Deserialize, Serialize};

use dynalang_envs::{ChainConfig, EnvConfig, HintMode, HomeGridConfig, LangRoomConfig};

use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::worldmodel::WorldModelConfig;

/// Everything one run needs. Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    /// Parallel environment instances, stepped round-robin.
    pub envs: usize,
    pub model: WorldModelConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Environment steps to collect in total.
    pub steps: u64,
    /// Uniform-random steps collected before training starts.
    pub prefill: u64,
    pub batch_size: usize,
    pub batch_length: usize,
    /// Replayed steps per environment step.
    pub train_ratio: f64,
    pub model_lr: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub clip_norm: f64,
    pub replay_capacity: usize,
    /// Environment steps between evaluations; 0 disables.
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Environment steps between checkpoints; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Acting and training on separate threads.
    pub threaded: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            prefill: 1_000,
            batch_size: 16,
            batch_length: 64,
            train_ratio: 16.0,
            model_lr: 1e-4,
            actor_lr: 3e-5,
            critic_lr: 3e-5,
            clip_norm: 100.0,
            replay_capacity: 1_000_000,
            eval_every: 0,
            eval_episodes: 10,
            checkpoint_every: 0,
            threaded: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub batch_length: usize,
    pub lr: f64,
    /// Corpus file (one document per line); the synthetic grammar corpus
    /// is generated when absent.
    pub corpus: Option<String>,
    pub documents: usize,
    pub heldout: usize,
    /// Prior samples per token when scoring held-out text.
    pub eval_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5_000,
            batch_size: 16,
            batch_length: 32,
            lr: 3e-4,
            corpus: None,
            documents: 5_000,
            heldout: 100,
            eval_samples: 8,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvConfig::default(),
            envs: 1,
            model: WorldModelConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

/// Names accepted by [`RunConfig::preset`].
pub const PRESETS: [&str; 7] = [
    "langroom_small",
    "langroom_large_vocab",
    "homegrid",
    "homegrid_futures",
    "chain",
    "grammar_pretrain",
    "smoke",
];

impl RunConfig {
    /// Desk-scale settings that share one model architecture per env.
    pub fn preset(name: &str) -> Result<Self> {
        let small_model = WorldModelConfig {
            deter: 128,
            hidden: 128,
            groups: 8,
            classes: 8,
            ..WorldModelConfig::default()
        };
        let small_policy = PolicyConfig {
            hidden: 128,
            ..PolicyConfig::default()
        };
        let langroom_train = TrainConfig {
            steps: 200_000,
            batch_size: 16,
            batch_length: 64,
            train_ratio: 16.0,
            model_lr: 3e-4,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            eval_every: 20_000,
            ..TrainConfig::default()
        };
        let cfg = match name {
            "langroom_small" => Self {
                env: EnvConfig::Langroom(LangRoomConfig::default()),
                model: small_model,
                policy: small_policy,
                train: langroom_train,
                ..Self::default()
            },
            "langroom_large_vocab" => Self {
                env: EnvConfig::Langroom(LangRoomConfig {
                    vocab_size: 10_000,
                    ..LangRoomConfig::default()
                }),
                model: small_model,
                policy: PolicyConfig {
                    lm_reg: true,
                    ..small_policy
                },
                train: langroom_train,
                ..Self::default()
            },
            "homegrid" | "homegrid_futures" => Self {
                env: EnvConfig::Homegrid(HomeGridConfig {
                    hints: if name == "homegrid" { HintMode::None } else { HintMode::Futures },
                    ..HomeGridConfig::default()
                }),
                model: small_model,
                policy: small_policy,
                train: TrainConfig {
                    steps: 2_000_000,
                    model_lr: 3e-4,
                    actor_lr: 1e-4,
                    critic_lr: 1e-4,
                    eval_every: 100_000,
                    ..TrainConfig::default()
                },
                ..Self::default()
            },
            "chain" => Self {
                env: EnvConfig::Chain(ChainConfig::default()),
                model: WorldModelConfig {
                    deter: 32,
                    hidden: 32,
                    groups: 4,
                    classes: 4,
                    layers: 1,
                    token_embed: 4,
                    action_embed: 4,
                    reward_bins: 31,
                    ..WorldModelConfig::default()
                },
                policy: PolicyConfig {
                    hidden: 32,
                    layers: 1,
                    value_bins: 31,
                    gamma: 0.95,
                    entropy: 1e-3,
                    ..PolicyConfig::default()
                },
                train: TrainConfig {
                    steps: 50_000,
                    prefill: 500,
                    batch_size: 8,
                    batch_length: 16,
                    train_ratio: 8.0,
                    model_lr: 1e-3,
                    actor_lr: 3e-4,
                    critic_lr: 3e-4,
                    eval_every: 5_000,
                    eval_episodes: 5,
                    ..TrainConfig::default()
                },
                ..Self::default()
            },
            "grammar_pretrain" => Self {
                env: EnvConfig::Langroom(LangRoomConfig {
                    vocab_size: dynalang_envs::Vocab::default().len(),
                    ..LangRoomConfig::default()
                }),
                model: small_model,
                policy: small_policy,
                train: langroom_train,
                ..Self::default()
            },
            "smoke" => Self {
                env: EnvConfig::Langroom(LangRoomConfig {
                    episode_length: 40,
                    ..LangRoomConfig::default()
                }),
                model: WorldModelConfig::tiny(),
                policy: PolicyConfig::tiny(),
                train: TrainConfig {
                    steps: 300,
                    prefill: 100,
                    batch_size: 2,
                    batch_length: 8,
                    train_ratio: 2.0,
                    eval_every: 0,
                    eval_episodes: 2,
                    ..TrainConfig::default()
                },
                pretrain: PretrainConfig {
                    steps: 20,
                    batch_size: 2,
                    batch_length: 8,
                    documents: 50,
                    heldout: 5,
                    eval_samples: 2,
                    ..PretrainConfig::default()
                },
                ..Self::default()
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; choose one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `section.key=value` overrides. Values parse as TOML literals
    /// and fall back to strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (path, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            let keys: Vec<&str> = path.trim().split('.').collect();
            set_path(&mut doc, &keys, value).map_err(|e| Error::Config(format!("override {ov:?}: {e}")))?;
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if self.envs == 0 {
            return Err(Error::Config("envs must be positive".into()));
        }
        if t.batch_size == 0 || t.batch_length == 0 || t.replay_capacity == 0 || t.eval_episodes == 0 {
            return Err(Error::Config("batch size, batch length, replay capacity and eval episodes must be positive".into()));
        }
        if !(t.train_ratio >= 1.0 && t.train_ratio.is_finite()) {
            return Err(Error::Config(format!("train ratio must be >= 1, got {}", t.train_ratio)));
        }
        for (k, v) in [
            ("model_lr", t.model_lr),
            ("actor_lr", t.actor_lr),
            ("critic_lr", t.critic_lr),
            ("clip_norm", t.clip_norm),
            ("pretrain.lr", self.pretrain.lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if (t.replay_capacity as u64) < t.batch_length as u64 * self.envs as u64 {
            return Err(Error::Config("replay capacity must hold one segment per environment".into()));
        }
        let p = &self.pretrain;
        if p.batch_size == 0 || p.batch_length == 0 {
            return Err(Error::Config("pretrain batch size and length must be positive".into()));
        }
        self.model.validate()?;
        self.policy.validate()?;
        Ok(())
    }

    /// Env steps between gradient updates, `batch_size · batch_length / ratio`.
    pub fn steps_per_update(&self) -> f64 {
        (self.train.batch_size * self.train.batch_length) as f64 / self.train.train_ratio
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(doc: &mut toml::Value, keys: &[&str], value: toml::Value) -> std::result::Result<(), String> {
    let (last, parents) = keys.split_last().ok_or("empty key")?;
    let mut cur = doc;
    for k in parents {
        cur = cur
            .get_mut(*k)
            .ok_or_else(|| format!("no section {k}"))?;
    }
    let table = cur.as_table_mut().ok_or("parent is not a table")?;
    // optional fields are absent when unset; allow creating them
    if let Some(old) = table.get(*last) {
        let value = coerce(old, value);
        table.insert(last.to_string(), value);
    } else {
        table.insert(last.to_string(), value);
    }
    Ok(())
}

/// Integers given for float fields become floats.
fn coerce(old: &toml::Value, value: toml::Value) -> toml::Value {
    match (old, &value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
        _ => value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = RunConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg, "{name}");
        }
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let cfg = RunConfig::preset("langroom_small").unwrap();
        let o = cfg
            .with_overrides(&["train.batch_size=4".into(), "policy.gamma=1".into(), "env.vocab_size=40".into()])
            .unwrap();
        assert_eq!(o.train.batch_size, 4);
        assert_eq!(o.policy.gamma, 1.0);
        assert!(matches!(o.env, EnvConfig::Langroom(LangRoomConfig { vocab_size: 40, .. })));
        assert!(cfg.with_overrides(&["train.nope=1".into()]).is_err());
        assert!(cfg.with_overrides(&["train.batch_size".into()]).is_err());
        assert!(cfg.with_overrides(&["train.train_ratio=0.5".into()]).is_err());
    }

    #[test]
    fn ratio_arithmetic() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.steps_per_update(), 64.0);
    }
}
