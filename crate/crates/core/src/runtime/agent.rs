use rand::Rng;
use serde::{Deserialize, Serialize};

use dynalang_envs::{Action, ActionSpace, ObsSpace, PAD};

use crate::checkpoint::{config_hash, Checkpoint};
use crate::codecs::{LatentMode, PercentileEma};
use crate::diff::{Adam, AdamConfig, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::policy::{actor_loss, critic_loss, ema_update, prepare, rollout, Actor, Critic, PolicyConfig, PolicyStats};
use crate::scalar::Scalar;
use crate::worldmodel::{ActionInput, LatentState, LossBreakdown, LossMode, SeqBatch, WorldModel, WorldModelConfig};

use super::config::RunConfig;

/// How actions are chosen while acting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    /// Uniform over the action space (prefill).
    Random,
    Sample,
    Greedy,
}

/// Recurrent acting state, one row per environment instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ActingState<T> {
    pub latent: LatentState<T>,
    pub prev: ActionInput,
}

/// Per-update record; every field is emitted to the metrics stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub loss: LossBreakdown,
    pub model_grad_norm: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub policy: PolicyStats,
}

/// Architecture fields that must agree between a checkpoint and a model.
#[derive(Serialize)]
struct Fingerprint<'a> {
    model: &'a WorldModelConfig,
    obs: &'a ObsSpace,
    act: &'a ActionSpace,
}

/// World model, actor and critic with their optimizers.
#[derive(Clone, Debug)]
pub struct Agent<T> {
    pub wm: WorldModel,
    pub wm_store: ParamStore<T>,
    wm_opt: Adam<T>,
    pub actor: Actor,
    pub actor_store: ParamStore<T>,
    actor_opt: Adam<T>,
    pub critic: Critic,
    pub critic_store: ParamStore<T>,
    critic_opt: Adam<T>,
    slow_critic: Option<ParamStore<T>>,
    pub policy: PolicyConfig,
    percentile: PercentileEma,
    updates: u64,
}

impl<T: Scalar> Agent<T> {
    pub fn new(config: &RunConfig, obs: ObsSpace, act: ActionSpace, rng: &mut impl Rng) -> Result<Self> {
        Self::with_model_lr(config, obs, act, config.train.model_lr, rng)
    }

    /// As [`Agent::new`] with a different world-model learning rate
    /// (text pretraining uses its own).
    pub fn with_model_lr(
        config: &RunConfig,
        obs: ObsSpace,
        act: ActionSpace,
        model_lr: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        let adam = |lr| AdamConfig {
            lr,
            clip_norm: t.clip_norm,
            ..AdamConfig::default()
        };
        let mut wm_store = ParamStore::new();
        let wm = WorldModel::new(config.model.clone(), obs, act.clone(), &mut wm_store, rng)?;
        let feat = config.model.feat();
        let mut actor_store = ParamStore::new();
        let actor = Actor::new(&mut actor_store, &config.policy, feat, act.moves, act.tokens, rng)?;
        let mut critic_store = ParamStore::new();
        let critic = Critic::new(&mut critic_store, &config.policy, feat, rng)?;
        Ok(Self {
            wm_opt: Adam::new(&wm_store, adam(model_lr))?,
            actor_opt: Adam::new(&actor_store, adam(t.actor_lr))?,
            critic_opt: Adam::new(&critic_store, adam(t.critic_lr))?,
            slow_critic: config.policy.slow_critic.then(|| critic_store.clone()),
            percentile: PercentileEma::new(config.policy.return_decay),
            policy: config.policy.clone(),
            updates: 0,
            wm,
            wm_store,
            actor,
            actor_store,
            critic,
            critic_store,
        })
    }

    /// Hash of the world-model architecture and the env interface.
    pub fn config_hash(&self) -> [u8; 32] {
        let fp = Fingerprint {
            model: &self.wm.config,
            obs: &self.wm.obs,
            act: &self.wm.act,
        };
        config_hash(&serde_json::to_vec(&fp).expect("fingerprint serializes"))
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn initial_state(&self, rows: usize) -> ActingState<T> {
        ActingState {
            latent: LatentState::zeros(&self.wm.config, rows),
            prev: ActionInput::zeros(rows),
        }
    }

    /// Filters the observations into the acting state and picks one action
    /// per row. Rows with `is_first` start from the zero state.
    pub fn policy_step(
        &self,
        state: &mut ActingState<T>,
        images: &[u8],
        tokens: &[usize],
        is_first: &[bool],
        mode: ActMode,
        rng: &mut impl Rng,
    ) -> Result<Vec<Action>> {
        let rows = is_first.len();
        let latent = if mode == ActMode::Greedy { LatentMode::Mode } else { LatentMode::Sample };
        state.latent = self
            .wm
            .observe(&self.wm_store, &state.latent, &state.prev, images, tokens, is_first, latent, rng)?;
        let act = &self.wm.act;
        let (moves, toks) = match mode {
            ActMode::Random => {
                let moves = (0..rows).map(|_| rng.gen_range(0..act.moves)).collect();
                let toks = if act.has_tokens() {
                    (0..rows).map(|_| rng.gen_range(0..act.tokens)).collect()
                } else {
                    Vec::new()
                };
                (moves, toks)
            }
            ActMode::Sample | ActMode::Greedy => {
                let a = self
                    .actor
                    .act(&self.actor_store, &state.latent.feat(), mode == ActMode::Greedy, rng)?;
                (a.moves, a.tokens)
            }
        };
        state.prev = if act.has_tokens() {
            ActionInput::new(&moves, &toks)
        } else {
            ActionInput {
                moves: moves.iter().map(|&m| Some(m)).collect(),
                tokens: Vec::new(),
            }
        };
        Ok((0..rows)
            .map(|r| Action::new(moves[r], toks.get(r).copied().unwrap_or(PAD)))
            .collect())
    }

    /// One world-model update followed by one actor and one critic update
    /// on imagined rollouts from every posterior state of the batch.
    pub fn train_step(&mut self, batch: &SeqBatch, rng: &mut impl Rng) -> Result<UpdateMetrics> {
        let mut g = Graph::new();
        let out = self
            .wm
            .compute_losses(&mut g, &self.wm_store, batch, LossMode::Full, LatentMode::Sample, rng)?;
        let grads = g.backward(out.total)?;
        self.wm_store.accumulate(&grads);
        let wm_report = self.wm_opt.step(&mut self.wm_store)?;
        drop(g);

        let p = &self.policy;
        let imag = rollout(
            &self.wm,
            &self.wm_store,
            &self.actor,
            &self.actor_store,
            &out.posterior,
            p.horizon,
            p.lm_reg,
            rng,
        )?;
        let value_store = self.slow_critic.as_ref().unwrap_or(&self.critic_store);
        let values = self.critic.values(value_store, &imag.feats)?;
        let (actor_batch, critic_batch, mut stats) = prepare(&imag, &values, p, &mut self.percentile)?;

        let mut g = Graph::new();
        let (aloss, entropy, lm_kl) = actor_loss(&mut g, &self.actor_store, &self.actor, &actor_batch, p)?;
        let actor_loss_value = g.value(aloss).item().to_f64c();
        let grads = g.backward(aloss)?;
        self.actor_store.accumulate(&grads);
        let actor_report = self.actor_opt.step(&mut self.actor_store)?;
        stats.entropy = entropy;
        stats.lm_kl = lm_kl;

        let mut g = Graph::new();
        let closs = critic_loss(&mut g, &self.critic_store, &self.critic, &critic_batch)?;
        let critic_loss_value = g.value(closs).item().to_f64c();
        let grads = g.backward(closs)?;
        self.critic_store.accumulate(&grads);
        let critic_report = self.critic_opt.step(&mut self.critic_store)?;
        if let Some(slow) = &mut self.slow_critic {
            ema_update(slow, &self.critic_store, p.slow_decay)?;
        }
        self.updates += 1;
        Ok(UpdateMetrics {
            loss: out.breakdown,
            model_grad_norm: wm_report.grad_norm,
            actor_grad_norm: actor_report.grad_norm,
            critic_grad_norm: critic_report.grad_norm,
            actor_loss: actor_loss_value,
            critic_loss: critic_loss_value,
            policy: stats,
        })
    }

    /// One world-model update on a text-only batch.
    pub fn pretrain_step(&mut self, batch: &SeqBatch, rng: &mut impl Rng) -> Result<(LossBreakdown, f64)> {
        let mut g = Graph::new();
        let out = self
            .wm
            .compute_losses(&mut g, &self.wm_store, batch, LossMode::TextPretrain, LatentMode::Sample, rng)?;
        let grads = g.backward(out.total)?;
        self.wm_store.accumulate(&grads);
        let report = self.wm_opt.step(&mut self.wm_store)?;
        self.updates += 1;
        Ok((out.breakdown, report.grad_norm))
    }

    /// Writes all parameters, optimizer moments and return statistics.
    pub fn save_into(&self, ckpt: &mut Checkpoint<T>) {
        ckpt.add_store("wm", &self.wm_store, Some(&self.wm_opt));
        ckpt.add_store("actor", &self.actor_store, Some(&self.actor_opt));
        ckpt.add_store("critic", &self.critic_store, Some(&self.critic_opt));
        if let Some(slow) = &self.slow_critic {
            ckpt.add_store("slow_critic", slow, None);
        }
        let mut bytes = Vec::with_capacity(25);
        bytes.extend_from_slice(&self.percentile.low.to_bits().to_le_bytes());
        bytes.extend_from_slice(&self.percentile.high.to_bits().to_le_bytes());
        bytes.push(self.percentile.initialized as u8);
        bytes.extend_from_slice(&self.updates.to_le_bytes());
        ckpt.sections.push(("agent".into(), bytes));
    }

    /// Inverse of [`Agent::save_into`]. Validates every piece before any
    /// state changes.
    pub fn restore_from(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        let bytes = ckpt
            .section("agent")
            .ok_or_else(|| Error::Checkpoint("missing agent section".into()))?;
        if bytes.len() != 25 {
            return Err(Error::Checkpoint("malformed agent section".into()));
        }
        let f = |i: usize| f64::from_bits(u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap()));
        let (low, high, initialized) = (f(0), f(8), bytes[16] != 0);
        let updates = u64::from_le_bytes(bytes[17..25].try_into().unwrap());

        let mut next = self.clone();
        ckpt.restore_store("wm", &mut next.wm_store, Some(&mut next.wm_opt))?;
        ckpt.restore_store("actor", &mut next.actor_store, Some(&mut next.actor_opt))?;
        ckpt.restore_store("critic", &mut next.critic_store, Some(&mut next.critic_opt))?;
        if let Some(slow) = &mut next.slow_critic {
            ckpt.restore_store("slow_critic", slow, None)?;
        }
        next.percentile.low = low;
        next.percentile.high = high;
        next.percentile.initialized = initialized;
        next.updates = updates;
        *self = next;
        Ok(())
    }

    /// Loads world-model parameters only, leaving optimizer state fresh
    /// (fine-tuning from a pretrained model).
    pub fn load_world_model(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        let mut store = self.wm_store.clone();
        ckpt.restore_store("wm", &mut store, None)?;
        // fresh moments need fresh bias correction
        store.set_step(0);
        self.wm_store = store;
        Ok(())
    }
}
