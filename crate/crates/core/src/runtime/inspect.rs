//! Standalone agent checkpoints and real-versus-imagined trajectory dumps.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use dynalang_envs::{Action, Env};

use crate::checkpoint::{peek_hash, Checkpoint};
use crate::codecs::LatentMode;
use crate::diff::Graph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::worldmodel::ActionInput;

use super::agent::{ActMode, Agent};
use super::config::RunConfig;
use super::trainer::substream;

#[derive(Serialize, Deserialize)]
struct Extra {
    config: String,
}

/// Agent state plus the run configuration it was built from.
pub fn agent_checkpoint<T: Scalar>(agent: &Agent<T>, config: &RunConfig) -> Checkpoint<T> {
    let mut ckpt = Checkpoint::new(agent.config_hash());
    agent.save_into(&mut ckpt);
    ckpt.extra = serde_json::to_string(&Extra {
        config: config.to_toml(),
    })
    .expect("config serializes");
    ckpt
}

/// Loads any checkpoint written by this crate (training runs included)
/// and rebuilds its agent. `overrides` apply to the stored configuration
/// before the agent is built.
pub fn load_agent<T: Scalar>(path: &Path, overrides: &[String]) -> Result<(RunConfig, Agent<T>)> {
    let hash = peek_hash(path)?;
    let ckpt = Checkpoint::<T>::load(path, &hash)?;
    // training checkpoints carry more counters; only the config is needed
    let extra: Extra = serde_json::from_str(&ckpt.extra)
        .map_err(|e| Error::Checkpoint(format!("checkpoint has no run configuration: {e}")))?;
    let config = RunConfig::from_toml(&extra.config)?.with_overrides(overrides)?;
    let env = config.env.build(0)?;
    let mut agent = Agent::new(&config, env.obs_space(), env.action_space(), &mut substream(config.seed, "init"))?;
    if agent.config_hash() != hash {
        return Err(Error::Config(
            "environment or model settings do not match the checkpoint".into(),
        ));
    }
    agent.restore_from(&ckpt)?;
    Ok((config, agent))
}

/// One open-loop continuation from a posterior state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImaginedPath {
    pub moves: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub tokens: Vec<usize>,
    /// `rewards[k]` predicts the reward observed `k + 1` steps later.
    pub rewards: Vec<f64>,
    pub conts: Vec<f64>,
}

/// One real step with the model's reconstruction and imagined futures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub episode: usize,
    pub t: usize,
    pub image: Vec<u8>,
    pub token: usize,
    pub reward: f64,
    pub cont: bool,
    pub reconstruction: Vec<f32>,
    pub predicted_token: usize,
    pub action: Action,
    pub imagined: Vec<ImaginedPath>,
}

/// Continuations of `agent` from `state` whose first action is `first`
/// and whose later actions come from the actor.
pub fn imagine_paths<T: Scalar>(
    agent: &Agent<T>,
    state: &crate::worldmodel::LatentState<T>,
    first: &Action,
    horizon: usize,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ImaginedPath>> {
    let wm = &agent.wm;
    let has_tokens = wm.act.has_tokens();
    let mut paths = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut path = ImaginedPath {
            moves: Vec::with_capacity(horizon),
            tokens: Vec::new(),
            rewards: Vec::with_capacity(horizon),
            conts: Vec::with_capacity(horizon),
        };
        let mut s = state.clone();
        let mut action = *first;
        for _ in 0..horizon {
            let input = ActionInput {
                moves: vec![Some(action.movement)],
                tokens: if has_tokens { vec![Some(action.token)] } else { Vec::new() },
            };
            let mut g = Graph::no_grad();
            let h = g.constant(s.h.clone());
            let z = g.constant(s.z.clone());
            let (_, _, step) = wm.imagine_step(&mut g, &agent.wm_store, h, z, &input, LatentMode::Sample, rng)?;
            path.moves.push(action.movement);
            if has_tokens {
                path.tokens.push(action.token);
            }
            path.rewards.push(step.reward[0].to_f64c());
            path.conts.push(step.cont[0].to_f64c());
            s = step.state;
            let a = agent.actor.act(&agent.actor_store, &s.feat(), false, rng)?;
            action = Action::new(a.moves[0], a.tokens.first().copied().unwrap_or(dynalang_envs::PAD));
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Runs one greedy episode and reports every step through `sink`.
pub fn rollout_episode<T: Scalar>(
    agent: &Agent<T>,
    env: &mut dyn Env,
    episode: usize,
    horizon: usize,
    samples: usize,
    rng: &mut impl Rng,
    mut sink: impl FnMut(RolloutStep) -> Result<()>,
) -> Result<()> {
    let mut state = agent.initial_state(1);
    let mut cur = env.reset();
    let mut t = 0;
    loop {
        let actions = agent.policy_step(
            &mut state,
            &cur.obs.image,
            &[cur.obs.token],
            &[cur.is_first],
            ActMode::Greedy,
            rng,
        )?;
        let action = actions[0];
        let recon = agent.wm.reconstruct(&agent.wm_store, &state.latent)?;
        let probs = agent.wm.token_probs(&agent.wm_store, &state.latent)?;
        let imagined = imagine_paths(agent, &state.latent, &action, horizon, samples, rng)?;
        sink(RolloutStep {
            episode,
            t,
            image: cur.obs.image.clone(),
            token: cur.obs.token,
            reward: cur.reward,
            cont: cur.cont,
            reconstruction: recon.data().iter().map(|x| x.to_f64c() as f32).collect(),
            predicted_token: crate::codecs::argmax(probs.row(0)),
            action,
            imagined,
        })?;
        if cur.is_last {
            return Ok(());
        }
        cur = env.step(&action)?;
        t += 1;
    }
}
