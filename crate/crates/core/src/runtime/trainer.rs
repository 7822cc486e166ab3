use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dynalang_envs::{Env, EnvStep};

use crate::checkpoint::Checkpoint;
use crate::diff::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::agent::{ActMode, ActingState, Agent, UpdateMetrics};
use super::config::RunConfig;
use super::metrics::{Metrics, Record};
use super::replay::{ReplayBuffer, Transition};

/// Independent generator for a named subsystem of a run.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn derived_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Token bucket that keeps replayed steps per env step at `ratio`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub ratio: f64,
    /// Replayed steps per update (`batch_size · batch_length`).
    pub batch_steps: f64,
    pub bucket: f64,
}

impl TrainSchedule {
    pub fn new(ratio: f64, batch_size: usize, batch_length: usize) -> Self {
        Self {
            ratio,
            batch_steps: (batch_size * batch_length) as f64,
            bucket: 0.0,
        }
    }

    /// Credits `env_steps` and returns the number of updates now due.
    pub fn credit(&mut self, env_steps: u64) -> u64 {
        self.bucket += self.ratio * env_steps as f64;
        let mut due = 0;
        while self.bucket >= self.batch_steps {
            self.bucket -= self.batch_steps;
            due += 1;
        }
        due
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Tracker {
    episode: u64,
    step: u32,
    ret: f64,
}

/// An episode that ended during a tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeDone {
    pub env: usize,
    pub episode: u64,
    pub ret: f64,
    pub length: u32,
}

/// Environment instances with their pending observations and the agent's
/// per-instance recurrent state.
pub struct Collector<T> {
    envs: Vec<Box<dyn Env>>,
    current: Vec<EnvStep>,
    acting: ActingState<T>,
    trackers: Vec<Tracker>,
    next_episode: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Collector<T> {
    pub fn new(mut envs: Vec<Box<dyn Env>>, agent: &Agent<T>, rng: ChaCha8Rng) -> Self {
        let current = envs.iter_mut().map(|e| e.reset()).collect();
        Self {
            acting: agent.initial_state(envs.len()),
            trackers: vec![Tracker::default(); envs.len()],
            envs,
            current,
            next_episode: 0,
            rng,
        }
    }

    /// One step of every environment, round-robin. Returns the transitions
    /// to store (stream index per transition) and finished episodes.
    pub fn tick(&mut self, agent: &Agent<T>, mode: ActMode) -> Result<(Vec<(usize, Transition)>, Vec<EpisodeDone>)> {
        let n = self.envs.len();
        let mut images = Vec::new();
        let mut tokens = Vec::with_capacity(n);
        let mut firsts = Vec::with_capacity(n);
        for cur in &self.current {
            images.extend_from_slice(&cur.obs.image);
            tokens.push(cur.obs.token);
            firsts.push(cur.is_first);
        }
        let actions = agent.policy_step(&mut self.acting, &images, &tokens, &firsts, mode, &mut self.rng)?;
        let mut out = Vec::with_capacity(n);
        let mut done = Vec::new();
        for (i, env) in self.envs.iter_mut().enumerate() {
            let cur = &self.current[i];
            let tr = &mut self.trackers[i];
            if cur.is_first {
                *tr = Tracker {
                    episode: self.next_episode,
                    step: 0,
                    ret: 0.0,
                };
                self.next_episode += 1;
            }
            tr.ret += cur.reward;
            out.push((
                i,
                Transition {
                    image: cur.obs.image.clone(),
                    token: cur.obs.token,
                    reward: cur.reward,
                    cont: cur.cont,
                    is_first: cur.is_first,
                    movement: actions[i].movement,
                    act_token: actions[i].token,
                    episode: tr.episode,
                    step: tr.step,
                },
            ));
            tr.step += 1;
            self.current[i] = if cur.is_last {
                done.push(EpisodeDone {
                    env: i,
                    episode: tr.episode,
                    ret: tr.ret,
                    length: tr.step,
                });
                env.reset()
            } else {
                env.step(&actions[i])?
            };
        }
        Ok((out, done))
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }
}

/// Result of [`Trainer::evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: f64,
    pub returns: Vec<f64>,
    pub answers: usize,
    pub correct: usize,
}

impl EvalReport {
    pub fn answer_accuracy(&self) -> Option<f64> {
        (self.answers > 0).then(|| self.correct as f64 / self.answers as f64)
    }
}

#[derive(Serialize, Deserialize)]
struct Counters {
    env_steps: u64,
    next_episode: u64,
    bucket_bits: u64,
    config: String,
}

/// Interleaved acting and learning for one run.
pub struct Trainer<T> {
    pub config: RunConfig,
    pub agent: Agent<T>,
    pub replay: ReplayBuffer,
    pub metrics: Metrics,
    collector: Collector<T>,
    schedule: TrainSchedule,
    train_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    env_steps: u64,
    out_dir: Option<PathBuf>,
}

fn build_envs(config: &RunConfig, generation: u64) -> Result<Vec<Box<dyn Env>>> {
    (0..config.envs)
        .map(|i| {
            let seed = derived_seed(config.seed, "env", generation.wrapping_mul(1 << 16) + i as u64);
            Ok(config.env.build(seed)?)
        })
        .collect()
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run. With `out_dir`, metrics go to `metrics.jsonl` and
    /// checkpoints to `checkpoints/` inside it.
    pub fn new(config: RunConfig, out_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let envs = build_envs(&config, 0)?;
        let (obs, act) = (envs[0].obs_space(), envs[0].action_space());
        let agent = Agent::new(&config, obs.clone(), act, &mut substream(config.seed, "init"))?;
        let collector = Collector::new(envs, &agent, substream(config.seed, "act"));
        let metrics = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir.join("checkpoints"))?;
                Metrics::to_file(&dir.join("metrics.jsonl"))?
            }
            None => Metrics::in_memory(),
        };
        let t = &config.train;
        Ok(Self {
            replay: ReplayBuffer::new(t.replay_capacity, config.envs, obs.image_len())?,
            schedule: TrainSchedule::new(t.train_ratio, t.batch_size, t.batch_length),
            train_rng: substream(config.seed, "train"),
            replay_rng: substream(config.seed, "replay"),
            env_steps: 0,
            out_dir: out_dir.map(Path::to_path_buf),
            config,
            agent,
            collector,
            metrics,
        })
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    /// Steps every environment once and stores the transitions.
    pub fn act_tick(&mut self, mode: ActMode) -> Result<Vec<EpisodeDone>> {
        let (transitions, done) = self.collector.tick(&self.agent, mode)?;
        for (stream, t) in &transitions {
            self.replay.push(*stream, t)?;
        }
        self.env_steps += transitions.len() as u64;
        for d in &done {
            self.metrics.push(Record::Episode {
                step: self.env_steps,
                env: d.env,
                episode: d.episode,
                ret: d.ret,
                length: d.length,
            })?;
        }
        Ok(done)
    }

    /// Acts for at least `steps` environment steps without training.
    pub fn act(&mut self, steps: u64, mode: ActMode) -> Result<Vec<EpisodeDone>> {
        let end = self.env_steps + steps;
        let mut done = Vec::new();
        while self.env_steps < end {
            done.extend(self.act_tick(mode)?);
        }
        Ok(done)
    }

    /// One gradient update from a uniformly sampled replay batch.
    pub fn update(&mut self) -> Result<UpdateMetrics> {
        let t = &self.config.train;
        let batch = self.replay.sample(t.batch_size, t.batch_length, &mut self.replay_rng)?;
        let m = self.agent.train_step(&batch, &mut self.train_rng)?;
        self.metrics.push(Record::Update {
            step: self.env_steps,
            update: self.agent.updates(),
            metrics: m.clone(),
        })?;
        Ok(m)
    }

    /// `n` updates with no acting in between.
    pub fn train_updates(&mut self, n: usize) -> Result<Vec<UpdateMetrics>> {
        (0..n).map(|_| self.update()).collect()
    }

    /// Runs until the configured step budget. A non-finite loss saves an
    /// abort checkpoint (when an output directory is set) and returns the
    /// error.
    pub fn run(&mut self) -> Result<()> {
        let result = if self.config.train.threaded {
            self.run_threaded()
        } else {
            self.run_interleaved(&mut |_| false).map(|_| ())
        };
        self.finish(result)
    }

    /// Interleaved training that stops at the first evaluation satisfying
    /// `stop`, returning the env step of that evaluation.
    pub fn run_until(&mut self, mut stop: impl FnMut(&EvalReport) -> bool) -> Result<Option<u64>> {
        let result = self.run_interleaved(&mut stop);
        let reached = match &result {
            Ok(r) => *r,
            Err(_) => None,
        };
        self.finish(result.map(|_| ()))?;
        Ok(reached)
    }

    fn finish(&mut self, result: Result<()>) -> Result<()> {
        match result {
            Err(e) if e.is_numerical() => {
                if let Some(dir) = &self.out_dir {
                    let _ = self.save(&dir.join("checkpoints").join("abort.ckpt"));
                }
                let _ = self.metrics.flush();
                Err(e)
            }
            Err(e) => Err(e),
            Ok(()) => {
                if let Some(dir) = &self.out_dir {
                    self.save(&dir.join("checkpoints").join("final.ckpt"))?;
                }
                self.metrics.flush()
            }
        }
    }

    fn run_interleaved(&mut self, stop: &mut dyn FnMut(&EvalReport) -> bool) -> Result<Option<u64>> {
        let t = self.config.train.clone();
        while self.env_steps < t.steps {
            let before = self.env_steps;
            let mode = if before < t.prefill { ActMode::Random } else { ActMode::Sample };
            self.act_tick(mode)?;
            let stepped = self.env_steps - before;
            if self.env_steps > t.prefill {
                let counted = stepped.min(self.env_steps - t.prefill);
                for _ in 0..self.schedule.credit(counted) {
                    if self.replay.eligible(t.batch_length) > 0 {
                        self.update()?;
                    }
                }
            }
            if t.eval_every > 0 && crossed(before, self.env_steps, t.eval_every) {
                let report = self.evaluate(t.eval_episodes)?;
                if stop(&report) {
                    return Ok(Some(self.env_steps));
                }
            }
            if t.checkpoint_every > 0 && crossed(before, self.env_steps, t.checkpoint_every) {
                if let Some(dir) = &self.out_dir {
                    let path = dir.join("checkpoints").join(format!("step_{}.ckpt", self.env_steps));
                    self.save(&path)?;
                }
            }
        }
        Ok(None)
    }

    /// Acting and learning on two threads. The actor never waits while the
    /// learner owes at most one update, publishes nothing, and swaps in the
    /// learner's latest parameter snapshot only after an episode ends.
    /// Update timing depends on thread scheduling, so runs are not
    /// reproducible bit for bit.
    fn run_threaded(&mut self) -> Result<()> {
        let t = self.config.train.clone();
        let placeholder = ReplayBuffer::new(1, 1, 0)?;
        let replay = Mutex::new(std::mem::replace(&mut self.replay, placeholder));
        let metrics = Mutex::new(std::mem::take(&mut self.metrics));
        // (owed, done, actor finished)
        let progress = Mutex::new((0u64, 0u64, false));
        let cv = Condvar::new();
        let stop = AtomicBool::new(false);
        let snapshot: Mutex<Option<(ParamStore<T>, ParamStore<T>)>> = Mutex::new(None);

        let mut view = self.agent.clone();
        let collector = &mut self.collector;
        let schedule = &mut self.schedule;
        let agent = &mut self.agent;
        let (train_rng, replay_rng) = (&mut self.train_rng, &mut self.replay_rng);
        let mut env_steps = self.env_steps;

        let (act_res, learn_res) = std::thread::scope(|s| {
            let actor = s.spawn(|| -> Result<u64> {
                let res = (|| {
                    while env_steps < t.steps && !stop.load(Ordering::SeqCst) {
                        {
                            let mut p = progress.lock().unwrap();
                            while p.0 > p.1 + 1 && !stop.load(Ordering::SeqCst) {
                                p = cv.wait(p).unwrap();
                            }
                        }
                        let mode = if env_steps < t.prefill { ActMode::Random } else { ActMode::Sample };
                        let (transitions, done) = collector.tick(&view, mode)?;
                        let before = env_steps;
                        env_steps += transitions.len() as u64;
                        {
                            let mut r = replay.lock().unwrap();
                            for (stream, tr) in &transitions {
                                r.push(*stream, tr)?;
                            }
                        }
                        {
                            let mut m = metrics.lock().unwrap();
                            for d in &done {
                                m.push(Record::Episode {
                                    step: env_steps,
                                    env: d.env,
                                    episode: d.episode,
                                    ret: d.ret,
                                    length: d.length,
                                })?;
                            }
                        }
                        if env_steps > t.prefill {
                            let counted = (env_steps - before).min(env_steps - t.prefill);
                            let due = schedule.credit(counted);
                            if due > 0 {
                                progress.lock().unwrap().0 += due;
                                cv.notify_all();
                            }
                        }
                        if !done.is_empty() {
                            if let Some((wm, actor)) = snapshot.lock().unwrap().take() {
                                view.wm_store = wm;
                                view.actor_store = actor;
                            }
                        }
                    }
                    Ok(env_steps)
                })();
                progress.lock().unwrap().2 = true;
                cv.notify_all();
                res
            });

            let learn = (|| -> Result<()> {
                loop {
                    {
                        let mut p = progress.lock().unwrap();
                        while p.1 >= p.0 && !p.2 {
                            p = cv.wait(p).unwrap();
                        }
                        if p.1 >= p.0 && p.2 {
                            return Ok(());
                        }
                    }
                    let batch = {
                        let r = replay.lock().unwrap();
                        if r.eligible(t.batch_length) > 0 {
                            Some(r.sample(t.batch_size, t.batch_length, replay_rng)?)
                        } else {
                            None
                        }
                    };
                    if let Some(batch) = batch {
                        let m = agent.train_step(&batch, train_rng)?;
                        metrics.lock().unwrap().push(Record::Update {
                            step: 0,
                            update: agent.updates(),
                            metrics: m,
                        })?;
                        *snapshot.lock().unwrap() = Some((agent.wm_store.clone(), agent.actor_store.clone()));
                    }
                    progress.lock().unwrap().1 += 1;
                    cv.notify_all();
                }
            })();
            if learn.is_err() {
                stop.store(true, Ordering::SeqCst);
                cv.notify_all();
            }
            (actor.join().expect("actor thread panicked"), learn)
        });
        self.replay = replay.into_inner().unwrap();
        self.metrics = metrics.into_inner().unwrap();
        learn_res?;
        self.env_steps = act_res?;
        if t.eval_every > 0 {
            self.evaluate(t.eval_episodes)?;
        }
        Ok(())
    }

    /// Greedy episodes on fresh environment instances. Does not touch the
    /// training generators or the replay buffer.
    pub fn evaluate(&mut self, episodes: usize) -> Result<EvalReport> {
        let report = evaluate_agent(&self.agent, &self.config, episodes, self.env_steps)?;
        self.metrics.push(Record::Eval {
            step: self.env_steps,
            episodes,
            mean_return: report.mean_return,
            answer_accuracy: report.answer_accuracy(),
        })?;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ckpt = Checkpoint::new(self.agent.config_hash());
        self.agent.save_into(&mut ckpt);
        ckpt.add_rng("train", &self.train_rng);
        ckpt.add_rng("replay", &self.replay_rng);
        ckpt.add_rng("act", &self.collector.rng);
        ckpt.sections.push(("replay".into(), self.replay.to_bytes()));
        let counters = Counters {
            env_steps: self.env_steps,
            next_episode: self.collector.next_episode,
            bucket_bits: self.schedule.bucket.to_bits(),
            config: self.config.to_toml(),
        };
        ckpt.extra = serde_json::to_string(&counters).expect("counters serialize");
        ckpt
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Rebuilds a run from a checkpoint. Parameters, optimizer moments,
    /// replay contents, generators and counters are restored exactly;
    /// environments start new episodes.
    pub fn resume(path: &Path, out_dir: Option<&Path>) -> Result<Self> {
        let hash = crate::checkpoint::peek_hash(path)?;
        let ckpt = Checkpoint::<T>::load(path, &hash)?;
        let counters: Counters = serde_json::from_str(&ckpt.extra)
            .map_err(|e| Error::Checkpoint(format!("run counters: {e}")))?;
        let config = RunConfig::from_toml(&counters.config)?;
        let mut tr = Self::new(config, out_dir)?;
        if tr.agent.config_hash() != hash {
            return Err(Error::Checkpoint("checkpoint was written for a different model configuration".into()));
        }
        tr.restore(&ckpt, &counters)?;
        Ok(tr)
    }

    fn restore(&mut self, ckpt: &Checkpoint<T>, counters: &Counters) -> Result<()> {
        let replay = ReplayBuffer::from_bytes(
            ckpt.section("replay")
                .ok_or_else(|| Error::Checkpoint("missing replay section".into()))?,
        )?;
        if replay.streams() != self.replay.streams() {
            return Err(Error::Checkpoint("replay stream count differs from the configured envs".into()));
        }
        let (train, rep, act) = (ckpt.rng("train")?, ckpt.rng("replay")?, ckpt.rng("act")?);
        self.agent.restore_from(ckpt)?;
        self.replay = replay;
        self.train_rng = train;
        self.replay_rng = rep;
        self.env_steps = counters.env_steps;
        self.schedule.bucket = f64::from_bits(counters.bucket_bits);
        let envs = build_envs(&self.config, counters.env_steps)?;
        self.collector = Collector::new(envs, &self.agent, act);
        self.collector.next_episode = counters.next_episode;
        Ok(())
    }
}

fn crossed(before: u64, after: u64, every: u64) -> bool {
    before / every != after / every
}

/// Greedy evaluation of `agent` on fresh instances of the configured env.
pub fn evaluate_agent<T: Scalar>(agent: &Agent<T>, config: &RunConfig, episodes: usize, tag: u64) -> Result<EvalReport> {
    let mut rng = substream(derived_seed(config.seed, "eval", tag), "eval");
    let mut returns = Vec::with_capacity(episodes);
    let (mut answers, mut correct) = (0, 0);
    for ep in 0..episodes {
        let mut env = config.env.build(derived_seed(config.seed, "eval_env", tag.wrapping_mul(1 << 16) + ep as u64))?;
        let mut state = agent.initial_state(1);
        let mut cur = env.reset();
        let mut ret = 0.0;
        loop {
            ret += cur.reward;
            for e in &cur.info.events {
                if e.starts_with("answer_") {
                    answers += 1;
                    correct += (e == "answer_correct") as usize;
                }
            }
            if cur.is_last {
                break;
            }
            let a = agent.policy_step(
                &mut state,
                &cur.obs.image,
                &[cur.obs.token],
                &[cur.is_first],
                ActMode::Greedy,
                &mut rng,
            )?;
            cur = env.step(&a[0])?;
        }
        returns.push(ret);
    }
    Ok(EvalReport {
        episodes,
        mean_return: returns.iter().sum::<f64>() / episodes.max(1) as f64,
        returns,
        answers,
        correct,
    })
}
