//! Actor-critic trained on imagined rollouts.
//!
//! A rollout of horizon `T` from start state `s_0` samples `a_t ~ π(s_t)`,
//! steps the world model open-loop to `s_{t+1}` and decodes `r_t` and `c_t`
//! from `s_{t+1}`. Then
//!
//! ```text
//! R_T = V_T
//! R_t = r_t + γ c_t ((1 - λ) V_{t+1} + λ R_{t+1})
//! w_0 = 1,  w_{t+1} = w_t γ c_t
//! L_V = Σ_t w_t catxent(V(s_t), sg(twohot(R_t)))
//! L_π = Σ_t w_t [ -sg((R_t - V_t) / max(1, S)) log π(a_t | s_t)
//!                 - η H[π(· | s_t)]
//!                 + β_lm KL[π_tok(· | s_t) ‖ sg(p(l̂_{t+1} | s_{t+1}))] ]
//! ```
//!
//! `S` is the EMA of the 5th-95th percentile range of returns. Both losses
//! are averaged over rows and steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codecs::{argmax, sample_index, twohot_cross_entropy, LatentMode, PercentileEma, TwohotSpec};
use crate::diff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Head, Linear, Mlp};
use crate::scalar::{c, Scalar};
use crate::worldmodel::{ActionInput, LatentState, WorldModel};

/// Uniform mixture weight of actor distributions.
pub const ACTOR_UNIMIX: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    /// Entropy coefficient η.
    pub entropy: f64,
    /// Language-prior regularizer coefficient. The prior joins the entropy
    /// regularizer, so it defaults to the entropy coefficient.
    pub lm_coef: f64,
    /// Enables the language-prior regularizer (needs token actions).
    pub lm_reg: bool,
    pub hidden: usize,
    pub layers: usize,
    pub value_bins: usize,
    pub return_decay: f64,
    /// Bootstrap from an EMA copy of the critic instead of the live one.
    pub slow_critic: bool,
    pub slow_decay: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            gamma: 0.99,
            lambda: 0.95,
            entropy: 3e-4,
            lm_coef: 3e-4,
            lm_reg: false,
            hidden: 256,
            layers: 2,
            value_bins: 63,
            return_decay: 0.99,
            slow_critic: false,
            slow_decay: 0.98,
        }
    }
}

impl PolicyConfig {
    pub fn tiny() -> Self {
        Self {
            hidden: 16,
            layers: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.horizon == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("policy horizon, hidden and layers must be positive".into()));
        }
        if !(unit(self.gamma) && unit(self.lambda) && unit(self.return_decay) && unit(self.slow_decay)) {
            return Err(Error::Config("policy gamma, lambda and decays must lie in [0, 1]".into()));
        }
        if !(self.entropy >= 0.0 && self.lm_coef >= 0.0) {
            return Err(Error::Config("policy coefficients must be non-negative".into()));
        }
        TwohotSpec::new(self.value_bins, 20.0)?;
        Ok(())
    }
}

/// `R_0..R_T` by the backward recursion, with `R_T = V_T`.
///
/// `rewards` and `conts` have length `T`, `values` length `T + 1`.
pub fn lambda_returns(rewards: &[f64], conts: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let t = rewards.len();
    if conts.len() != t || values.len() != t + 1 {
        return Err(Error::Usage(format!(
            "lambda returns need T rewards/continues and T+1 values, got {}, {}, {}",
            t,
            conts.len(),
            values.len()
        )));
    }
    let mut out = vec![0.0; t + 1];
    out[t] = values[t];
    for i in (0..t).rev() {
        out[i] = rewards[i] + gamma * conts[i] * ((1.0 - lambda) * values[i + 1] + lambda * out[i + 1]);
    }
    Ok(out)
}

/// `w_0 = 1`, `w_{t+1} = w_t γ c_t`; length `T + 1`.
pub fn discount_weights(conts: &[f64], gamma: f64) -> Vec<f64> {
    let mut w = Vec::with_capacity(conts.len() + 1);
    w.push(1.0);
    for &c in conts {
        w.push(w.last().unwrap() * gamma * c);
    }
    w
}

/// Actor with a movement head and, for factored action spaces, a token head.
#[derive(Clone, Debug)]
pub struct Actor {
    trunk: Mlp,
    moves: Linear,
    tokens: Option<Linear>,
    pub num_moves: usize,
    pub num_tokens: usize,
}

/// Sampled actions for a batch of rows; `tokens` is empty without a token head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActionSample {
    pub moves: Vec<usize>,
    pub tokens: Vec<usize>,
}

impl Actor {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &PolicyConfig,
        feat: usize,
        moves: usize,
        tokens: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hid = vec![config.hidden; config.layers];
        let trunk = Mlp::new(store, "actor/trunk", feat, &hid, Head::None, rng)?;
        let w = trunk.out_dim();
        let move_head = Linear::new(store, "actor/moves", w, moves, true, rng)?;
        let token_head = if tokens > 0 {
            Some(Linear::new(store, "actor/tokens", w, tokens, true, rng)?)
        } else {
            None
        };
        Ok(Self {
            trunk,
            moves: move_head,
            tokens: token_head,
            num_moves: moves,
            num_tokens: tokens,
        })
    }

    pub fn has_tokens(&self) -> bool {
        self.tokens.is_some()
    }

    /// Mixed probabilities `(moves [N, M], tokens [N, V])`.
    pub fn probs<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<(Var, Option<Var>)> {
        let x = self.trunk.forward(g, store, feat)?;
        let ml = self.moves.forward(g, store, x)?;
        let mp = mix(g, ml);
        let tp = match &self.tokens {
            Some(head) => {
                let tl = head.forward(g, store, x)?;
                Some(mix(g, tl))
            }
            None => None,
        };
        Ok((mp, tp))
    }

    /// Samples (or takes the argmax of) each action factor.
    pub fn act<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        feat: &Tensor<T>,
        greedy: bool,
        rng: &mut impl Rng,
    ) -> Result<ActionSample> {
        let mut g = Graph::no_grad();
        let f = g.constant(feat.clone());
        let (mp, tp) = self.probs(&mut g, store, f)?;
        let moves = choose(g.value(mp), greedy, rng);
        let tokens = match tp {
            Some(tp) => choose(g.value(tp), greedy, rng),
            None => Vec::new(),
        };
        Ok(ActionSample { moves, tokens })
    }
}

fn choose<T: Scalar>(p: &Tensor<T>, greedy: bool, rng: &mut impl Rng) -> Vec<usize> {
    (0..p.rows())
        .map(|r| if greedy { argmax(p.row(r)) } else { sample_index(p.row(r), rng) })
        .collect()
}

/// `(1 - u) softmax(logits) + u / n`.
fn mix<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Var {
    let n = g.value(logits).cols();
    let p = g.softmax(logits);
    let p = g.scale(p, c(1.0 - ACTOR_UNIMIX));
    g.add_scalar(p, c(ACTOR_UNIMIX / n as f64))
}

/// Distributional critic over symlog bins.
#[derive(Clone, Debug)]
pub struct Critic {
    net: Mlp,
    pub spec: TwohotSpec,
}

impl Critic {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &PolicyConfig,
        feat: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hid = vec![config.hidden; config.layers];
        Ok(Self {
            net: Mlp::new(store, "critic", feat, &hid, Head::Zero(config.value_bins), rng)?,
            spec: TwohotSpec::new(config.value_bins, 20.0)?,
        })
    }

    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<Var> {
        self.net.forward(g, store, feat)
    }

    /// Decoded values of feature rows.
    pub fn values<T: Scalar>(&self, store: &ParamStore<T>, feat: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad();
        let f = g.constant(feat.clone());
        let l = self.logits(&mut g, store, f)?;
        Ok(self.spec.decode_logits(g.value(l)).into_iter().map(|v| v.to_f64c()).collect())
    }
}

/// `target ← decay · target + (1 - decay) · source`.
pub fn ema_update<T: Scalar>(target: &mut ParamStore<T>, source: &ParamStore<T>, decay: f64) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::Config("EMA stores differ in layout".into()));
    }
    let (d, e) = (c::<T>(decay), c::<T>(1.0 - decay));
    for (id, sid) in target.ids().collect::<Vec<_>>().into_iter().zip(source.ids()) {
        let src = source.value(sid).clone();
        let dst = target.value_mut(id);
        if dst.shape() != src.shape() {
            return Err(Error::Config("EMA stores differ in layout".into()));
        }
        for (a, &b) in dst.data_mut().iter_mut().zip(src.data()) {
            *a = d * *a + e * b;
        }
    }
    Ok(())
}

/// Imagined trajectories, time-major: row `t * starts + s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Imagination<T> {
    pub starts: usize,
    pub horizon: usize,
    /// `[(T + 1) · starts, feat]`.
    pub feats: Tensor<T>,
    /// `T · starts` entries each.
    pub moves: Vec<usize>,
    pub tokens: Vec<usize>,
    pub rewards: Vec<f64>,
    pub conts: Vec<f64>,
    /// `[T · starts, vocab]` model token distribution at `s_{t+1}`.
    pub lm_targets: Option<Tensor<T>>,
}

impl<T: Scalar> Imagination<T> {
    /// Per-start series `(rewards, conts)` of length `T`.
    fn series(&self, s: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.starts;
        (
            (0..self.horizon).map(|t| self.rewards[t * n + s]).collect(),
            (0..self.horizon).map(|t| self.conts[t * n + s]).collect(),
        )
    }

    /// Rows `t * starts .. (t + 1) * starts` for `t < T` as one tensor.
    fn head_feats(&self) -> Tensor<T> {
        let f = self.feats.cols();
        let n = self.horizon * self.starts;
        Tensor::new(vec![n, f], self.feats.data()[..n * f].to_vec()).expect("feature rows")
    }
}

/// Rolls the actor through the world model from every start state.
#[allow(clippy::too_many_arguments)]
pub fn rollout<T: Scalar>(
    wm: &WorldModel,
    wm_store: &ParamStore<T>,
    actor: &Actor,
    actor_store: &ParamStore<T>,
    starts: &LatentState<T>,
    horizon: usize,
    lm_targets: bool,
    rng: &mut impl Rng,
) -> Result<Imagination<T>> {
    if lm_targets && !actor.has_tokens() {
        return Err(Error::Config("language-prior regularizer needs a token action head".into()));
    }
    if lm_targets && actor.num_tokens != wm.obs.vocab {
        return Err(Error::Config(format!(
            "language-prior regularizer needs matching vocabularies ({} action tokens, {} observed)",
            actor.num_tokens, wm.obs.vocab
        )));
    }
    let n = starts.rows();
    let mut state = starts.clone();
    let mut feats = Vec::with_capacity((horizon + 1) * n * wm.config.feat());
    let mut out = Imagination {
        starts: n,
        horizon,
        feats: Tensor::zeros(&[0]),
        moves: Vec::with_capacity(horizon * n),
        tokens: Vec::new(),
        rewards: Vec::with_capacity(horizon * n),
        conts: Vec::with_capacity(horizon * n),
        lm_targets: None,
    };
    let mut targets = Vec::new();
    let mut g = Graph::no_grad();
    for _ in 0..horizon {
        let feat = state.feat();
        let a = actor.act(actor_store, &feat, false, rng)?;
        feats.extend_from_slice(feat.data());
        let input = if actor.has_tokens() {
            ActionInput::new(&a.moves, &a.tokens)
        } else {
            ActionInput {
                moves: a.moves.iter().map(|&m| Some(m)).collect(),
                tokens: Vec::new(),
            }
        };
        let h = g.constant(state.h.clone());
        let z = g.constant(state.z.clone());
        let (_, _, step) = wm.imagine_step(&mut g, wm_store, h, z, &input, LatentMode::Sample, rng)?;
        out.rewards.extend(step.reward.iter().map(|r| r.to_f64c()));
        out.conts.extend(step.cont.iter().map(|c| c.to_f64c()));
        out.moves.extend(a.moves);
        out.tokens.extend(a.tokens);
        if lm_targets {
            targets.extend_from_slice(wm.token_probs(wm_store, &step.state)?.data());
        }
        state = step.state;
        // keep the tape short: values only are needed
        g = Graph::no_grad();
    }
    feats.extend_from_slice(state.feat().data());
    out.feats = Tensor::new(vec![(horizon + 1) * n, wm.config.feat()], feats)?;
    if lm_targets {
        out.lm_targets = Some(Tensor::new(vec![horizon * n, wm.obs.vocab], targets)?);
    }
    Ok(out)
}

/// Inputs of [`actor_loss`]; all per-row quantities are constants.
#[derive(Clone, Debug)]
pub struct ActorBatch<T> {
    pub feats: Tensor<T>,
    pub moves: Vec<usize>,
    pub tokens: Vec<usize>,
    /// Normalized advantages `(R - V) / max(1, S)`.
    pub advantages: Vec<f64>,
    pub weights: Vec<f64>,
    pub lm_targets: Option<Tensor<T>>,
}

/// Inputs of [`critic_loss`].
#[derive(Clone, Debug)]
pub struct CriticBatch<T> {
    pub feats: Tensor<T>,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    pub return_mean: f64,
    pub value_mean: f64,
    pub advantage_mean: f64,
    /// Percentile return scale `S`.
    pub scale: f64,
    pub entropy: f64,
    pub lm_kl: f64,
    pub weight_mean: f64,
    pub imagined_reward: f64,
}

/// λ-returns, weights and normalized advantages for an imagination batch.
pub fn prepare<T: Scalar>(
    imag: &Imagination<T>,
    values: &[f64],
    config: &PolicyConfig,
    percentile: &mut PercentileEma,
) -> Result<(ActorBatch<T>, CriticBatch<T>, PolicyStats)> {
    let (n, h) = (imag.starts, imag.horizon);
    if values.len() != (h + 1) * n {
        return Err(Error::shape("prepare", format!("{} values for {} rows", values.len(), (h + 1) * n)));
    }
    let mut returns = vec![0.0; h * n];
    let mut weights = vec![0.0; h * n];
    for s in 0..n {
        let (r, cont) = imag.series(s);
        let v: Vec<f64> = (0..=h).map(|t| values[t * n + s]).collect();
        let ret = lambda_returns(&r, &cont, &v, config.gamma, config.lambda)?;
        let w = discount_weights(&cont, config.gamma);
        for t in 0..h {
            returns[t * n + s] = ret[t];
            weights[t * n + s] = w[t];
        }
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("imagined lambda returns".into()));
    }
    let scale = percentile.update(&returns)?;
    let norm = scale.max(1.0);
    let advantages: Vec<f64> = returns.iter().zip(values).map(|(r, v)| (r - v) / norm).collect();
    let feats = imag.head_feats();
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len().max(1) as f64;
    let stats = PolicyStats {
        return_mean: mean(&returns),
        value_mean: mean(&values[..h * n]),
        advantage_mean: mean(&advantages),
        scale,
        weight_mean: mean(&weights),
        imagined_reward: mean(&imag.rewards),
        ..PolicyStats::default()
    };
    Ok((
        ActorBatch {
            feats: feats.clone(),
            moves: imag.moves.clone(),
            tokens: imag.tokens.clone(),
            advantages,
            weights: weights.clone(),
            lm_targets: imag.lm_targets.clone(),
        },
        CriticBatch {
            feats,
            targets: returns,
            weights,
        },
        stats,
    ))
}

fn column<T: Scalar>(g: &mut Graph<T>, v: impl Iterator<Item = f64>) -> Var {
    let data: Vec<T> = v.map(c).collect();
    g.constant(Tensor::from_vec(data))
}

/// `Σ p log p` per row, as `[N]`.
fn neg_entropy<T: Scalar>(g: &mut Graph<T>, p: Var) -> Var {
    let lp = g.log(p);
    let plp = g.mul(p, lp).expect("same shape");
    g.sum_cols(plp)
}

/// Weighted REINFORCE loss with entropy bonus and the optional language
/// prior. Returns the loss and `(mean entropy, mean KL)`.
pub fn actor_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    actor: &Actor,
    batch: &ActorBatch<T>,
    config: &PolicyConfig,
) -> Result<(Var, f64, f64)> {
    let rows = batch.feats.rows();
    if batch.moves.len() != rows || batch.advantages.len() != rows || batch.weights.len() != rows {
        return Err(Error::shape("actor_loss", format!("{rows} rows with mismatched per-row inputs")));
    }
    if actor.has_tokens() && batch.tokens.len() != rows {
        return Err(Error::shape("actor_loss", "token actions missing"));
    }
    let f = g.constant(batch.feats.clone());
    let (mp, tp) = actor.probs(g, store, f)?;
    let mlp = g.log(mp);
    let mut logp = g.pick(mlp, &batch.moves)?;
    let mut negent = neg_entropy(g, mp);
    if let Some(tp) = tp {
        let tlp = g.log(tp);
        let lt = g.pick(tlp, &batch.tokens)?;
        logp = g.add(logp, lt)?;
        let ne = neg_entropy(g, tp);
        negent = g.add(negent, ne)?;
    }
    let adv_w = column(g, batch.advantages.iter().zip(&batch.weights).map(|(a, w)| a * w));
    let ent_w = column(g, batch.weights.iter().map(|w| w * config.entropy));
    let pg = g.mul(logp, adv_w)?;
    let ent = g.mul(negent, ent_w)?;
    // -adv·log π + η·(-H)
    let mut per_row = g.sub(ent, pg)?;
    let entropy = -g.value(negent).data().iter().map(|x| x.to_f64c()).sum::<f64>() / rows as f64;

    let mut lm_kl = 0.0;
    if config.lm_reg {
        let (Some(tp), Some(targets)) = (tp, &batch.lm_targets) else {
            return Err(Error::Config("language-prior regularizer needs a token head and model targets".into()));
        };
        let kl = lm_kl_var(g, tp, targets)?;
        lm_kl = g.value(kl).data().iter().map(|x| x.to_f64c()).sum::<f64>() / rows as f64;
        let kl_w = column(g, batch.weights.iter().map(|w| w * config.lm_coef));
        let term = g.mul(kl, kl_w)?;
        per_row = g.add(per_row, term)?;
    }
    Ok((g.mean(per_row), entropy, lm_kl))
}

/// `KL[π ‖ q]` per row with `q` a constant distribution.
pub fn lm_kl_var<T: Scalar>(g: &mut Graph<T>, policy: Var, target: &Tensor<T>) -> Result<Var> {
    if g.value(policy).shape() != target.shape() {
        return Err(Error::shape(
            "lm_kl",
            format!("policy {:?} vs model {:?}", g.value(policy).shape(), target.shape()),
        ));
    }
    let floor = c::<T>(1e-12);
    let log_q = g.constant(target.map(|q| q.max(floor).ln()));
    let log_p = g.log(policy);
    let diff = g.sub(log_p, log_q)?;
    let prod = g.mul(policy, diff)?;
    Ok(g.sum_cols(prod))
}

/// Weighted twohot cross entropy against gradient-stopped returns.
pub fn critic_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    critic: &Critic,
    batch: &CriticBatch<T>,
) -> Result<Var> {
    let rows = batch.feats.rows();
    if batch.targets.len() != rows || batch.weights.len() != rows {
        return Err(Error::shape("critic_loss", format!("{rows} rows with mismatched targets")));
    }
    let f = g.constant(batch.feats.clone());
    let logits = critic.logits(g, store, f)?;
    let targets: Vec<T> = batch.targets.iter().map(|&v| c(v)).collect();
    let ce = twohot_cross_entropy(g, &critic.spec, logits, &targets)?;
    let w = column(g, batch.weights.iter().copied());
    let wce = g.mul(ce, w)?;
    Ok(g.mean(wce))
}
