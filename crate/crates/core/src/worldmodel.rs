//! Multimodal recurrent state-space model.
//!
//! Per step the sequence model advances `h` from the previous code and
//! action, the prior predicts the next code from `h` alone, and the
//! posterior sees `h` plus the encoded observation (image and token).
//! Decoder heads reconstruct image and token and predict reward and
//! continuation from `[h, z]`.
//!
//! ```text
//! h_t      = gru(block([z_{t-1}, a_{t-1}]), h_{t-1})
//! ẑ_t      ~ prior(h_t)
//! z_t      ~ post(h_t, enc(x_t, l_t))
//! x̂, l̂, r̂, ĉ = dec(h_t, z_t)
//! ```
//!
//! Rows of a [`SeqBatch`] are time-major: row `t * batch + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codecs::{
    argmax, kl_clipped, mixed_probs, probs_var, sample_index, st_sample_var, LatentMode, StopSide,
    TwohotSpec, UNIMIX,
};
use crate::diff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Block, ConvDecoder, ConvEncoder, GruCell, Head, Mlp};
use crate::scalar::{c, Scalar};
use dynalang_envs::{ActionSpace, ImageKind, ObsSpace, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldModelConfig {
    /// GRU units.
    pub deter: usize,
    pub groups: usize,
    pub classes: usize,
    /// Width of every MLP layer.
    pub hidden: usize,
    /// Hidden layers of the encoder and decoder MLPs.
    pub layers: usize,
    pub token_embed: usize,
    pub action_embed: usize,
    /// Channels of the first conv layer (pixel observations only).
    pub cnn_depth: usize,
    pub reward_bins: usize,
    pub beta_reg: f64,
    pub beta_pred: f64,
    pub image_scale: f64,
    pub token_scale: f64,
    pub reward_scale: f64,
    pub cont_scale: f64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            deter: 256,
            groups: 8,
            classes: 8,
            hidden: 256,
            layers: 2,
            token_embed: 32,
            action_embed: 32,
            cnn_depth: 16,
            reward_bins: 63,
            beta_reg: 0.1,
            beta_pred: 0.5,
            image_scale: 1.0,
            token_scale: 1.0,
            reward_scale: 1.0,
            cont_scale: 1.0,
        }
    }
}

impl WorldModelConfig {
    /// Small sizes for tests and smoke runs.
    pub fn tiny() -> Self {
        Self {
            deter: 16,
            groups: 4,
            classes: 4,
            hidden: 16,
            layers: 1,
            token_embed: 8,
            action_embed: 8,
            cnn_depth: 4,
            ..Self::default()
        }
    }

    pub fn stoch(&self) -> usize {
        self.groups * self.classes
    }

    /// Width of the `[h, z]` feature.
    pub fn feat(&self) -> usize {
        self.deter + self.stoch()
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("deter", self.deter),
            ("groups", self.groups),
            ("classes", self.classes),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("token_embed", self.token_embed),
            ("action_embed", self.action_embed),
            ("cnn_depth", self.cnn_depth),
        ];
        if let Some((k, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{k} must be positive")));
        }
        if self.classes < 2 {
            return Err(Error::Config("model.classes must be at least 2".into()));
        }
        let scales = [
            ("beta_reg", self.beta_reg),
            ("beta_pred", self.beta_pred),
            ("image_scale", self.image_scale),
            ("token_scale", self.token_scale),
            ("reward_scale", self.reward_scale),
            ("cont_scale", self.cont_scale),
        ];
        if let Some((k, v)) = scales.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("model.{k} must be finite and non-negative, got {v}")));
        }
        TwohotSpec::new(self.reward_bins, 20.0)?;
        Ok(())
    }
}

/// Which loss terms and inputs are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Full,
    /// Text-only: zero image and action inputs; image, reward and continue
    /// terms have coefficient 0.
    TextPretrain,
}

/// Means over batch × time; `total` is their sum. `reg` and `pred` include
/// their betas.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub image: f64,
    pub token: f64,
    pub reward: f64,
    pub cont: f64,
    pub reg: f64,
    pub pred: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const NAMES: [&'static str; 7] = ["image", "token", "reward", "cont", "reg", "pred", "total"];

    pub fn values(&self) -> [f64; 7] {
        [self.image, self.token, self.reward, self.cont, self.reg, self.pred, self.total]
    }
}

/// Training sequences, time-major (row `t * batch + b`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeqBatch {
    pub batch: usize,
    pub length: usize,
    /// `length · batch · image_len` bytes; empty for text-only batches.
    pub images: Vec<u8>,
    pub tokens: Vec<usize>,
    /// Action taken after observing the row.
    pub moves: Vec<usize>,
    pub act_tokens: Vec<usize>,
    pub rewards: Vec<f64>,
    pub conts: Vec<f64>,
    pub is_first: Vec<bool>,
}

impl SeqBatch {
    pub fn rows(&self) -> usize {
        self.batch * self.length
    }

    /// Text-only batch from `batch` token sequences of equal length.
    pub fn text(seqs: &[Vec<usize>], is_first: &[Vec<bool>]) -> Result<Self> {
        let batch = seqs.len();
        let length = seqs.first().map_or(0, Vec::len);
        if batch == 0 || length == 0 || seqs.iter().any(|s| s.len() != length) {
            return Err(Error::Usage("text batch needs equal, nonempty sequences".into()));
        }
        let mut out = Self {
            batch,
            length,
            ..Self::default()
        };
        for t in 0..length {
            for b in 0..batch {
                out.tokens.push(seqs[b][t]);
                out.is_first.push(is_first[b][t]);
            }
        }
        let n = out.rows();
        out.moves = vec![0; n];
        out.act_tokens = vec![PAD; n];
        out.rewards = vec![0.0; n];
        out.conts = vec![1.0; n];
        Ok(out)
    }

    fn check(&self, model: &WorldModel, mode: LossMode) -> Result<()> {
        let n = self.rows();
        let lens = [
            ("tokens", self.tokens.len()),
            ("moves", self.moves.len()),
            ("act_tokens", self.act_tokens.len()),
            ("rewards", self.rewards.len()),
            ("conts", self.conts.len()),
            ("is_first", self.is_first.len()),
        ];
        if n == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        if let Some((k, l)) = lens.iter().find(|(_, l)| *l != n) {
            return Err(Error::shape("seq_batch", format!("{k} has {l} rows, expected {n}")));
        }
        if mode == LossMode::Full && self.images.len() != n * model.obs.image_len() {
            return Err(Error::shape(
                "seq_batch",
                format!("{} image bytes for {n} rows of {}", self.images.len(), model.obs.image_len()),
            ));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t >= model.obs.vocab) {
            return Err(Error::Data(format!("token id {t} outside vocabulary of {}", model.obs.vocab)));
        }
        Ok(())
    }
}

/// Recurrent state for a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<T> {
    /// `[B, deter]`.
    pub h: Tensor<T>,
    /// `[B, groups · classes]`, one-hot per group.
    pub z: Tensor<T>,
}

impl<T: Scalar> LatentState<T> {
    pub fn zeros(config: &WorldModelConfig, rows: usize) -> Self {
        Self {
            h: Tensor::zeros(&[rows, config.deter]),
            z: Tensor::zeros(&[rows, config.stoch()]),
        }
    }

    pub fn rows(&self) -> usize {
        self.h.rows()
    }

    /// `[B, deter + stoch]`.
    pub fn feat(&self) -> Tensor<T> {
        let (d, s) = (self.h.cols(), self.z.cols());
        let mut data = Vec::with_capacity(self.rows() * (d + s));
        for r in 0..self.rows() {
            data.extend_from_slice(self.h.row(r));
            data.extend_from_slice(self.z.row(r));
        }
        Tensor::new(vec![self.rows(), d + s], data).expect("feat shape")
    }

    /// Zeroes rows where `reset` is set.
    pub fn reset_rows(&mut self, reset: &[bool]) {
        for (r, &flag) in reset.iter().enumerate() {
            if flag {
                let d = self.h.cols();
                self.h.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|x| *x = T::zero());
                let s = self.z.cols();
                self.z.data_mut()[r * s..(r + 1) * s].iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }
}

/// Previous actions fed to the sequence model; `None` is the zero action.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActionInput {
    pub moves: Vec<Option<usize>>,
    pub tokens: Vec<Option<usize>>,
}

impl ActionInput {
    pub fn zeros(rows: usize) -> Self {
        Self {
            moves: vec![None; rows],
            tokens: vec![None; rows],
        }
    }

    pub fn new(moves: &[usize], tokens: &[usize]) -> Self {
        Self {
            moves: moves.iter().map(|&m| Some(m)).collect(),
            tokens: tokens.iter().map(|&t| Some(t)).collect(),
        }
    }
}

/// Result of [`WorldModel::compute_losses`].
pub struct WorldModelLoss<T> {
    pub total: Var,
    /// `[image, token, reward, cont, reg, pred]`, already scaled.
    pub terms: [Var; 6],
    pub breakdown: LossBreakdown,
    /// Posterior states of every row, detached, in batch row order.
    pub posterior: LatentState<T>,
    /// Per-step mixed probabilities of both KL sides.
    pub kl_sides: KlSides<T>,
}

/// Posterior and prior probabilities `[B·groups, classes]` per time step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KlSides<T> {
    pub post: Vec<Tensor<T>>,
    pub prior: Vec<Tensor<T>>,
}

/// Output of one open-loop step.
pub struct Imagined<T> {
    pub state: LatentState<T>,
    pub reward: Vec<T>,
    /// Continue probability.
    pub cont: Vec<T>,
}

#[derive(Clone, Debug)]
enum ImageEncoder {
    Mlp(Mlp),
    Conv(ConvEncoder),
}

#[derive(Clone, Debug)]
enum ImageDecoder {
    Mlp(Mlp),
    Conv(ConvDecoder),
}

/// Parameter name prefixes, for gradient inspection.
pub mod prefix {
    pub const ENCODER: &str = "enc/";
    pub const POSTERIOR: &str = "post/";
    pub const SEQUENCE: &str = "seq/";
    pub const PRIOR: &str = "prior/";
    pub const IMAGE_HEAD: &str = "dec/image/";
    pub const TOKEN_HEAD: &str = "dec/token/";
    pub const REWARD_HEAD: &str = "dec/reward/";
    pub const CONT_HEAD: &str = "dec/cont/";
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub obs: ObsSpace,
    pub act: ActionSpace,
    pub reward_spec: TwohotSpec,
    image_enc: ImageEncoder,
    token_table: ParamId,
    token_enc: Block,
    move_table: ParamId,
    act_token_table: Option<ParamId>,
    seq_in: Block,
    gru: GruCell,
    prior: Mlp,
    post: Mlp,
    image_dec: ImageDecoder,
    token_head: Mlp,
    reward_head: Mlp,
    cont_head: Mlp,
}

impl WorldModel {
    pub fn new<T: Scalar>(
        config: WorldModelConfig,
        obs: ObsSpace,
        act: ActionSpace,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if obs.vocab == 0 || act.moves == 0 {
            return Err(Error::Config("observation vocabulary and movement space must be nonempty".into()));
        }
        let cfg = &config;
        let hid = vec![cfg.hidden; cfg.layers];
        let image_len = obs.image_len();
        let image_enc = match obs.kind {
            ImageKind::Symbols => ImageEncoder::Mlp(Mlp::new(store, "enc/image", image_len, &hid, Head::None, rng)?),
            ImageKind::Pixels => ImageEncoder::Conv(ConvEncoder::new(store, "enc/image", obs.image, cfg.cnn_depth, rng)?),
        };
        let image_out = match &image_enc {
            ImageEncoder::Mlp(m) => m.out_dim(),
            ImageEncoder::Conv(c) => c.out_dim,
        };
        let token_table = store.insert_glorot("enc/token/table", &[obs.vocab, cfg.token_embed], 1, cfg.token_embed, rng)?;
        let token_enc = Block::new(store, "enc/token/block", cfg.token_embed, cfg.hidden, rng)?;
        let embed = image_out + cfg.hidden;

        let move_table = store.insert_glorot("seq/move_table", &[act.moves, cfg.action_embed], 1, cfg.action_embed, rng)?;
        let act_token_table = if act.has_tokens() {
            Some(store.insert_glorot("seq/token_table", &[act.tokens, cfg.action_embed], 1, cfg.action_embed, rng)?)
        } else {
            None
        };
        let act_width = cfg.action_embed * if act.has_tokens() { 2 } else { 1 };
        let seq_in = Block::new(store, "seq/in", cfg.stoch() + act_width, cfg.hidden, rng)?;
        let gru = GruCell::new(store, "seq/gru", cfg.hidden, cfg.deter, rng)?;
        let prior = Mlp::new(store, "prior", cfg.deter, &[cfg.hidden], Head::Random(cfg.stoch()), rng)?;
        let post = Mlp::new(store, "post", cfg.deter + embed, &[cfg.hidden], Head::Random(cfg.stoch()), rng)?;

        let feat = cfg.feat();
        let image_dec = match obs.kind {
            ImageKind::Symbols => {
                ImageDecoder::Mlp(Mlp::new(store, "dec/image", feat, &hid, Head::Random(image_len), rng)?)
            }
            ImageKind::Pixels => {
                ImageDecoder::Conv(ConvDecoder::new(store, "dec/image", feat, obs.image, cfg.cnn_depth, rng)?)
            }
        };
        let token_head = Mlp::new(store, "dec/token", feat, &hid, Head::Random(obs.vocab), rng)?;
        let reward_head = Mlp::new(store, "dec/reward", feat, &hid, Head::Zero(cfg.reward_bins), rng)?;
        let cont_head = Mlp::new(store, "dec/cont", feat, &hid, Head::Random(1), rng)?;
        let reward_spec = TwohotSpec::new(cfg.reward_bins, 20.0)?;
        Ok(Self {
            config,
            obs,
            act,
            reward_spec,
            image_enc,
            token_table,
            token_enc,
            move_table,
            act_token_table,
            seq_in,
            gru,
            prior,
            post,
            image_dec,
            token_head,
            reward_head,
            cont_head,
        })
    }

    // ------------------------------------------------------------ pieces

    /// `h_t` from `(z_{t-1}, h_{t-1}, a_{t-1})` and the prior logits of `ẑ_t`.
    pub fn sequence_step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        h: Var,
        action: &ActionInput,
    ) -> Result<(Var, Var)> {
        let rows = g.value(h).rows();
        if action.moves.len() != rows || (self.act.has_tokens() && action.tokens.len() != rows) {
            return Err(Error::shape("sequence_step", format!("{rows} rows, {} actions", action.moves.len())));
        }
        if let Some(m) = action.moves.iter().flatten().find(|&&m| m >= self.act.moves) {
            return Err(Error::Data(format!("movement {m} outside {} choices", self.act.moves)));
        }
        let table = g.param(store, self.move_table);
        let mut parts = vec![z, g.embedding(table, &action.moves)?];
        if let Some(t) = self.act_token_table {
            let table = g.param(store, t);
            parts.push(g.embedding(table, &action.tokens)?);
        }
        let x = g.concat(&parts)?;
        let x = self.seq_in.forward(g, store, x)?;
        let h = self.gru.forward(g, store, x, h)?;
        let prior = self.prior.forward(g, store, h)?;
        Ok((h, prior))
    }

    /// Observation embedding `[B, embed]`; `image` is `[B, image_len]`.
    fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var, tokens: &[usize]) -> Result<Var> {
        if let Some(t) = tokens.iter().find(|&&t| t >= self.obs.vocab) {
            return Err(Error::Data(format!("token id {t} outside vocabulary of {}", self.obs.vocab)));
        }
        let img = match &self.image_enc {
            ImageEncoder::Mlp(m) => m.forward(g, store, image)?,
            ImageEncoder::Conv(c) => c.forward(g, store, image)?,
        };
        let table = g.param(store, self.token_table);
        let ids: Vec<Option<usize>> = tokens.iter().map(|&t| Some(t)).collect();
        let tok = g.embedding(table, &ids)?;
        let tok = self.token_enc.forward(g, store, tok)?;
        g.concat(&[img, tok])
    }

    /// Posterior logits `[B, stoch]` from `h` and an observation.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        image: Var,
        tokens: &[usize],
    ) -> Result<Var> {
        let e = self.embed(g, store, image, tokens)?;
        let x = g.concat(&[h, e])?;
        self.post.forward(g, store, x)
    }

    /// Straight-through code `[B, stoch]` from logits `[B, stoch]`.
    pub fn sample_code<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        logits: Var,
        mode: LatentMode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let rows = g.value(logits).rows();
        let p = probs_var(g, logits, self.config.classes)?;
        st_sample_var(g, p, rows, mode, rng)
    }

    pub fn image_head<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<Var> {
        match &self.image_dec {
            ImageDecoder::Mlp(m) => m.forward(g, store, feat),
            ImageDecoder::Conv(c) => c.forward(g, store, feat),
        }
    }

    pub fn token_logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<Var> {
        self.token_head.forward(g, store, feat)
    }

    pub fn reward_logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<Var> {
        self.reward_head.forward(g, store, feat)
    }

    pub fn cont_logit<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<Var> {
        self.cont_head.forward(g, store, feat)
    }

    /// All four heads on `[h, z]`.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        z: Var,
    ) -> Result<[Var; 4]> {
        let feat = g.concat(&[h, z])?;
        Ok([
            self.image_head(g, store, feat)?,
            self.token_logits(g, store, feat)?,
            self.reward_logits(g, store, feat)?,
            self.cont_logit(g, store, feat)?,
        ])
    }

    /// `[rows, image_len]` reals from stored bytes.
    pub fn image_tensor<T: Scalar>(&self, bytes: &[u8]) -> Tensor<T> {
        let len = self.obs.image_len();
        let scale = match self.obs.kind {
            ImageKind::Symbols => 1.0,
            ImageKind::Pixels => 1.0 / 255.0,
        };
        let data = bytes.iter().map(|&b| c::<T>(b as f64 * scale)).collect();
        Tensor::new(vec![bytes.len() / len, len], data).expect("whole images")
    }

    // -------------------------------------------------------------- losses

    /// Unrolls the batch and builds every loss term.
    pub fn compute_losses<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &SeqBatch,
        mode: LossMode,
        latent: LatentMode,
        rng: &mut impl Rng,
    ) -> Result<WorldModelLoss<T>> {
        self.unroll(g, store, batch, mode, latent, rng, None)
    }

    /// As [`compute_losses`](Self::compute_losses), but the stop-gradient
    /// side of each KL term is the given constant instead of the live value.
    /// The analytic gradient is unchanged; finite differences of this
    /// function are what it should match.
    #[allow(clippy::too_many_arguments)]
    pub fn compute_losses_frozen<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &SeqBatch,
        mode: LossMode,
        latent: LatentMode,
        rng: &mut impl Rng,
        frozen: &KlSides<T>,
    ) -> Result<WorldModelLoss<T>> {
        if frozen.post.len() != batch.length || frozen.prior.len() != batch.length {
            return Err(Error::shape("compute_losses_frozen", "one frozen pair per time step"));
        }
        self.unroll(g, store, batch, mode, latent, rng, Some(frozen))
    }

    #[allow(clippy::too_many_arguments)]
    fn unroll<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &SeqBatch,
        mode: LossMode,
        latent: LatentMode,
        rng: &mut impl Rng,
        frozen: Option<&KlSides<T>>,
    ) -> Result<WorldModelLoss<T>> {
        batch.check(self, mode)?;
        let cfg = &self.config;
        let (bsz, len) = (batch.batch, batch.length);
        let image_len = self.obs.image_len();
        let full = mode == LossMode::Full;

        let mut h = g.constant(Tensor::zeros(&[bsz, cfg.deter]));
        let mut z = g.constant(Tensor::zeros(&[bsz, cfg.stoch()]));
        let zero_image = g.constant(Tensor::zeros(&[bsz, image_len]));
        let mut sums: [Option<Var>; 6] = [None; 6];
        let mut post_h = Vec::with_capacity(batch.rows() * cfg.deter);
        let mut post_z = Vec::with_capacity(batch.rows() * cfg.stoch());
        let mut sides = KlSides::default();

        for t in 0..len {
            let rows = t * bsz..(t + 1) * bsz;
            let first = &batch.is_first[rows.clone()];
            if first.iter().any(|&f| f) {
                let keep: Vec<T> = first.iter().map(|&f| if f { T::zero() } else { T::one() }).collect();
                let keep = g.constant(Tensor::from_vec(keep));
                h = g.mul_col(h, keep)?;
                z = g.mul_col(z, keep)?;
            }
            let action = if t == 0 || !full {
                ActionInput::zeros(bsz)
            } else {
                let prev = (t - 1) * bsz..t * bsz;
                let mut a = ActionInput::new(&batch.moves[prev.clone()], &batch.act_tokens[prev]);
                for (b, &f) in first.iter().enumerate() {
                    if f {
                        a.moves[b] = None;
                        a.tokens[b] = None;
                    }
                }
                a
            };
            let (h_t, prior_logits) = self.sequence_step(g, store, z, h, &action)?;
            let image = if full {
                g.constant(self.image_tensor(&batch.images[rows.start * image_len..rows.end * image_len]))
            } else {
                zero_image
            };
            let post_logits = self.encode(g, store, h_t, image, &batch.tokens[rows.clone()])?;
            let post_p = probs_var(g, post_logits, cfg.classes)?;
            let prior_p = probs_var(g, prior_logits, cfg.classes)?;
            let z_t = st_sample_var(g, post_p, bsz, latent, rng)?;

            sides.post.push(g.value(post_p).clone());
            sides.prior.push(g.value(prior_p).clone());
            let (post_sg, prior_sg) = match frozen {
                Some(f) => (g.constant(f.post[t].clone()), g.constant(f.prior[t].clone())),
                None => (post_p, prior_p),
            };
            let reg = kl_clipped(g, post_p, prior_sg, bsz, StopSide::Q)?;
            let pred = kl_clipped(g, post_sg, prior_p, bsz, StopSide::P)?;
            let feat = g.concat(&[h_t, z_t])?;

            let token_logits = self.token_logits(g, store, feat)?;
            let logp = g.log_softmax(token_logits);
            let picked = g.pick(logp, &batch.tokens[rows.clone()])?;
            let token = g.neg(picked);
            let token = g.mean(token);

            let mut step_terms = [None, Some(token), None, None, Some(reg), Some(pred)];
            if full {
                let recon = self.image_head(g, store, feat)?;
                let diff = g.sub(recon, image)?;
                let sq = g.square(diff);
                let per_row = g.sum_cols(sq);
                step_terms[0] = Some(g.mean(per_row));

                let rl = self.reward_logits(g, store, feat)?;
                let targets: Vec<T> = batch.rewards[rows.clone()].iter().map(|&r| c(r)).collect();
                let ce = crate::codecs::twohot_cross_entropy(g, &self.reward_spec, rl, &targets)?;
                step_terms[2] = Some(g.mean(ce));

                let cl = self.cont_logit(g, store, feat)?;
                step_terms[3] = Some(binary_cross_entropy(g, cl, &batch.conts[rows.clone()])?);
            }
            for (acc, term) in sums.iter_mut().zip(step_terms) {
                if let Some(v) = term {
                    *acc = Some(match acc {
                        Some(a) => g.add(*a, v)?,
                        None => v,
                    });
                }
            }
            post_h.extend_from_slice(g.value(h_t).data());
            post_z.extend_from_slice(g.value(z_t).data());
            h = h_t;
            z = z_t;
        }

        let scales = [
            if full { cfg.image_scale } else { 0.0 },
            cfg.token_scale,
            if full { cfg.reward_scale } else { 0.0 },
            if full { cfg.cont_scale } else { 0.0 },
            cfg.beta_reg,
            cfg.beta_pred,
        ];
        let zero = g.constant(Tensor::scalar(T::zero()));
        let mut terms = [zero; 6];
        let mut values = [0.0; 6];
        let names = LossBreakdown::NAMES;
        let mut total = None;
        for i in 0..6 {
            let Some(sum) = sums[i] else { continue };
            let v = g.scale(sum, c(scales[i] / len as f64));
            let x = g.item(v).to_f64c();
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("world model loss term {}", names[i])));
            }
            terms[i] = v;
            values[i] = x;
            total = Some(match total {
                Some(a) => g.add(a, v)?,
                None => v,
            });
        }
        let total = total.expect("token term always present");
        let breakdown = LossBreakdown {
            image: values[0],
            token: values[1],
            reward: values[2],
            cont: values[3],
            reg: values[4],
            pred: values[5],
            total: g.item(total).to_f64c(),
        };
        let rows = batch.rows();
        Ok(WorldModelLoss {
            total,
            terms,
            breakdown,
            posterior: LatentState {
                h: Tensor::new(vec![rows, cfg.deter], post_h)?,
                z: Tensor::new(vec![rows, cfg.stoch()], post_z)?,
            },
            kl_sides: sides,
        })
    }

    // ---------------------------------------------------------- inference

    /// One filtering step for acting: resets rows where `is_first`, advances
    /// with the previous action and encodes the observation.
    #[allow(clippy::too_many_arguments)]
    pub fn observe<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        state: &LatentState<T>,
        prev_action: &ActionInput,
        images: &[u8],
        tokens: &[usize],
        is_first: &[bool],
        latent: LatentMode,
        rng: &mut impl Rng,
    ) -> Result<LatentState<T>> {
        let mut state = state.clone();
        state.reset_rows(is_first);
        let mut action = prev_action.clone();
        for (r, &f) in is_first.iter().enumerate() {
            if f {
                action.moves[r] = None;
                if let Some(t) = action.tokens.get_mut(r) {
                    *t = None;
                }
            }
        }
        let mut g = Graph::no_grad();
        let h = g.constant(state.h);
        let z = g.constant(state.z);
        let (h, _) = self.sequence_step(&mut g, store, z, h, &action)?;
        let image = g.constant(self.image_tensor(images));
        let logits = self.encode(&mut g, store, h, image, tokens)?;
        let z = self.sample_code(&mut g, logits, latent, rng)?;
        Ok(LatentState {
            h: g.value(h).clone(),
            z: g.value(z).clone(),
        })
    }

    /// Open-loop step inside `g`: the prior sample replaces the posterior and
    /// reward/continue are decoded from the new state.
    #[allow(clippy::too_many_arguments)]
    pub fn imagine_step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        z: Var,
        action: &ActionInput,
        latent: LatentMode,
        rng: &mut impl Rng,
    ) -> Result<(Var, Var, Imagined<T>)> {
        let (h, prior) = self.sequence_step(g, store, z, h, action)?;
        let z = self.sample_code(g, prior, latent, rng)?;
        let feat = g.concat(&[h, z])?;
        let rl = self.reward_logits(g, store, feat)?;
        let reward = self.reward_spec.decode_logits(g.value(rl));
        let cl = self.cont_logit(g, store, feat)?;
        let cont = g.value(cl).data().iter().map(|&x| crate::diff::sigmoid(x)).collect();
        let state = LatentState {
            h: g.value(h).clone(),
            z: g.value(z).clone(),
        };
        Ok((h, z, Imagined { state, reward, cont }))
    }

    /// Decoded reward of `[h, z]` rows, for inspection.
    pub fn decode_reward<T: Scalar>(&self, store: &ParamStore<T>, state: &LatentState<T>) -> Result<Vec<T>> {
        let mut g = Graph::no_grad();
        let feat = g.constant(state.feat());
        let rl = self.reward_logits(&mut g, store, feat)?;
        Ok(self.reward_spec.decode_logits(g.value(rl)))
    }

    /// Reconstructed image rows of a state, clamped to the valid range.
    pub fn reconstruct<T: Scalar>(&self, store: &ParamStore<T>, state: &LatentState<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let feat = g.constant(state.feat());
        let img = self.image_head(&mut g, store, feat)?;
        Ok(g.value(img).map(|x| x.max(T::zero()).min(T::one())))
    }

    /// Token distribution (softmax of the token head) for each state row.
    pub fn token_probs<T: Scalar>(&self, store: &ParamStore<T>, state: &LatentState<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let feat = g.constant(state.feat());
        let l = self.token_logits(&mut g, store, feat)?;
        let p = g.softmax(l);
        Ok(g.value(p).clone())
    }

    /// Consumes `prefix` by posterior filtering (zero images and actions),
    /// then generates `length` tokens: each is sampled from the token head
    /// of the next imagined state and fed back as that step's observation.
    /// Temperature 0 takes argmax tokens and mode latents.
    pub fn generate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        prefix: &[usize],
        length: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::Usage(format!("temperature must be finite and >= 0, got {temperature}")));
        }
        let latent = if temperature == 0.0 { LatentMode::Mode } else { LatentMode::Sample };
        let cfg = &self.config;
        let zero_img = vec![0u8; self.obs.image_len()];
        let mut state = LatentState::<T>::zeros(cfg, 1);
        let none = ActionInput::zeros(1);
        for &tok in prefix {
            state = self.observe(store, &state, &none, &zero_img, &[tok], &[false], latent, rng)?;
        }
        let mut out = Vec::with_capacity(length);
        for _ in 0..length {
            let mut g = Graph::no_grad();
            let h = g.constant(state.h.clone());
            let z = g.constant(state.z.clone());
            let (h, prior) = self.sequence_step(&mut g, store, z, h, &none)?;
            let zp = self.sample_code(&mut g, prior, latent, rng)?;
            let feat = g.concat(&[h, zp])?;
            let logits = self.token_logits(&mut g, store, feat)?;
            let tok = sample_token(g.value(logits).row(0), temperature, rng);
            out.push(tok);
            // feed the sampled token back as the observation of this step
            let image = g.constant(self.image_tensor(&zero_img));
            let post = self.encode(&mut g, store, h, image, &[tok])?;
            let z = self.sample_code(&mut g, post, latent, rng)?;
            state = LatentState {
                h: g.value(h).clone(),
                z: g.value(z).clone(),
            };
        }
        Ok(out)
    }

    /// Mean per-token predictive cross entropy (nats) of text sequences:
    /// token `t` is scored under the prior state at `t` (which has seen
    /// only tokens before `t`), averaging the token distribution over
    /// `samples` prior draws.
    pub fn predictive_cross_entropy<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        seqs: &[Vec<usize>],
        samples: usize,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        if seqs.iter().all(|s| s.is_empty()) {
            return Err(Error::Usage("no tokens to score".into()));
        }
        let cfg = &self.config;
        let samples = samples.max(1);
        let zero_img = vec![0u8; self.obs.image_len()];
        let (mut nll, mut count) = (0.0, 0usize);
        for seq in seqs {
            let mut state = LatentState::<T>::zeros(cfg, 1);
            let none = ActionInput::zeros(1);
            for &tok in seq {
                let mut g = Graph::no_grad();
                let h = g.constant(state.h.clone());
                let z = g.constant(state.z.clone());
                let (h, prior) = self.sequence_step(&mut g, store, z, h, &none)?;
                let prior_probs = mixed_probs(g.value(prior).data(), cfg.classes, UNIMIX);
                // draw all samples at once as rows
                let mut codes = vec![T::zero(); samples * cfg.stoch()];
                for s in 0..samples {
                    for (gi, p) in prior_probs.chunks(cfg.classes).enumerate() {
                        codes[s * cfg.stoch() + gi * cfg.classes + sample_index(p, rng)] = T::one();
                    }
                }
                let hv = g.value(h).row(0).to_vec();
                let hs: Vec<T> = (0..samples).flat_map(|_| hv.iter().copied()).collect();
                let hs = g.constant(Tensor::new(vec![samples, cfg.deter], hs)?);
                let zs = g.constant(Tensor::new(vec![samples, cfg.stoch()], codes)?);
                let feat = g.concat(&[hs, zs])?;
                let logits = self.token_logits(&mut g, store, feat)?;
                let p = g.softmax(logits);
                let pv = g.value(p);
                let mean: f64 = (0..samples).map(|s| pv.row(s)[tok].to_f64c()).sum::<f64>() / samples as f64;
                nll -= mean.max(1e-300).ln();
                count += 1;
                let image = g.constant(self.image_tensor(&zero_img));
                let post = self.encode(&mut g, store, h, image, &[tok])?;
                let z = self.sample_code(&mut g, post, LatentMode::Sample, rng)?;
                state = LatentState {
                    h: g.value(h).clone(),
                    z: g.value(z).clone(),
                };
            }
        }
        Ok(nll / count as f64)
    }
}

/// Mean binary cross entropy of logits `[B, 1]` against targets in [0, 1].
fn binary_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[f64]) -> Result<Var> {
    let rows = targets.len();
    let zeros = g.constant(Tensor::zeros(&[rows, 1]));
    // log σ(x) and log σ(-x) as a 2-way log-softmax over [0, x]
    let pair = g.concat(&[zeros, logits])?;
    let logp = g.log_softmax(pair);
    let mut w = Vec::with_capacity(rows * 2);
    for &y in targets {
        w.push(c::<T>(1.0 - y));
        w.push(c::<T>(y));
    }
    let w = g.constant(Tensor::new(vec![rows, 2], w)?);
    let prod = g.mul(logp, w)?;
    let s = g.sum_cols(prod);
    let s = g.neg(s);
    Ok(g.mean(s))
}

/// Samples from `softmax(logits / temperature)`; argmax at temperature 0.
pub fn sample_token<T: Scalar>(logits: &[T], temperature: f64, rng: &mut impl Rng) -> usize {
    if temperature == 0.0 {
        return argmax(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x.to_f64c() / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|x| x / total).collect();
    sample_index(&p, rng)
}

/// Decoded value of twohot reward logits rows (convenience for tests).
pub fn decode_twohot<T: Scalar>(spec: &TwohotSpec, logits: &Tensor<T>) -> Vec<f64> {
    spec.decode_logits(logits).iter().map(|v| v.to_f64c()).collect()
}

