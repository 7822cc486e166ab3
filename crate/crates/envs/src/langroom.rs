//! Embodied question answering in a small room.
//!
//! Four objects sit in the corners with randomized colors. The environment
//! streams `what color is the <object> ?`, stays silent for a random number
//! of steps, then streams `it is <color>`. The agent moves and speaks one
//! token per step. Speaking the right color on the step the environment
//! emits the color token earns +1, any other token on that step -0.1, and
//! any token at other steps -0.01.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::vocab::{Vocab, LANGROOM_VOCAB, PAD};
use crate::{Action, ActionSpace, Env, EnvError, EnvStep, ImageKind, ObsSpace, Observation, StepInfo};

pub const OBJECTS: [&str; 4] = ["ball", "block", "key", "box"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];

/// Movement ids.
pub const STAY: usize = 0;
pub const UP: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;
pub const RIGHT: usize = 4;

/// Channels: wall, four object identities, four colors.
pub const CHANNELS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LangRoomConfig {
    pub size: usize,
    pub view: usize,
    pub silence_min: usize,
    pub silence_max: usize,
    pub episode_length: usize,
    /// Token space for observations and speech; values above 15 append
    /// dummy tokens the environment never emits.
    pub vocab_size: usize,
}

impl Default for LangRoomConfig {
    fn default() -> Self {
        Self {
            size: 9,
            view: 5,
            silence_min: 2,
            silence_max: 10,
            episode_length: 200,
            vocab_size: LANGROOM_VOCAB,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Question,
    Silence,
    Answer,
}

#[derive(Clone, Debug)]
pub struct LangRoom {
    config: LangRoomConfig,
    rng: ChaCha8Rng,
    ids: TokenIds,
    agent: (usize, usize),
    colors: [usize; 4],
    question: usize,
    /// Tokens of the current round; `cursor` indexes the next one to emit.
    round: Vec<usize>,
    cursor: usize,
    t: usize,
}

#[derive(Clone, Debug)]
struct TokenIds {
    what: usize,
    color: usize,
    is: usize,
    the: usize,
    it: usize,
    question_mark: usize,
    objects: [usize; 4],
    colors: [usize; 4],
}

impl TokenIds {
    fn new() -> Self {
        let v = Vocab::default();
        Self {
            what: v.expect_id("what"),
            color: v.expect_id("color"),
            is: v.expect_id("is"),
            the: v.expect_id("the"),
            it: v.expect_id("it"),
            question_mark: v.expect_id("?"),
            objects: OBJECTS.map(|o| v.expect_id(o)),
            colors: COLORS.map(|c| v.expect_id(c)),
        }
    }
}

impl LangRoom {
    pub fn new(config: LangRoomConfig, seed: u64) -> Result<Self, EnvError> {
        if config.size < 5 || config.view % 2 == 0 || config.view == 0 {
            return Err(EnvError::Config(format!(
                "langroom needs size >= 5 and an odd view, got {config:?}"
            )));
        }
        if config.silence_min > config.silence_max || config.episode_length == 0 {
            return Err(EnvError::Config(format!("bad langroom timing {config:?}")));
        }
        if config.vocab_size < LANGROOM_VOCAB {
            return Err(EnvError::Config(format!(
                "langroom vocab must cover its {LANGROOM_VOCAB} tokens, got {}",
                config.vocab_size
            )));
        }
        let mut env = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            ids: TokenIds::new(),
            agent: (0, 0),
            colors: [0; 4],
            question: 0,
            round: Vec::new(),
            cursor: 0,
            t: 0,
            config,
        };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &LangRoomConfig {
        &self.config
    }

    /// Corner cell of object `i` (interior coordinates).
    pub fn object_pos(&self, i: usize) -> (usize, usize) {
        let lo = 1;
        let hi = self.config.size - 2;
        [(lo, lo), (hi, lo), (lo, hi), (hi, hi)][i]
    }

    pub fn agent(&self) -> (usize, usize) {
        self.agent
    }

    pub fn question(&self) -> usize {
        self.question
    }

    pub fn colors(&self) -> [usize; 4] {
        self.colors
    }

    pub fn phase(&self) -> Phase {
        let q = 6;
        let answer_start = self.round.len() - 3;
        if self.cursor <= q {
            Phase::Question
        } else if self.cursor <= answer_start {
            Phase::Silence
        } else {
            Phase::Answer
        }
    }

    /// True when the next emitted token is the answer color.
    pub fn answer_is_next(&self) -> bool {
        self.cursor + 1 == self.round.len()
    }

    /// Token id of the color that currently answers the question.
    pub fn answer_token(&self) -> usize {
        self.ids.colors[self.colors[self.question]]
    }

    pub fn color_tokens(&self) -> [usize; 4] {
        self.ids.colors
    }

    fn new_round(&mut self) {
        for c in &mut self.colors {
            *c = self.rng.gen_range(0..4);
        }
        self.question = self.rng.gen_range(0..4);
        let silence = self
            .rng
            .gen_range(self.config.silence_min..=self.config.silence_max);
        let ids = &self.ids;
        let mut round = vec![
            ids.what,
            ids.color,
            ids.is,
            ids.the,
            ids.objects[self.question],
            ids.question_mark,
        ];
        round.extend(std::iter::repeat(PAD).take(silence));
        round.extend([ids.it, ids.is, ids.colors[self.colors[self.question]]]);
        self.round = round;
        self.cursor = 0;
    }

    fn emit(&mut self) -> (usize, bool) {
        if self.cursor >= self.round.len() {
            self.new_round();
        }
        let tok = self.round[self.cursor];
        self.cursor += 1;
        (tok, self.cursor == self.round.len())
    }

    fn blocked(&self, (x, y): (usize, usize)) -> bool {
        let s = self.config.size;
        x == 0 || y == 0 || x >= s - 1 || y >= s - 1 || (0..4).any(|i| self.object_pos(i) == (x, y))
    }

    fn image(&self) -> Vec<u8> {
        let v = self.config.view;
        let r = (v / 2) as isize;
        let s = self.config.size as isize;
        let mut img = vec![0u8; CHANNELS * v * v];
        let plane = v * v;
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (self.agent.0 as isize + dx, self.agent.1 as isize + dy);
                let cell = ((dy + r) as usize) * v + (dx + r) as usize;
                if x <= 0 || y <= 0 || x >= s - 1 || y >= s - 1 {
                    img[cell] = 1;
                    continue;
                }
                for i in 0..4 {
                    if self.object_pos(i) == (x as usize, y as usize) {
                        img[(1 + i) * plane + cell] = 1;
                        img[(5 + self.colors[i]) * plane + cell] = 1;
                    }
                }
            }
        }
        img
    }

    fn observation(&self, token: usize) -> Observation {
        Observation {
            image: self.image(),
            token,
        }
    }

    /// Scripted agent with privileged state: walks until the asked object
    /// is in view and speaks the answer color exactly on the answer step.
    pub fn oracle_action(&self) -> Action {
        let target = self.object_pos(self.question);
        let r = self.config.view / 2;
        let (ax, ay) = self.agent;
        let in_view = ax.abs_diff(target.0) <= r && ay.abs_diff(target.1) <= r;
        let movement = if in_view {
            STAY
        } else if ax.abs_diff(target.0) > r {
            if target.0 < ax { LEFT } else { RIGHT }
        } else if target.1 < ay {
            UP
        } else {
            DOWN
        };
        let token = if self.answer_is_next() {
            self.answer_token()
        } else {
            PAD
        };
        Action { movement, token }
    }
}

impl Env for LangRoom {
    fn obs_space(&self) -> ObsSpace {
        ObsSpace {
            image: [CHANNELS, self.config.view, self.config.view],
            kind: ImageKind::Symbols,
            vocab: self.config.vocab_size,
        }
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace {
            moves: 5,
            tokens: self.config.vocab_size,
        }
    }

    fn reset(&mut self) -> EnvStep {
        let c = self.config.size / 2;
        self.agent = (c, c);
        self.t = 0;
        self.new_round();
        let (tok, _) = self.emit();
        EnvStep {
            obs: self.observation(tok),
            reward: 0.0,
            cont: true,
            is_first: true,
            is_last: false,
            info: StepInfo::default(),
        }
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep, EnvError> {
        if action.token >= self.config.vocab_size {
            return Err(crate::invalid_token(action.token, self.config.vocab_size));
        }
        let (x, y) = self.agent;
        let next = match action.movement {
            STAY => (x, y),
            UP => (x, y - 1),
            DOWN => (x, y + 1),
            LEFT => (x - 1, y),
            RIGHT => (x + 1, y),
            m => return Err(EnvError::InvalidAction(format!("langroom movement {m}"))),
        };
        if !self.blocked(next) {
            self.agent = next;
        }
        // image reflects the colors that belong to the emitted token
        let (tok, is_answer) = self.emit();
        let obs = self.observation(tok);
        let mut info = StepInfo::default();
        let reward = if is_answer {
            if action.token == tok {
                info.events.push("answer_correct".into());
                1.0
            } else if action.token == PAD {
                info.events.push("answer_silent".into());
                0.0
            } else {
                info.events.push("answer_wrong".into());
                -0.1
            }
        } else if action.token != PAD {
            -0.01
        } else {
            0.0
        };
        self.t += 1;
        let last = self.t >= self.config.episode_length;
        Ok(EnvStep {
            obs,
            reward,
            cont: !last,
            is_first: false,
            is_last: last,
            info,
        })
    }
}
