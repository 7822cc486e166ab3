//! HomeGridLite: a reduced home-cleanup gridworld with task instructions
//! and language hints.
//!
//! Three rooms separated by walls with one door each, four object types and
//! three trash-bin types. Each bin type opens with one of `pedal`, `grasp`
//! or `lift`, drawn per episode; any other bin action breaks it. One bin
//! recovers 5 steps after breaking, the other stays broken. Objects drift
//! (teleport) and new ones spawn while the agent acts.
//!
//! Task completion pays 1 and samples a new task, whose instruction
//! interrupts whatever is streaming. Hints (future observations, dynamics,
//! corrections) are verified against the true state when they are queued
//! and recorded in [`HomeGridLite::hint_log`].

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::stream::LanguageStream;
use crate::vocab::Vocab;
use crate::{Action, ActionSpace, Env, EnvError, EnvStep, ImageKind, ObsSpace, Observation, StepInfo};

pub const OBJECTS: [&str; 4] = ["bottle", "fruit", "papers", "plates"];
pub const BINS: [&str; 3] = ["recycling", "trash", "compost"];
pub const ROOMS: [&str; 3] = ["living room", "dining room", "kitchen"];
pub const BIN_ACTIONS: [&str; 3] = ["pedal", "grasp", "lift"];

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const PICKUP: usize = 4;
pub const DROP: usize = 5;
pub const GET: usize = 6;
pub const PEDAL: usize = 7;
pub const GRASP: usize = 8;
pub const LIFT: usize = 9;
pub const NUM_ACTIONS: usize = 10;

/// Symbol channels: wall, room ×3, object ×4, bin type ×3, bin state ×3,
/// facing ×4 and inventory ×4 (the last two on the center cell only).
pub const CHANNELS: usize = 22;
pub const PIXELS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintMode {
    /// Task instructions only.
    #[default]
    None,
    Futures,
    Dynamics,
    Corrections,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomeGridConfig {
    pub width: usize,
    pub height: usize,
    pub episode_length: usize,
    pub initial_objects: usize,
    pub teleport_prob: f64,
    pub spawn_rate: f64,
    pub spawn_delay: usize,
    pub bin_reset_steps: usize,
    pub open_prob: f64,
    pub repeat_every: usize,
    /// Chance per idle step of a "<thing> is in the <room>" description.
    pub future_prob: f64,
    pub correction_prob: f64,
    pub dynamics_cap: usize,
    pub hints: HintMode,
    pub render: ImageKind,
}

impl Default for HomeGridConfig {
    fn default() -> Self {
        Self {
            width: 12,
            height: 10,
            episode_length: 100,
            initial_objects: 2,
            teleport_prob: 0.05,
            spawn_rate: 0.1,
            spawn_delay: 5,
            bin_reset_steps: 5,
            open_prob: 0.5,
            repeat_every: 20,
            future_prob: 0.1,
            correction_prob: 0.1,
            dynamics_cap: 28,
            hints: HintMode::None,
            render: ImageKind::Symbols,
        }
    }
}

type Pos = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjLoc {
    Floor(Pos),
    Held,
    InBin(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinState {
    Open,
    Closed,
    Broken { since: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bin {
    pub kind: usize,
    pub pos: Pos,
    pub state: BinState,
    pub content: Option<usize>,
    pub resettable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Object(usize),
    /// Index into the episode's bins.
    Bin(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Find(Target),
    Get(usize),
    Put(usize, usize),
    Move(usize, usize),
    Open(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Find,
    Get,
    Put,
    Move,
    Open,
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self {
            Task::Find(_) => TaskKind::Find,
            Task::Get(_) => TaskKind::Get,
            Task::Put(..) => TaskKind::Put,
            Task::Move(..) => TaskKind::Move,
            Task::Open(_) => TaskKind::Open,
        }
    }
}

/// A factual statement carried by a hint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Claim {
    Instruction(Task),
    InRoom(Target, usize),
    Moved(usize, usize),
    WillSpawn { object: usize, room: usize, due: usize },
    OpensWith { bin_kind: usize, action: usize },
    TurnAround { before: usize, after: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HintRecord {
    pub t: usize,
    pub text: String,
    pub claim: Claim,
    /// Result of checking the claim against the state when it was queued.
    pub truthful: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct PendingSpawn {
    object: usize,
    pos: Pos,
    due: usize,
}

#[derive(Clone, Debug)]
pub struct HomeGridLite {
    config: HomeGridConfig,
    vocab: Vocab,
    rng: ChaCha8Rng,
    walls: Vec<bool>,
    doors: [Pos; 2],
    agent: Pos,
    facing: usize,
    inventory: Option<usize>,
    objects: [Option<ObjLoc>; 4],
    bins: Vec<Bin>,
    /// Correct opening action per bin kind.
    opens_with: [usize; 3],
    pending: Vec<PendingSpawn>,
    task: Task,
    stream: LanguageStream,
    last_instruction: usize,
    hold: usize,
    t: usize,
    prev_goal_dist: Option<usize>,
    hint_log: Vec<HintRecord>,
    events: Vec<Claim>,
}

const DIRS: [(isize, isize); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

impl HomeGridLite {
    pub fn new(config: HomeGridConfig, seed: u64) -> Result<Self, EnvError> {
        if config.width < 9 || config.height < 5 {
            return Err(EnvError::Config(format!(
                "homegrid needs at least 9x5 cells, got {}x{}",
                config.width, config.height
            )));
        }
        if config.initial_objects > OBJECTS.len() || config.episode_length == 0 {
            return Err(EnvError::Config(format!("bad homegrid config {config:?}")));
        }
        let (w, h) = (config.width, config.height);
        let (x1, x2) = (w / 3, 2 * w / 3);
        let mut walls = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                walls[y * w + x] = x == 0 || y == 0 || x == w - 1 || y == h - 1 || x == x1 || x == x2;
            }
        }
        let doors = [(x1, h / 2), (x2, h / 2 - 1)];
        for &(x, y) in &doors {
            walls[y * w + x] = false;
        }
        let mut env = Self {
            vocab: Vocab::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            walls,
            doors,
            agent: (1, 1),
            facing: RIGHT,
            inventory: None,
            objects: [None; 4],
            bins: Vec::new(),
            opens_with: [0; 3],
            pending: Vec::new(),
            task: Task::Find(Target::Bin(0)),
            stream: LanguageStream::new(),
            last_instruction: 0,
            hold: 0,
            t: 0,
            prev_goal_dist: None,
            hint_log: Vec::new(),
            events: Vec::new(),
            config,
        };
        env.reset();
        Ok(env)
    }

    // ------------------------------------------------------------ queries

    pub fn config(&self) -> &HomeGridConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn agent(&self) -> Pos {
        self.agent
    }

    pub fn facing(&self) -> usize {
        self.facing
    }

    pub fn inventory(&self) -> Option<usize> {
        self.inventory
    }

    pub fn objects(&self) -> &[Option<ObjLoc>; 4] {
        &self.objects
    }

    pub fn bins(&self) -> &[Bin] {
        &self.bins
    }

    pub fn opens_with(&self, bin_kind: usize) -> usize {
        self.opens_with[bin_kind]
    }

    pub fn hint_log(&self) -> &[HintRecord] {
        &self.hint_log
    }

    /// Steps the agent is still held in place for the dynamics preamble.
    pub fn held_steps(&self) -> usize {
        self.hold
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn is_wall(&self, (x, y): Pos) -> bool {
        x >= self.config.width || y >= self.config.height || self.walls[y * self.config.width + x]
    }

    pub fn room_of(&self, (x, _): Pos) -> Option<usize> {
        let (x1, x2) = (self.config.width / 3, 2 * self.config.width / 3);
        if x == 0 || x == x1 || x == x2 || x >= self.config.width - 1 {
            None
        } else if x < x1 {
            Some(0)
        } else if x < x2 {
            Some(1)
        } else {
            Some(2)
        }
    }

    fn object_at(&self, p: Pos) -> Option<usize> {
        (0..4).find(|&o| self.objects[o] == Some(ObjLoc::Floor(p)))
    }

    fn bin_at(&self, p: Pos) -> Option<usize> {
        self.bins.iter().position(|b| b.pos == p)
    }

    /// Walkable and unoccupied.
    pub fn is_free(&self, p: Pos) -> bool {
        !self.is_wall(p) && p != self.agent && self.object_at(p).is_none() && self.bin_at(p).is_none()
    }

    fn passable(&self, p: Pos) -> bool {
        !self.is_wall(p) && self.object_at(p).is_none() && self.bin_at(p).is_none()
    }

    fn step_pos(&self, (x, y): Pos, dir: usize) -> Option<Pos> {
        let (dx, dy) = DIRS[dir];
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        if nx < 0 || ny < 0 {
            return None;
        }
        Some((nx as usize, ny as usize))
    }

    pub fn front(&self) -> Option<Pos> {
        self.step_pos(self.agent, self.facing)
    }

    /// Where an entity currently is; held objects are where the agent is.
    pub fn position(&self, target: Target) -> Option<Pos> {
        match target {
            Target::Object(o) => match self.objects[o]? {
                ObjLoc::Floor(p) => Some(p),
                ObjLoc::Held => Some(self.agent),
                ObjLoc::InBin(b) => Some(self.bins[b].pos),
            },
            Target::Bin(b) => self.bins.get(b).map(|b| b.pos),
        }
    }

    /// Placement cells: free interior cells away from the doorways.
    fn placement_cells(&self, room: Option<usize>) -> Vec<Pos> {
        let mut cells = Vec::new();
        for y in 1..self.config.height - 1 {
            for x in 1..self.config.width - 1 {
                let p = (x, y);
                let near_door = self
                    .doors
                    .iter()
                    .any(|d| d.0.abs_diff(x) + d.1.abs_diff(y) <= 1);
                if self.is_free(p)
                    && !near_door
                    && self.room_of(p).is_some()
                    && room.is_none_or(|r| self.room_of(p) == Some(r))
                    && !self.pending.iter().any(|s| s.pos == p)
                {
                    cells.push(p);
                }
            }
        }
        cells
    }

    fn random_cell(&mut self, room: Option<usize>) -> Option<Pos> {
        let cells = self.placement_cells(room);
        cells.choose(&mut self.rng).copied()
    }

    // ---------------------------------------------------------- language

    fn target_words(&self, target: Target) -> String {
        match target {
            Target::Object(o) => OBJECTS[o].to_string(),
            Target::Bin(b) => format!("{} bin", BINS[self.bins[b].kind]),
        }
    }

    pub fn task_text(&self, task: Task) -> String {
        match task {
            Task::Find(t) => format!("find the {}", self.target_words(t)),
            Task::Get(o) => format!("get the {}", OBJECTS[o]),
            Task::Put(o, b) => format!("put the {} in the {} bin", OBJECTS[o], BINS[self.bins[b].kind]),
            Task::Move(o, r) => format!("move the {} to the {}", OBJECTS[o], ROOMS[r]),
            Task::Open(b) => format!("open the {} bin", BINS[self.bins[b].kind]),
        }
    }

    pub fn claim_text(&self, claim: &Claim) -> String {
        match claim {
            Claim::Instruction(task) => self.task_text(*task),
            Claim::InRoom(t, r) => format!("the {} is in the {}", self.target_words(*t), ROOMS[*r]),
            Claim::Moved(o, r) => format!("i moved the {} to the {}", OBJECTS[*o], ROOMS[*r]),
            Claim::WillSpawn { object, room, .. } => {
                format!("there will be {} in the {} later", OBJECTS[*object], ROOMS[*room])
            }
            Claim::OpensWith { bin_kind, action } => {
                format!("{} to open the {} bin", BIN_ACTIONS[*action], BINS[*bin_kind])
            }
            Claim::TurnAround { .. } => "no, turn around".to_string(),
        }
    }

    /// Independent check of a claim against the current state.
    pub fn verify(&self, claim: &Claim) -> bool {
        match *claim {
            Claim::Instruction(task) => self.task_feasible(task) && !self.task_done(task),
            Claim::InRoom(t, r) => self.position(t).and_then(|p| self.room_of(p)) == Some(r),
            Claim::Moved(o, r) => match self.objects[o] {
                Some(ObjLoc::Floor(p)) => self.room_of(p) == Some(r),
                _ => false,
            },
            Claim::WillSpawn { object, room, due } => self.objects[object].is_none()
                && self
                    .pending
                    .iter()
                    .any(|s| s.object == object && s.due == due && self.room_of(s.pos) == Some(room)),
            Claim::OpensWith { bin_kind, action } => self.opens_with[bin_kind] == action,
            Claim::TurnAround { before, after } => after > before && self.goal_distance() == Some(after),
        }
    }

    fn utter(&mut self, claim: Claim, interrupt: bool) {
        let text = self.claim_text(&claim);
        let truthful = self.verify(&claim);
        let ids = self.vocab.tokenize(&text);
        if interrupt {
            self.stream.interrupt(ids);
        } else {
            self.stream.push(ids);
        }
        self.hint_log.push(HintRecord {
            t: self.t,
            text,
            claim,
            truthful,
        });
    }

    // -------------------------------------------------------------- tasks

    pub fn task_done(&self, task: Task) -> bool {
        match task {
            Task::Find(t) => {
                let front = self.front();
                match t {
                    Target::Object(o) => front.is_some_and(|f| self.objects[o] == Some(ObjLoc::Floor(f))),
                    Target::Bin(b) => front.is_some_and(|f| self.bins[b].pos == f),
                }
            }
            Task::Get(o) => self.inventory == Some(o),
            Task::Put(o, b) => self.bins[b].content == Some(o),
            Task::Move(o, r) => match self.objects[o] {
                Some(ObjLoc::Floor(p)) => self.room_of(p) == Some(r),
                _ => false,
            },
            Task::Open(b) => self.bins[b].state == BinState::Open,
        }
    }

    fn bin_usable(&self, b: usize) -> bool {
        let bin = &self.bins[b];
        bin.resettable || !matches!(bin.state, BinState::Broken { .. })
    }

    pub fn task_feasible(&self, task: Task) -> bool {
        let exists = |o: usize| self.objects[o].is_some();
        match task {
            Task::Find(Target::Object(o)) => exists(o),
            Task::Find(Target::Bin(b)) => b < self.bins.len(),
            Task::Get(o) => exists(o) && self.objects[o].map_or(true, |l| match l {
                ObjLoc::InBin(b) => self.bin_usable(b),
                _ => true,
            }),
            Task::Put(o, b) => {
                exists(o)
                    && self.bin_usable(b)
                    && (self.bins[b].content.is_none() || self.bins[b].content == Some(o))
                    && !matches!(self.objects[o], Some(ObjLoc::InBin(ob)) if !self.bin_usable(ob))
            }
            Task::Move(o, _) => exists(o) && !matches!(self.objects[o], Some(ObjLoc::InBin(b)) if !self.bin_usable(b)),
            Task::Open(b) => self.bin_usable(b),
        }
    }

    fn candidate_tasks(&self, kind: Option<TaskKind>) -> Vec<Task> {
        let mut all = Vec::new();
        for o in 0..4 {
            all.push(Task::Find(Target::Object(o)));
            all.push(Task::Get(o));
            for b in 0..self.bins.len() {
                all.push(Task::Put(o, b));
            }
            for r in 0..3 {
                all.push(Task::Move(o, r));
            }
        }
        for b in 0..self.bins.len() {
            all.push(Task::Find(Target::Bin(b)));
            all.push(Task::Open(b));
        }
        all.into_iter()
            .filter(|t| kind.is_none_or(|k| t.kind() == k))
            .filter(|&t| self.task_feasible(t) && !self.task_done(t))
            .collect()
    }

    fn sample_task(&mut self, kind: Option<TaskKind>) -> Option<Task> {
        let kind = match kind {
            Some(k) => Some(k),
            None => {
                // uniform over task types first, so object tasks do not crowd out bins
                let mut kinds = [TaskKind::Find, TaskKind::Get, TaskKind::Put, TaskKind::Move, TaskKind::Open];
                kinds.shuffle(&mut self.rng);
                kinds.into_iter().find(|&k| !self.candidate_tasks(Some(k)).is_empty())
            }
        };
        let cands = self.candidate_tasks(kind);
        cands.choose(&mut self.rng).copied()
    }

    /// Replaces the current task with one of `kind` (for scripted tests).
    /// Returns false when no such task is currently possible.
    pub fn force_task(&mut self, kind: TaskKind) -> bool {
        match self.sample_task(Some(kind)) {
            Some(t) => {
                self.set_task(t);
                true
            }
            None => false,
        }
    }

    /// Replaces the current task; refused when it is infeasible or
    /// already satisfied.
    pub fn assign_task(&mut self, task: Task) -> bool {
        if !self.task_feasible(task) || self.task_done(task) {
            return false;
        }
        self.set_task(task);
        true
    }

    fn set_task(&mut self, task: Task) {
        self.task = task;
        self.last_instruction = self.t;
        self.prev_goal_dist = self.goal_distance();
        self.utter(Claim::Instruction(task), true);
    }

    /// Entity the current task steers towards, if any.
    pub fn goal(&self) -> Option<Target> {
        match self.task {
            Task::Find(t) => Some(t),
            Task::Get(o) => (self.inventory != Some(o)).then_some(Target::Object(o)),
            Task::Put(o, b) => Some(if self.inventory == Some(o) { Target::Bin(b) } else { Target::Object(o) }),
            Task::Move(o, _) => (self.inventory != Some(o)).then_some(Target::Object(o)),
            Task::Open(b) => Some(Target::Bin(b)),
        }
    }

    pub fn goal_distance(&self) -> Option<usize> {
        let p = self.position(self.goal()?)?;
        Some(self.agent.0.abs_diff(p.0) + self.agent.1.abs_diff(p.1))
    }

    // ----------------------------------------------------------- dynamics

    fn apply(&mut self, action: usize) {
        match action {
            UP | DOWN | LEFT | RIGHT => {
                self.facing = action;
                if let Some(p) = self.step_pos(self.agent, action) {
                    if self.is_free(p) {
                        self.agent = p;
                    }
                }
            }
            PICKUP => {
                if self.inventory.is_none() {
                    if let Some(o) = self.front().and_then(|f| self.object_at(f)) {
                        self.objects[o] = Some(ObjLoc::Held);
                        self.inventory = Some(o);
                    }
                }
            }
            DROP => {
                let (Some(o), Some(f)) = (self.inventory, self.front()) else { return };
                if let Some(b) = self.bin_at(f) {
                    let bin = &mut self.bins[b];
                    if bin.state == BinState::Open && bin.content.is_none() {
                        bin.content = Some(o);
                        self.objects[o] = Some(ObjLoc::InBin(b));
                        self.inventory = None;
                    }
                } else if self.is_free(f) && self.room_of(f).is_some() {
                    self.objects[o] = Some(ObjLoc::Floor(f));
                    self.inventory = None;
                }
            }
            GET => {
                if self.inventory.is_some() {
                    return;
                }
                let Some(b) = self.front().and_then(|f| self.bin_at(f)) else { return };
                let bin = &mut self.bins[b];
                if bin.state == BinState::Open {
                    if let Some(o) = bin.content.take() {
                        self.objects[o] = Some(ObjLoc::Held);
                        self.inventory = Some(o);
                    }
                }
            }
            PEDAL | GRASP | LIFT => {
                let Some(b) = self.front().and_then(|f| self.bin_at(f)) else { return };
                let correct = self.opens_with[self.bins[b].kind] == action - PEDAL;
                let t = self.t;
                let bin = &mut self.bins[b];
                if matches!(bin.state, BinState::Broken { .. }) {
                    return;
                }
                bin.state = if correct { BinState::Open } else { BinState::Broken { since: t } };
            }
            _ => unreachable!("validated by step"),
        }
    }

    fn world_tick(&mut self) {
        let reset_after = self.config.bin_reset_steps;
        let t = self.t;
        for bin in &mut self.bins {
            if let BinState::Broken { since } = bin.state {
                // interactions on the `reset_after` steps after the break are ignored
                if bin.resettable && t - since >= reset_after {
                    bin.state = BinState::Closed;
                }
            }
        }
        for o in 0..4 {
            if let Some(ObjLoc::Floor(_)) = self.objects[o] {
                if self.rng.gen::<f64>() < self.config.teleport_prob {
                    let old = self.objects[o].take();
                    match self.random_cell(None) {
                        Some(p) => {
                            self.objects[o] = Some(ObjLoc::Floor(p));
                            let room = self.room_of(p).expect("placement cell has a room");
                            self.events.push(Claim::Moved(o, room));
                        }
                        None => self.objects[o] = old,
                    }
                }
            }
        }
        let due: Vec<PendingSpawn> = self.pending.iter().copied().filter(|s| s.due <= t + 1).collect();
        self.pending.retain(|s| s.due > t + 1);
        for s in due {
            let pos = if self.is_free(s.pos) {
                Some(s.pos)
            } else {
                let room = self.room_of(s.pos);
                self.random_cell(room)
            };
            if let Some(p) = pos {
                self.objects[s.object] = Some(ObjLoc::Floor(p));
            }
        }
        let missing: Vec<usize> = (0..4)
            .filter(|&o| self.objects[o].is_none() && !self.pending.iter().any(|s| s.object == o))
            .collect();
        if !missing.is_empty() && self.rng.gen::<f64>() < self.config.spawn_rate * missing.len() as f64 {
            let object = *missing.choose(&mut self.rng).expect("nonempty");
            if let Some(pos) = self.random_cell(None) {
                let due = t + 1 + self.config.spawn_delay;
                self.pending.push(PendingSpawn { object, pos, due });
                let room = self.room_of(pos).expect("placement cell has a room");
                self.events.push(Claim::WillSpawn { object, room, due });
            }
        }
    }

    fn schedule_language(&mut self) {
        if !self.stream.is_idle() {
            return;
        }
        let mode = self.config.hints;
        if self.t >= self.last_instruction + self.config.repeat_every {
            self.last_instruction = self.t;
            let task = self.task;
            self.utter(Claim::Instruction(task), false);
            return;
        }
        if mode == HintMode::Futures {
            if !self.events.is_empty() {
                let i = self.rng.gen_range(0..self.events.len());
                let claim = self.events[i].clone();
                self.utter(claim, false);
                return;
            }
            if self.rng.gen::<f64>() < self.config.future_prob {
                let mut things: Vec<Target> = (0..4)
                    .filter(|&o| matches!(self.objects[o], Some(ObjLoc::Floor(_)) | Some(ObjLoc::InBin(_))))
                    .map(Target::Object)
                    .collect();
                things.extend((0..self.bins.len()).map(Target::Bin));
                if let Some(&t) = things.choose(&mut self.rng) {
                    let room = self.position(t).and_then(|p| self.room_of(p)).expect("placed");
                    self.utter(Claim::InRoom(t, room), false);
                    return;
                }
            }
        }
        if mode == HintMode::Corrections {
            if let (Some(before), Some(after)) = (self.prev_goal_dist, self.goal_distance()) {
                if after > before && self.rng.gen::<f64>() < self.config.correction_prob {
                    self.utter(Claim::TurnAround { before, after }, false);
                }
            }
        }
    }

    // ---------------------------------------------------------- rendering

    fn symbol_image(&self) -> Vec<u8> {
        let v = 3;
        let plane = v * v;
        let mut img = vec![0u8; CHANNELS * plane];
        for dy in 0..v {
            for dx in 0..v {
                let cell = dy * v + dx;
                let x = self.agent.0 as isize + dx as isize - 1;
                let y = self.agent.1 as isize + dy as isize - 1;
                if x < 0 || y < 0 {
                    img[cell] = 1;
                    continue;
                }
                let p = (x as usize, y as usize);
                if self.is_wall(p) {
                    img[cell] = 1;
                    continue;
                }
                if let Some(r) = self.room_of(p) {
                    img[(1 + r) * plane + cell] = 1;
                }
                if let Some(o) = self.object_at(p) {
                    img[(4 + o) * plane + cell] = 1;
                }
                if let Some(b) = self.bin_at(p) {
                    let bin = &self.bins[b];
                    img[(8 + bin.kind) * plane + cell] = 1;
                    let s = match bin.state {
                        BinState::Open => 0,
                        BinState::Closed => 1,
                        BinState::Broken { .. } => 2,
                    };
                    img[(11 + s) * plane + cell] = 1;
                }
            }
        }
        let center = 4;
        img[(14 + self.facing) * plane + center] = 1;
        if let Some(o) = self.inventory {
            img[(18 + o) * plane + center] = 1;
        }
        img
    }

    /// 64×64 RGB tiles of the 3×3 view, channel-major.
    fn pixel_image(&self) -> Vec<u8> {
        const TILE: usize = 21;
        const ROOM_RGB: [[u8; 3]; 3] = [[200, 180, 140], [170, 200, 170], [190, 190, 220]];
        const OBJ_RGB: [[u8; 3]; 4] = [[40, 160, 60], [230, 120, 30], [250, 250, 250], [120, 60, 160]];
        const BIN_RGB: [[u8; 3]; 3] = [[30, 80, 220], [20, 20, 20], [40, 140, 40]];
        let sym = self.symbol_image();
        let plane = PIXELS * PIXELS;
        let mut img = vec![0u8; 3 * plane];
        let mut paint = |x0: usize, y0: usize, x1: usize, y1: usize, rgb: [u8; 3]| {
            for y in y0..y1.min(PIXELS) {
                for x in x0..x1.min(PIXELS) {
                    for c in 0..3 {
                        img[c * plane + y * PIXELS + x] = rgb[c];
                    }
                }
            }
        };
        let has = |ch: usize, cell: usize| sym[ch * 9 + cell] == 1;
        for cell in 0..9 {
            let (x0, y0) = ((cell % 3) * TILE, (cell / 3) * TILE);
            let (x1, y1) = (x0 + TILE, y0 + TILE);
            if has(0, cell) {
                paint(x0, y0, x1, y1, [90, 90, 90]);
                continue;
            }
            if let Some(r) = (0..3).find(|&r| has(1 + r, cell)) {
                paint(x0, y0, x1, y1, ROOM_RGB[r]);
            }
            if let Some(b) = (0..3).find(|&b| has(8 + b, cell)) {
                let broken = has(13, cell);
                let open = has(11, cell);
                if broken {
                    paint(x0 + 2, y0 + 10, x1 - 2, y1 - 3, BIN_RGB[b]);
                } else {
                    paint(x0 + 5, y0 + 4, x1 - 5, y1 - 3, BIN_RGB[b]);
                    if open {
                        paint(x0 + 7, y0 + 4, x1 - 7, y0 + 7, [255, 255, 255]);
                    }
                }
            }
            if let Some(o) = (0..4).find(|&o| has(4 + o, cell)) {
                paint(x0 + 6, y0 + 6, x1 - 6, y1 - 6, OBJ_RGB[o]);
            }
        }
        // agent in the center tile, a notch towards its facing
        let (cx, cy) = (TILE + TILE / 2, TILE + TILE / 2);
        paint(cx - 4, cy - 4, cx + 5, cy + 5, [220, 30, 30]);
        let (dx, dy) = DIRS[self.facing];
        let (nx, ny) = ((cx as isize + dx * 7) as usize, (cy as isize + dy * 7) as usize);
        paint(nx - 2, ny - 2, nx + 3, ny + 3, [220, 30, 30]);
        if let Some(o) = self.inventory {
            paint(cx - 2, cy - 2, cx + 3, cy + 3, OBJ_RGB[o]);
        }
        img
    }

    fn image(&self) -> Vec<u8> {
        match self.config.render {
            ImageKind::Symbols => self.symbol_image(),
            ImageKind::Pixels => self.pixel_image(),
        }
    }

    fn emit(&mut self, reward: f64, is_first: bool, events: Vec<String>) -> EnvStep {
        let token = self.stream.next_token();
        let last = self.t >= self.config.episode_length;
        EnvStep {
            obs: Observation {
                image: self.image(),
                token,
            },
            reward,
            cont: !last,
            is_first,
            is_last: last,
            info: StepInfo {
                task: Some(self.task_text(self.task)),
                events,
            },
        }
    }

    // ------------------------------------------------------------- expert

    /// Privileged scripted policy: breadth-first search over (cell, facing)
    /// towards whatever the current task needs next.
    pub fn expert_action(&self) -> usize {
        let wait = GET;
        if self.hold > 0 {
            return wait;
        }
        let front = self.front();
        let facing = |t: Target| front.is_some() && front == self.position(t);
        let open_bin = |b: usize| -> usize {
            match self.bins[b].state {
                BinState::Broken { .. } => wait,
                _ => PEDAL + self.opens_with[self.bins[b].kind],
            }
        };
        // the object needed by the task, picked up from wherever it is
        let fetch = |o: usize| -> usize {
            if let Some(held) = self.inventory {
                if held != o {
                    return self.drop_somewhere().unwrap_or(wait);
                }
            }
            match self.objects[o] {
                Some(ObjLoc::Floor(_)) if facing(Target::Object(o)) => PICKUP,
                Some(ObjLoc::InBin(b)) if facing(Target::Bin(b)) => match self.bins[b].state {
                    BinState::Open => GET,
                    _ => open_bin(b),
                },
                Some(ObjLoc::InBin(b)) => self.navigate_to_face(Target::Bin(b)).unwrap_or(wait),
                _ => self.navigate_to_face(Target::Object(o)).unwrap_or(wait),
            }
        };
        match self.task {
            Task::Find(t) => {
                if let (Target::Object(o), Some(held)) = (t, self.inventory) {
                    if held == o {
                        return self.drop_somewhere().unwrap_or(wait);
                    }
                }
                self.navigate_to_face(t).unwrap_or(wait)
            }
            Task::Get(o) => fetch(o),
            Task::Put(o, b) => {
                if self.inventory != Some(o) {
                    return fetch(o);
                }
                if !facing(Target::Bin(b)) {
                    return self.navigate_to_face(Target::Bin(b)).unwrap_or(wait);
                }
                match self.bins[b].state {
                    BinState::Open => DROP,
                    _ => open_bin(b),
                }
            }
            Task::Move(o, r) => {
                if self.inventory != Some(o) {
                    return fetch(o);
                }
                self.navigate(|env, pos, dir| {
                    env.step_pos(pos, dir)
                        .is_some_and(|f| env.is_free_ignoring_agent(f) && env.room_of(f) == Some(r))
                })
                .map(|a| a.unwrap_or(DROP))
                .unwrap_or(wait)
            }
            Task::Open(b) => {
                if facing(Target::Bin(b)) {
                    open_bin(b)
                } else {
                    self.navigate_to_face(Target::Bin(b)).unwrap_or(wait)
                }
            }
        }
    }

    fn is_free_ignoring_agent(&self, p: Pos) -> bool {
        self.passable(p)
    }

    fn drop_somewhere(&self) -> Option<usize> {
        self.navigate(|env, pos, dir| {
            env.step_pos(pos, dir)
                .is_some_and(|f| env.is_free_ignoring_agent(f) && env.room_of(f).is_some())
        })
        .map(|a| a.unwrap_or(DROP))
    }

    fn navigate_to_face(&self, target: Target) -> Option<usize> {
        let goal = self.position(target)?;
        self.navigate(|env, pos, dir| env.step_pos(pos, dir) == Some(goal))
            .map(|a| a.unwrap_or(GET))
    }

    /// First movement on a shortest path to a (cell, facing) satisfying
    /// `done`; `Some(None)` when already there, `None` when unreachable.
    fn navigate(&self, done: impl Fn(&Self, Pos, usize) -> bool) -> Option<Option<usize>> {
        if done(self, self.agent, self.facing) {
            return Some(None);
        }
        let (w, h) = (self.config.width, self.config.height);
        let key = |p: Pos, d: usize| (p.1 * w + p.0) * 4 + d;
        let mut first = vec![usize::MAX; w * h * 4];
        let mut queue = VecDeque::new();
        first[key(self.agent, self.facing)] = NUM_ACTIONS;
        queue.push_back((self.agent, self.facing));
        while let Some((pos, dir)) = queue.pop_front() {
            for a in [UP, DOWN, LEFT, RIGHT] {
                let next = match self.step_pos(pos, a) {
                    Some(p) if self.passable(p) => p,
                    _ => pos,
                };
                let k = key(next, a);
                if first[k] != usize::MAX {
                    continue;
                }
                let origin = first[key(pos, dir)];
                first[k] = if origin == NUM_ACTIONS { a } else { origin };
                if done(self, next, a) {
                    return Some(Some(first[k]));
                }
                queue.push_back((next, a));
            }
        }
        None
    }
}

impl Env for HomeGridLite {
    fn obs_space(&self) -> ObsSpace {
        match self.config.render {
            ImageKind::Symbols => ObsSpace {
                image: [CHANNELS, 3, 3],
                kind: ImageKind::Symbols,
                vocab: self.vocab.len(),
            },
            ImageKind::Pixels => ObsSpace {
                image: [3, PIXELS, PIXELS],
                kind: ImageKind::Pixels,
                vocab: self.vocab.len(),
            },
        }
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace {
            moves: NUM_ACTIONS,
            tokens: 0,
        }
    }

    fn reset(&mut self) -> EnvStep {
        self.t = 0;
        self.inventory = None;
        self.objects = [None; 4];
        self.pending.clear();
        self.events.clear();
        self.hint_log.clear();
        self.stream.clear();
        self.bins.clear();
        self.agent = (0, 0);
        self.facing = self.rng.gen_range(0..4);
        for k in 0..3 {
            self.opens_with[k] = self.rng.gen_range(0..3);
        }
        let mut kinds = [0, 1, 2];
        kinds.shuffle(&mut self.rng);
        for (i, &kind) in kinds[..2].iter().enumerate() {
            let pos = self.random_cell(None).expect("room for bins");
            let state = if self.rng.gen::<f64>() < self.config.open_prob {
                BinState::Open
            } else {
                BinState::Closed
            };
            self.bins.push(Bin {
                kind,
                pos,
                state,
                content: None,
                resettable: i == 0,
            });
        }
        let mut objs = [0, 1, 2, 3];
        objs.shuffle(&mut self.rng);
        for &o in &objs[..self.config.initial_objects] {
            let pos = self.random_cell(None).expect("room for objects");
            self.objects[o] = Some(ObjLoc::Floor(pos));
        }
        self.agent = self.random_cell(None).expect("room for the agent");

        let mut preamble = Vec::new();
        if self.config.hints == HintMode::Dynamics {
            let mut claims: Vec<Claim> = self
                .bins
                .iter()
                .map(|b| Claim::OpensWith {
                    bin_kind: b.kind,
                    action: self.opens_with[b.kind],
                })
                .collect();
            claims.shuffle(&mut self.rng);
            for claim in claims {
                let text = self.claim_text(&claim);
                let truthful = self.verify(&claim);
                preamble.extend(self.vocab.tokenize(&text));
                self.hint_log.push(HintRecord { t: 0, text, claim, truthful });
            }
            preamble.truncate(self.config.dynamics_cap);
        }
        self.hold = preamble.len().saturating_sub(1);
        let task = self.sample_task(None).expect("some task is always feasible");
        self.set_task(task);
        if !preamble.is_empty() {
            let instruction = std::mem::take(&mut self.stream);
            self.stream.push(preamble);
            let mut rest = instruction;
            let mut ids = Vec::new();
            while !rest.is_idle() {
                ids.push(rest.next_token());
            }
            self.stream.push(ids);
        }
        self.emit(0.0, true, Vec::new())
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep, EnvError> {
        if action.movement >= NUM_ACTIONS {
            return Err(EnvError::InvalidAction(format!("homegrid action {}", action.movement)));
        }
        if action.token != crate::PAD {
            return Err(crate::invalid_token(action.token, 0));
        }
        if self.hold > 0 {
            self.hold -= 1;
            return Ok(self.emit(0.0, false, vec!["held".into()]));
        }
        self.events.clear();
        self.prev_goal_dist = self.goal_distance();
        self.apply(action.movement);
        self.world_tick();
        let mut tags = Vec::new();
        let mut reward = 0.0;
        if self.task_done(self.task) {
            reward = 1.0;
            tags.push(format!("task_done:{:?}", self.task.kind()).to_lowercase());
            self.t += 1;
            match self.sample_task(None) {
                Some(task) => self.set_task(task),
                None => unreachable!("find-bin tasks stay feasible"),
            }
        } else if !self.task_feasible(self.task) {
            // e.g. the target bin broke for good; move on without reward
            tags.push("task_abandoned".into());
            self.t += 1;
            if let Some(task) = self.sample_task(None) {
                self.set_task(task);
            }
        } else {
            self.t += 1;
            self.schedule_language();
        }
        for e in &self.events {
            tags.push(match e {
                Claim::Moved(..) => "moved".into(),
                Claim::WillSpawn { .. } => "spawn_scheduled".into(),
                _ => "event".into(),
            });
        }
        Ok(self.emit(reward, false, tags))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let env = HomeGridLite::new(HomeGridConfig::default(), 0).unwrap();
        assert_eq!(env.room_of((2, 3)), Some(0));
        assert_eq!(env.room_of((6, 3)), Some(1));
        assert_eq!(env.room_of((10, 3)), Some(2));
        assert!(!env.is_wall((4, 5)) && env.is_wall((4, 4)));
        assert!(!env.is_wall((8, 4)) && env.is_wall((8, 5)));
        let obs = env.obs_space();
        assert_eq!(obs.image, [CHANNELS, 3, 3]);
    }

    #[test]
    fn all_template_words_are_in_vocab() {
        let v = Vocab::default();
        let mut env = HomeGridLite::new(HomeGridConfig::default(), 1).unwrap();
        for seed in 0..20 {
            env.rng = ChaCha8Rng::seed_from_u64(seed);
            env.reset();
            for t in env.candidate_tasks(None) {
                let text = env.task_text(t);
                let ids = v.tokenize(&text);
                assert!(!ids.contains(&v.unk().unwrap()), "{text}");
                assert_eq!(v.detokenize(&ids), text);
            }
        }
    }
}
