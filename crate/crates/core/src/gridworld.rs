//! Seedable reimplementations of two MiniGrid tasks.
//!
//! * **Unlock**: two rooms joined by a locked door. The agent starts in the
//!   left room with a key somewhere on the floor; toggling the door while
//!   carrying the key opens it and ends the episode successfully.
//! * **LavaGapS7**: a 7x7 world (border walls included) split by a vertical
//!   lava column with a single gap. Reaching the goal in the far corner is a
//!   success, stepping on lava ends the episode.
//!
//! Coordinates follow MiniGrid: `x` grows to the right, `y` grows downwards.
//! The only reward is `1 - 0.9 * step_count / max_steps`, paid on success.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::{self, streams, Rng};

/// Side length of the egocentric view.
pub const VIEW_SIZE: usize = 7;
/// Number of cells in one observation.
pub const VIEW_CELLS: usize = VIEW_SIZE * VIEW_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "&'static str", try_from = "String")]
pub enum TaskId {
    Unlock,
    LavaGapS7,
}

impl TaskId {
    pub const ALL: [TaskId; 2] = [TaskId::Unlock, TaskId::LavaGapS7];

    /// Upstream environment name.
    pub fn env_name(self) -> &'static str {
        match self {
            TaskId::Unlock => "MiniGrid-Unlock-v0",
            TaskId::LavaGapS7 => "MiniGrid-LavaGapS7-v0",
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            TaskId::Unlock => "unlock",
            TaskId::LavaGapS7 => "lavagap",
        }
    }
}

impl From<TaskId> for &'static str {
    fn from(task: TaskId) -> Self {
        task.short_name()
    }
}

impl TryFrom<String> for TaskId {
    type Error = GridError;

    fn try_from(s: String) -> Result<Self, GridError> {
        s.parse()
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for TaskId {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "unlock" | "minigrid-unlock-v0" => Ok(TaskId::Unlock),
            "lavagap" | "lavagaps7" | "lava-gap" | "minigrid-lavagaps7-v0" => Ok(TaskId::LavaGapS7),
            _ => Err(GridError::UnknownTask(String::from(s))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GridError {
    UnknownTask(String),
    EpisodeTerminated,
    InvalidConfig(&'static str),
    InvalidSnapshot(&'static str),
}

impl fmt::Display for GridError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridError::UnknownTask(name) => write!(f, "unknown task id `{name}`"),
            GridError::EpisodeTerminated => f.write_str("episode already terminated"),
            GridError::InvalidConfig(why) => write!(f, "invalid environment config: {why}"),
            GridError::InvalidSnapshot(why) => write!(f, "invalid layout snapshot: {why}"),
        }
    }
}

impl core::error::Error for GridError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    TurnLeft,
    TurnRight,
    MoveForward,
    PickUp,
    Drop,
    Toggle,
    Done,
}

impl Action {
    pub const COUNT: usize = 7;
    pub const ALL: [Action; Self::COUNT] = [
        Action::TurnLeft,
        Action::TurnRight,
        Action::MoveForward,
        Action::PickUp,
        Action::Drop,
        Action::Toggle,
        Action::Done,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Self::ALL.get(index).copied()
    }
}

/// Cell contents. The discriminants are the observation vocabulary and must
/// never be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum CellKind {
    Empty = 0,
    Wall = 1,
    Key = 2,
    LockedDoor = 3,
    OpenDoor = 4,
    Lava = 5,
    Goal = 6,
    AgentOccupied = 7,
}

impl CellKind {
    pub const COUNT: usize = 8;

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<CellKind> {
        Some(match code {
            0 => CellKind::Empty,
            1 => CellKind::Wall,
            2 => CellKind::Key,
            3 => CellKind::LockedDoor,
            4 => CellKind::OpenDoor,
            5 => CellKind::Lava,
            6 => CellKind::Goal,
            7 => CellKind::AgentOccupied,
            _ => return None,
        })
    }

    /// Whether the agent may move onto the cell (lava included: it kills).
    fn can_enter(self) -> bool {
        matches!(self, CellKind::Empty | CellKind::OpenDoor | CellKind::Goal | CellKind::Lava)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    East,
    South,
    West,
    North,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::East, Direction::South, Direction::West, Direction::North];

    pub fn vector(self) -> (isize, isize) {
        match self {
            Direction::East => (1, 0),
            Direction::South => (0, 1),
            Direction::West => (-1, 0),
            Direction::North => (0, -1),
        }
    }

    pub fn left(self) -> Direction {
        Self::ALL[(self as usize + 3) % 4]
    }

    pub fn right(self) -> Direction {
        Self::ALL[(self as usize + 1) % 4]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Running,
    Success,
    Timeout,
    LavaDeath,
}

impl Outcome {
    pub fn is_terminal(self) -> bool {
        self != Outcome::Running
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Event {
    KeyPickedUp,
    KeyDropped,
    /// The agent moved into the lava column, through the gap or onto lava.
    EnteredLavaRow,
    /// First time the agent is past the lava column.
    CrossedLava,
}

/// Environment parameters. `size` is the room side length for Unlock and the
/// full grid side length for LavaGap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub task: TaskId,
    pub size: usize,
    pub max_steps: u32,
}

impl EnvConfig {
    pub fn new(task: TaskId) -> Self {
        match task {
            TaskId::Unlock => EnvConfig { task, size: 6, max_steps: 288 },
            TaskId::LavaGapS7 => EnvConfig { task, size: 7, max_steps: 196 },
        }
    }

    pub fn with_max_steps(mut self, max_steps: u32) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.max_steps == 0 {
            return Err(GridError::InvalidConfig("max_steps must be positive"));
        }
        match self.task {
            TaskId::Unlock if self.size < 4 => Err(GridError::InvalidConfig("unlock room size must be >= 4")),
            TaskId::LavaGapS7 if self.size < 5 => Err(GridError::InvalidConfig("lava grid size must be >= 5")),
            _ => Ok(()),
        }
    }

    pub fn reset(&self, seed: u64) -> Result<(GridState, Observation), GridError> {
        self.validate()?;
        let mut rng = seed::derived_rng(seed, streams::LAYOUT, 0);
        let state = match self.task {
            TaskId::Unlock => GridState::generate_unlock(self, seed, &mut rng),
            TaskId::LavaGapS7 => GridState::generate_lava_gap(self, seed, &mut rng),
        };
        let obs = state.observe();
        Ok((state, obs))
    }
}

/// Resets `task` with its default configuration.
pub fn reset(task: TaskId, seed: u64) -> (GridState, Observation) {
    EnvConfig::new(task).reset(seed).expect("default configs are valid")
}

/// Egocentric 7x7 view. Row 0 is the farthest row ahead, row 6 holds the
/// agent at column 3; columns grow to the agent's right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Observation {
    pub grid: [u8; VIEW_CELLS],
    pub carrying_key: bool,
    /// Drops so far in the episode. Not part of the visual view; the policy
    /// encoder only reads it when a key-drop constraint is active.
    pub key_drops: u32,
}

impl Observation {
    pub fn cell(&self, col: usize, row: usize) -> CellKind {
        CellKind::from_code(self.grid[row * VIEW_SIZE + col]).expect("observation holds valid codes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub env_reward: f64,
    pub terminated: bool,
    pub outcome: Outcome,
    pub events: Vec<Event>,
}

/// Full simulator state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridState {
    pub task: TaskId,
    pub width: usize,
    pub height: usize,
    cells: Vec<CellKind>,
    pub agent_pos: (usize, usize),
    pub agent_dir: Direction,
    pub carrying_key: bool,
    pub step_count: u32,
    pub max_steps: u32,
    pub rng_seed: u64,
    pub key_drops: u32,
    pub lava_column: Option<usize>,
    pub crossed_lava: bool,
    pub outcome: Outcome,
}

/// Success reward for an episode that ends at `step_count`.
pub fn success_reward(step_count: u32, max_steps: u32) -> f64 {
    1.0 - 0.9 * (f64::from(step_count) / f64::from(max_steps))
}

impl GridState {
    fn blank(config: &EnvConfig, width: usize, height: usize, seed: u64) -> Self {
        let mut cells = vec![CellKind::Empty; width * height];
        for x in 0..width {
            cells[x] = CellKind::Wall;
            cells[(height - 1) * width + x] = CellKind::Wall;
        }
        for y in 0..height {
            cells[y * width] = CellKind::Wall;
            cells[y * width + width - 1] = CellKind::Wall;
        }
        GridState {
            task: config.task,
            width,
            height,
            cells,
            agent_pos: (1, 1),
            agent_dir: Direction::East,
            carrying_key: false,
            step_count: 0,
            max_steps: config.max_steps,
            rng_seed: seed,
            key_drops: 0,
            lava_column: None,
            crossed_lava: false,
            outcome: Outcome::Running,
        }
    }

    fn generate_unlock(config: &EnvConfig, seed: u64, rng: &mut Rng) -> Self {
        let room = config.size;
        let width = 2 * room - 1;
        let height = room;
        let mut state = Self::blank(config, width, height, seed);
        let wall_x = room - 1;
        for y in 0..height {
            state.set(wall_x, y, CellKind::Wall);
        }
        let door_y = rng.random_range(1..room - 1);
        state.set(wall_x, door_y, CellKind::LockedDoor);

        let key = (rng.random_range(1..room - 1), rng.random_range(1..room - 1));
        state.set(key.0, key.1, CellKind::Key);
        loop {
            let pos = (rng.random_range(1..room - 1), rng.random_range(1..room - 1));
            if pos != key {
                state.agent_pos = pos;
                break;
            }
        }
        state.agent_dir = Direction::ALL[rng.random_range(0..4)];
        state
    }

    fn generate_lava_gap(config: &EnvConfig, seed: u64, rng: &mut Rng) -> Self {
        let n = config.size;
        let mut state = Self::blank(config, n, n, seed);
        let gap_x = rng.random_range(2..n - 2);
        let gap_y = rng.random_range(1..n - 1);
        for y in 1..n - 1 {
            if y != gap_y {
                state.set(gap_x, y, CellKind::Lava);
            }
        }
        state.set(n - 2, n - 2, CellKind::Goal);
        state.lava_column = Some(gap_x);
        state.agent_pos = (1, 1);
        state.agent_dir = Direction::East;
        state
    }

    pub fn cell(&self, x: usize, y: usize) -> CellKind {
        self.cells[y * self.width + x]
    }

    fn set(&mut self, x: usize, y: usize, kind: CellKind) {
        self.cells[y * self.width + x] = kind;
    }

    /// Rows of cells, top to bottom.
    pub fn rows(&self) -> impl Iterator<Item = &[CellKind]> {
        self.cells.chunks(self.width)
    }

    fn cell_at(&self, x: isize, y: isize) -> CellKind {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            CellKind::Wall
        } else {
            self.cell(x as usize, y as usize)
        }
    }

    pub fn front_pos(&self) -> (isize, isize) {
        let (dx, dy) = self.agent_dir.vector();
        (self.agent_pos.0 as isize + dx, self.agent_pos.1 as isize + dy)
    }

    pub fn is_terminated(&self) -> bool {
        self.outcome.is_terminal()
    }

    pub fn observe(&self) -> Observation {
        let (fx, fy) = self.agent_dir.vector();
        let (rx, ry) = self.agent_dir.right().vector();
        let (ax, ay) = (self.agent_pos.0 as isize, self.agent_pos.1 as isize);
        let mut grid = [CellKind::Wall.code(); VIEW_CELLS];
        for row in 0..VIEW_SIZE {
            let ahead = (VIEW_SIZE - 1 - row) as isize;
            for col in 0..VIEW_SIZE {
                let side = col as isize - (VIEW_SIZE / 2) as isize;
                let x = ax + fx * ahead + rx * side;
                let y = ay + fy * ahead + ry * side;
                grid[row * VIEW_SIZE + col] = self.cell_at(x, y).code();
            }
        }
        grid[(VIEW_SIZE - 1) * VIEW_SIZE + VIEW_SIZE / 2] = CellKind::AgentOccupied.code();
        Observation { grid, carrying_key: self.carrying_key, key_drops: self.key_drops }
    }

    /// Applies one action.
    pub fn step(&mut self, action: Action) -> Result<StepResult, GridError> {
        if self.is_terminated() {
            return Err(GridError::EpisodeTerminated);
        }
        self.step_count += 1;
        let mut events = Vec::new();
        let (fx, fy) = self.front_pos();
        let front = self.cell_at(fx, fy);

        match action {
            Action::TurnLeft => self.agent_dir = self.agent_dir.left(),
            Action::TurnRight => self.agent_dir = self.agent_dir.right(),
            Action::MoveForward => {
                if front.can_enter() {
                    let (nx, ny) = (fx as usize, fy as usize);
                    if self.lava_column == Some(nx) && self.agent_pos.0 != nx {
                        events.push(Event::EnteredLavaRow);
                    }
                    match front {
                        CellKind::Lava => self.outcome = Outcome::LavaDeath,
                        CellKind::Goal => {
                            self.agent_pos = (nx, ny);
                            self.outcome = Outcome::Success;
                        }
                        _ => self.agent_pos = (nx, ny),
                    }
                    if let Some(col) = self.lava_column {
                        if !self.crossed_lava && self.agent_pos.0 > col {
                            self.crossed_lava = true;
                            events.push(Event::CrossedLava);
                        }
                    }
                }
            }
            Action::PickUp => {
                if !self.carrying_key && front == CellKind::Key {
                    self.set(fx as usize, fy as usize, CellKind::Empty);
                    self.carrying_key = true;
                    events.push(Event::KeyPickedUp);
                }
            }
            Action::Drop => {
                if self.carrying_key && front == CellKind::Empty {
                    self.set(fx as usize, fy as usize, CellKind::Key);
                    self.carrying_key = false;
                    self.key_drops += 1;
                    events.push(Event::KeyDropped);
                }
            }
            Action::Toggle => {
                if self.carrying_key && front == CellKind::LockedDoor {
                    self.set(fx as usize, fy as usize, CellKind::OpenDoor);
                    self.outcome = Outcome::Success;
                }
            }
            Action::Done => {}
        }

        if self.outcome == Outcome::Running && self.step_count >= self.max_steps {
            self.outcome = Outcome::Timeout;
        }
        let env_reward = if self.outcome == Outcome::Success {
            success_reward(self.step_count, self.max_steps)
        } else {
            0.0
        };
        Ok(StepResult {
            observation: self.observe(),
            env_reward,
            terminated: self.is_terminated(),
            outcome: self.outcome,
            events,
        })
    }

    /// Checks the structural invariants of the state.
    pub fn check_invariants(&self) -> Result<(), &'static str> {
        if self.cells.len() != self.width * self.height {
            return Err("cell array does not match dimensions");
        }
        let (x, y) = self.agent_pos;
        if x == 0 || y == 0 || x + 1 >= self.width || y + 1 >= self.height {
            return Err("agent outside the border walls");
        }
        if matches!(self.cell(x, y), CellKind::Wall | CellKind::Lava | CellKind::Key | CellKind::LockedDoor) {
            return Err("agent stands on a blocking cell");
        }
        if self.max_steps == 0 || self.step_count > self.max_steps {
            return Err("step_count exceeds max_steps");
        }
        if self.cells.iter().any(|&c| c == CellKind::AgentOccupied) {
            return Err("agent marker stored in the grid");
        }
        let keys = self.cells.iter().filter(|&&c| c == CellKind::Key).count() + usize::from(self.carrying_key);
        match self.task {
            TaskId::Unlock => {
                if keys != 1 {
                    return Err("unlock must have exactly one key, on the floor or carried");
                }
                let doors = self
                    .cells
                    .iter()
                    .filter(|&&c| matches!(c, CellKind::LockedDoor | CellKind::OpenDoor))
                    .count();
                if doors != 1 {
                    return Err("unlock must have exactly one door");
                }
                if self.cells.iter().any(|&c| matches!(c, CellKind::Lava | CellKind::Goal)) {
                    return Err("unlock has no lava or goal");
                }
                if (self.outcome == Outcome::Success) != self.cells.contains(&CellKind::OpenDoor) {
                    return Err("door state disagrees with outcome");
                }
            }
            TaskId::LavaGapS7 => {
                if keys != 0 || self.key_drops != 0 {
                    return Err("lava gap has no key");
                }
                let col = self.lava_column.ok_or("lava gap without lava column")?;
                if col < 2 || col + 2 >= self.width {
                    return Err("lava column out of range");
                }
                let gaps = (1..self.height - 1).filter(|&y| self.cell(col, y) != CellKind::Lava).count();
                if gaps != 1 {
                    return Err("lava column must have exactly one gap");
                }
                if x > col && !self.crossed_lava {
                    return Err("agent is past the lava but not flagged as crossed");
                }
            }
        }
        Ok(())
    }

    pub fn to_snapshot(&self) -> LayoutSnapshot {
        LayoutSnapshot {
            task: self.task,
            width: self.width,
            height: self.height,
            cells: self.rows().map(|row| row.iter().map(|c| c.code()).collect()).collect(),
            agent_x: self.agent_pos.0,
            agent_y: self.agent_pos.1,
            agent_dir: self.agent_dir,
            carrying_key: self.carrying_key,
            step_count: self.step_count,
            max_steps: self.max_steps,
            rng_seed: self.rng_seed,
            key_drops: self.key_drops,
            lava_column: self.lava_column,
            crossed_lava: self.crossed_lava,
            outcome: self.outcome,
        }
    }

    pub fn from_snapshot(snapshot: &LayoutSnapshot) -> Result<GridState, GridError> {
        if snapshot.cells.len() != snapshot.height || snapshot.cells.iter().any(|r| r.len() != snapshot.width) {
            return Err(GridError::InvalidSnapshot("cell rows do not match dimensions"));
        }
        let cells = snapshot
            .cells
            .iter()
            .flatten()
            .map(|&code| CellKind::from_code(code))
            .collect::<Option<Vec<_>>>()
            .ok_or(GridError::InvalidSnapshot("unknown cell code"))?;
        let state = GridState {
            task: snapshot.task,
            width: snapshot.width,
            height: snapshot.height,
            cells,
            agent_pos: (snapshot.agent_x, snapshot.agent_y),
            agent_dir: snapshot.agent_dir,
            carrying_key: snapshot.carrying_key,
            step_count: snapshot.step_count,
            max_steps: snapshot.max_steps,
            rng_seed: snapshot.rng_seed,
            key_drops: snapshot.key_drops,
            lava_column: snapshot.lava_column,
            crossed_lava: snapshot.crossed_lava,
            outcome: snapshot.outcome,
        };
        state.check_invariants().map_err(GridError::InvalidSnapshot)?;
        Ok(state)
    }
}

/// Serializable layout and counters of a [`GridState`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSnapshot {
    pub task: TaskId,
    pub width: usize,
    pub height: usize,
    /// Cell codes, one inner vector per row from top to bottom.
    pub cells: Vec<Vec<u8>>,
    pub agent_x: usize,
    pub agent_y: usize,
    pub agent_dir: Direction,
    pub carrying_key: bool,
    pub step_count: u32,
    pub max_steps: u32,
    pub rng_seed: u64,
    pub key_drops: u32,
    pub lava_column: Option<usize>,
    pub crossed_lava: bool,
    pub outcome: Outcome,
}

/// Anything that picks actions from observations.
pub trait Policy {
    fn act(&self, obs: &Observation, rng: &mut Rng) -> Action;
}

impl<F> Policy for F
where
    F: Fn(&Observation, &mut Rng) -> Action,
{
    fn act(&self, obs: &Observation, rng: &mut Rng) -> Action {
        self(obs, rng)
    }
}

/// Uniform over all seven actions.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&self, _obs: &Observation, rng: &mut Rng) -> Action {
        Action::ALL[rng.random_range(0..Action::COUNT)]
    }
}

/// One completed episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task: TaskId,
    pub seed: u64,
    pub max_steps: u32,
    /// Observation the action was chosen from, and the action.
    pub steps: Vec<(Observation, Action)>,
    pub results: Vec<StepResult>,
    pub outcome: Outcome,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn events(&self) -> impl Iterator<Item = Event> + '_ {
        self.results.iter().flat_map(|r| r.events.iter().copied())
    }

    pub fn env_reward(&self) -> f64 {
        self.results.last().map_or(0.0, |r| r.env_reward)
    }
}

/// Runs one full episode. Layout and action sampling are both derived from
/// `seed`, so identical policies and seeds give identical trajectories.
pub fn rollout<P: Policy + ?Sized>(policy: &P, config: &EnvConfig, seed: u64) -> Result<Trajectory, GridError> {
    let (mut state, mut obs) = config.reset(seed)?;
    let mut rng = seed::derived_rng(seed, streams::ACTIONS, 0);
    let mut steps = Vec::new();
    let mut results = Vec::new();
    loop {
        let action = policy.act(&obs, &mut rng);
        let result = state.step(action)?;
        steps.push((obs, action));
        obs = result.observation;
        let done = result.terminated;
        results.push(result);
        if done {
            break;
        }
    }
    Ok(Trajectory { task: config.task, seed, max_steps: config.max_steps, steps, results, outcome: state.outcome })
}
