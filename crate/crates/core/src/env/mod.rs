//! Synthetic corridor MDP with sparse terminal reward.
//!
//! The robot starts at cell 0 of a 1-D corridor and must stop on the goal cell
//! and raise the termination flag. Each barrier cell demands one body height
//! (low to crawl under, high to step over); entering or standing on one at
//! any other height ends the episode with reward 0. Only three command fields move the dynamics (the sign of `v_x`,
//! the band of `h_z`, and `T`); the remaining nine are carried but inert.

mod dataset;
mod policy;

pub use dataset::{generate_dataset, run_episode, SpecFamily, Split};
pub use policy::{
    expert_policy, expert_tokens, preserves_success, random_tokens, suboptimal_policy,
    suboptimal_tokens, success_preserving_classes, CommandClass, Controller, ExpertController,
    Motion, RandomController,
};

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CommandField, CommandVector};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("step called on a finished episode")]
    SteppedAfterDone,
    #[error("no success-preserving command from position {position} at step {step}")]
    Unsolvable { position: usize, step: usize },
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
}

/// Physical body-height range split into three equal bands.
pub const BODY_HEIGHT_RANGE: (f64, f64) = (-0.25, 0.15);
/// Forward speeds inside this band count as standing still.
pub const VX_DEADBAND: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Height {
    Low,
    Mid,
    High,
}

impl Height {
    pub const ALL: [Height; 3] = [Height::Low, Height::Mid, Height::High];

    pub fn from_command(h_z: f64) -> Height {
        let (lo, hi) = BODY_HEIGHT_RANGE;
        let band = ((h_z - lo) / (hi - lo) * 3.0).floor();
        match band {
            b if b < 1.0 => Height::Low,
            b if b < 2.0 => Height::Mid,
            _ => Height::High,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    GoTo,
    GoAvoid,
    Crawl,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::GoTo, TaskKind::GoAvoid, TaskKind::Crawl];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::GoTo => "go_to",
            TaskKind::GoAvoid => "go_avoid",
            TaskKind::Crawl => "crawl",
        }
    }

    pub fn from_name(s: &str) -> Option<TaskKind> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Body height required on this task's barrier cells.
    pub fn barrier_height(self) -> Height {
        match self {
            TaskKind::Crawl => Height::Low,
            TaskKind::GoTo | TaskKind::GoAvoid => Height::High,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriticalCells {
    /// Uniform count in `[min, max]`, placed uniformly between start and goal.
    Random { min: usize, max: usize },
    Fixed(Vec<usize>),
}

impl CriticalCells {
    pub fn none() -> Self {
        CriticalCells::Fixed(Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub length: usize,
    pub horizon: usize,
    /// Goal cell drawn uniformly from `[goal_lo, goal_hi)`.
    pub goal_lo: usize,
    pub goal_hi: usize,
    pub critical: CriticalCells,
    pub n_distractors: usize,
    pub n_objects: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, length: usize, horizon: usize) -> Self {
        let critical = match kind {
            TaskKind::GoTo => CriticalCells::none(),
            TaskKind::GoAvoid => CriticalCells::Random { min: 1, max: 2 },
            TaskKind::Crawl => CriticalCells::Random { min: 2, max: 3 },
        };
        TaskSpec {
            kind,
            length,
            horizon,
            goal_lo: length / 2,
            goal_hi: length,
            critical,
            n_distractors: if kind == TaskKind::GoTo { 2 } else { 1 },
            n_objects: 4,
        }
    }

    pub fn with_goal_range(mut self, lo: usize, hi: usize) -> Self {
        self.goal_lo = lo;
        self.goal_hi = hi;
        self
    }

    pub fn with_critical(mut self, critical: CriticalCells) -> Self {
        self.critical = critical;
        self
    }

    pub fn with_distractors(mut self, n: usize) -> Self {
        self.n_distractors = n;
        self
    }

    pub fn vocab(&self) -> ObsVocab {
        ObsVocab {
            n_objects: self.n_objects,
            max_dist: self.length,
        }
    }

    pub fn max_critical(&self) -> usize {
        match &self.critical {
            CriticalCells::Random { max, .. } => *max,
            CriticalCells::Fixed(c) => c.len(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidSpec(m));
        if self.length < 2 {
            return bad("corridor length must be >= 2".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if !(1 <= self.goal_lo && self.goal_lo < self.goal_hi && self.goal_hi <= self.length) {
            return bad(format!(
                "goal range [{}, {}) must lie inside [1, {})",
                self.goal_lo, self.goal_hi, self.length
            ));
        }
        match &self.critical {
            CriticalCells::Random { min, max } => {
                if min > max {
                    return bad("critical min exceeds max".into());
                }
                if *max >= self.length || *max > self.goal_lo - 1 {
                    return bad(format!(
                        "{max} critical cells do not fit before goal cell {} (length {})",
                        self.goal_lo, self.length
                    ));
                }
            }
            CriticalCells::Fixed(cells) => {
                if cells.len() >= self.length {
                    return bad("more critical cells than corridor cells".into());
                }
                for (i, &c) in cells.iter().enumerate() {
                    if c == 0 || c >= self.length {
                        return bad(format!("critical cell {c} outside (0, {})", self.length));
                    }
                    if (self.goal_lo..self.goal_hi).contains(&c) {
                        return bad(format!("critical cell {c} overlaps the goal range"));
                    }
                    if cells[..i].contains(&c) {
                        return bad(format!("duplicate critical cell {c}"));
                    }
                }
            }
        }
        if self.n_distractors > 0 && self.n_objects < 2 {
            return bad("distractors need at least two object identities".into());
        }
        if self.n_objects == 0 {
            return bad("at least one object identity is required".into());
        }
        if 1 + self.max_critical() + self.n_distractors > self.length - 1 {
            return bad("goal, critical cells and distractors do not fit in the corridor".into());
        }
        Ok(())
    }
}

/// Token layout of the observation/instruction region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsVocab {
    pub n_objects: usize,
    pub max_dist: usize,
}

impl ObsVocab {
    pub const PAD: u32 = 0;
    pub const EMPTY: u32 = 1;
    pub const WALL: u32 = 2;
    pub const BARRIER_LOW: u32 = 3;
    pub const BARRIER_HIGH: u32 = 4;
    const OBJECTS: u32 = 5;

    pub fn object(&self, id: u32) -> u32 {
        Self::OBJECTS + id
    }
    fn heights(&self) -> u32 {
        Self::OBJECTS + self.n_objects as u32
    }
    pub fn height(&self, h: Height) -> u32 {
        self.heights() + h.index() as u32
    }
    fn dirs(&self) -> u32 {
        self.heights() + 3
    }
    /// `dir` is -1 (goal behind), 0 (here) or +1 (goal ahead).
    pub fn direction(&self, dir: i32) -> u32 {
        self.dirs() + (dir.signum() + 1) as u32
    }
    fn dists(&self) -> u32 {
        self.dirs() + 3
    }
    pub fn distance(&self, d: usize) -> u32 {
        self.dists() + d.min(self.max_dist) as u32
    }
    fn tasks(&self) -> u32 {
        self.dists() + self.max_dist as u32 + 1
    }
    pub fn task(&self, k: TaskKind) -> u32 {
        self.tasks() + k.index() as u32
    }
    pub fn target(&self, id: u32) -> u32 {
        self.tasks() + 3 + id
    }
    pub fn size(&self) -> usize {
        (self.tasks() + 3) as usize + self.n_objects
    }
}

pub const OBS_LEN: usize = 6;
pub const INSTR_LEN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Empty,
    Barrier(Height),
    Object(u32),
}

/// Concrete corridor produced by [`reset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub kind: TaskKind,
    pub length: usize,
    pub horizon: usize,
    pub goal: usize,
    pub target_id: u32,
    pub cells: Vec<Cell>,
    pub critical_cells: Vec<usize>,
    pub vocab: ObsVocab,
}

impl Layout {
    pub fn barrier_at(&self, pos: usize) -> Option<Height> {
        match self.cells.get(pos) {
            Some(Cell::Barrier(h)) => Some(*h),
            _ => None,
        }
    }

    fn cell_token(&self, pos: i64) -> u32 {
        if pos < 0 || pos >= self.length as i64 {
            return ObsVocab::WALL;
        }
        match self.cells[pos as usize] {
            Cell::Empty => ObsVocab::EMPTY,
            Cell::Barrier(Height::Low) => ObsVocab::BARRIER_LOW,
            Cell::Barrier(_) => ObsVocab::BARRIER_HIGH,
            Cell::Object(id) => self.vocab.object(id),
        }
    }

    /// Shortest number of steps from `pos` to a successful termination.
    pub fn min_steps_to_success(&self, pos: usize) -> usize {
        pos.abs_diff(self.goal) + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub layout: Arc<Layout>,
    pub position: usize,
    pub body_height: Height,
    pub step_count: usize,
    pub done: bool,
    pub succeeded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    pub obs: Vec<u32>,
    pub instr: Vec<u32>,
}

impl EnvState {
    pub fn observe(&self) -> Observation {
        let l = &self.layout;
        let v = &l.vocab;
        let p = self.position as i64;
        let dir = l.goal as i32 - self.position as i32;
        Observation {
            obs: vec![
                l.cell_token(p - 1),
                l.cell_token(p),
                l.cell_token(p + 1),
                v.height(self.body_height),
                v.direction(dir),
                v.distance(self.position.abs_diff(l.goal)),
            ],
            instr: vec![v.task(l.kind), v.target(l.target_id)],
        }
    }

    pub fn remaining(&self) -> usize {
        self.layout.horizon - self.step_count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

pub fn reset(spec: &TaskSpec, seed: u64) -> Result<(EnvState, Observation), EnvError> {
    spec.validate()?;
    let mut rng = seed::rng(seed, "reset");
    let goal = rng.gen_range(spec.goal_lo..spec.goal_hi);
    let mut cells = vec![Cell::Empty; spec.length];
    let barrier = Cell::Barrier(spec.kind.barrier_height());
    let critical_cells = match &spec.critical {
        CriticalCells::Fixed(c) => {
            let mut c = c.clone();
            c.sort_unstable();
            c
        }
        CriticalCells::Random { min, max } => {
            let n = rng.gen_range(*min..=*max);
            let mut pool: Vec<usize> = (1..goal).collect();
            pool.shuffle(&mut rng);
            let mut c: Vec<usize> = pool.into_iter().take(n).collect();
            c.sort_unstable();
            c
        }
    };
    for &c in &critical_cells {
        cells[c] = barrier;
    }
    let target_id = rng.gen_range(0..spec.n_objects as u32);
    cells[goal] = Cell::Object(target_id);
    let mut free: Vec<usize> = (1..spec.length).filter(|&c| cells[c] == Cell::Empty).collect();
    free.shuffle(&mut rng);
    for &c in free.iter().take(spec.n_distractors) {
        let mut id = rng.gen_range(0..spec.n_objects as u32 - 1);
        if id >= target_id {
            id += 1;
        }
        cells[c] = Cell::Object(id);
    }
    let layout = Arc::new(Layout {
        kind: spec.kind,
        length: spec.length,
        horizon: spec.horizon,
        goal,
        target_id,
        cells,
        critical_cells,
        vocab: spec.vocab(),
    });
    let state = EnvState {
        layout,
        position: 0,
        body_height: Height::Mid,
        step_count: 0,
        done: false,
        succeeded: false,
    };
    let obs = state.observe();
    Ok((state, obs))
}

pub fn motion_of(v_x: f64) -> i64 {
    if v_x > VX_DEADBAND {
        1
    } else if v_x < -VX_DEADBAND {
        -1
    } else {
        0
    }
}

pub fn step(state: &EnvState, cmd: &CommandVector) -> Result<StepOutcome, EnvError> {
    if state.done {
        return Err(EnvError::SteppedAfterDone);
    }
    let layout = &state.layout;
    let mut next = state.clone();
    next.step_count += 1;
    let mut reward = 0.0;
    if cmd.terminate() && state.position == layout.goal {
        next.done = true;
        next.succeeded = true;
        reward = 1.0;
    } else {
        next.body_height = Height::from_command(cmd.get(CommandField::BodyHeight));
        let moved = state.position as i64 + motion_of(cmd.get(CommandField::VX));
        next.position = moved.clamp(0, layout.length as i64 - 1) as usize;
        if let Some(required) = layout.barrier_at(next.position) {
            if next.body_height != required {
                next.done = true;
            }
        }
    }
    if !next.done && next.step_count >= layout.horizon {
        next.done = true;
    }
    let obs = next.observe();
    let done = next.done;
    Ok(StepOutcome {
        state: next,
        obs,
        reward,
        done,
    })
}
