//! Line-delimited JSON persistence and transition sampling for offline data.
//!
//! One trajectory per line:
//!
//! ```text
//! {"quality":"expert","spec_id":"train/crawl/0","steps":[{"obs":[..],"instr":[..],"act":[..],"r":0,"done":false}, ..]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::Rng;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {reason}")]
    InvariantViolation { line: usize, reason: String },
    #[error("dataset has no transitions")]
    EmptyDataset,
    #[error("exhaustive batch of {requested} exceeds {available} transitions")]
    BatchTooLarge { requested: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Expert,
    Suboptimal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub obs: Vec<u32>,
    pub instr: Vec<u32>,
    pub act: Vec<u32>,
    pub r: u8,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub quality: Quality,
    pub spec_id: String,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn ret(&self) -> u32 {
        self.steps.iter().map(|s| s.r as u32).sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.steps.is_empty() {
            return Err("trajectory has no steps".into());
        }
        let last = self.steps.len() - 1;
        let shape = (self.steps[0].obs.len(), self.steps[0].instr.len(), self.steps[0].act.len());
        for (i, s) in self.steps.iter().enumerate() {
            if s.r > 1 {
                return Err(format!("step {i}: reward {} not in {{0, 1}}", s.r));
            }
            if s.done && i != last {
                return Err(format!("step {i}: done before the final step"));
            }
            if s.r != 0 && !s.done {
                return Err(format!("step {i}: nonzero reward on a non-terminal step"));
            }
            if (s.obs.len(), s.instr.len(), s.act.len()) != shape {
                return Err(format!("step {i}: token layout differs from step 0"));
            }
        }
        if self.ret() > 1 {
            return Err("return exceeds 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Composition {
    pub expert_trajectories: usize,
    pub suboptimal_trajectories: usize,
    pub expert_transitions: usize,
    pub suboptimal_transitions: usize,
    pub successes: usize,
}

impl Composition {
    pub fn suboptimal_fraction(&self) -> f64 {
        let total = self.expert_transitions + self.suboptimal_transitions;
        if total == 0 {
            0.0
        } else {
            self.suboptimal_transitions as f64 / total as f64
        }
    }
}

impl TrajectorySet {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        TrajectorySet { trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    pub fn filter_quality(&self, q: Quality) -> TrajectorySet {
        TrajectorySet::new(self.trajectories.iter().filter(|t| t.quality == q).cloned().collect())
    }

    pub fn composition(&self) -> Composition {
        let mut c = Composition::default();
        for t in &self.trajectories {
            match t.quality {
                Quality::Expert => {
                    c.expert_trajectories += 1;
                    c.expert_transitions += t.steps.len();
                }
                Quality::Suboptimal => {
                    c.suboptimal_trajectories += 1;
                    c.suboptimal_transitions += t.steps.len();
                }
            }
            c.successes += t.ret() as usize;
        }
        c
    }

    pub fn transitions(&self) -> TransitionIndex<'_> {
        TransitionIndex::new(self)
    }
}

pub fn write_trajectories(path: impl AsRef<Path>, set: &TrajectorySet) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, set)?;
    w.flush()?;
    Ok(())
}

pub fn write_to(w: &mut impl Write, set: &TrajectorySet) -> Result<(), StoreError> {
    for t in &set.trajectories {
        serde_json::to_writer(&mut *w, t).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<TrajectorySet, StoreError> {
    read_from(BufReader::new(File::open(path)?))
}

pub fn read_from(r: impl BufRead) -> Result<TrajectorySet, StoreError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        t.validate()
            .map_err(|reason| StoreError::InvariantViolation { line: lineno, reason })?;
        out.push(t);
    }
    Ok(TrajectorySet::new(out))
}

/// One `(s, a, r, s', done)` tuple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub obs: Vec<u32>,
    pub instr: Vec<u32>,
    pub act: Vec<u32>,
    pub next_obs: Vec<u32>,
    pub reward: u8,
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransitionBatch {
    pub items: Vec<Transition>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Flat view over every transition of a set.
pub struct TransitionIndex<'a> {
    set: &'a TrajectorySet,
    index: Vec<(u32, u32)>,
}

impl<'a> TransitionIndex<'a> {
    fn new(set: &'a TrajectorySet) -> Self {
        let index = set
            .trajectories
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.steps.len()).map(move |si| (ti as u32, si as u32)))
            .collect();
        TransitionIndex { set, index }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, i: usize) -> Transition {
        let (ti, si) = self.index[i];
        let traj = &self.set.trajectories[ti as usize];
        let s = &traj.steps[si as usize];
        // terminal steps reuse their own observation as s'
        let next = traj.steps.get(si as usize + 1).unwrap_or(s);
        Transition {
            obs: s.obs.clone(),
            instr: s.instr.clone(),
            act: s.act.clone(),
            next_obs: next.obs.clone(),
            reward: s.r,
            done: s.done,
        }
    }

    pub fn all(&self) -> Vec<Transition> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn sample_indices(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>, StoreError> {
        if self.is_empty() {
            return Err(StoreError::EmptyDataset);
        }
        Ok((0..batch_size).map(|_| rng.gen_range(0..self.len())).collect())
    }

    /// Uniform with replacement over transitions.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut Rng) -> Result<TransitionBatch, StoreError> {
        let idx = self.sample_indices(batch_size, rng)?;
        Ok(TransitionBatch {
            items: idx.into_iter().map(|i| self.get(i)).collect(),
        })
    }

    /// Without replacement; `batch_size == len()` visits every transition once.
    pub fn sample_exhaustive(&self, batch_size: usize, rng: &mut Rng) -> Result<TransitionBatch, StoreError> {
        if self.is_empty() {
            return Err(StoreError::EmptyDataset);
        }
        if batch_size > self.len() {
            return Err(StoreError::BatchTooLarge {
                requested: batch_size,
                available: self.len(),
            });
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        Ok(TransitionBatch {
            items: idx[..batch_size].iter().map(|&i| self.get(i)).collect(),
        })
    }
}

pub fn sample_batch(set: &TrajectorySet, batch_size: usize, rng: &mut Rng) -> Result<TransitionBatch, StoreError> {
    set.transitions().sample_batch(batch_size, rng)
}
