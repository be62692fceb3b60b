//! Spec families and mixed-quality dataset generation.

use serde::{Deserialize, Serialize};

use super::{reset, step, Controller, EnvError, ExpertController, TaskKind, TaskSpec};
use crate::codec::{detokenize, BinSpec};
use crate::seed;
use crate::store::{Quality, Step, Trajectory, TrajectorySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// A set of task specs sharing one goal-placement distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecFamily {
    pub split: Split,
    pub tasks: Vec<TaskSpec>,
}

impl SpecFamily {
    /// Training goals come from `[L/2, L)`.
    pub fn train(kinds: &[TaskKind], length: usize, horizon: usize) -> Self {
        SpecFamily {
            split: Split::Train,
            tasks: kinds.iter().map(|&k| TaskSpec::new(k, length, horizon)).collect(),
        }
    }

    /// Evaluation goals come from `[L/4, L/2)`, disjoint from the training
    /// range. The lower end is raised where needed so the task's critical
    /// cells still fit in front of the goal.
    pub fn eval(kinds: &[TaskKind], length: usize, horizon: usize) -> Self {
        SpecFamily {
            split: Split::Eval,
            tasks: kinds
                .iter()
                .map(|&k| {
                    let t = TaskSpec::new(k, length, horizon);
                    let lo = (length / 4).max(t.max_critical() + 1);
                    t.with_goal_range(lo, length / 2)
                })
                .collect(),
        }
    }

    pub fn task(&self, kind: TaskKind) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.kind == kind)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.tasks.is_empty() {
            return Err(EnvError::InvalidSpec("spec family has no tasks".into()));
        }
        self.tasks.iter().try_for_each(TaskSpec::validate)
    }
}

/// Roll one episode to termination and record it.
pub fn run_episode(
    spec: &TaskSpec,
    env_seed: u64,
    controller: &mut dyn Controller,
    bins: &BinSpec,
    quality: Quality,
    spec_id: &str,
) -> Result<Trajectory, EnvError> {
    let (mut state, mut obs) = reset(spec, env_seed)?;
    let mut steps = Vec::new();
    while !state.done {
        let act = controller.act(&state, &obs)?;
        let cmd = detokenize(&act, bins)?;
        let out = step(&state, &cmd)?;
        steps.push(Step {
            obs: obs.obs,
            instr: obs.instr,
            act: act.0,
            r: out.reward as u8,
            done: out.done,
        });
        state = out.state;
        obs = out.obs;
    }
    Ok(Trajectory {
        quality,
        spec_id: spec_id.to_string(),
        steps,
    })
}

/// `n_expert` expert trajectories followed by `n_subopt` epsilon-corrupted ones.
/// Tasks are assigned round-robin over the family.
pub fn generate_dataset(
    family: &SpecFamily,
    bins: &BinSpec,
    n_expert: usize,
    n_subopt: usize,
    epsilon: f64,
    seed: u64,
) -> Result<TrajectorySet, EnvError> {
    family.validate()?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(EnvError::InvalidSpec(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(n_expert + n_subopt);
    let groups = [
        (Quality::Expert, n_expert, 0.0, "expert"),
        (Quality::Suboptimal, n_subopt, epsilon, "subopt"),
    ];
    for (quality, n, eps, tag) in groups {
        for i in 0..n as u64 {
            let spec = &family.tasks[i as usize % family.tasks.len()];
            let env_seed = seed::derive_idx(seed, &format!("{tag}-env"), i);
            let mut ctl = ExpertController {
                bins: bins.clone(),
                epsilon: eps,
                rng: seed::rng_idx(seed, &format!("{tag}-policy"), i),
            };
            let id = format!("{}/{}/{:016x}", family.split.name(), spec.kind, env_seed);
            out.push(run_episode(spec, env_seed, &mut ctl, bins, quality, &id)?);
        }
    }
    Ok(TrajectorySet::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::write_to;

    fn family() -> SpecFamily {
        SpecFamily::train(&TaskKind::ALL, 20, 60)
    }

    #[test]
    fn expert_only_set_has_unit_returns() {
        let bins = BinSpec::full(64);
        let set = generate_dataset(&family(), &bins, 9, 0, 0.5, 1).unwrap();
        assert_eq!(set.len(), 9);
        assert!(set.trajectories.iter().all(|t| t.ret() == 1));
        for t in &set.trajectories {
            t.validate().unwrap();
            assert!(t.steps.len() <= 60);
        }
    }

    #[test]
    fn lengths_respect_shortest_path_and_horizon() {
        let bins = BinSpec::full(64);
        let fam = family();
        let set = generate_dataset(&fam, &bins, 6, 6, 0.5, 2).unwrap();
        for t in set.trajectories.iter().filter(|t| t.ret() == 1) {
            // the distance token of the first observation is the shortest path length - 1
            let v = fam.tasks[0].vocab();
            let d0 = (t.steps[0].obs[5] - v.distance(0)) as usize;
            assert!(t.steps.len() > d0);
        }
        assert!(set.trajectories.iter().all(|t| t.steps.len() <= 60));
    }

    #[test]
    fn default_ratio_has_mixed_outcomes() {
        let bins = BinSpec::full(64);
        let set = generate_dataset(&family(), &bins, 40, 10, 0.5, 3).unwrap();
        let c = set.composition();
        assert_eq!((c.expert_trajectories, c.suboptimal_trajectories), (40, 10));
        let sub = set.filter_quality(Quality::Suboptimal);
        assert!(sub.trajectories.iter().any(|t| t.ret() == 0));
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let bins = BinSpec::full(64);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_to(&mut a, &generate_dataset(&family(), &bins, 5, 5, 0.4, 8).unwrap()).unwrap();
        write_to(&mut b, &generate_dataset(&family(), &bins, 5, 5, 0.4, 8).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_family_shifts_goals() {
        let f = SpecFamily::eval(&TaskKind::ALL, 20, 60);
        assert!(f.tasks.iter().all(|t| t.goal_lo == 5 && t.goal_hi == 10));
        let g = family();
        assert!(g.tasks.iter().all(|t| t.goal_lo == 10));
        for (a, b) in f.tasks.iter().zip(&g.tasks) {
            assert!(a.goal_hi <= b.goal_lo);
        }
        // three critical cells need the goal at 4 or beyond
        let short = SpecFamily::eval(&TaskKind::ALL, 12, 36);
        let lo: Vec<usize> = short.tasks.iter().map(|t| t.goal_lo).collect();
        assert_eq!(lo, vec![3, 3, 4]);
        short.validate().unwrap();
    }
}
