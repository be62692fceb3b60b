//! Dataset generation, training runs, rollouts and the ablation suite.

pub mod config;
pub mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{detokenize, ActionTokens, BinSpec};
use crate::env::{generate_dataset, reset, step, Controller, EnvError, EnvState, Observation, SpecFamily, Split, TaskKind};
use crate::model::checkpoint::CheckpointError;
use crate::model::lora::LoraInit;
use crate::model::{ModelError, MoePolicy};
use crate::seed;
use crate::store::{Quality, StoreError, Transition, TrajectorySet};
use crate::train::gradcheck::{grad_check_objective, GradCheck};
use crate::train::{Objective, StepMetrics, TrainError, Trainer};
pub use config::{ConfigError, ExperimentConfig, Flags};
pub use report::{summarize, write_csv, write_report, ResultRow};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sub-seeds of one repetition, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub index: u64,
    pub master: u64,
    pub data: u64,
    pub backbone: u64,
    pub init: u64,
    pub train: u64,
    pub eval: u64,
}

impl RunSeeds {
    pub fn new(master: u64, index: u64) -> Self {
        let m = seed::derive_idx(master, "repetition", index);
        RunSeeds {
            index,
            master: m,
            data: seed::derive(m, "data"),
            backbone: seed::derive(m, "backbone"),
            init: seed::derive(m, "adapter-init"),
            train: seed::derive(m, "train"),
            eval: seed::derive(m, "eval"),
        }
    }
}

/// Something that picks actions for a batch of live episodes.
pub trait Actor {
    fn act(&mut self, states: &[&EnvState], obs: &[&Observation]) -> Result<Vec<ActionTokens>, ExperimentError>;
}

/// Greedy decoding of a trained policy.
pub struct Greedy<'a>(pub &'a MoePolicy);

impl Actor for Greedy<'_> {
    fn act(&mut self, _states: &[&EnvState], obs: &[&Observation]) -> Result<Vec<ActionTokens>, ExperimentError> {
        let ctx: Vec<Vec<u32>> = obs.iter().map(|o| o.obs.iter().chain(&o.instr).copied().collect()).collect();
        Ok(self.0.greedy_batch(&ctx)?)
    }
}

/// Adapter for the scripted per-state controllers.
pub struct Scripted<C>(pub C);

impl<C: Controller> Actor for Scripted<C> {
    fn act(&mut self, states: &[&EnvState], obs: &[&Observation]) -> Result<Vec<ActionTokens>, ExperimentError> {
        states
            .iter()
            .zip(obs)
            .map(|(s, o)| self.0.act(s, o).map_err(ExperimentError::from))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub kind: TaskKind,
    pub n_episodes: usize,
    pub successes: usize,
    pub mean_len: f64,
}

impl TaskStats {
    pub fn success_rate(&self) -> f64 {
        if self.n_episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.n_episodes as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessStats {
    pub split: Split,
    pub tasks: Vec<TaskStats>,
}

impl SuccessStats {
    pub fn task(&self, kind: TaskKind) -> Option<&TaskStats> {
        self.tasks.iter().find(|t| t.kind == kind)
    }

    pub fn mean_success(&self) -> f64 {
        self.tasks.iter().map(TaskStats::success_rate).sum::<f64>() / self.tasks.len().max(1) as f64
    }
}

/// Run `n_episodes` per task to termination. Episodes of one task advance
/// in lockstep so the actor sees them as one batch. Episode `e` of a task
/// always uses the same layout for a given `seed`.
pub fn rollout(actor: &mut dyn Actor, family: &SpecFamily, bins: &BinSpec, n_episodes: usize, seed: u64) -> Result<SuccessStats, ExperimentError> {
    family.validate()?;
    let mut tasks = Vec::with_capacity(family.tasks.len());
    for spec in &family.tasks {
        let tag = format!("rollout/{}/{}", family.split.name(), spec.kind);
        let mut live: Vec<(EnvState, Observation)> = (0..n_episodes as u64)
            .map(|e| reset(spec, seed::derive_idx(seed, &tag, e)))
            .collect::<Result<_, _>>()?;
        while live.iter().any(|(s, _)| !s.done) {
            let idx: Vec<usize> = (0..live.len()).filter(|&i| !live[i].0.done).collect();
            let states: Vec<&EnvState> = idx.iter().map(|&i| &live[i].0).collect();
            let obs: Vec<&Observation> = idx.iter().map(|&i| &live[i].1).collect();
            let acts = actor.act(&states, &obs)?;
            for (&i, a) in idx.iter().zip(&acts) {
                let cmd = detokenize(a, bins).map_err(EnvError::from)?;
                let out = step(&live[i].0, &cmd)?;
                live[i] = (out.state, out.obs);
            }
        }
        let successes = live.iter().filter(|(s, _)| s.succeeded).count();
        let total_len: usize = live.iter().map(|(s, _)| s.step_count).sum();
        tasks.push(TaskStats {
            kind: spec.kind,
            n_episodes,
            successes,
            mean_len: total_len as f64 / n_episodes.max(1) as f64,
        });
    }
    Ok(SuccessStats {
        split: family.split,
        tasks,
    })
}

/// The four rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoRl,
    NoMoe,
    NoSubopt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoRl, Variant::NoMoe, Variant::NoSubopt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRl => "no_rl",
            Variant::NoMoe => "no_moe",
            Variant::NoSubopt => "no_subopt_data",
        }
    }

    pub fn from_name(s: &str) -> Option<Variant> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn flags(self) -> Flags {
        match self {
            Variant::Full => Flags::FULL,
            Variant::NoRl => Flags {
                use_rl: false,
                use_moe: true,
                use_subopt_data: false,
            },
            Variant::NoMoe => Flags {
                use_moe: false,
                ..Flags::FULL
            },
            Variant::NoSubopt => Flags {
                use_subopt_data: false,
                ..Flags::FULL
            },
        }
    }
}

/// Training dataset for one repetition.
pub fn make_dataset(cfg: &ExperimentConfig, seeds: &RunSeeds) -> Result<TrajectorySet, ExperimentError> {
    Ok(generate_dataset(
        &cfg.env.train_family(),
        &cfg.bins,
        cfg.data.n_expert,
        cfg.data.n_subopt,
        cfg.data.epsilon,
        seeds.data,
    )?)
}

/// Untrained policy for the given flags and repetition.
pub fn build_policy(cfg: &ExperimentConfig, flags: Flags, seeds: &RunSeeds) -> Result<MoePolicy, ExperimentError> {
    let mut mc = cfg.model.clone();
    mc.use_moe = flags.use_moe;
    mc.backbone_seed = seeds.backbone;
    mc.init_seed = seeds.init;
    Ok(MoePolicy::new(mc, cfg.bins.clone())?)
}

/// Transitions a run with these flags trains on.
pub fn select_data(data: &TrajectorySet, flags: Flags) -> Vec<Transition> {
    if flags.use_subopt_data {
        data.transitions().all()
    } else {
        data.filter_quality(Quality::Expert).transitions().all()
    }
}

pub fn train_policy(cfg: &ExperimentConfig, flags: Flags, data: &TrajectorySet, seeds: &RunSeeds) -> Result<Trainer, ExperimentError> {
    let policy = build_policy(cfg, flags, seeds)?;
    let mut tc = cfg.train.clone();
    tc.seed = seeds.train;
    tc.objective = if flags.use_rl {
        Objective::Conservative
    } else {
        Objective::BehaviorCloning
    };
    let mut trainer = Trainer::new(policy, tc)?;
    trainer.fit(&select_data(data, flags))?;
    Ok(trainer)
}

pub fn evaluate(cfg: &ExperimentConfig, policy: &MoePolicy, seeds: &RunSeeds, ood: bool) -> Result<SuccessStats, ExperimentError> {
    rollout(&mut Greedy(policy), &cfg.env.family(ood), &cfg.bins, cfg.eval.episodes, seeds.eval)
}

/// Finite-difference check of the conservative objective on a handful of
/// transitions. Adapters start from random B factors so every trainable
/// tensor carries gradient.
pub fn grad_check_config(cfg: &ExperimentConfig, n_transitions: usize, per_tensor: usize) -> Result<GradCheck, ExperimentError> {
    let seeds = RunSeeds::new(cfg.seed, 0);
    let mut mc = cfg.model.clone();
    mc.backbone_seed = seeds.backbone;
    mc.init_seed = seeds.init;
    if mc.lora_init == LoraInit::ZeroB {
        mc.lora_init = LoraInit::RandomB(0.1);
    }
    let policy = MoePolicy::new(mc, cfg.bins.clone())?;
    let data = generate_dataset(&cfg.env.train_family(), &cfg.bins, 2, 1, cfg.data.epsilon, seeds.data)?;
    let items: Vec<Transition> = data.transitions().all().into_iter().step_by(3).take(n_transitions).collect();
    Ok(grad_check_objective(
        &policy,
        &items,
        cfg.train.gamma,
        cfg.train.alpha,
        cfg.train.beta,
        1e-4,
        per_tensor,
        seeds.train,
    )?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub variant: Variant,
    pub seeds: RunSeeds,
    pub stats: SuccessStats,
    pub last: Option<StepMetrics>,
    /// Largest dispatch fraction per MoE layer, averaged over the last tenth of training.
    pub late_max_f: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub rows: Vec<ResultRow>,
    pub runs: Vec<RunSummary>,
    /// Share of sub-optimal transitions in each repetition's dataset.
    pub subopt_fraction: Vec<f64>,
}

fn late_max_f(metrics: &[StepMetrics]) -> Vec<f64> {
    let tail = &metrics[metrics.len() - (metrics.len() / 10).max(1).min(metrics.len())..];
    let layers = tail.first().map_or(0, |m| m.max_f.len());
    (0..layers)
        .map(|l| tail.iter().map(|m| m.max_f[l]).sum::<f64>() / tail.len() as f64)
        .collect()
}

/// Train and evaluate every variant on `cfg.eval.seeds` repetitions. Within a
/// repetition all variants share the dataset, the frozen backbone and the
/// evaluation episodes.
pub fn run_ablation_suite(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    mut on_run: impl FnMut(&RunSummary),
) -> Result<SuiteResult, ExperimentError> {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut subopt_fraction = Vec::new();
    for s in 0..cfg.eval.seeds as u64 {
        let seeds = RunSeeds::new(cfg.seed, s);
        let data = make_dataset(cfg, &seeds)?;
        subopt_fraction.push(data.composition().suboptimal_fraction());
        for &v in variants {
            let trainer = train_policy(cfg, v.flags(), &data, &seeds)?;
            let stats = evaluate(cfg, &trainer.online, &seeds, cfg.eval.ood)?;
            for t in &stats.tasks {
                rows.push(ResultRow {
                    variant: v.name().to_string(),
                    task: t.kind.name().to_string(),
                    n_episodes: t.n_episodes,
                    success_rate: t.success_rate(),
                    mean_len: t.mean_len,
                    seed: s,
                });
            }
            let run = RunSummary {
                variant: v,
                seeds,
                stats,
                last: trainer.metrics.last().cloned(),
                late_max_f: late_max_f(&trainer.metrics),
            };
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(SuiteResult {
        rows,
        runs,
        subopt_fraction,
    })
}
