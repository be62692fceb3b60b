//! Offline training: conservative per-dimension Q-learning or behavior
//! cloning, both with the router balance penalty.

pub mod adam;
pub mod gradcheck;
pub mod loss;

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Mat, Tape, Var};
use crate::model::{ModelError, MoePolicy, RouterTrace};
use crate::seed::{self, Rng};
use crate::store::Transition;
use adam::Adam;
use loss::{action_sequences, bc_loss, bellman_targets, moe_balance_loss, rl_loss, total_loss_var, BellmanTargets};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("router statistics over zero tokens")]
    EmptyBatch,
    #[error("non-finite loss at step {step}\n{dump}")]
    NonFiniteLoss { step: u64, dump: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Conservative,
    BehaviorCloning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub target_sync: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Linearly decay `alpha` to zero over this many steps.
    pub alpha_anneal: Option<u64>,
    pub clip: Option<f64>,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.98,
            alpha: 0.5,
            beta: 0.002,
            lr: 1e-3,
            target_sync: 200,
            batch_size: 64,
            total_steps: 2000,
            seed: 0,
            alpha_anneal: None,
            clip: Some(1.0),
            objective: Objective::Conservative,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return bad("alpha and beta must be non-negative");
        }
        if self.lr <= 0.0 || self.batch_size == 0 || self.target_sync == 0 {
            return bad("lr, batch_size and target_sync must be positive");
        }
        Ok(())
    }

    pub fn alpha_at(&self, step: u64) -> f64 {
        match self.alpha_anneal {
            Some(n) if n > 0 => self.alpha * (1.0 - step as f64 / n as f64).max(0.0),
            _ => self.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub td: f64,
    pub conservative: f64,
    pub moe: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Dispatch-fraction entropy per MoE layer.
    pub entropy: Vec<f64>,
    pub max_f: Vec<f64>,
}

/// Scalar pieces of one objective evaluation.
pub struct LossParts {
    pub total: Var,
    pub td: Option<Var>,
    pub conservative: Option<Var>,
    pub moe: Option<Var>,
    pub traces: Vec<RouterTrace>,
}

/// Build the full objective for `items` on `tape`. `targets` is required for
/// the conservative objective and ignored for cloning.
pub fn objective(
    policy: &MoePolicy,
    tape: &mut Tape,
    bound: &[Var],
    items: &[Transition],
    targets: Option<&BellmanTargets>,
    kind: Objective,
    alpha: f64,
    beta: f64,
) -> Result<LossParts, TrainError> {
    let d_a = policy.n_dims();
    let (seqs, ctx) = action_sequences(items, d_a);
    let out = policy.action_logits(tape, bound, &seqs, ctx)?;
    let logged: Vec<Vec<u32>> = items.iter().map(|t| t.act.clone()).collect();
    let (rl, td, cons) = match kind {
        Objective::Conservative => {
            let targets = targets.ok_or_else(|| TrainError::InvalidConfig("conservative objective needs targets".into()))?;
            let q = tape.sigmoid(out.logits);
            let l = rl_loss(tape, q, targets, &logged, alpha)?;
            (l.total, Some(l.td), Some(l.conservative))
        }
        Objective::BehaviorCloning => (bc_loss(tape, out.logits, &logged)?, None, None),
    };
    let moe = if out.router.is_empty() {
        None
    } else {
        Some(moe_balance_loss(tape, &out.router)?)
    };
    let total = total_loss_var(tape, rl, moe, beta);
    Ok(LossParts {
        total,
        td,
        conservative: cons,
        moe,
        traces: out.router,
    })
}

pub struct Trainer {
    pub online: MoePolicy,
    pub target: MoePolicy,
    pub config: TrainConfig,
    pub step: u64,
    pub metrics: Vec<StepMetrics>,
    adam: Adam,
    rng: Rng,
}

impl Trainer {
    pub fn new(policy: MoePolicy, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let target = policy.clone();
        Ok(Trainer {
            online: policy,
            target,
            adam: Adam::new(config.lr, config.clip),
            rng: seed::rng(config.seed, "trainer"),
            config,
            step: 0,
            metrics: Vec::new(),
        })
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    /// One optimizer update on `items`. Syncs the target network every
    /// `target_sync` steps.
    pub fn train_step(&mut self, items: &[Transition]) -> Result<StepMetrics, TrainError> {
        let cfg = &self.config;
        let targets = match cfg.objective {
            Objective::Conservative => Some(bellman_targets(items, &self.target, cfg.gamma)?),
            Objective::BehaviorCloning => None,
        };
        let alpha = cfg.alpha_at(self.step);
        let mut tape = Tape::new();
        let bound = self.online.params.bind(&mut tape, true);
        let parts = objective(&self.online, &mut tape, &bound, items, targets.as_ref(), cfg.objective, alpha, cfg.beta)?;
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        let mut m = StepMetrics {
            step: self.step,
            td: val(parts.td),
            conservative: val(parts.conservative),
            moe: val(parts.moe),
            total: tape.scalar(parts.total),
            grad_norm: 0.0,
            entropy: parts.traces.iter().map(|t| t.stats.f_entropy()).collect(),
            max_f: parts.traces.iter().map(|t| t.stats.max_f()).collect(),
        };
        if !m.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                dump: self.dump(&m),
            });
        }
        let mut grads = tape.backward(parts.total);
        let ids: Vec<_> = self.online.params.trainable_ids().collect();
        let mut g: Vec<Mat> = ids
            .iter()
            .map(|id| grads.take(bound[id.0]).unwrap_or_else(|| Mat::zeros(self.online.params.get(*id).raw_dim())))
            .collect();
        drop(tape);
        m.grad_norm = self.adam.step(&mut self.online.params, &ids, &mut g);
        self.step += 1;
        if self.step % self.config.target_sync == 0 {
            self.target.sync_from(&self.online);
        }
        self.metrics.push(m.clone());
        Ok(m)
    }

    /// Run `total_steps` updates on batches drawn uniformly with replacement.
    pub fn fit(&mut self, data: &[Transition]) -> Result<(), TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        while self.step < self.config.total_steps {
            let batch: Vec<Transition> = (0..self.config.batch_size)
                .map(|_| data[self.rng.gen_range(0..data.len())].clone())
                .collect();
            self.train_step(&batch)?;
        }
        Ok(())
    }

    fn dump(&self, m: &StepMetrics) -> String {
        let mut s = format!(
            "td={} conservative={} moe={} total={}\n",
            m.td, m.conservative, m.moe, m.total
        );
        for id in self.online.params.trainable_ids() {
            let p = self.online.params.param(id);
            let norm = p.value.iter().map(|v| v * v).sum::<f64>().sqrt();
            let bad = p.value.iter().filter(|v| !v.is_finite()).count();
            let _ = writeln!(s, "  {} norm={norm:.6e} non_finite={bad}", p.name);
        }
        s
    }

    pub fn write_metrics(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_metrics_csv(w, &self.metrics)
    }

    pub fn save_metrics(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_metrics(&mut f)?;
        f.flush()
    }
}

pub fn write_metrics_csv(w: &mut impl Write, rows: &[StepMetrics]) -> std::io::Result<()> {
    let layers = rows.first().map_or(0, |m| m.entropy.len());
    write!(w, "step,td,conservative,moe,total")?;
    for l in 0..layers {
        write!(w, ",f_entropy_l{l}")?;
    }
    writeln!(w)?;
    for m in rows {
        write!(w, "{},{:.8},{:.8},{:.8},{:.8}", m.step, m.td, m.conservative, m.moe, m.total)?;
        for e in &m.entropy {
            write!(w, ",{e:.6}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
