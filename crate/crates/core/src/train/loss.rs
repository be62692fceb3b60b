//! Per-dimension Bellman targets and the training objectives.

use crate::autodiff::{sigmoid, Mat, Tape, Var};
use crate::model::moe::RouterStats;
use crate::model::{masked_max, ModelError, MoePolicy, RouterTrace};
use crate::store::Transition;

use super::TrainError;

/// `[obs; instr; a^1 .. a^{d_A - 1}]` for every item, plus the context length.
pub fn action_sequences(items: &[Transition], d_a: usize) -> (Vec<Vec<u32>>, usize) {
    let ctx = items.first().map_or(0, |t| t.obs.len() + t.instr.len());
    let seqs = items
        .iter()
        .map(|t| t.obs.iter().chain(&t.instr).chain(&t.act[..d_a - 1]).copied().collect())
        .collect();
    (seqs, ctx)
}

/// Regression targets, one row per item and one column per action dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct BellmanTargets {
    pub values: Mat,
}

impl BellmanTargets {
    pub fn n_items(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.values.ncols()
    }
}

/// Combine raw maxima into targets. `within[b][i]` is the target-net max over
/// dimension `i + 1` after the logged `a^{1..i+1}`; `next[b]` the max over
/// dimension 1 at `s'` (ignored when done).
pub fn assemble_targets(within: &[Vec<f64>], next: &[f64], reward: &[f64], done: &[bool], gamma: f64) -> BellmanTargets {
    let n = reward.len();
    let d_a = within.first().map_or(0, Vec::len) + 1;
    let values = Mat::from_shape_fn((n, d_a), |(b, i)| {
        if i + 1 < d_a {
            within[b][i]
        } else if done[b] {
            reward[b]
        } else {
            reward[b] + gamma * next[b]
        }
    });
    BellmanTargets { values }
}

/// Targets from a lagged network. Nothing here is recorded for gradients.
pub fn bellman_targets(items: &[Transition], target: &MoePolicy, gamma: f64) -> Result<BellmanTargets, ModelError> {
    let d_a = target.n_dims();
    let bins = &target.bins;
    let mut tape = Tape::new();
    let bound = target.params.bind(&mut tape, false);

    let mut within = vec![Vec::with_capacity(d_a - 1); items.len()];
    if d_a > 1 {
        let (seqs, ctx) = action_sequences(items, d_a);
        let picks: Vec<(usize, usize)> = (0..items.len())
            .flat_map(|b| (0..d_a - 1).map(move |i| (b, ctx + i)))
            .collect();
        let out = target.forward(&mut tape, &bound, &seqs, &picks)?;
        let logits = tape.value(out.logits);
        for (b, w) in within.iter_mut().enumerate() {
            for i in 0..d_a - 1 {
                let q: Vec<f64> = logits.row(b * (d_a - 1) + i).iter().map(|&l| sigmoid(l)).collect();
                w.push(masked_max(&q, i + 1, bins));
            }
        }
    }

    let live: Vec<usize> = (0..items.len()).filter(|&b| !items[b].done).collect();
    let mut next = vec![0.0; items.len()];
    if !live.is_empty() {
        let seqs: Vec<Vec<u32>> = live
            .iter()
            .map(|&b| items[b].next_obs.iter().chain(&items[b].instr).copied().collect())
            .collect();
        let ctx = seqs[0].len();
        let picks: Vec<(usize, usize)> = (0..live.len()).map(|j| (j, ctx - 1)).collect();
        let out = target.forward(&mut tape, &bound, &seqs, &picks)?;
        let logits = tape.value(out.logits);
        for (j, &b) in live.iter().enumerate() {
            let q: Vec<f64> = logits.row(j).iter().map(|&l| sigmoid(l)).collect();
            next[b] = masked_max(&q, 0, bins);
        }
    }
    let reward: Vec<f64> = items.iter().map(|t| t.reward as f64).collect();
    let done: Vec<bool> = items.iter().map(|t| t.done).collect();
    Ok(assemble_targets(&within, &next, &reward, &done, gamma))
}

pub struct RlLoss {
    pub total: Var,
    pub td: Var,
    pub conservative: Var,
}

/// `q` holds Q-values with row `b·d_A + i` for item `b`, dimension `i`;
/// `logged[b][i]` is the dataset token. The conservative term spreads
/// `π̃_β` uniformly over the `V - 1` tokens other than the logged one.
pub fn rl_loss(tape: &mut Tape, q: Var, targets: &BellmanTargets, logged: &[Vec<u32>], alpha: f64) -> Result<RlLoss, TrainError> {
    let (rows, vocab) = tape.value(q).dim();
    let (n, d_a) = targets.values.dim();
    if rows != n * d_a || logged.len() != n || logged.iter().any(|a| a.len() != d_a) {
        return Err(TrainError::ShapeMismatch(format!(
            "{rows} Q rows for {n} items x {d_a} dims ({} logged)",
            logged.len()
        )));
    }
    let picks = logged
        .iter()
        .enumerate()
        .flat_map(|(b, a)| a.iter().enumerate().map(move |(i, &t)| (b * d_a + i, t as usize)))
        .collect();
    let qa = tape.pick(q, picks);
    let tgt = tape.constant(Mat::from_shape_vec((rows, 1), targets.values.iter().copied().collect()).expect("shape"));
    let diff = tape.sub(qa, tgt);
    let sq = tape.square(diff);
    let td = tape.mean(sq);
    let td = tape.scale(td, 0.5);

    let conservative = if vocab > 1 {
        let all = tape.square(q);
        let all = tape.sum(all);
        let own = tape.square(qa);
        let own = tape.sum(own);
        let others = tape.sub(all, own);
        tape.scale(others, 0.5 / ((vocab - 1) as f64 * rows as f64))
    } else {
        tape.constant(Mat::zeros((1, 1)))
    };
    let weighted = tape.scale(conservative, alpha);
    let total = tape.add(td, weighted);
    Ok(RlLoss { total, td, conservative })
}

/// Mean over layers of `(1/N) Σ_k f_k P_k`. Gradients flow through `P` only;
/// `f` is a hard dispatch count.
pub fn moe_balance_loss(tape: &mut Tape, traces: &[RouterTrace]) -> Result<Var, TrainError> {
    if traces.is_empty() || traces.iter().any(|t| t.stats.token_count == 0) {
        return Err(TrainError::EmptyBatch);
    }
    let mut acc: Option<Var> = None;
    for t in traces {
        let n = t.stats.f.len();
        let p = tape.col_mean(t.probs);
        let f = tape.constant(Mat::from_shape_vec((1, n), t.stats.f.clone()).expect("shape"));
        let fp = tape.mul(p, f);
        let s = tape.sum(fp);
        let s = tape.scale(s, 1.0 / n as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    Ok(tape.scale(acc.expect("non-empty"), 1.0 / traces.len() as f64))
}

/// Value-only balance loss over precomputed statistics.
pub fn balance_value(stats: &[RouterStats]) -> Result<f64, TrainError> {
    if stats.is_empty() || stats.iter().any(|s| s.token_count == 0) {
        return Err(TrainError::EmptyBatch);
    }
    let per_layer = stats.iter().map(|s| {
        let n = s.f.len() as f64;
        s.f.iter().zip(&s.p).map(|(f, p)| f * p).sum::<f64>() / n
    });
    Ok(per_layer.sum::<f64>() / stats.len() as f64)
}

pub fn total_loss(rl: f64, balance: f64, beta: f64) -> f64 {
    rl + beta * balance
}

pub fn total_loss_var(tape: &mut Tape, rl: Var, balance: Option<Var>, beta: f64) -> Var {
    match balance {
        Some(b) if beta != 0.0 => {
            let b = tape.scale(b, beta);
            tape.add(rl, b)
        }
        _ => rl,
    }
}

/// Mean negative log-likelihood of the logged tokens under a softmax over
/// the full vocabulary.
pub fn bc_loss(tape: &mut Tape, logits: Var, logged: &[Vec<u32>]) -> Result<Var, TrainError> {
    let rows = tape.value(logits).nrows();
    let d_a = logged.first().map_or(0, Vec::len);
    if rows != logged.len() * d_a {
        return Err(TrainError::ShapeMismatch(format!("{rows} logit rows for {} items", logged.len())));
    }
    let lp = tape.log_softmax(logits);
    let picks = logged
        .iter()
        .enumerate()
        .flat_map(|(b, a)| a.iter().enumerate().map(move |(i, &t)| (b * d_a + i, t as usize)))
        .collect();
    let ll = tape.pick(lp, picks);
    let m = tape.mean(ll);
    Ok(tape.scale(m, -1.0))
}
