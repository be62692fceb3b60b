//! Mixture of LoRA experts over one frozen feed-forward network.
//!
//! Expert `k` computes `(W_down + ΔW_down^k) f((W_up + ΔW_up^k) x)` where the
//! `ΔW` are low-rank adapters and `W_up`, `W_down` are shared and frozen. A
//! linear router picks the top `K` experts per token and mixes their outputs
//! with a softmax over the selected logits.

use super::lora::{adapted_linear, LoraAdapter};
use super::params::{ParamId, ParamStore};
use crate::autodiff::{top_k, Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertAdapters {
    pub up: LoraAdapter,
    pub down: LoraAdapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub w_up: ParamId,
    pub w_down: ParamId,
    /// `d × N` router weights.
    pub router: ParamId,
    pub experts: Vec<ExpertAdapters>,
    pub top_k: usize,
}

/// Dispatch statistics of one layer for the load-balancing loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterStats {
    /// Fraction of tokens whose highest router probability is expert `k`.
    pub f: Vec<f64>,
    /// Mean router probability of expert `k`.
    pub p: Vec<f64>,
    pub token_count: usize,
}

impl RouterStats {
    pub fn from_probs(probs: &Mat) -> Self {
        let (t, n) = probs.dim();
        let mut f = vec![0.0; n];
        let mut p = vec![0.0; n];
        for row in probs.rows() {
            let arg = top_k(row.as_slice().expect("contiguous"), 1)[0];
            f[arg] += 1.0;
            for (pk, v) in p.iter_mut().zip(row.iter()) {
                *pk += v;
            }
        }
        if t > 0 {
            f.iter_mut().for_each(|v| *v /= t as f64);
            p.iter_mut().for_each(|v| *v /= t as f64);
        }
        RouterStats { f, p, token_count: t }
    }

    pub fn max_f(&self) -> f64 {
        self.f.iter().copied().fold(0.0, f64::max)
    }

    /// Shannon entropy (nats) of the dispatch fractions.
    pub fn f_entropy(&self) -> f64 {
        -self.f.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
    }
}

/// Top-`k` experts for one hidden vector and their softmax weights.
pub fn route(x: &[f64], router: &Mat, k: usize) -> (Vec<usize>, Vec<f64>) {
    let logits: Vec<f64> = (0..router.ncols())
        .map(|j| x.iter().zip(router.column(j)).map(|(a, b)| a * b).sum())
        .collect();
    route_logits(&logits, k)
}

pub fn route_logits(logits: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let idx = top_k(logits, k);
    let m = idx.iter().map(|&j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = idx.iter().map(|&j| (logits[j] - m).exp()).sum();
    let w = idx.iter().map(|&j| (logits[j] - m).exp() / z).collect();
    (idx, w)
}

pub struct MoeOutput {
    pub y: Var,
    /// Softmax over all router logits, one row per token.
    pub probs: Var,
    pub stats: RouterStats,
    /// Tokens evaluated by each expert.
    pub evals: Vec<usize>,
}

pub fn expert_forward(tape: &mut Tape, bound: &[Var], layer: &MoeLayer, k: usize, x: Var) -> Var {
    let e = &layer.experts[k];
    let up = adapted_linear(tape, bound, x, layer.w_up, Some(&e.up));
    let act = tape.gelu(up);
    adapted_linear(tape, bound, act, layer.w_down, Some(&e.down))
}

/// Shared FFN with one optional adapter pair; the dense (non-MoE) block.
pub fn dense_forward(
    tape: &mut Tape,
    bound: &[Var],
    w_up: ParamId,
    w_down: ParamId,
    lora: Option<&ExpertAdapters>,
    x: Var,
) -> Var {
    let up = adapted_linear(tape, bound, x, w_up, lora.map(|l| &l.up));
    let act = tape.gelu(up);
    adapted_linear(tape, bound, act, w_down, lora.map(|l| &l.down))
}

/// Sparse mixture over the routed experts. Unselected experts are never run.
pub fn moe_forward(tape: &mut Tape, bound: &[Var], layer: &MoeLayer, x: Var) -> MoeOutput {
    let n_tokens = tape.value(x).nrows();
    let n_experts = layer.experts.len();
    let logits = tape.matmul(x, bound[layer.router.0]);
    let probs = tape.softmax(logits);
    let gates = tape.topk_gates(logits, layer.top_k);

    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_experts];
    for (i, row) in tape.value(gates).rows().into_iter().enumerate() {
        for (e, &g) in row.iter().enumerate() {
            if g > 0.0 {
                rows[e].push(i);
            }
        }
    }

    let mut y: Option<Var> = None;
    let mut evals = vec![0; n_experts];
    for (e, idx) in rows.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        evals[e] = idx.len();
        let xe = tape.gather_rows(x, idx.clone());
        let out = expert_forward(tape, bound, layer, e, xe);
        let g = tape.pick(gates, idx.iter().map(|&r| (r, e)).collect());
        let weighted = tape.mul_col(out, g);
        let spread = tape.scatter_rows(weighted, idx, n_tokens);
        y = Some(match y {
            Some(acc) => tape.add(acc, spread),
            None => spread,
        });
    }
    let y = y.unwrap_or_else(|| tape.constant(Mat::zeros(tape.value(x).raw_dim())));
    let stats = RouterStats::from_probs(tape.value(probs));
    MoeOutput { y, probs, stats, evals }
}

/// Value-only convenience wrapper around [`moe_forward`].
pub fn moe_forward_values(store: &ParamStore, layer: &MoeLayer, x: &Mat) -> (Mat, Mat, Vec<usize>) {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = moe_forward(&mut tape, &bound, layer, xv);
    (tape.value(out.y).clone(), tape.value(out.probs).clone(), out.evals)
}

pub fn expert_forward_values(store: &ParamStore, layer: &MoeLayer, k: usize, x: &Mat) -> Mat {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = expert_forward(&mut tape, &bound, layer, k, xv);
    tape.value(y).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lora::{gaussian, LoraInit};
    use crate::seed;

    fn layer(n: usize, k: usize, init: LoraInit) -> (ParamStore, MoeLayer) {
        let (d, h, r) = (6, 10, 2);
        let mut rng = seed::rng(9, "moe");
        let mut s = ParamStore::default();
        let w_up = s.add("up", gaussian(d, h, 0.4, &mut rng), false);
        let w_down = s.add("down", gaussian(h, d, 0.3, &mut rng), false);
        let router = s.add("router", gaussian(d, n, 1.0, &mut rng), true);
        let experts = (0..n)
            .map(|e| ExpertAdapters {
                up: LoraAdapter::register(&mut s, &format!("e{e}.up"), d, h, r, 1.0, init, &mut rng),
                down: LoraAdapter::register(&mut s, &format!("e{e}.down"), h, d, r, 1.0, init, &mut rng),
            })
            .collect();
        (
            s,
            MoeLayer {
                w_up,
                w_down,
                router,
                experts,
                top_k: k,
            },
        )
    }

    fn shared_ffn(s: &ParamStore, l: &MoeLayer, x: &Mat) -> Mat {
        let mut t = Tape::new();
        let b = s.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = dense_forward(&mut t, &b, l.w_up, l.w_down, None, xv);
        t.value(y).clone()
    }

    #[test]
    fn route_example() {
        let (idx, w) = route_logits(&[2.0, 1.0, 0.0, -1.0], 2);
        assert_eq!(idx, vec![0, 1]);
        assert!((w[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((w[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn route_uniform_and_singleton() {
        let (idx, w) = route_logits(&[0.3; 4], 4);
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let (idx, w) = route_logits(&[0.1, 0.9, 0.5], 1);
        assert_eq!((idx, w), (vec![1], vec![1.0]));
    }

    #[test]
    fn route_uses_router_weights() {
        let r = Mat::from_shape_vec((2, 3), vec![1.0, 0.0, -1.0, 0.0, 2.0, 0.0]).unwrap();
        let (idx, _) = route(&[1.0, 1.0], &r, 1);
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn zero_adapters_collapse_to_shared_ffn() {
        let (s, l) = layer(4, 2, LoraInit::ZeroB);
        let x = gaussian(7, 6, 1.0, &mut seed::rng(1, "x"));
        let base = shared_ffn(&s, &l, &x);
        for k in 0..4 {
            let y = expert_forward_values(&s, &l, k, &x);
            assert!((&y - &base).iter().all(|v| v.abs() < 1e-12));
        }
        let (y, _, _) = moe_forward_values(&s, &l, &x);
        assert!((&y - &base).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identical_adapters_give_identical_experts() {
        let (mut s, l) = layer(3, 2, LoraInit::RandomB(0.5));
        for id in [l.experts[0].up.a, l.experts[0].up.b, l.experts[0].down.a, l.experts[0].down.b]
            .into_iter()
            .zip([l.experts[1].up.a, l.experts[1].up.b, l.experts[1].down.a, l.experts[1].down.b])
        {
            let v = s.get(id.0).clone();
            *s.get_mut(id.1) = v;
        }
        let x = gaussian(4, 6, 1.0, &mut seed::rng(2, "x"));
        assert_eq!(expert_forward_values(&s, &l, 0, &x), expert_forward_values(&s, &l, 1, &x));
        assert_ne!(expert_forward_values(&s, &l, 0, &x), expert_forward_values(&s, &l, 2, &x));
    }

    #[test]
    fn top1_equals_argmax_expert() {
        let (s, l) = layer(4, 1, LoraInit::RandomB(0.5));
        let x = gaussian(9, 6, 1.0, &mut seed::rng(3, "x"));
        let (y, _, evals) = moe_forward_values(&s, &l, &x);
        assert_eq!(evals.iter().sum::<usize>(), 9);
        for i in 0..9 {
            let row = x.row(i).to_owned().insert_axis(ndarray::Axis(0));
            let (idx, _) = route(row.as_slice().unwrap(), s.get(l.router), 1);
            let e = expert_forward_values(&s, &l, idx[0], &row);
            assert!((&y.row(i) - &e.row(0)).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn all_experts_match_dense_mixture() {
        let (s, l) = layer(4, 4, LoraInit::RandomB(0.5));
        let x = gaussian(8, 6, 1.0, &mut seed::rng(4, "x"));
        let (y, _, evals) = moe_forward_values(&s, &l, &x);
        assert_eq!(evals, vec![8; 4]);
        for i in 0..8 {
            let row = x.row(i).to_owned().insert_axis(ndarray::Axis(0));
            let logits = row.dot(s.get(l.router));
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            let mut dense = Mat::zeros((1, 6));
            for k in 0..4 {
                let w = (logits[[0, k]] - m).exp() / z;
                dense = dense + expert_forward_values(&s, &l, k, &row) * w;
            }
            assert!((&y.row(i) - &dense.row(0)).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn stats_of_uniform_and_one_hot() {
        let uni = Mat::from_elem((8, 4), 0.25);
        let s = RouterStats::from_probs(&uni);
        assert_eq!(s.p, vec![0.25; 4]);
        assert_eq!(s.f.iter().sum::<f64>(), 1.0);
        let mut hot = Mat::zeros((5, 3));
        hot.column_mut(1).fill(1.0);
        let s = RouterStats::from_probs(&hot);
        assert_eq!(s.f, vec![0.0, 1.0, 0.0]);
        assert_eq!(s.max_f(), 1.0);
        assert_eq!(s.f_entropy(), 0.0);
    }
}
