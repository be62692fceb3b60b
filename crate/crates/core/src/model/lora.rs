//! Low-rank adapters on frozen linear maps.
//!
//! Weights are stored row-major for `x · W` application; the adapter keeps the
//! usual `A ∈ R^{r×d_in}`, `B ∈ R^{d_out×r}` shapes and contributes
//! `scaling · B·A·x`, i.e. `scaling · (x·Aᵀ)·Bᵀ` on row vectors.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::autodiff::{Mat, Tape, Var};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LoraInit {
    /// `A` random, `B` zero: the adapter starts as an exact no-op.
    ZeroB,
    /// Both factors random with the given standard deviation for `B`.
    RandomB(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scaling: f64,
}

impl LoraAdapter {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        scaling: f64,
        init: LoraInit,
        rng: &mut Rng,
    ) -> Self {
        let a = gaussian(rank, d_in, 1.0 / (d_in as f64).sqrt(), rng);
        let b = match init {
            LoraInit::ZeroB => Mat::zeros((d_out, rank)),
            LoraInit::RandomB(std) => gaussian(d_out, rank, std, rng),
        };
        LoraAdapter {
            a: store.add(format!("{name}.lora_a"), a, true),
            b: store.add(format!("{name}.lora_b"), b, true),
            rank,
            scaling,
        }
    }

    /// `scaling · (x·Aᵀ)·Bᵀ`
    pub fn apply(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Var {
        let xa = tape.matmul_bt(x, bound[self.a.0]);
        let d = tape.matmul_bt(xa, bound[self.b.0]);
        if self.scaling == 1.0 {
            d
        } else {
            tape.scale(d, self.scaling)
        }
    }

    /// The dense `d_out × d_in` update `scaling · B·A`.
    pub fn delta(&self, store: &ParamStore) -> Mat {
        store.get(self.b).dot(store.get(self.a)) * self.scaling
    }

    pub fn n_scalars(&self, store: &ParamStore) -> usize {
        store.get(self.a).len() + store.get(self.b).len()
    }
}

/// Frozen base weight (row-major `d_in × d_out`) plus an optional adapter.
pub fn adapted_linear(tape: &mut Tape, bound: &[Var], x: Var, w: ParamId, lora: Option<&LoraAdapter>) -> Var {
    let base = tape.matmul(x, bound[w.0]);
    match lora {
        Some(l) => {
            let d = l.apply(tape, bound, x);
            tape.add(base, d)
        }
        None => base,
    }
}

pub(crate) fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Mat {
    let n = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_fn((rows, cols), |_| n.sample(rng))
}

#[cfg(test)]
pub(crate) fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Mat {
    use rand::Rng as _;
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn rank(m: &Mat) -> usize {
        // Gaussian elimination with partial pivoting
        let mut a = m.clone();
        let (r, c) = a.dim();
        let mut rank = 0;
        for col in 0..c {
            let Some(p) = (rank..r).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs())) else {
                break;
            };
            if a[[p, col]].abs() < 1e-9 {
                continue;
            }
            for k in 0..c {
                a.swap([p, k], [rank, k]);
            }
            for i in rank + 1..r {
                let f = a[[i, col]] / a[[rank, col]];
                for k in 0..c {
                    a[[i, k]] -= f * a[[rank, k]];
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn zero_b_contributes_nothing() {
        let mut store = ParamStore::default();
        let mut rng = seed::rng(0, "l");
        let l = LoraAdapter::register(&mut store, "x", 6, 5, 2, 1.0, LoraInit::ZeroB, &mut rng);
        assert!(l.delta(&store).iter().all(|&v| v == 0.0));
        let mut t = Tape::new();
        let bound = store.bind(&mut t, false);
        let x = t.constant(uniform(3, 6, 1.0, &mut rng));
        let y = l.apply(&mut t, &bound, x);
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_rank_is_bounded() {
        let mut store = ParamStore::default();
        let mut rng = seed::rng(1, "l");
        let l = LoraAdapter::register(&mut store, "x", 12, 10, 3, 0.5, LoraInit::RandomB(1.0), &mut rng);
        let d = l.delta(&store);
        assert_eq!(d.dim(), (10, 12));
        assert!(rank(&d) <= 3);
        assert_eq!(rank(&d), 3);
    }

    #[test]
    fn apply_matches_dense_delta() {
        let mut store = ParamStore::default();
        let mut rng = seed::rng(2, "l");
        let l = LoraAdapter::register(&mut store, "x", 4, 3, 2, 0.7, LoraInit::RandomB(1.0), &mut rng);
        let x = uniform(5, 4, 1.0, &mut rng);
        let mut t = Tape::new();
        let bound = store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = l.apply(&mut t, &bound, xv);
        let expect = x.dot(&l.delta(&store).t());
        assert!((t.value(y) - &expect).iter().all(|v| v.abs() < 1e-12));
    }
}
