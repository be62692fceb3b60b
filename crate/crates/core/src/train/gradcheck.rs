//! Central finite differences against tape gradients.

use rand::seq::index::sample;

use crate::autodiff::{Tape, Var};
use crate::model::params::ParamStore;
use crate::model::MoePolicy;
use crate::seed;
use crate::store::Transition;

use super::loss::bellman_targets;
use super::{objective, Objective, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub n_coords: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
}

pub fn rel_error(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / (fd.abs() + an.abs() + 1e-12)
}

/// Compare analytic gradients of `loss` with `(L(w+ε) - L(w-ε)) / 2ε` on up
/// to `per_tensor` sampled coordinates of every trainable tensor.
pub fn grad_check<F>(params: &ParamStore, loss: F, eps: f64, per_tensor: usize, seed: u64) -> Result<GradCheck, TrainError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TrainError>,
{
    let eval = |store: &ParamStore| -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let l = loss(&mut tape, &bound)?;
        Ok(tape.scalar(l))
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let root = loss(&mut tape, &bound)?;
    let mut grads = tape.backward(root);

    let mut rng = seed::rng(seed, "grad-check");
    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        n_coords: 0,
        worst: (String::new(), 0),
    };
    for id in params.trainable_ids().collect::<Vec<_>>() {
        let n = params.get(id).len();
        let analytic = grads.take(bound[id.0]).unwrap_or_else(|| ndarray::Array2::zeros(params.get(id).raw_dim()));
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = params.get(id).as_slice().expect("standard layout")[c];
            probe.get_mut(id).as_slice_mut().expect("standard layout")[c] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).as_slice_mut().expect("standard layout")[c] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).as_slice_mut().expect("standard layout")[c] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic.as_slice().expect("standard layout")[c];
            let e = rel_error(fd, an);
            report.n_coords += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (params.param(id).name.clone(), c);
            }
        }
    }
    Ok(report)
}

/// Check the full conservative objective (TD, conservative and balance
/// terms) of `policy` on `items`. Targets come from a frozen copy of the
/// policy and stay fixed while coordinates are perturbed.
pub fn grad_check_objective(
    policy: &MoePolicy,
    items: &[Transition],
    gamma: f64,
    alpha: f64,
    beta: f64,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheck, TrainError> {
    let targets = bellman_targets(items, policy, gamma)?;
    grad_check(
        &policy.params,
        |tape, bound| {
            let parts = objective(policy, tape, bound, items, Some(&targets), Objective::Conservative, alpha, beta)?;
            Ok(parts.total)
        },
        eps,
        per_tensor,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mat;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::default();
        let w = s.add("w", Mat::from_shape_vec((2, 3), vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4]).unwrap(), true);
        let c = Mat::from_shape_vec((2, 3), vec![1.0, 0.5, -0.5, 0.0, 2.0, 1.0]).unwrap();
        let r = grad_check(
            &s,
            |t, b| {
                let cv = t.constant(c.clone());
                let d = t.sub(b[w.0], cv);
                let sq = t.square(d);
                Ok(t.sum(sq))
            },
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert_eq!(r.n_coords, 6);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut s = ParamStore::default();
        let w = s.add("w", Mat::from_elem((1, 1), 0.5), true);
        // forward uses w² but the tape records 3·w (wrong by construction)
        let r = grad_check(
            &s,
            |t, b| {
                let v = t.value(b[w.0])[[0, 0]];
                let k = t.constant(Mat::from_elem((1, 1), v * v - 3.0 * v));
                let lin = t.scale(b[w.0], 3.0);
                Ok(t.add(lin, k))
            },
            1e-5,
            1,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
