use crate::autodiff::Mat;
use crate::model::params::{ParamId, ParamStore};

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, clip: Option<f64>) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. `grads[i]` belongs to `ids[i]`; returns the
    /// pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &mut [Mat]) -> f64 {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Mat::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if let Some(c) = self.clip {
            if norm > c {
                let s = c / norm;
                grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (i, (&id, g)) in ids.iter().zip(grads.iter()).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let w = store.get_mut(id);
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = ParamStore::default();
        let id = s.add("w", Mat::from_elem((1, 2), 3.0), true);
        let mut opt = Adam::new(0.05, Some(1.0));
        for _ in 0..2000 {
            let mut g = vec![s.get(id).mapv(|w| 2.0 * (w - 1.0))];
            opt.step(&mut s, &[id], &mut g);
        }
        assert!(s.get(id).iter().all(|w| (w - 1.0).abs() < 1e-3));
    }

    #[test]
    fn first_step_has_lr_magnitude_even_when_clipped() {
        let mut s = ParamStore::default();
        let id = s.add("w", Mat::zeros((1, 1)), true);
        let mut opt = Adam::new(0.1, Some(1.0));
        let n = opt.step(&mut s, &[id], &mut [Mat::from_elem((1, 1), 50.0)]);
        assert_eq!(n, 50.0);
        assert!((s.get(id)[[0, 0]] + 0.1).abs() < 1e-6);
    }
}
