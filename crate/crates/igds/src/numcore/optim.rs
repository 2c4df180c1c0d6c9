//! Momentum-free adaptive-moment parameter update.
//!
//! Keeps one second-moment accumulator per parameter tensor and applies
//! bias-corrected RMS scaling. State is created fresh for each training
//! run so runs are reproducible from (params, config, seed) alone.

use ndarray::Array2;

pub struct AdaptiveMoment {
    lr: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    second: Vec<Array2<f64>>,
}

impl AdaptiveMoment {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        AdaptiveMoment {
            lr,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            second: shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect(),
        }
    }

    /// Apply one update in place. `params` and `grads` must match the shape
    /// list given at construction, in the same order.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), self.second.len());
        assert_eq!(grads.len(), self.second.len());
        self.step += 1;
        let correction = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.second.iter_mut()) {
            v.zip_mut_with(g, |vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut **p)
                .and(&*v)
                .and(g)
                .for_each(|pv, &vv, &gv| {
                    *pv -= lr * gv / ((vv / correction).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        let mut p = Array2::from_elem((1, 1), 5.0);
        let mut opt = AdaptiveMoment::new(0.1, &[(1, 1)]);
        for _ in 0..200 {
            let g = Array2::from_elem((1, 1), 2.0 * p[[0, 0]]);
            opt.step(&mut [&mut p], &[g]);
        }
        assert!(p[[0, 0]].abs() < 0.1, "p={}", p[[0, 0]]);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Array2::from_elem((2, 2), 1.5);
        let before = p.clone();
        let mut opt = AdaptiveMoment::new(0.1, &[(2, 2)]);
        opt.step(&mut [&mut p], &[Array2::zeros((2, 2))]);
        assert_eq!(p, before);
    }
}
