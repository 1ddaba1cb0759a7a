//! Adam with bias correction, plus hard per-value gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        AdamState {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// `θ ← θ − α·m̂/(√v̂ + ε)`; the step counter is incremented first.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: (self.m.len(), 1),
                right: (params.len(), grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Clamps every gradient entry to `[-1, 1]`.
pub fn clip_gradients(grads: &mut [Tensor]) {
    for g in grads {
        for v in g.data_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor::row_vector(vec![2.5, -3.0, 0.3])];
        clip_gradients(&mut g);
        assert_eq!(g[0].data(), &[1.0, -1.0, 0.3]);
        let once = g.clone();
        clip_gradients(&mut g);
        assert_eq!(g, once);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::row_vector(vec![0.5, 0.5, 0.5]);
        let g = Tensor::row_vector(vec![3.0, -0.01, 1e-3]);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        st.update(&mut [&mut p], &[g]).unwrap();
        for (v, sign) in p.data().iter().zip([1.0, -1.0, 1.0]) {
            assert!((v - (0.5 - 1e-3 * sign)).abs() < 1e-8, "{v}");
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::row_vector(vec![0.1, -0.2]);
        let start = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        for _ in 0..50 {
            st.update(&mut [&mut p], &[Tensor::zeros(1, 2)]).unwrap();
        }
        assert_eq!(p, start);
    }

    #[test]
    fn minimizes_scalar_quadratic() {
        let mut theta = Tensor::scalar(1.0);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, [&theta]);
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            let x = theta.get(0, 0);
            let loss = x * x;
            assert!(loss < prev);
            prev = loss;
            st.update(&mut [&mut theta], &[Tensor::scalar(2.0 * x)])
                .unwrap();
        }
        let x = theta.get(0, 0);
        assert!(x * x < 1e-3, "{}", x * x);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(2, 2);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        assert!(st.update(&mut [&mut p], &[Tensor::zeros(1, 2)]).is_err());
        assert!(st.update(&mut [&mut p], &[]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest};

        proptest! {
            #[test]
            fn clipping_never_grows_entries(values in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
                let orig = Tensor::row_vector(values);
                let mut g = vec![orig.clone()];
                clip_gradients(&mut g);
                for (a, b) in g[0].data().iter().zip(orig.data()) {
                    prop_assert!(a.abs() <= b.abs());
                    prop_assert!(a.abs() <= 1.0);
                }
            }

            #[test]
            fn second_moment_stays_non_negative(grads in proptest::collection::vec(-5f64..5.0, 1..30)) {
                let mut p = Tensor::scalar(0.0);
                let mut st = AdamState::new(AdamConfig::default(), [&p]);
                for g in grads {
                    st.update(&mut [&mut p], &[Tensor::scalar(g)]).unwrap();
                    prop_assert!(st.v[0].get(0, 0) >= 0.0);
                }
            }
        }
    }
}
