use serde::{Deserialize, Serialize};

use crate::mlp::{Gradients, Mlp};
use crate::scalar::Scalar;
use crate::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Moment accumulators for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Gradients<T>,
    v: Gradients<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(net: &Mlp<T>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One bias-corrected Adam update of `net` in place.
    ///
    /// Every gradient tensor is checked for non-finite values before any
    /// parameter is touched; the error names the first offending tensor.
    pub fn step(&mut self, net: &mut Mlp<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.layers.len() != net.layers().len() || self.m.layers.len() != net.layers().len() {
            return Err(NnError::ArchitectureMismatch(
                "gradient / optimizer state layer count differs from network".into(),
            ));
        }
        for (i, ((l, g), m)) in net
            .layers()
            .iter()
            .zip(&grads.layers)
            .zip(&self.m.layers)
            .enumerate()
        {
            if g.weight.len() != l.weight.len()
                || g.bias.len() != l.bias.len()
                || m.weight.len() != l.weight.len()
                || m.bias.len() != l.bias.len()
            {
                return Err(NnError::ArchitectureMismatch(format!(
                    "layer {i} gradient shape differs from parameters"
                )));
            }
        }
        for (name, t) in grads.tensors() {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFiniteGradient(name));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let b1 = T::from_f64(beta1);
        let b2 = T::from_f64(beta2);
        let one_b1 = T::from_f64(1.0 - beta1);
        let one_b2 = T::from_f64(1.0 - beta2);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let lr = T::from_f64(learning_rate);
        let eps = T::from_f64(eps);

        let update = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        };

        for (((layer, g), m), v) in net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut())
            .zip(self.v.layers.iter_mut())
        {
            update(&mut layer.weight, &g.weight, &mut m.weight, &mut v.weight);
            update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Activation, Dense, MlpSpec};

    fn scalar_net(w: f64) -> Mlp<f64> {
        Mlp::from_layers(
            vec![Dense {
                in_dim: 1,
                out_dim: 1,
                weight: vec![w],
                bias: vec![0.0],
            }],
            Activation::Identity,
        )
        .unwrap()
    }

    fn grad_of(net: &Mlp<f64>, gw: f64) -> Gradients<f64> {
        let mut g = Gradients::zeros_like(net);
        g.layers[0].weight[0] = gw;
        g
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut net: Mlp<f32> = Mlp::new(&MlpSpec::new(vec![3, 4, 1], Activation::Identity), 1).unwrap();
        let before = net.clone();
        let mut g = Gradients::zeros_like(&net);
        g.layers.iter_mut().for_each(|l| l.weight.iter_mut().for_each(|x| *x = 0.3));
        let mut adam = AdamState::new(&net, AdamConfig::with_lr(0.0));
        adam.step(&mut net, &g).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let lr = 0.01;
        let eps = 1e-8;
        for g in [0.5, -3.0, 1e-3] {
            let mut net = scalar_net(1.0);
            let mut adam = AdamState::new(
                &net,
                AdamConfig {
                    learning_rate: lr,
                    eps,
                    ..AdamConfig::default()
                },
            );
            let grads = grad_of(&net, g);
            adam.step(&mut net, &grads).unwrap();
            let expected = 1.0 - lr * g / (g.abs() + eps);
            assert!((net.layers()[0].weight[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let mut net: Mlp<f32> = Mlp::new(&MlpSpec::new(vec![2, 5, 1], Activation::Tanh), 9).unwrap();
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::with_lr(0.1));
        let g = Gradients::zeros_like(&net);
        adam.step(&mut net, &g).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        // f(w) = w², gradient 2w
        let mut net = scalar_net(1.0);
        let mut adam = AdamState::new(&net, AdamConfig::with_lr(0.01));
        let mut converged_at = None;
        for step in 1..=2000 {
            let w = net.layers()[0].weight[0];
            let g = grad_of(&net, 2.0 * w);
            adam.step(&mut net, &g).unwrap();
            if net.layers()[0].weight[0].abs() < 1e-3 && converged_at.is_none() {
                converged_at = Some(step);
            }
        }
        assert!(converged_at.is_some(), "w = {}", net.layers()[0].weight[0]);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut net: Mlp<f32> = Mlp::new(&MlpSpec::new(vec![2, 3, 1], Activation::Identity), 0).unwrap();
        let before = net.clone();
        let mut g = Gradients::zeros_like(&net);
        g.layers[1].bias[0] = f32::NAN;
        let mut adam = AdamState::new(&net, AdamConfig::default());
        match adam.step(&mut net, &g) {
            Err(NnError::NonFiniteGradient(name)) => assert_eq!(name, "layers.1.bias"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(net, before);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut a: Mlp<f32> = Mlp::new(&MlpSpec::new(vec![2, 3, 1], Activation::Identity), 0).unwrap();
        let b: Mlp<f32> = Mlp::new(&MlpSpec::new(vec![2, 4, 1], Activation::Identity), 0).unwrap();
        let mut adam = AdamState::new(&a, AdamConfig::default());
        assert!(adam.step(&mut a, &Gradients::zeros_like(&b)).is_err());
    }
}
