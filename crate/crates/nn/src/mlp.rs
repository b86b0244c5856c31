//! Dense feed-forward networks with ReLU hidden layers.
//!
//! Layout conventions:
//! - weights are row-major `(out_dim, in_dim)`,
//! - batched activations are row-major `(batch, dim)`.
//!
//! `backward_batch` expects the gradient of a scalar loss with respect to the
//! network output and returns the gradient for every parameter plus the input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::{NnError, Result};

/// Output non-linearity. Hidden layers always use ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

/// Architecture description, stored in checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, output_activation: Activation) -> Self {
        Self {
            layer_sizes,
            output_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(NnError::InvalidConfig(
                "an MLP needs at least an input and an output size".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(NnError::InvalidConfig(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = f32> {
    layers: Vec<Dense<T>>,
    output_activation: Activation,
}

/// Activations recorded by `forward_batch`, consumed by `backward_batch`.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    batch: usize,
    input: Vec<T>,
    /// `outputs[i]` is the post-activation output of layer `i`.
    outputs: Vec<Vec<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[T] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&self.input)
    }

    pub fn into_output(mut self) -> Vec<T> {
        self.outputs.pop().unwrap_or(self.input)
    }

    /// ReLU on/off pattern of every hidden unit in the batch.
    pub fn hidden_pattern(&self) -> Vec<bool> {
        let n = self.outputs.len();
        self.outputs[..n.saturating_sub(1)]
            .iter()
            .flat_map(|o| o.iter().map(|v| *v > T::zero()))
            .collect()
    }
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrad<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: vec![T::zero(); l.weight.len()],
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
        }
    }

    /// Named flat views, in the same order as `Mlp::tensors`.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), l.weight.as_slice()));
            out.push((format!("layers.{i}.bias"), l.bias.as_slice()));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x = *x + *y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x = *x + *y);
        }
    }

    pub fn scale(&mut self, s: T) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|x| *x = *x * s);
            l.bias.iter_mut().for_each(|x| *x = *x * s);
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|x| *x == T::zero()))
    }
}

/// Result of a backward pass: parameter gradients and the gradient w.r.t. the input batch.
#[derive(Debug, Clone)]
pub struct Backward<T> {
    pub grads: Gradients<T>,
    pub input_grad: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    /// Uniform `±1/sqrt(fan_in)` initialization, deterministic in `seed`.
    pub fn new(spec: &MlpSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(spec, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (in_dim, out_dim) = (w[0], w[1]);
                let bound = 1.0 / (in_dim as f64).sqrt();
                let mut draw = || T::from_f64(rng.random_range(-bound..bound));
                let weight = (0..in_dim * out_dim).map(|_| draw()).collect();
                let bias = (0..out_dim).map(|_| draw()).collect();
                Dense {
                    in_dim,
                    out_dim,
                    weight,
                    bias,
                }
            })
            .collect();
        Ok(Self {
            layers,
            output_activation: spec.output_activation,
        })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Dense {
                in_dim: w[0],
                out_dim: w[1],
                weight: vec![T::zero(); w[0] * w[1]],
                bias: vec![T::zero(); w[1]],
            })
            .collect();
        Ok(Self {
            layers,
            output_activation: spec.output_activation,
        })
    }

    /// Build from explicit layers; consecutive dimensions must agree.
    pub fn from_layers(layers: Vec<Dense<T>>, output_activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::InvalidConfig("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(NnError::InvalidConfig(format!(
                    "layer {i} buffers do not match ({}, {})",
                    l.out_dim, l.in_dim
                )));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim != w[1].in_dim {
                return Err(NnError::InvalidConfig(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    w[0].out_dim,
                    i + 1,
                    w[1].in_dim
                )));
            }
        }
        Ok(Self {
            layers,
            output_activation,
        })
    }

    pub fn spec(&self) -> MlpSpec {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.out_dim));
        MlpSpec::new(sizes, self.output_activation)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Named flat parameter views: `layers.{i}.weight`, `layers.{i}.bias`.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), l.weight.as_slice()));
            out.push((format!("layers.{i}.bias"), l.bias.as_slice()));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_batch(input, 1)?.into_output())
    }

    /// Batched forward pass keeping the activations needed for `backward_batch`.
    pub fn forward_batch(&self, input: &[T], batch: usize) -> Result<Tape<T>> {
        let in_dim = self.input_dim();
        if input.len() != in_dim * batch {
            return Err(NnError::DimensionMismatch {
                what: "network input",
                expected: in_dim * batch,
                got: input.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut outputs: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x: &[T] = if i == 0 { input } else { &outputs[i - 1] };
            let mut z = Vec::with_capacity(batch * layer.out_dim);
            for _ in 0..batch {
                z.extend_from_slice(&layer.bias);
            }
            // z (batch, out) += x (batch, in) · Wᵀ (in, out)
            T::gemm(
                batch,
                layer.in_dim,
                layer.out_dim,
                x,
                layer.in_dim as isize,
                1,
                &layer.weight,
                1,
                layer.in_dim as isize,
                T::one(),
                &mut z,
                layer.out_dim as isize,
                1,
            );
            let act = if i == last {
                self.output_activation
            } else {
                Activation::Relu
            };
            if act != Activation::Identity {
                z.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            outputs.push(z);
        }
        Ok(Tape {
            batch,
            input: input.to_vec(),
            outputs,
        })
    }

    /// Gradients of a scalar loss given `output_grad = dL/d(output)` for each batch row.
    pub fn backward_batch(&self, tape: &Tape<T>, output_grad: &[T]) -> Result<Backward<T>> {
        let batch = tape.batch;
        if tape.outputs.len() != self.layers.len() {
            return Err(NnError::ArchitectureMismatch(
                "tape was recorded on a different network".into(),
            ));
        }
        if output_grad.len() != batch * self.output_dim() {
            return Err(NnError::DimensionMismatch {
                what: "output gradient",
                expected: batch * self.output_dim(),
                got: output_grad.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut layer_grads: Vec<LayerGrad<T>> = Vec::with_capacity(self.layers.len());
        let mut delta: Vec<T> = output_grad.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let act = if i == last {
                self.output_activation
            } else {
                Activation::Relu
            };
            let y = &tape.outputs[i];
            if act != Activation::Identity {
                delta
                    .iter_mut()
                    .zip(y)
                    .for_each(|(d, &yv)| *d = *d * act.derivative_from_output(yv));
            }
            let x: &[T] = if i == 0 { &tape.input } else { &tape.outputs[i - 1] };

            // dW (out, in) = δᵀ (out, batch) · x (batch, in)
            let mut dw = vec![T::zero(); layer.out_dim * layer.in_dim];
            T::gemm(
                layer.out_dim,
                batch,
                layer.in_dim,
                &delta,
                1,
                layer.out_dim as isize,
                x,
                layer.in_dim as isize,
                1,
                T::zero(),
                &mut dw,
                layer.in_dim as isize,
                1,
            );
            // bias gradient: column sums of δ, accumulated in f64
            let mut db_acc = vec![0.0f64; layer.out_dim];
            for row in delta.chunks_exact(layer.out_dim) {
                for (acc, &d) in db_acc.iter_mut().zip(row) {
                    *acc += d.as_f64();
                }
            }
            let db = db_acc.into_iter().map(T::from_f64).collect();

            // dx (batch, in) = δ (batch, out) · W (out, in)
            let mut dx = vec![T::zero(); batch * layer.in_dim];
            T::gemm(
                batch,
                layer.out_dim,
                layer.in_dim,
                &delta,
                layer.out_dim as isize,
                1,
                &layer.weight,
                layer.in_dim as isize,
                1,
                T::zero(),
                &mut dx,
                layer.in_dim as isize,
                1,
            );
            layer_grads.push(LayerGrad {
                weight: dw,
                bias: db,
            });
            delta = dx;
        }
        layer_grads.reverse();
        Ok(Backward {
            grads: Gradients {
                layers: layer_grads,
            },
            input_grad: delta,
        })
    }

    /// Single-sample backward pass.
    pub fn backward(&self, input: &[T], output_grad: &[T]) -> Result<Backward<T>> {
        let tape = self.forward_batch(input, 1)?;
        self.backward_batch(&tape, output_grad)
    }

    pub fn same_architecture(&self, other: &Mlp<T>) -> bool {
        self.output_activation == other.output_activation
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim)
    }

    /// Element-type conversion (used to run gradient checks in `f64`).
    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    weight: l.weight.iter().map(|w| U::from_f64(w.as_f64())).collect(),
                    bias: l.bias.iter().map(|w| U::from_f64(w.as_f64())).collect(),
                })
                .collect(),
            output_activation: self.output_activation,
        }
    }
}

/// `target ← τ·source + (1−τ)·target`, elementwise.
pub fn polyak_update<T: Scalar>(target: &mut Mlp<T>, source: &Mlp<T>, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(NnError::InvalidConfig(format!("polyak tau {tau} outside [0, 1]")));
    }
    if !target.same_architecture(source) {
        return Err(NnError::ArchitectureMismatch(format!(
            "target {:?} vs source {:?}",
            target.spec(),
            source.spec()
        )));
    }
    if tau == 1.0 {
        target.layers.clone_from(&source.layers);
        return Ok(());
    }
    if tau == 0.0 {
        return Ok(());
    }
    let t = T::from_f64(tau);
    let keep = T::from_f64(1.0 - tau);
    for (dst, src) in target.layers.iter_mut().zip(&source.layers) {
        for (d, s) in dst.weight.iter_mut().zip(&src.weight) {
            *d = t * *s + keep * *d;
        }
        for (d, s) in dst.bias.iter_mut().zip(&src.bias) {
            *d = t * *s + keep * *d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_forward(net: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = net.layers().len();
        for (i, l) in net.layers().iter().enumerate() {
            let mut out = vec![0.0; l.out_dim];
            for o in 0..l.out_dim {
                let mut s = l.bias[o];
                for j in 0..l.in_dim {
                    s += l.weight[o * l.in_dim + j] * h[j];
                }
                out[o] = if i + 1 == n {
                    match net.output_activation() {
                        Activation::Identity => s,
                        Activation::Tanh => s.tanh(),
                        Activation::Sigmoid => 1.0 / (1.0 + (-s).exp()),
                        Activation::Relu => s.max(0.0),
                    }
                } else {
                    s.max(0.0)
                };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net: Mlp<f32> = Mlp::zeros(&MlpSpec::new(vec![3, 5, 2], Activation::Identity)).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let layer = Dense {
            in_dim: 1,
            out_dim: 1,
            weight: vec![2.0f64],
            bias: vec![1.0],
        };
        let net = Mlp::from_layers(vec![layer], Activation::Identity).unwrap();
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn random_net_matches_naive_oracle() {
        let spec = MlpSpec::new(vec![4, 8, 1], Activation::Identity);
        let net: Mlp<f64> = Mlp::new(&spec, 7).unwrap();
        let x = [0.3, -1.2, 0.7, 2.0];
        let got = net.forward(&x).unwrap();
        let want = naive_forward(&net, &x);
        assert!((got[0] - want[0]).abs() < 1e-12, "{got:?} vs {want:?}");
    }

    #[test]
    fn batch_forward_matches_rows() {
        let spec = MlpSpec::new(vec![3, 6, 6, 2], Activation::Tanh);
        let net: Mlp<f64> = Mlp::new(&spec, 3).unwrap();
        let xs = [0.1, 0.2, 0.3, -1.0, 0.5, 2.0, 0.0, 0.0, 0.0];
        let batch = net.forward_batch(&xs, 3).unwrap();
        for (r, row) in xs.chunks(3).enumerate() {
            let want = naive_forward(&net, row);
            for k in 0..2 {
                assert!((batch.output()[r * 2 + k] - want[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net: Mlp<f32> = Mlp::new(&MlpSpec::new(vec![3, 4, 1], Activation::Identity), 0).unwrap();
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(NnError::DimensionMismatch { .. })
        ));
        let tape = net.forward_batch(&[0.0; 3], 1).unwrap();
        assert!(net.backward_batch(&tape, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn linear_layer_weight_gradient_is_input() {
        let layer = Dense {
            in_dim: 1,
            out_dim: 1,
            weight: vec![0.5f64],
            bias: vec![0.0],
        };
        let net = Mlp::from_layers(vec![layer], Activation::Identity).unwrap();
        let b = net.backward(&[3.0], &[1.0]).unwrap();
        assert_eq!(b.grads.layers[0].weight, vec![3.0]);
        assert_eq!(b.grads.layers[0].bias, vec![1.0]);
        assert_eq!(b.input_grad, vec![0.5]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let net: Mlp<f64> = Mlp::new(&MlpSpec::new(vec![4, 8, 8, 2], Activation::Sigmoid), 11).unwrap();
        let b = net.backward(&[0.1, 0.2, -0.3, 0.4], &[0.0, 0.0]).unwrap();
        assert!(b.grads.is_all_zero());
        assert!(b.input_grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let net: Mlp<f32> = Mlp::new(&MlpSpec::new(vec![30, 64, 64, 1], Activation::Tanh), 5).unwrap();
        let x: Vec<f32> = (0..30).map(|i| (i as f32 * 0.37).sin()).collect();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        let again: Mlp<f32> = Mlp::new(&net.spec(), 5).unwrap();
        assert_eq!(again, net);
    }

    #[test]
    fn polyak_limits_and_midpoint() {
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Identity);
        let src: Mlp<f32> = Mlp::new(&spec, 1).unwrap();
        let orig: Mlp<f32> = Mlp::new(&spec, 2).unwrap();

        let mut t = orig.clone();
        polyak_update(&mut t, &src, 1.0).unwrap();
        assert_eq!(t, src);

        let mut t = orig.clone();
        polyak_update(&mut t, &src, 0.0).unwrap();
        assert_eq!(t, orig);

        let mut zero: Mlp<f32> = Mlp::zeros(&spec).unwrap();
        let mut two = zero.clone();
        two.layers_mut()
            .iter_mut()
            .for_each(|l| l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|w| *w = 2.0));
        polyak_update(&mut zero, &two, 0.5).unwrap();
        assert!(zero
            .layers()
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|w| *w == 1.0)));
    }

    #[test]
    fn polyak_rejects_mismatched_architecture() {
        let mut a: Mlp<f32> = Mlp::new(&MlpSpec::new(vec![2, 3, 1], Activation::Identity), 1).unwrap();
        let b: Mlp<f32> = Mlp::new(&MlpSpec::new(vec![2, 4, 1], Activation::Identity), 1).unwrap();
        assert!(matches!(
            polyak_update(&mut a, &b, 0.5),
            Err(NnError::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(Mlp::<f32>::new(&MlpSpec::new(vec![3], Activation::Identity), 0).is_err());
        assert!(Mlp::<f32>::new(&MlpSpec::new(vec![3, 0, 1], Activation::Identity), 0).is_err());
    }
}
