//! Dense feed-forward networks with retained activations, exact reverse-mode
//! gradients and an Adam optimiser.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{AdauError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetActivation {
    Tanh,
    Sigmoid,
    Identity,
}

impl NetActivation {
    fn apply(self, z: f64) -> f64 {
        match self {
            NetActivation::Tanh => z.tanh(),
            NetActivation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            NetActivation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            NetActivation::Tanh => 1.0 - a * a,
            NetActivation::Sigmoid => a * (1.0 - a),
            NetActivation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `[n_out × n_in]`
    #[serde(with = "crate::serde_mat")]
    pub weights: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::vector")]
    pub bias: DVector<f64>,
    pub activation: NetActivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
}

/// Layer inputs and outputs of one forward pass; `outputs.last()` is the
/// network output.
#[derive(Debug, Clone)]
pub struct Activations {
    pub inputs: Vec<DMatrix<f64>>,
    pub outputs: Vec<DMatrix<f64>>,
}

impl Activations {
    pub fn output(&self) -> &DMatrix<f64> {
        self.outputs.last().expect("network has at least one layer")
    }
}

/// Per-layer `(dW, db)` plus the gradient with respect to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub input: DMatrix<f64>,
}

impl NetGradients {
    /// Flattened in [`DenseNet::params`] order.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }
}

impl DenseNet {
    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn new(sizes: &[usize], activations: &[NetActivation], seed: u64) -> Result<DenseNet> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(AdauError::invalid("need n+1 sizes for n activations"));
        }
        if sizes.contains(&0) {
            return Err(AdauError::invalid("layer sizes must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                DenseLayer {
                    weights: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..=bound)),
                    bias: DVector::from_fn(w[1], |_, _| rng.random_range(-bound..=bound)),
                    activation,
                }
            })
            .collect();
        Ok(DenseNet { layers })
    }

    /// Two layers of `width`: tanh hidden, identity output.
    pub fn extractor(n_in: usize, width: usize, seed: u64) -> Result<DenseNet> {
        DenseNet::new(&[n_in, width, width], &[NetActivation::Tanh, NetActivation::Identity], seed)
    }

    /// Two tanh layers of `hidden` neurons and a sigmoid output.
    pub fn discriminator(n_in: usize, hidden: usize, seed: u64) -> Result<DenseNet> {
        DenseNet::new(
            &[n_in, hidden, hidden, 1],
            &[NetActivation::Tanh, NetActivation::Tanh, NetActivation::Sigmoid],
            seed,
        )
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.nrows())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<Activations> {
        if x.ncols() != self.n_in() {
            return Err(AdauError::DimensionMismatch { expected: self.n_in(), actual: x.ncols() });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outputs.last().cloned().unwrap_or_else(|| x.clone());
            let mut z = &input * layer.weights.transpose();
            for mut row in z.row_iter_mut() {
                for (v, b) in row.iter_mut().zip(layer.bias.iter()) {
                    *v = layer.activation.apply(*v + b);
                }
            }
            inputs.push(input);
            outputs.push(z);
        }
        Ok(Activations { inputs, outputs })
    }

    pub fn output(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(x)?.outputs.pop().expect("at least one layer"))
    }

    /// Reverse-mode gradients given `d loss / d output`.
    pub fn backward(&self, acts: &Activations, upstream: &DMatrix<f64>) -> Result<NetGradients> {
        let out = acts.output();
        if upstream.shape() != out.shape() {
            return Err(AdauError::invalid(format!(
                "upstream gradient shape {:?} does not match output {:?}",
                upstream.shape(),
                out.shape()
            )));
        }
        let mut grad = upstream.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let a = &acts.outputs[k];
            let dz = grad.zip_map(a, |g, a| g * layer.activation.derivative_from_output(a));
            let dw = dz.transpose() * &acts.inputs[k];
            let db = DVector::from_iterator(dz.ncols(), dz.column_iter().map(|c| c.sum()));
            grad = &dz * &layer.weights;
            layers.push((dw, db));
        }
        layers.reverse();
        Ok(NetGradients { layers, input: grad })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters: per layer, weights (column-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_param(&mut self, mut index: usize, value: f64) {
        for l in &mut self.layers {
            if index < l.weights.len() {
                l.weights.as_mut_slice()[index] = value;
                return;
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                l.bias[index] = value;
                return;
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<(DMatrix<f64>, DVector<f64>)>,
    second: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl AdamState {
    pub fn new(net: &DenseNet, learning_rate: f64) -> AdamState {
        let zeros: Vec<_> = net
            .layers
            .iter()
            .map(|l| (DMatrix::zeros(l.weights.nrows(), l.weights.ncols()), DVector::zeros(l.bias.len())))
            .collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn update(&mut self, net: &mut DenseNet, grads: &NetGradients) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.learning_rate, self.epsilon);
        for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let step = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            for (((p, g), m), v) in layer.weights.iter_mut().zip(gw.iter()).zip(mw.iter_mut()).zip(vw.iter_mut()) {
                step(p, *g, m, v);
            }
            for (((p, g), m), v) in layer.bias.iter_mut().zip(gb.iter()).zip(mb.iter_mut()).zip(vb.iter_mut()) {
                step(p, *g, m, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    /// Scalar per-neuron loops, independent of the matrix code path.
    fn naive_forward(net: &DenseNet, x: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..x.nrows())
            .map(|i| {
                let mut a: Vec<f64> = x.row(i).iter().copied().collect();
                for l in &net.layers {
                    let mut next = Vec::new();
                    for o in 0..l.weights.nrows() {
                        let mut z = l.bias[o];
                        for (k, v) in a.iter().enumerate() {
                            z += l.weights[(o, k)] * v;
                        }
                        next.push(l.activation.apply(z));
                    }
                    a = next;
                }
                a
            })
            .collect()
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut net = DenseNet::new(&[3, 4], &[NetActivation::Tanh], 0).unwrap();
        net.layers[0].weights.fill(0.0);
        net.layers[0].bias.fill(0.0);
        let out = net.output(&random_matrix(5, 3, 1)).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layer_passes_through() {
        let mut net = DenseNet::new(&[3, 3], &[NetActivation::Identity], 0).unwrap();
        net.layers[0].weights = DMatrix::identity(3, 3);
        net.layers[0].bias.fill(0.0);
        let x = random_matrix(4, 3, 2);
        assert_eq!(net.output(&x).unwrap(), x);
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let net = DenseNet::discriminator(4, 5, 3).unwrap();
        let x = random_matrix(6, 4, 4);
        let out = net.output(&x).unwrap();
        let naive = naive_forward(&net, &x);
        for i in 0..6 {
            assert!((out[(i, 0)] - naive[i][0]).abs() < 1e-12);
        }
        assert!(net.output(&random_matrix(2, 3, 0)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..3 {
            let mut net = DenseNet::new(
                &[3, 4, 4, 2],
                &[NetActivation::Tanh, NetActivation::Sigmoid, NetActivation::Identity],
                seed,
            )
            .unwrap();
            let x = random_matrix(5, 3, seed + 10);
            let c = random_matrix(5, 2, seed + 20);
            // loss = Σ c ⊙ output, so d loss / d output = c
            let loss = |n: &DenseNet| n.output(&x).unwrap().component_mul(&c).sum();
            let acts = net.forward(&x).unwrap();
            let g = net.backward(&acts, &c).unwrap();
            let analytic = g.flat();
            let p = net.params();
            let h = 1e-5;
            for k in 0..p.len() {
                net.set_param(k, p[k] + h);
                let up = loss(&net);
                net.set_param(k, p[k] - h);
                let down = loss(&net);
                net.set_param(k, p[k]);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - analytic[k]).abs() <= 1e-4 * fd.abs().max(analytic[k].abs()) + 1e-9, "param {k}: fd {fd} vs {}", analytic[k]);
            }
        }
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let net = DenseNet::extractor(3, 4, 1).unwrap();
        let x = random_matrix(5, 3, 2);
        let acts = net.forward(&x).unwrap();
        let g = net.backward(&acts, &DMatrix::zeros(5, 4)).unwrap();
        assert!(g.flat().iter().all(|v| *v == 0.0));
        assert!(g.input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient() {
        let net = DenseNet::new(&[3, 2], &[NetActivation::Identity], 5).unwrap();
        let x = random_matrix(4, 3, 6);
        let up = random_matrix(4, 2, 7);
        let g = net.backward(&net.forward(&x).unwrap(), &up).unwrap();
        assert!((&g.layers[0].0 - up.transpose() * &x).norm() < 1e-12);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut net = DenseNet::new(&[2, 1], &[NetActivation::Identity], 1).unwrap();
        let mut adam = AdamState::new(&net, 1e-2);
        let x = random_matrix(20, 2, 3);
        let target = &x * DMatrix::from_column_slice(2, 1, &[2.0, -1.0]);
        let mse = |n: &DenseNet| (n.output(&x).unwrap() - &target).norm_squared() / 20.0;
        let start = mse(&net);
        for _ in 0..2000 {
            let acts = net.forward(&x).unwrap();
            let up = (acts.output() - &target) * (2.0 / 20.0);
            let g = net.backward(&acts, &up).unwrap();
            adam.update(&mut net, &g);
        }
        assert!(mse(&net) < 1e-3 * start);
        assert_eq!(adam.step, 2000);
    }
}
