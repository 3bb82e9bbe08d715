//! Parameterized layers built on the autograd graph.
//!
//! Layers only hold [`ParamId`]s; the tensors live in a [`ParamStore`] so a
//! whole model can be cast, perturbed or checkpointed in one place.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub type InitRng = ChaCha8Rng;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// He-uniform: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<E: Scalar>(rng: &mut InitRng, shape: &[usize], fan_in: usize) -> Tensor<E> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| E::lit((2.0 * rng.random::<f64>() - 1.0) * bound))
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    /// `kernel = [kh, kw]` for 2D or `[kh, kw, kd]` for 3D.
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut InitRng,
        name: &str,
        kernel: &[usize],
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        let mut shape = kernel.to_vec();
        shape.extend([cin, cout]);
        let fan_in = kernel.iter().product::<usize>() * cin;
        let weight = store.add_weight(format!("{name}.weight"), he_uniform(rng, &shape, fan_in));
        let bias = bias.then(|| store.add_weight(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, cin, cout }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<E: Scalar>(store: &mut ParamStore<E>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_weight(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add_weight(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let running = (store.get(self.running_mean), store.get(self.running_var));
        let (y, stats) = g.batch_norm(x, gamma, beta, running, E::lit(BN_EPS))?;
        if let Some(stats) = stats {
            let momentum = E::lit(BN_MOMENTUM);
            let keep = E::one() - momentum;
            let blend = |old: &Tensor<E>, new: &[E]| {
                Tensor::from_fn(old.shape(), |i| keep * old.data()[i] + momentum * new[i])
            };
            let mean = blend(store.get(self.running_mean), &stats.mean);
            let var = blend(store.get(self.running_var), &stats.var);
            g.record_buffer_update(self.running_mean, mean);
            g.record_buffer_update(self.running_var, var);
        }
        Ok(y)
    }
}

/// Convolution (no bias) -> batchnorm -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut InitRng,
        name: &str,
        kernel: &[usize],
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), kernel, cin, cout, false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}

/// Two stacked [`ConvBnRelu`] layers, the U-Net stage unit.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

impl DoubleConv {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut InitRng,
        name: &str,
        kernel: &[usize],
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            first: ConvBnRelu::new(store, rng, &format!("{name}.0"), kernel, cin, cout),
            second: ConvBnRelu::new(store, rng, &format!("{name}.1"), kernel, cout, cout),
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let y = self.first.forward(g, store, x)?;
        self.second.forward(g, store, y)
    }
}

/// Fully connected layer on `[N, Cin]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<E: Scalar>(store: &mut ParamStore<E>, rng: &mut InitRng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            weight: store.add_weight(format!("{name}.weight"), he_uniform(rng, &[cin, cout], cin)),
            bias: store.add_weight(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// 2x2 stride-2 transposed convolution (U-Net upsampling).
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new<E: Scalar>(store: &mut ParamStore<E>, rng: &mut InitRng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            weight: store.add_weight(format!("{name}.weight"), he_uniform(rng, &[cin, 2, 2, cout], cin)),
            bias: store.add_weight(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.upconv2x(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_conv_parameter_count() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = InitRng::seed_from_u64(0);
        Conv::new(&mut store, &mut rng, "c", &[3, 3], 1, 8, true);
        assert_eq!(store.count_trainable(), 80);
    }

    #[test]
    fn batchnorm_records_running_updates_only_in_training() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();

        let mut g = Graph::train();
        let xv = g.constant(x.clone());
        bn.forward(&mut g, &store, xv).unwrap();
        let updates = g.take_buffer_updates();
        assert_eq!(updates.len(), 2);
        // mean [2, 4] -> 0.9 * 0 + 0.1 * mean
        assert!((updates[0].1.data()[0] - 0.2).abs() < 1e-12);
        assert!((updates[0].1.data()[1] - 0.4).abs() < 1e-12);
        // unbiased var [2, 8] -> 0.9 * 1 + 0.1 * var
        assert!((updates[1].1.data()[1] - 1.7).abs() < 1e-12);

        let mut g = Graph::eval();
        let xv = g.constant(x);
        bn.forward(&mut g, &store, xv).unwrap();
        assert!(g.take_buffer_updates().is_empty());
    }
}
