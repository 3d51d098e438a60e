//! Ordered layer stack with range-wise execution, flat parameter transport,
//! and an Adam optimizer.
//!
//! `forward_range`/`backward_range` run a contiguous slice of layers; running
//! the full range is monolithic execution, chaining sub-ranges is split
//! execution. Both paths go through the same per-layer code, so they agree
//! bit for bit.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::layers::{Layer, Mode};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub mode: Mode,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network {
            layers,
            mode: Mode::Train,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        self.forward_range(0..self.layers.len(), input)
    }

    pub fn forward_range(&mut self, range: Range<usize>, input: &Tensor) -> Result<Tensor> {
        let mode = self.mode;
        let mut x = input.clone();
        for layer in &mut self.layers[range] {
            x = layer.forward(&x, mode)?;
        }
        Ok(x)
    }

    /// Backpropagate through the full stack, accumulating parameter grads.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        self.backward_range(0..self.layers.len(), upstream, true)
    }

    pub fn backward_range(
        &mut self,
        range: Range<usize>,
        upstream: &Tensor,
        accumulate: bool,
    ) -> Result<Tensor> {
        let mut g = upstream.clone();
        for layer in self.layers[range].iter_mut().rev() {
            g = layer.backward(&g, accumulate)?;
        }
        Ok(g)
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grads();
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Flatten all parameters into one vector, layer order then declared
    /// parameter order within a layer.
    pub fn serialize_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for (_, p, _) in layer.params() {
                out.extend_from_slice(p.data());
            }
        }
        out
    }

    /// Inverse of [`Self::serialize_params`].
    pub fn deserialize_params(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                context: "Network::deserialize_params".into(),
                expected,
                got: values.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for (_, p, _) in layer.params_mut() {
                let n = p.len();
                p.data_mut().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Walk output shapes for a given input shape without executing.
    pub fn shape_walk(&self, input_shape: &[usize]) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut s = input_shape.to_vec();
        for layer in &self.layers {
            s = layer.output_shape(&s);
            shapes.push(s.clone());
        }
        shapes
    }
}

/// Adam with bias correction, moments stored per flattened parameter tensor
/// in network order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// DCGAN recipe defaults: lr 2e-4, beta1 0.5, beta2 0.999.
    pub fn new(network: &Network, lr: f64) -> Self {
        let sizes: Vec<usize> = network
            .layers
            .iter()
            .flat_map(|l| l.params().into_iter().map(|(_, p, _)| p.len()))
            .collect();
        AdamState {
            step: 0,
            lr,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One Adam update over every parameter of `network` from its accumulated
    /// gradients. Does not zero the gradients.
    pub fn update(&mut self, network: &mut Network) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut idx = 0;
        for layer in &mut network.layers {
            for (_, p, g) in layer.params_mut() {
                if p.len() != self.m[idx].len() {
                    return Err(Error::LengthMismatch {
                        context: "AdamState::update".into(),
                        expected: self.m[idx].len(),
                        got: p.len(),
                    });
                }
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                for ((pv, gv), (mv, vv)) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
                }
                idx += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Dense;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::new(vec![
            Layer::Dense(Dense::new(3, 2, &mut rng)),
            Layer::tanh(),
            Layer::Dense(Dense::new(2, 1, &mut rng)),
        ])
    }

    #[test]
    fn serialize_roundtrip_is_identity() {
        let mut net = tiny_net(7);
        let before = net.serialize_params();
        net.deserialize_params(&before).unwrap();
        assert_eq!(net.serialize_params(), before);
    }

    #[test]
    fn deserialize_rejects_wrong_length() {
        let mut net = tiny_net(7);
        let v = vec![0.0; net.param_count() + 1];
        assert!(net.deserialize_params(&v).is_err());
    }

    #[test]
    fn empty_network_serializes_to_empty_vector() {
        let net = Network::new(vec![]);
        assert!(net.serialize_params().is_empty());
    }

    #[test]
    fn adam_zero_grad_leaves_params_unchanged() {
        let mut net = tiny_net(1);
        net.zero_grads();
        let before = net.serialize_params();
        let mut adam = AdamState::new(&net, 0.1);
        adam.update(&mut net).unwrap();
        assert_eq!(net.serialize_params(), before);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_unit_gradient() {
        // single scalar parameter, constant gradient 1: the bias-corrected
        // first step has magnitude lr (up to the epsilon term)
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dense = Dense::new(1, 1, &mut rng);
        dense.w.fill(0.5);
        dense.gw.fill(1.0);
        dense.b.fill(0.0);
        dense.gb.fill(0.0);
        let mut net = Network::new(vec![Layer::Dense(dense)]);
        let mut adam = AdamState::new(&net, 0.1);
        adam.update(&mut net).unwrap();
        let w = net.serialize_params()[0];
        // mhat = 1, vhat = 1 -> step = lr/(1+eps)
        assert!((w - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_step_counter_increments_per_update() {
        let mut net = tiny_net(2);
        net.zero_grads();
        let mut adam = AdamState::new(&net, 0.01);
        assert_eq!(adam.step, 0);
        adam.update(&mut net).unwrap();
        adam.update(&mut net).unwrap();
        assert_eq!(adam.step, 2);
    }
}
