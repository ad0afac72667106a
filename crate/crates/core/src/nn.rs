//! Multilayer perceptrons with optional batch normalization.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{DermError, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    fn apply_graph(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalized layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Copy, Debug)]
struct ParamSlot {
    layer: usize,
    slot: Slot,
    offset: usize,
    rows: usize,
    cols: usize,
}

/// A fully connected network `layer_sizes[0] -> ... -> layer_sizes[last]`.
///
/// Hidden layers compute `act(bn(x W + b))` (normalization only when enabled);
/// the output layer is affine. Parameters live in one flat vector whose
/// layout is, per layer: weights (row-major `in x out`), bias, then the
/// normalization scale and shift for hidden layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    batch_norm: bool,
    params: Vec<f64>,
    running: Vec<RunningStats>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, unit scales.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], activation: Activation, batch_norm: bool, rng: &mut R) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(DermError::Dimension(format!("invalid layer sizes {layer_sizes:?}")));
        }
        let mut net = Self::zeroed(layer_sizes, activation, batch_norm);
        for slot in net.layout() {
            let block = &mut net.params[slot.offset..slot.offset + slot.rows * slot.cols];
            match slot.slot {
                Slot::Weight => {
                    let bound = (6.0 / (slot.rows + slot.cols) as f64).sqrt();
                    for w in block {
                        *w = rng.random_range(-bound..bound);
                    }
                }
                Slot::Gamma => block.iter_mut().for_each(|w| *w = 1.0),
                Slot::Bias | Slot::Beta => {}
            }
        }
        Ok(net)
    }

    /// All parameters zero (normalization scales included), running variance one.
    pub fn zeroed(layer_sizes: &[usize], activation: Activation, batch_norm: bool) -> Self {
        let mut net = Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            batch_norm,
            params: Vec::new(),
            running: Vec::new(),
        };
        let n = net.layout().iter().map(|s| s.rows * s.cols).sum();
        net.params = vec![0.0; n];
        if batch_norm {
            net.running = layer_sizes[1..layer_sizes.len() - 1]
                .iter()
                .map(|&w| RunningStats {
                    mean: vec![0.0; w],
                    var: vec![1.0; w],
                })
                .collect();
        }
        net
    }

    fn layout(&self) -> Vec<ParamSlot> {
        let mut out = Vec::new();
        let mut offset = 0;
        let last = self.layer_sizes.len() - 2;
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            let (i, o) = (pair[0], pair[1]);
            let mut push = |slot, rows, cols| {
                out.push(ParamSlot {
                    layer: l,
                    slot,
                    offset,
                    rows,
                    cols,
                });
                offset += rows * cols;
            };
            push(Slot::Weight, i, o);
            push(Slot::Bias, 1, o);
            if self.batch_norm && l < last {
                push(Slot::Gamma, 1, o);
                push(Slot::Beta, 1, o);
            }
        }
        out
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("non-empty layers")
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn has_batch_norm(&self) -> bool {
        self.batch_norm
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    /// Weight matrix of layer `l` as `(rows, cols, row-major data)`.
    pub fn weights(&self, l: usize) -> (usize, usize, &[f64]) {
        self.block(l, Slot::Weight)
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        self.block(l, Slot::Bias).2
    }

    fn block(&self, l: usize, kind: Slot) -> (usize, usize, &[f64]) {
        let s = self
            .layout()
            .into_iter()
            .find(|s| s.layer == l && s.slot == kind)
            .expect("parameter block");
        (s.rows, s.cols, &self.params[s.offset..s.offset + s.rows * s.cols])
    }

    fn block_mut(&mut self, l: usize, kind: Slot) -> &mut [f64] {
        let s = self
            .layout()
            .into_iter()
            .find(|s| s.layer == l && s.slot == kind)
            .expect("parameter block");
        &mut self.params[s.offset..s.offset + s.rows * s.cols]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        self.block_mut(l, Slot::Weight)
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        self.block_mut(l, Slot::Bias)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(DermError::Dimension(format!(
                "network expects {} inputs, got last dimension {}",
                self.input_dim(),
                input.cols()
            )));
        }
        Ok(())
    }

    /// Forward pass; in train mode batch statistics are used and the running
    /// statistics are updated.
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => self.predict(input),
            Mode::Train => {
                let mut g = Graph::new();
                let vars = self.bind_frozen(&mut g);
                let x = g.constant(input.clone());
                let y = self.forward_graph(&mut g, &vars, x, Mode::Train)?;
                Ok(g.value(y).clone())
            }
        }
    }

    /// Evaluation-mode forward pass; a pure function of parameters, running
    /// statistics and input.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let n = input.rows();
        let last = self.layer_sizes.len() - 2;
        let mut h = input.data().to_vec();
        for l in 0..=last {
            let (i, o, w) = self.weights(l);
            let b = self.bias(l);
            let mut z = Vec::with_capacity(n * o);
            for _ in 0..n {
                z.extend_from_slice(b);
            }
            gemm(&h, (n, i), false, w, (i, o), false, &mut z, 1.0);
            if l < last {
                if self.batch_norm {
                    let gamma = self.block(l, Slot::Gamma).2;
                    let beta = self.block(l, Slot::Beta).2;
                    let stats = &self.running[l];
                    let coef: Vec<(f64, f64)> = (0..o)
                        .map(|j| {
                            let a = gamma[j] / (stats.var[j] + BN_EPS).sqrt();
                            (a, beta[j] - a * stats.mean[j])
                        })
                        .collect();
                    for row in z.chunks_exact_mut(o) {
                        for (v, (a, c)) in row.iter_mut().zip(&coef) {
                            *v = *v * a + c;
                        }
                    }
                }
                let act = self.activation;
                z.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = z;
        }
        Ok(Tensor::matrix(n, self.output_dim(), h))
    }

    /// Registers every parameter tensor as a trainable leaf, in flat-layout order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.layout()
            .iter()
            .map(|s| {
                let data = self.params[s.offset..s.offset + s.rows * s.cols].to_vec();
                g.param(Tensor::matrix(s.rows, s.cols, data))
            })
            .collect()
    }

    /// Registers every parameter tensor as a constant leaf, so it receives no adjoint.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.layout()
            .iter()
            .map(|s| {
                let data = self.params[s.offset..s.offset + s.rows * s.cols].to_vec();
                g.constant(Tensor::matrix(s.rows, s.cols, data))
            })
            .collect()
    }

    /// Records the forward pass on `g` using parameter nodes from [`Mlp::bind`].
    pub fn forward_graph(&mut self, g: &mut Graph, vars: &[Var], x: Var, mode: Mode) -> Result<Var> {
        self.check_input(g.value(x))?;
        let layout = self.layout();
        if vars.len() != layout.len() {
            return Err(DermError::Contract(format!(
                "expected {} parameter nodes, got {}",
                layout.len(),
                vars.len()
            )));
        }
        let last = self.layer_sizes.len() - 2;
        let mut h = x;
        let mut k = 0;
        for l in 0..=last {
            let z = g.matmul(h, vars[k])?;
            let mut z = g.add_row(z, vars[k + 1])?;
            k += 2;
            if l < last {
                if self.batch_norm {
                    let (gamma, beta) = (vars[k], vars[k + 1]);
                    k += 2;
                    z = match mode {
                        Mode::Train => {
                            let n = g.value(z).rows() as f64;
                            let (y, mean, var) = g.batch_norm(z, gamma, beta, BN_EPS)?;
                            let stats = &mut self.running[l];
                            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                            for j in 0..mean.len() {
                                stats.mean[j] = (1.0 - BN_MOMENTUM) * stats.mean[j] + BN_MOMENTUM * mean[j];
                                stats.var[j] = (1.0 - BN_MOMENTUM) * stats.var[j] + BN_MOMENTUM * var[j] * unbias;
                            }
                            y
                        }
                        Mode::Eval => {
                            let stats = &self.running[l];
                            let shift = g.constant(Tensor::row(stats.mean.iter().map(|m| -m).collect()));
                            let inv = g.constant(Tensor::row(stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect()));
                            let y = g.add_row(z, shift)?;
                            let y = g.mul_row(y, inv)?;
                            let y = g.mul_row(y, gamma)?;
                            g.add_row(y, beta)?
                        }
                    };
                }
                z = self.activation.apply_graph(g, z);
            }
            h = z;
        }
        Ok(h)
    }

    /// Writes a self-describing JSON checkpoint.
    pub fn save_checkpoint<W: Write>(&self, seed: u64, writer: W) -> Result<()> {
        let ckpt = Checkpoint {
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            batch_norm: self.batch_norm,
            params: self.params.clone(),
            running: self.running.clone(),
            seed,
        };
        serde_json::to_writer(writer, &ckpt)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Mlp::save_checkpoint`]; returns the net and its seed.
    pub fn load_checkpoint<R: Read>(reader: R) -> Result<(Self, u64)> {
        let ckpt: Checkpoint = serde_json::from_reader(reader)?;
        let net = Self::zeroed(&ckpt.layer_sizes, ckpt.activation, ckpt.batch_norm);
        if net.params.len() != ckpt.params.len() {
            return Err(DermError::Dimension(format!(
                "checkpoint holds {} parameters, layer sizes imply {}",
                ckpt.params.len(),
                net.params.len()
            )));
        }
        if ckpt.running.len() != net.running.len() || ckpt.running.iter().flat_map(|r| &r.var).any(|&v| v <= 0.0) {
            return Err(DermError::Model("invalid running statistics".into()));
        }
        Ok((
            Self {
                params: ckpt.params,
                running: ckpt.running,
                ..net
            },
            ckpt.seed,
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    layer_sizes: Vec<usize>,
    activation: Activation,
    batch_norm: bool,
    params: Vec<f64>,
    running: Vec<RunningStats>,
    seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeroed(&[3, 5, 2], Activation::Identity, false);
        let x = Tensor::matrix(2, 3, vec![1.0, -4.0, 2.5, 0.3, 9.0, -1.0]);
        assert!(net.predict(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_with_relu() {
        // a single hidden layer computing relu(x) followed by an identity readout
        let mut net = Mlp::zeroed(&[2, 2, 2], Activation::Relu, false);
        net.weights_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        net.weights_mut(1).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let y = net.predict(&Tensor::row(vec![-1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let net = Mlp::zeroed(&[3, 4, 1], Activation::Tanh, false);
        let x = Tensor::matrix(1, 2, vec![0.0, 1.0]);
        assert!(matches!(net.predict(&x), Err(DermError::Dimension(_))));
    }

    #[test]
    fn train_mode_updates_running_stats_eval_does_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(&[2, 4, 1], Activation::Relu, true, &mut rng).unwrap();
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0]);
        let before = net.running_stats().to_vec();
        net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(before, net.running_stats());
        net.forward(&x, Mode::Train).unwrap();
        assert_ne!(before, net.running_stats());
        assert!(net.running_stats()[0].var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn graph_eval_forward_matches_predict() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = Mlp::new(&[3, 6, 6, 2], Activation::Tanh, true, &mut rng).unwrap();
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        net.forward(&x, Mode::Train).unwrap();
        let direct = net.predict(&x).unwrap();
        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let xv = g.constant(x);
        let y = net.forward_graph(&mut g, &vars, xv, Mode::Eval).unwrap();
        for (a, b) in g.value(y).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::new(&[2, 20, 20, 1], Activation::Relu, true, &mut rng).unwrap();
        let x = Tensor::matrix(5, 2, (0..10).map(|i| i as f64 / 7.0).collect());
        net.forward(&x, Mode::Train).unwrap();
        let mut buf = Vec::new();
        net.save_checkpoint(42, &mut buf).unwrap();
        let (back, seed) = Mlp::load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(seed, 42);
        assert_eq!(back, net);
    }
}
