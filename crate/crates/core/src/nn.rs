//! Multi-layer perceptrons with ReLU hidden activations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{invalid, Error, Result};
use crate::losses::Objective;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Affine map `x·W + b` with `W` stored `in×out` and `b` as a `1×out` row.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Stack of [`Linear`] layers with ReLU between consecutive layers and a
/// linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<Linear>,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases.
    pub fn init(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        Self::check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Linear {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("sized"),
                    bias: Tensor::zeros(&[1, fan_out]),
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn seeded(widths: &[usize], seed: u64) -> Result<Self> {
        Self::init(widths, &mut rng::seeded(seed, rng::streams::INIT))
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[1, w[1]]),
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
        })
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 {
            return Err(invalid("widths", "need at least input and output widths"));
        }
        if widths.contains(&0) {
            return Err(invalid("widths", "layer widths must be positive"));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameters in a fixed order: `W0, b0, W1, b1, …`.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Tensor::zero_grad);
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2()?;
        if d != self.input_width() {
            return Err(Error::Shape(format!(
                "batch width {d} does not match input width {}",
                self.input_width()
            )));
        }
        Ok(())
    }

    /// Forward pass without recording.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?;
            let n = h.cols();
            let b = layer.bias.data();
            for row in h.data_mut().chunks_exact_mut(n) {
                row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                if k < last {
                    row.iter_mut().for_each(|x| *x = x.max(0.0));
                }
            }
        }
        Ok(h)
    }

    /// Records the forward pass on `tape`; returns the output node and the
    /// parameter leaves in [`Mlp::params`] order.
    pub fn forward_tape(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_input(tape.value(x))?;
        let last = self.layers.len() - 1;
        let mut leaves = Vec::with_capacity(2 * self.layers.len());
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(&layer.weight)?;
            let b = tape.leaf(&layer.bias)?;
            leaves.extend([w, b]);
            let xw = tape.matmul(h, w)?;
            h = tape.add_row(xw, b)?;
            if k < last {
                h = tape.relu(h);
            }
        }
        Ok((h, leaves))
    }

    /// Adds the gradients of `leaves` (from [`Mlp::forward_tape`]) into the
    /// parameters' gradient buffers.
    pub fn accumulate_grads(&mut self, grads: &Gradients, leaves: &[NodeId]) -> Result<()> {
        if leaves.len() != 2 * self.layers.len() {
            return Err(Error::Shape(
                "leaf list does not match parameter count".into(),
            ));
        }
        for (p, &id) in self.params_mut().zip(leaves) {
            if let Some(g) = grads.get(id) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Copies parameter values from `other` (same architecture).
    pub fn copy_from(&mut self, other: &Mlp) -> Result<()> {
        if self.widths != other.widths {
            return Err(Error::Shape("architectures differ".into()));
        }
        for (dst, src) in self.params_mut().zip(other.params()) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// All parameter values concatenated in [`Mlp::params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .flat_map(|p| p.data().iter().copied())
            .collect()
    }
}

/// Loss value and per-parameter gradients (in [`Mlp::params`] order) for one batch.
pub fn forward_backward(
    model: &Mlp,
    batch: &Tensor,
    objective: Objective,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch)?;
    let (out, leaves) = model.forward_tape(&mut tape, x)?;
    let loss = tape.loss(out, objective)?;
    let grads = tape.backward(loss)?;
    let tensors = model
        .params()
        .zip(&leaves)
        .map(|(p, &id)| {
            let g = grads
                .get(id)
                .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec);
            Tensor::new(p.shape(), g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((tape.scalar(loss), tensors))
}

/// Largest relative disagreement between tape gradients and central finite
/// differences with step `eps`, over every parameter entry:
/// `|g_ad − g_fd| / max(1e-12, |g_ad| + |g_fd|)`.
pub fn grad_check(model: &Mlp, batch: &Tensor, objective: &Objective, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(invalid("eps", format!("{eps} outside (0, 1e-2]")));
    }
    let (_, analytic) = forward_backward(model, batch, objective.clone())?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (p_idx, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = nth_param(&probe, p_idx).data()[j];
            nth_param_mut(&mut probe, p_idx).data_mut()[j] = orig + eps;
            let up = objective.value(&probe.forward(batch)?)?;
            nth_param_mut(&mut probe, p_idx).data_mut()[j] = orig - eps;
            let down = objective.value(&probe.forward(batch)?)?;
            nth_param_mut(&mut probe, p_idx).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = grad.data()[j];
            let rel = libm::fabs(ad - fd) / (libm::fabs(ad) + libm::fabs(fd)).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn nth_param(model: &Mlp, k: usize) -> &Tensor {
    let l = &model.layers[k / 2];
    if k.is_multiple_of(2) {
        &l.weight
    } else {
        &l.bias
    }
}

fn nth_param_mut(model: &mut Mlp, k: usize) -> &mut Tensor {
    let l = &mut model.layers[k / 2];
    if k.is_multiple_of(2) {
        &mut l.weight
    } else {
        &mut l.bias
    }
}
