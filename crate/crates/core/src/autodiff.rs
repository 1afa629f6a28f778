//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records operations in execution order, so every parent index is
//! smaller than the index of the node that consumes it. [`Tape::backward`]
//! walks the records in reverse and returns one gradient buffer per node that
//! the loss depends on.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::tensor::{matmul_nt, matmul_tn, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a + 1·bias` with `bias` a `1×n` row broadcast over the rows of `a`.
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Loss(NodeId, Objective),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, if the loss depends on it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Records an input or parameter. The value is copied onto the tape.
    pub fn leaf(&mut self, value: &Tensor) -> Result<NodeId> {
        let mut v = value.clone();
        v.zero_grad();
        if !v.is_matrix() {
            return Err(Error::Shape(format!(
                "tape values must be 2-D, got {:?}",
                v.shape()
            )));
        }
        Ok(self.push(Op::Leaf, v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.nodes[a].value.dims2()?;
        let (br, bn) = self.nodes[bias].value.dims2()?;
        if br != 1 || bn != n {
            return Err(Error::Shape(format!("bias {br}x{bn} for {m}x{n} input")));
        }
        let b = self.nodes[bias].value.data().to_vec();
        let mut value = self.nodes[a].value.clone();
        for row in value.data_mut().chunks_exact_mut(n) {
            row.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        }
        Ok(self.push(Op::AddRow(a, bias), value))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut value = self.nodes[a].value.clone();
        value.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    /// Attaches `objective` to `input`; the new node holds the scalar loss as a `1×1` value.
    pub fn loss(&mut self, input: NodeId, objective: Objective) -> Result<NodeId> {
        let x = &self.nodes[input].value;
        if objective.rows() != x.rows() {
            return Err(Error::Shape(format!(
                "loss inputs describe {} samples, batch has {}",
                objective.rows(),
                x.rows()
            )));
        }
        let v = objective.value(x)?;
        Ok(self.push(Op::Loss(input, objective), Tensor::matrix(1, 1, vec![v])?))
    }

    /// Scalar value of a loss node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value.data()[0]
    }

    /// Back-propagates from the scalar node `root` (seed gradient 1).
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Shape("backward root must be scalar".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[*a].value.dims2()?;
                    let n = self.nodes[*b].value.cols();
                    let ga = matmul_nt(&g, self.nodes[*b].value.data(), m, n, k);
                    let gb = matmul_tn(self.nodes[*a].value.data(), &g, m, k, n);
                    add_into(&mut grads[*a], ga);
                    add_into(&mut grads[*b], gb);
                }
                Op::AddRow(a, bias) => {
                    let n = self.nodes[*bias].value.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                    add_into(&mut grads[*bias], gb);
                    add_into(&mut grads[*a], g.clone());
                }
                Op::Relu(a) => {
                    let x = self.nodes[*a].value.data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    add_into(&mut grads[*a], ga);
                }
                Op::Loss(input, objective) => {
                    let (_, mut gi) = objective.value_and_grad(&self.nodes[*input].value)?;
                    gi.iter_mut().for_each(|x| *x *= g[0]);
                    add_into(&mut grads[*input], gi);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_mse_gradient() {
        // y = x·w with x = 1, w = 0, target 1.
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::matrix(1, 1, vec![1.0]).unwrap())
            .unwrap();
        let w = tape
            .leaf(&Tensor::matrix(1, 1, vec![0.0]).unwrap())
            .unwrap();
        let y = tape.matmul(x, w).unwrap();
        let targets = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let l = tape.loss(y, Objective::Mse { targets }).unwrap();
        assert_eq!(tape.scalar(l), 1.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w), Some(&[-2.0][..]));
        assert_eq!(g.get(x), Some(&[0.0][..]));
    }

    #[test]
    fn parents_precede_children() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(&Tensor::zeros(&[3, 1])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let r = tape.relu(c);
        assert!(a < c && b < c && c < r);
        assert_eq!(tape.len(), 4);
    }

    #[test]
    fn loss_rejects_batch_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3])).unwrap();
        let obj = Objective::cross_entropy(Tensor::zeros(&[3, 3]));
        assert!(matches!(tape.loss(a, obj), Err(Error::Shape(_))));
    }

    #[test]
    fn shared_leaf_accumulates() {
        // l = mean((x·w + x·w − 0)²)
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::matrix(1, 1, vec![2.0]).unwrap())
            .unwrap();
        let w = tape
            .leaf(&Tensor::matrix(1, 1, vec![0.5]).unwrap())
            .unwrap();
        let y1 = tape.matmul(x, w).unwrap();
        let y = tape.add_row(y1, w).unwrap();
        let l = tape
            .loss(
                y,
                Objective::Mse {
                    targets: Tensor::zeros(&[1, 1]),
                },
            )
            .unwrap();
        // y = 2w + w = 3w, l = 9w², dl/dw = 18w = 9
        let g = tape.backward(l).unwrap();
        assert!((g.get(w).unwrap()[0] - 9.0).abs() < 1e-12);
    }
}
