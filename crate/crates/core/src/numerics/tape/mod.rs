//! Reverse-mode differentiation over array-valued nodes.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Values
//! are immutable once recorded and operands always precede the node that
//! uses them, so the backward pass is a single reverse sweep.
//!
//! Complex arrays are ordinary real nodes with a trailing axis of length 2
//! (interleaved re/im). Their gradients are the pair
//! `(∂L/∂re, ∂L/∂im)`, i.e. real and imaginary parts are independent real
//! leaves.
//!
//! ```
//! use s4former::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x), vec![6.0]);
//! ```

mod backward;
mod ops;

use std::sync::atomic::{AtomicU32, Ordering};

pub use ops::{AttentionPrefix, ConvOptions, ScanOptions};

use super::complex::Complex;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: u32,
    tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Sigmoid(Var),
    Swish(Var),
    Sum(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Outer(Var, Var),
    Glu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
        opts: ConvOptions,
    },
    Pack(Var, Var),
    Re(Var),
    Im(Var),
    CMul(Var, Var),
    CExp(Var),
    CExpRel(Var),
    CScaleRows(Var, Var),
    SsmKernel {
        w: Var,
        a_bar: Var,
        len: usize,
    },
    SsmScan {
        a_bar: Var,
        b_bar: Var,
        c: Var,
        u: Var,
        seq_len: usize,
        /// Every hidden state, `[rows × H × N]`.
        states: Vec<Complex>,
        /// Initial state per sequence (only ever non-zero for single-sequence
        /// streaming), `[H × N]`.
        init: Option<Vec<Complex>>,
        /// State after the last step of each sequence, `[B × H × N]`.
        final_state: Vec<Complex>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        prefix: Option<AttentionPrefix>,
        /// Softmax weights per query row over `prefix + seq_len` keys.
        probs: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Single-writer record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn contains(&self, v: Var) -> bool {
        v.tape == self.id && v.index() < self.nodes.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Final hidden state per sequence recorded by an [`Tape::ssm_scan`] node,
    /// laid out `[B × H × N]`.
    pub fn scan_final_state(&self, v: Var) -> Option<&[Complex]> {
        match &self.node(v).op {
            Op::SsmScan { final_state, .. } => Some(final_state),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let index = u32::try_from(self.nodes.len()).expect("tape exceeds u32::MAX nodes");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            index,
            tape: self.id,
        }
    }

    fn node(&self, v: Var) -> &Node {
        assert!(
            self.contains(v),
            "variable {v:?} does not belong to tape {}",
            self.id
        );
        &self.nodes[v.index()]
    }

    fn check(&self, v: Var) -> Result<()> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "variable {v:?} is not on this tape"
            )))
        }
    }

    /// Propagates adjoints from the scalar `output` back to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check(output)?;
        if self.value(output).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let grads = backward::run(&self.nodes, output);
        Ok(Gradients {
            tape: self.id,
            grads,
            sizes: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// The adjoint of `v`, or `None` when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        self.grads[v.index()].as_deref()
    }

    /// The adjoint of `v`, with unused nodes reported as exact zeros.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.sizes[v.index()]],
        }
    }
}

#[cfg(test)]
mod tests;
