//! Reverse-mode tape.
//!
//! Every op appends one node holding its output value and whatever it needs
//! to run its backward rule later. Nodes are only ever appended, so the node
//! vector is already in topological order and backward is a single reverse
//! sweep.

use super::params::{ParamId, ParamKind, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T: Real> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    AbsDiff {
        a: Var,
        b: Var,
    },
    Gap {
        x: Var,
        inner: usize,
    },
    MaskedSeqMean {
        x: Var,
        /// Per (batch, position) averaging weight; rows sum to one.
        weights: Vec<T>,
        len: usize,
    },
    Softmax {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        outer: usize,
        channels: usize,
        inner: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Batch statistics were used (train mode); otherwise running stats.
        batch_stats: bool,
        mask: Option<Vec<bool>>,
        counts: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

/// Records a forward computation and replays it backward.
pub struct Tape<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    buffer_updates: Vec<(ParamId, Vec<T>)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant or input tensor. Gradients are tracked when the tensor's
    /// `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), false, Op::Leaf))
    }

    /// Binds a stored parameter. Frozen parameters and buffers do not
    /// receive gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.param(id);
        let rg = p.kind == ParamKind::Trainable && !p.frozen;
        self.push(p.tensor.shape().to_vec(), p.tensor.data().to_vec(), rg, Op::Param(id))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone()).unwrap()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Queues a new value for a buffer (e.g. running statistics) computed
    /// during a train-mode forward pass.
    pub fn stage_buffer(&mut self, id: ParamId, value: Vec<T>) {
        self.buffer_updates.push((id, value));
    }

    /// Writes staged buffer values into `store`, in forward order.
    pub fn commit_buffers(&mut self, store: &mut ParamStore<T>) {
        for (id, value) in self.buffer_updates.drain(..) {
            store.get_mut(id).data_mut().copy_from_slice(&value);
        }
    }

    /// Computes gradients of `loss` for every node on the tape.
    pub fn backward_local(&mut self, loss: Var) -> Result<()> {
        let shape = &self.nodes[loss.0].shape;
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            super::backward::apply(&self.nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Backward pass that also accumulates (sums) parameter gradients into
    /// `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward_local(loss)?;
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
        Ok(())
    }
}

/// Adds into the gradient slot of `v`, allocating it when needed.
pub(crate) fn acc_grad<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
    f(slot);
}
