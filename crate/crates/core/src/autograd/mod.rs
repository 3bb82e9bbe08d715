//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Values are kept
//! on the tape so that [`Graph::backward`] can replay the recorded closures in
//! reverse order. Parameters enter the tape through [`Graph::param`], which
//! shares storage with the [`ParamStore`] instead of copying it.

mod conv;
mod kernels;
mod norm;
mod ops;
mod spatial;

use std::collections::HashMap;
use std::sync::Arc;

pub use conv::ConvGeometry;
pub use norm::BatchStats;
pub(crate) use ops::{batched_gemm, softmax_row, softmax_row_backward};

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Everything a backward closure may look at.
pub struct BackwardCtx<'a, E> {
    /// Gradient flowing into the op's output.
    pub grad: &'a Tensor<E>,
    pub output: &'a Tensor<E>,
    pub inputs: Vec<&'a Tensor<E>>,
    /// Whether each input needs a gradient; closures may skip the others.
    pub needs: Vec<bool>,
}

pub type BackwardFn<E> = Box<dyn Fn(&BackwardCtx<'_, E>) -> Vec<Option<Tensor<E>>>>;

struct Node<E> {
    value: Arc<Tensor<E>>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<E>>,
    requires_grad: bool,
}

pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
    grad_enabled: bool,
    train: bool,
    params: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Tensor<E>)>,
}

impl<E: Scalar> Graph<E> {
    /// Training graph: gradients recorded, batchnorm uses batch statistics.
    pub fn train() -> Self {
        Self::with_modes(true, true)
    }

    /// Inference graph: nothing recorded for backward, running statistics.
    pub fn eval() -> Self {
        Self::with_modes(false, false)
    }

    pub fn with_modes(grad_enabled: bool, train: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled,
            train,
            params: HashMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Arc<Tensor<E>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push_leaf(Arc::new(value), false)
    }

    /// A value whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push_leaf(Arc::new(value), true)
    }

    /// Puts a stored parameter on the tape (once per graph).
    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.kind(id) == crate::params::ParamKind::Weight;
        let v = self.push_leaf(store.get_arc(id), trainable);
        self.params.insert(id, v);
        v
    }

    /// Records an operation. `backward` is dropped when no input needs a
    /// gradient.
    pub fn push(
        &mut self,
        value: Tensor<E>,
        inputs: &[Var],
        backward: impl Fn(&BackwardCtx<'_, E>) -> Vec<Option<Tensor<E>>> + 'static,
    ) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            inputs: if requires_grad { inputs.to_vec() } else { Vec::new() },
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn record_buffer_update(&mut self, id: ParamId, value: Tensor<E>) {
        self.buffer_updates.push((id, value));
    }

    /// Batchnorm running-statistic updates produced by a training forward.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<E>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<E> {
        let out = &self.nodes[output.0];
        assert_eq!(out.value.len(), 1, "backward expects a scalar output");
        let mut grads: Vec<Option<Tensor<E>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(out.value.shape()));
        let mut leaves = HashMap::new();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            let Some(backward) = &node.backward else {
                leaves.insert(i, grad);
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.inputs.iter().map(|v| self.nodes[v.0].value.as_ref()).collect(),
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "gradient shape");
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let params = self
            .params
            .iter()
            .filter_map(|(&id, v)| leaves.get(&v.0).map(|_| (id, v.0)))
            .collect();
        Gradients { leaves, params }
    }
}

/// Gradients of leaf values from one reverse pass.
pub struct Gradients<E> {
    leaves: HashMap<usize, Tensor<E>>,
    params: HashMap<ParamId, usize>,
}

impl<E: Scalar> Gradients<E> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<E>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.params.get(&id).and_then(|n| self.leaves.get(n))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}
