//! Operation tape and reverse-mode traversal.

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{shape_numel, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub(crate) trait Backward<T: Real>: Send + Sync {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>);
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) needs_grad: bool,
    pub(crate) param: Option<ParamId>,
    pub(crate) op: Option<Box<dyn Backward<T>>>,
}

/// Read access for an operation's backward pass.
pub(crate) struct BackwardCtx<'a, T> {
    nodes: &'a [Node<T>],
    /// Value of the node being differentiated.
    pub out: &'a [T],
    /// Upstream gradient, same length as `out`.
    pub grad: &'a [T],
}

impl<'a, T: Real> BackwardCtx<'a, T> {
    pub fn value(&self, v: Var) -> &'a [T] {
        &self.nodes[v.0].value
    }
}

/// Lazily allocated gradient accumulators for the nodes of a graph.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> GradSink<'_, T> {
    /// Zero-initialised accumulator for `v`, or `None` when `v` does not
    /// lead to any gradient-requiring leaf.
    pub fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }
}

/// Recorded forward computation.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every graph node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to the leaf `v`; `None` when `v` is
    /// not a gradient-requiring leaf. A leaf that is not on the loss path
    /// yields zeros. Intermediate gradients are released during the sweep.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant or, if `t.requires_grad()`, a differentiable leaf.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), None)
    }

    /// Records a constant leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_leaf(t.shape().to_vec(), t.into_data(), false, None))
    }

    /// Records a parameter leaf bound to `id` in `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Some(id))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            param,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the result of an operation over `inputs`.
    pub(crate) fn push_op(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        inputs: &[Var],
        op: impl Backward<T> + 'static,
    ) -> Var {
        debug_assert_eq!(shape_numel(&shape), value.len());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            param: None,
            op: if needs_grad { Some(Box::new(op)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies the value of `v` out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("graph nodes hold valid tensors")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "item() on non-scalar node of shape {:?}", n.shape);
        n.value[0]
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            {
                let ctx = BackwardCtx {
                    nodes: &self.nodes,
                    out: &node.value,
                    grad: &grad,
                };
                let mut sink = GradSink {
                    nodes: &self.nodes,
                    grads: &mut grads[..i],
                };
                op.backward(&ctx, &mut sink);
            }
        }
        // Leaves that need a gradient but were unreachable get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && node.op.is_none() && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_into(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_deref()) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }

    /// `backward` followed by [`Graph::accumulate_into`].
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        self.accumulate_into(&grads, store);
        Ok(())
    }
}
