use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded op.
///
/// `needs[i]` is false when input `i` does not lead to any differentiable
/// leaf; implementations may return `None` for it and skip the work.
pub trait Function<F: Scalar>: Send {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_out: &[F],
        needs: &[bool],
    ) -> Vec<Option<Vec<F>>>;
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    inputs: Vec<Var>,
    func: Option<Box<dyn Function<F>>>,
    requires_grad: bool,
    /// Accumulated gradient, kept only for leaves.
    grad: Option<Vec<F>>,
}

/// Append-only computation record. Node order is a topological order, so
/// backward is a single reverse sweep.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<F>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(Node {
            value,
            inputs: vec![],
            func: None,
            requires_grad: true,
            grad: None,
        })
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(Node {
            value,
            inputs: vec![],
            func: None,
            requires_grad: false,
            grad: None,
        })
    }

    /// Records an op whose forward value has already been computed.
    pub fn apply(
        &mut self,
        inputs: &[Var],
        value: Tensor<F>,
        func: impl Function<F> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            inputs: inputs.to_vec(),
            func: Some(Box::new(func)),
            requires_grad,
            grad: None,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].func.as_ref().map_or("leaf", |f| f.name())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Leaf gradients accumulate: calling this twice without [`zero_grad`]
    /// doubles them.
    ///
    /// [`zero_grad`]: Graph::zero_grad
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            );
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = (0..end).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut leaf_grads = Vec::new();

        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(func) = &node.func else {
                leaf_grads.push((i, g));
                continue;
            };
            let inputs: Vec<&Tensor<F>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let gin = func.backward(&inputs, &node.value, &g, &needs);
            debug_assert_eq!(gin.len(), node.inputs.len(), "{}", func.name());
            for (v, gi) in node.inputs.iter().zip(gin) {
                let Some(gi) = gi else { continue };
                if !needs_of(&self.nodes[v.0]) {
                    continue;
                }
                debug_assert_eq!(gi.len(), self.nodes[v.0].value.numel(), "{}", func.name());
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn needs_of<F: Scalar>(n: &Node<F>) -> bool {
    n.requires_grad
}
