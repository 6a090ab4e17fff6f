use std::cell::RefCell;

use super::{Real, TResult, Tensor, TensorError};

/// Per-parent gradient contributions; `None` where the parent needs no gradient.
pub(crate) type Grads = Vec<Option<Vec<Real>>>;

/// Backward rule: receives the output gradient and, per parent, whether a gradient is
/// wanted.
pub(crate) type BackwardFn = Box<dyn Fn(&[Real], &[bool]) -> Grads>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    grad: Option<Tensor>,
}

/// Operation tape. Nodes are appended in creation order, which is a topological
/// order; `backward` walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
            grad: None,
        })
    }

    /// Records a leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn variable(&self, value: Tensor) -> Var {
        self.push_node(Node {
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
            grad: None,
        })
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records the result of an operation. The backward closure is dropped when no
    /// parent requires a gradient.
    pub(crate) fn record(&self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push_node(Node {
            value,
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            grad: None,
        })
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Accumulated gradient of a leaf variable, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across calls.
    pub fn backward(&self, root: Var) -> TResult<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root_node = &nodes[root.0];
            if root_node.value.numel() != 1 {
                return Err(TensorError::NonScalarRoot(root_node.value.shape().to_vec()));
            }
            if !root_node.requires_grad {
                return Ok(());
            }
            let mut grads: Vec<Option<Vec<Real>>> = Vec::with_capacity(root.0 + 1);
            grads.resize_with(root.0 + 1, || None);
            grads[root.0] = Some(vec![1.0]);
            let mut leaf_grads = Vec::new();

            for id in (0..=root.0).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                let Some(backward) = node.backward.as_ref() else {
                    if node.requires_grad {
                        leaf_grads.push((id, g));
                    }
                    continue;
                };
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect();
                let contributions = backward(&g, &needs);
                debug_assert_eq!(contributions.len(), node.parents.len());
                for (&parent, contribution) in node.parents.iter().zip(contributions) {
                    let Some(c) = contribution else { continue };
                    if !nodes[parent].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(c.len(), nodes[parent].value.numel());
                    match &mut grads[parent] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            leaf_grads
        };

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| *a += b),
                slot @ None => {
                    *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
            }
        }
        Ok(())
    }
}
