use std::cell::RefCell;
use std::rc::Rc;

use crate::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a recorded op. Receives the gradient of the op's output
/// and accumulates into its parents through [`Grads::acc`].
pub type BackFn = Box<dyn Fn(&[f64], &mut Grads)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    back: Option<BackFn>,
}

/// A tape of tensor operations.
///
/// Ops are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep. A graph built with
/// [`Graph::no_grad`] computes values only and records no backward rules.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    track: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), track: true }
    }

    pub fn no_grad() -> Self {
        Self { nodes: RefCell::new(Vec::new()), track: false }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_node(Rc::new(value), self.track, None)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(Rc::new(value), false, None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records a custom op. `back` is dropped when none of `parents` needs a
    /// gradient, so callers may build it unconditionally.
    pub fn custom(&self, value: Tensor, parents: &[Var], back: BackFn) -> Var {
        let requires = self.track && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let back = if requires { Some(back) } else { None };
        self.push_node(Rc::new(value), requires, back)
    }

    /// Like [`Graph::custom`] but lets the caller skip building the closure
    /// entirely when no gradient is needed.
    pub fn custom_lazy(
        &self,
        value: Tensor,
        parents: &[Var],
        back: impl FnOnce() -> BackFn,
    ) -> Var {
        let requires = self.track && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let back = if requires { Some(back()) } else { None };
        self.push_node(Rc::new(value), requires, back)
    }

    fn push_node(&self, value: Rc<Tensor>, requires_grad: bool, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, back });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Grads {
        let seed = vec![1.0; self.value(root).len()];
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Vec<f64>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(seed.len(), nodes[root.0].value.len());
        let mut grads = Grads {
            slots: (0..=root.0).map(|_| None).collect(),
            lens: nodes[..=root.0].iter().map(|n| n.value.len()).collect(),
            wants: nodes[..=root.0].iter().map(|n| n.requires_grad).collect(),
        };
        grads.slots[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(back) = nodes[i].back.as_ref() else { continue };
            let Some(g) = grads.slots[i].take() else { continue };
            back(&g, &mut grads);
            grads.slots[i] = Some(g);
        }
        grads
    }
}

/// Gradient accumulators indexed by [`Var`].
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    wants: Vec<bool>,
}

impl Grads {
    /// Accumulation buffer for `v`, or `None` when `v` does not require a
    /// gradient.
    pub fn acc(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.wants.get(v.0).copied().unwrap_or(false) {
            return None;
        }
        let len = self.lens[v.0];
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.lens.get(v.0).copied().unwrap_or(0)],
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}
