use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::{Grads, Graph, Tensor, Var};

/// Named model parameters. Names are dotted paths such as
/// `decoder.stage2.conv1.w`; iteration order is the sorted name order, which
/// keeps serialization and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn init_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) {
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound));
        self.insert(name, t);
    }

    /// He-style uniform init for a weight feeding a ReLU, given its fan-in.
    pub fn init_kaiming(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.init_uniform(name, shape, bound, rng);
    }

    pub fn init_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape.to_vec(), value));
    }

    pub fn map_values(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (k, v) in self.params.iter_mut() {
            f(k, v);
        }
    }
}

/// Binds parameters of a [`ParamStore`] onto a [`Graph`] on first use.
pub struct Binder<'a> {
    graph: &'a Graph,
    store: &'a ParamStore,
    bound: RefCell<BTreeMap<String, Var>>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    /// Parameters become differentiable leaves.
    pub fn new(graph: &'a Graph, store: &'a ParamStore) -> Self {
        Self { graph, store, bound: RefCell::new(BTreeMap::new()), trainable: true }
    }

    /// Parameters become constants (no parameter gradients).
    pub fn frozen(graph: &'a Graph, store: &'a ParamStore) -> Self {
        Self { trainable: false, ..Self::new(graph, store) }
    }

    pub fn graph(&self) -> &'a Graph {
        self.graph
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Panics on an unknown name: parameter sets are validated against the
    /// model layout when they are created or loaded.
    pub fn param(&self, name: &str) -> Var {
        if let Some(&v) = self.bound.borrow().get(name) {
            return v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let v = if self.trainable { self.graph.leaf(t) } else { self.graph.constant(t) };
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Gradients of every bound parameter, keyed by name. Parameters that
    /// received no gradient map to zeros.
    pub fn grads(&self, grads: &Grads) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .borrow()
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}
