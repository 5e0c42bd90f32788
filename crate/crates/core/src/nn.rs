//! Parameter layout helpers shared by the network modules.

use rand::Rng;
use voxtrack_tape::{Binder, ParamStore, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// `{name}.w [din, dout]` and `{name}.b [dout]`.
pub(crate) fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, din: usize, dout: usize) {
    store.init_kaiming(format!("{name}.w"), &[din, dout], din, rng);
    store.init_const(format!("{name}.b"), &[dout], 0.0);
}

pub(crate) fn linear(b: &Binder, name: &str, x: Var) -> Var {
    let g = b.graph();
    g.linear(x, b.param(&format!("{name}.w")), Some(b.param(&format!("{name}.b"))))
}

pub(crate) fn init_norm(store: &mut ParamStore, name: &str, c: usize) {
    store.init_const(format!("{name}.gamma"), &[c], 1.0);
    store.init_const(format!("{name}.beta"), &[c], 0.0);
}

pub(crate) fn layer_norm(b: &Binder, name: &str, x: Var) -> Var {
    b.graph().layer_norm(x, b.param(&format!("{name}.gamma")), b.param(&format!("{name}.beta")), NORM_EPS)
}

pub(crate) fn group_norm(b: &Binder, name: &str, x: Var, groups: usize) -> Var {
    b.graph()
        .group_norm(x, groups, b.param(&format!("{name}.gamma")), b.param(&format!("{name}.beta")), NORM_EPS)
}

/// Two-layer perceptron `linear -> norm -> relu -> linear`.
pub(crate) fn init_mlp2(store: &mut ParamStore, rng: &mut impl Rng, name: &str, din: usize, hidden: usize, dout: usize) {
    init_linear(store, rng, &format!("{name}.fc1"), din, hidden);
    init_norm(store, &format!("{name}.norm"), hidden);
    init_linear(store, rng, &format!("{name}.fc2"), hidden, dout);
}

pub(crate) fn mlp2(b: &Binder, name: &str, x: Var) -> Var {
    let g = b.graph();
    let h = linear(b, &format!("{name}.fc1"), x);
    let h = g.relu(layer_norm(b, &format!("{name}.norm"), h));
    linear(b, &format!("{name}.fc2"), h)
}
