//! Central finite-difference gradient checking.

use crate::{Graph, Tensor, Var};

/// Outcome of [`check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` per input.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`. `f` must build a fresh computation on the
/// graph it is handed and return a one-element var.
pub fn check(f: impl Fn(&Graph, &[Var]) -> Var, inputs: &[Tensor], h: f64) -> GradCheck {
    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = f(&graph, &vars);
    assert_eq!(graph.value(out).len(), 1, "gradcheck target must be scalar");
    let grads = graph.backward(out);
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let g = Graph::no_grad();
        let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vs);
        g.value(out).item()
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut num = vec![0.0; inputs[i].len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        numeric.push(num);
    }
    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = na.max(nn);
            if scale == 0.0 {
                0.0
            } else {
                diff / scale
            }
        })
        .collect();
    GradCheck { rel_errors, analytic, numeric }
}
