//! Elementwise, broadcast and reduction ops.

use std::rc::Rc;

use crate::{Graph, Tensor, Var};

impl Graph {
    fn unary(
        &self,
        x: Var,
        f: impl Fn(f64) -> f64,
        // derivative given (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&a| f(a)).collect());
        // the output copy is only kept when a backward rule may be recorded
        let ov = Rc::new(if self.is_tracking() { out.clone() } else { Tensor::zeros(vec![0]) });
        self.custom_lazy(out, &[x], move || {
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    for (((gx, &g), &a), &o) in gx.iter_mut().zip(g).zip(xv.data()).zip(ov.data()) {
                        *gx += g * df(a, o);
                    }
                }
            })
        })
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), |a, _| if a > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, o| o * (1.0 - o))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, o| o)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, move |a| a * c, move |_, _| c)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, move |a| a + c, |_, _| 1.0)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> (Rc<Tensor>, Rc<Tensor>) {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "{what}: shape mismatch");
        (av, bv)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = self.binary_same_shape(a, b, "add");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        self.custom(
            Tensor::new(av.shape(), data),
            &[a, b],
            Box::new(move |g, grads| {
                for v in [a, b] {
                    if let Some(gv) = grads.acc(v) {
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = self.binary_same_shape(a, b, "sub");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        self.custom(
            Tensor::new(av.shape(), data),
            &[a, b],
            Box::new(move |g, grads| {
                if let Some(ga) = grads.acc(a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = grads.acc(b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = self.binary_same_shape(a, b, "mul");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        self.custom_lazy(Tensor::new(shape, data), &[a, b], move || {
            Box::new(move |g, grads| {
                if let Some(ga) = grads.acc(a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = grads.acc(b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av.data()) {
                        *d += s * x;
                    }
                }
            })
        })
    }

    /// Sum of several same-shape vars.
    pub fn add_n(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let first = self.value(xs[0]);
        let mut data = first.data().to_vec();
        for &x in &xs[1..] {
            let v = self.value(x);
            assert_eq!(v.shape(), first.shape(), "add_n: shape mismatch");
            data.iter_mut().zip(v.data()).for_each(|(d, s)| *d += s);
        }
        let xs = xs.to_vec();
        self.custom(
            Tensor::new(first.shape(), data),
            &xs.clone(),
            Box::new(move |g, grads| {
                for &x in &xs {
                    if let Some(gx) = grads.acc(x) {
                        gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }),
        )
    }

    /// `x[N, C] + b[C]` broadcast over rows.
    pub fn add_row(&self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let c = xv.cols();
        assert_eq!(bv.len(), c, "add_row: bias length {} vs {} columns", bv.len(), c);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            row.iter_mut().zip(bv.data()).for_each(|(d, s)| *d += s);
        }
        self.custom(
            Tensor::new(xv.shape(), data),
            &[x, b],
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = grads.acc(b) {
                    for row in g.chunks(c.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }),
        )
    }

    /// Scales row `r` of `x[N, C]` by `s[r]` (`s` has `N` elements).
    pub fn scale_rows(&self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        let c = xv.cols();
        let n = xv.rows();
        assert_eq!(sv.len(), n, "scale_rows: {} scales for {} rows", sv.len(), n);
        let mut data = xv.data().to_vec();
        for (row, &k) in data.chunks_mut(c.max(1)).zip(sv.data()) {
            row.iter_mut().for_each(|d| *d *= k);
        }
        self.custom_lazy(Tensor::new(xv.shape(), data), &[x, s], move || {
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    for ((gr, row), &k) in gx.chunks_mut(c).zip(g.chunks(c)).zip(sv.data()) {
                        gr.iter_mut().zip(row).for_each(|(d, s)| *d += s * k);
                    }
                }
                if let Some(gs) = grads.acc(s) {
                    for ((d, grow), xrow) in gs.iter_mut().zip(g.chunks(c)).zip(xv.data().chunks(c)) {
                        *d += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            })
        })
    }

    /// Multiplies every element of `x` by the one-element var `s`.
    pub fn mul_scalar_var(&self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let k = self.value(s).item();
        let data = xv.data().iter().map(|a| a * k).collect();
        self.custom_lazy(Tensor::new(xv.shape(), data), &[x, s], move || {
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * k);
                }
                if let Some(gs) = grads.acc(s) {
                    gs[0] += g.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>();
                }
            })
        })
    }

    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let total: f64 = xv.data().iter().sum();
        self.custom(
            Tensor::scalar(total),
            &[x],
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }),
        )
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `a / b` for one-element vars.
    pub fn div_scalar(&self, a: Var, b: Var) -> Var {
        let av = self.value(a).item();
        let bv = self.value(b).item();
        self.custom(
            Tensor::scalar(av / bv),
            &[a, b],
            Box::new(move |g, grads| {
                if let Some(ga) = grads.acc(a) {
                    ga[0] += g[0] / bv;
                }
                if let Some(gb) = grads.acc(b) {
                    gb[0] -= g[0] * av / (bv * bv);
                }
            }),
        )
    }

    /// Euclidean norm of each row of `x[N, C]`, shape `[N]`. The gradient at a
    /// zero row is taken as zero.
    pub fn row_norm(&self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let norms: Vec<f64> = xv
            .data()
            .chunks(c.max(1))
            .map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let n = norms.len();
        let nv = Rc::new(norms.clone());
        self.custom_lazy(Tensor::new(vec![n], norms), &[x], move || {
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    for (r, (&gn, &nr)) in g.iter().zip(nv.iter()).enumerate() {
                        if nr > 0.0 {
                            let k = gn / nr;
                            for j in 0..c {
                                gx[r * c + j] += k * xv.data()[r * c + j];
                            }
                        }
                    }
                }
            })
        })
    }

    /// Rows of `x[N, C]` scaled to unit length; all-zero rows map to zero.
    pub fn l2_normalize_rows(&self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let norms: Vec<f64> = xv
            .data()
            .chunks(c.max(1))
            .map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let mut data = xv.data().to_vec();
        for (row, &n) in data.chunks_mut(c.max(1)).zip(&norms) {
            if n > 0.0 {
                row.iter_mut().for_each(|d| *d /= n);
            }
        }
        let out = Rc::new(data.clone());
        self.custom_lazy(Tensor::new(xv.shape(), data), &[x], move || {
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    for (r, &n) in norms.iter().enumerate() {
                        if n == 0.0 {
                            continue;
                        }
                        let y = &out[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - y[j] * dot) / n;
                        }
                    }
                }
            })
        })
    }
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}
