//! Matrix products and row/column plumbing.

use std::rc::Rc;

use crate::{Graph, Tensor, Var};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where `op`
/// optionally transposes. `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    /// `a[M, K] x b[K, N]`. Leading dims of `a` are flattened into `M`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(bv.shape().len(), 2, "matmul: rhs must be 2-d, got {:?}", bv.shape());
        let k = av.cols();
        assert_eq!(bv.shape()[0], k, "matmul: {:?} x {:?}", av.shape(), bv.shape());
        let m = av.rows();
        let n = bv.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.custom_lazy(Tensor::new(shape, out), &[a, b], move || {
            Box::new(move |g, grads| {
                if let Some(ga) = grads.acc(a) {
                    gemm(m, n, k, g, false, bv.data(), true, 1.0, ga);
                }
                if let Some(gb) = grads.acc(b) {
                    gemm(k, m, n, av.data(), true, g, false, 1.0, gb);
                }
            })
        })
    }

    /// Affine map `x W + b` with `W[in, out]`, `b[out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Reinterprets `x` with a new shape of equal size.
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let out = (*xv).clone().reshape(shape.to_vec());
        self.custom(
            out,
            &[x],
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }),
        )
    }

    /// Concatenates 2-d vars with equal row counts along columns.
    pub fn concat_cols(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|&x| self.value(x)).collect();
        let rows = vals[0].rows();
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        for v in &vals {
            assert_eq!(v.rows(), rows, "concat_cols: row count mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        let xs_owned = xs.to_vec();
        self.custom(
            Tensor::new(vec![rows, total], out),
            xs,
            Box::new(move |g, grads| {
                let mut off = 0;
                for (&x, &w) in xs_owned.iter().zip(&widths) {
                    if let Some(gx) = grads.acc(x) {
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            gx[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    off += w;
                }
            }),
        )
    }

    /// Columns `[start, start + width)` of a 2-d var.
    pub fn slice_cols(&self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + width <= c, "slice_cols out of range");
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        self.custom(
            Tensor::new(vec![rows, width], out),
            &[x],
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    for r in 0..rows {
                        let dst = &mut gx[r * c + start..r * c + start + width];
                        dst.iter_mut().zip(&g[r * width..(r + 1) * width]).for_each(|(d, s)| *d += s);
                    }
                }
            }),
        )
    }

    /// Rows `[start, start + count)` of `x` viewed as `[rows, cols]`.
    pub fn slice_rows(&self, x: Var, start: usize, count: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + count <= xv.rows(), "slice_rows out of range");
        let out = xv.data()[start * c..(start + count) * c].to_vec();
        self.custom(
            Tensor::new(vec![count, c], out),
            &[x],
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    gx[start * c..(start + count) * c].iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }),
        )
    }

    /// Stacks 2-d vars with equal column counts along rows.
    pub fn concat_rows(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|&x| self.value(x)).collect();
        let c = vals[0].cols();
        let mut out = Vec::new();
        let mut counts = Vec::with_capacity(vals.len());
        for v in &vals {
            assert_eq!(v.cols(), c, "concat_rows: column count mismatch");
            out.extend_from_slice(v.data());
            counts.push(v.rows());
        }
        let rows: usize = counts.iter().sum();
        let xs_owned = xs.to_vec();
        self.custom(
            Tensor::new(vec![rows, c], out),
            xs,
            Box::new(move |g, grads| {
                let mut off = 0;
                for (&x, &n) in xs_owned.iter().zip(&counts) {
                    if let Some(gx) = grads.acc(x) {
                        gx.iter_mut().zip(&g[off * c..(off + n) * c]).for_each(|(d, s)| *d += s);
                    }
                    off += n;
                }
            }),
        )
    }

    /// Gathers rows `idx` of `x[N, C]` into `[idx.len(), C]`.
    pub fn gather_rows(&self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(xv.row(i));
        }
        self.custom(
            Tensor::new(vec![idx.len(), c], out),
            &[x],
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(d, s)| *d += s);
                    }
                }
            }),
        )
    }

    /// Writes row `k` of `x[M, C]` to row `idx[k]` of a zero `[n, C]` output.
    pub fn scatter_rows(&self, x: Var, idx: Rc<Vec<usize>>, n: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(xv.rows(), idx.len(), "scatter_rows: index count mismatch");
        let mut out = vec![0.0; n * c];
        for (k, &i) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c].iter_mut().zip(xv.row(k)).for_each(|(d, s)| *d += s);
        }
        self.custom(
            Tensor::new(vec![n, c], out),
            &[x],
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    for (k, &i) in idx.iter().enumerate() {
                        gx[k * c..(k + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(d, s)| *d += s);
                    }
                }
            }),
        )
    }
}
