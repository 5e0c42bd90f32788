//! Resampling: nearest/trilinear upsampling, average pooling and bilinear
//! point sampling.

use std::rc::Rc;

use crate::{Graph, Tensor, Var};

/// Taps and weights of a 2x linear upsample along one axis of length `n`
/// (half-pixel centers, border taps clamped).
fn linear_2x_taps(n: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * n)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let i0 = src.floor();
            let w1 = src - i0;
            let clamp = |i: f64| (i.max(0.0) as usize).min(n - 1);
            [(clamp(i0), 1.0 - w1), (clamp(i0 + 1.0), w1)]
        })
        .collect()
}

/// Bilinear taps of a continuous feature-space coordinate on an axis of
/// length `n`: `(i0, i1, frac)` with both taps clamped to the border.
fn bilinear_axis(f: f64, n: usize) -> (usize, usize, f64) {
    let f = f.clamp(-1.0, n as f64);
    let i0 = f.floor();
    let t = f - i0;
    let clamp = |i: f64| (i.max(0.0) as usize).min(n - 1);
    (clamp(i0), clamp(i0 + 1.0), t)
}

impl Graph {
    /// Nearest-neighbour upsampling of `x[H, W, C]` to `[out_h, out_w, C]`,
    /// output cell `(i, j)` reading `(min(i / 2, H - 1), min(j / 2, W - 1))`.
    pub fn upsample_nearest2d(&self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x);
        let (h, w, c) = match *xv.shape() {
            [h, w, c] => (h, w, c),
            ref s => panic!("upsample_nearest2d expects [H, W, C], got {s:?}"),
        };
        let src: Rc<Vec<usize>> = Rc::new(
            (0..out_h)
                .flat_map(|i| (0..out_w).map(move |j| (i / 2).min(h - 1) * w + (j / 2).min(w - 1)))
                .collect(),
        );
        let mut out = Vec::with_capacity(out_h * out_w * c);
        for &s in src.iter() {
            out.extend_from_slice(&xv.data()[s * c..(s + 1) * c]);
        }
        self.custom(
            Tensor::new(vec![out_h, out_w, c], out),
            &[x],
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    for (o, &s) in src.iter().enumerate() {
                        gx[s * c..(s + 1) * c].iter_mut().zip(&g[o * c..(o + 1) * c]).for_each(|(d, v)| *d += v);
                    }
                }
            }),
        )
    }

    /// Trilinear 2x upsampling of `x[X, Y, Z, C]` with half-voxel centers.
    pub fn upsample_trilinear2x(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (nx, ny, nz, c) = match *xv.shape() {
            [a, b, d, e] => (a, b, d, e),
            ref s => panic!("upsample_trilinear2x expects [X, Y, Z, C], got {s:?}"),
        };
        let (tx, ty, tz) = (linear_2x_taps(nx), linear_2x_taps(ny), linear_2x_taps(nz));
        let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
        let src_index = move |a: usize, b: usize, d: usize| (a * ny + b) * nz + d;
        let mut out = vec![0.0; ox * oy * oz * c];
        let data = xv.data();
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    let o = ((i * oy + j) * oz + k) * c;
                    let dst = &mut out[o..o + c];
                    for &(a, wa) in &tx[i] {
                        for &(b, wb) in &ty[j] {
                            for &(d, wd) in &tz[k] {
                                let w = wa * wb * wd;
                                if w == 0.0 {
                                    continue;
                                }
                                let s = src_index(a, b, d) * c;
                                dst.iter_mut().zip(&data[s..s + c]).for_each(|(o, v)| *o += w * v);
                            }
                        }
                    }
                }
            }
        }
        self.custom(
            Tensor::new(vec![ox, oy, oz, c], out),
            &[x],
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    for i in 0..ox {
                        for j in 0..oy {
                            for k in 0..oz {
                                let o = ((i * oy + j) * oz + k) * c;
                                let src = &g[o..o + c];
                                for &(a, wa) in &tx[i] {
                                    for &(b, wb) in &ty[j] {
                                        for &(d, wd) in &tz[k] {
                                            let w = wa * wb * wd;
                                            if w == 0.0 {
                                                continue;
                                            }
                                            let s = src_index(a, b, d) * c;
                                            gx[s..s + c].iter_mut().zip(src).for_each(|(d, v)| *d += w * v);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Mean over non-overlapping `f x f x f` blocks of `x[X, Y, Z, C]`; every
    /// spatial dim must be divisible by `f`.
    pub fn avg_pool3d(&self, x: Var, f: usize) -> Var {
        let xv = self.value(x);
        let (nx, ny, nz, c) = match *xv.shape() {
            [a, b, d, e] => (a, b, d, e),
            ref s => panic!("avg_pool3d expects [X, Y, Z, C], got {s:?}"),
        };
        assert!(f > 0 && nx % f == 0 && ny % f == 0 && nz % f == 0, "avg_pool3d: dims not divisible by {f}");
        let (ox, oy, oz) = (nx / f, ny / f, nz / f);
        let inv = 1.0 / (f * f * f) as f64;
        let dst_of = move |p: usize| {
            let (i, j, k) = (p / (ny * nz), (p / nz) % ny, p % nz);
            ((i / f) * oy + j / f) * oz + k / f
        };
        let mut out = vec![0.0; ox * oy * oz * c];
        for p in 0..nx * ny * nz {
            let d = dst_of(p);
            out[d * c..(d + 1) * c].iter_mut().zip(&xv.data()[p * c..(p + 1) * c]).for_each(|(o, v)| *o += inv * v);
        }
        self.custom(
            Tensor::new(vec![ox, oy, oz, c], out),
            &[x],
            Box::new(move |g, grads| {
                if let Some(gx) = grads.acc(x) {
                    for p in 0..nx * ny * nz {
                        let d = dst_of(p);
                        gx[p * c..(p + 1) * c].iter_mut().zip(&g[d * c..(d + 1) * c]).for_each(|(o, v)| *o += inv * v);
                    }
                }
            }),
        )
    }

    /// Samples `fmap[H', W', C]` at full-image pixel coordinates `uv[N, 2]`
    /// (`u` horizontal). Feature cell `(i, j)` sits at pixel
    /// `((j + 0.5) * stride, (i + 0.5) * stride)`; taps outside the map clamp
    /// to the border. Differentiable with respect to both the map and `uv`.
    pub fn bilinear_sample(&self, fmap: Var, uv: Var, stride: f64) -> Var {
        let fv = self.value(fmap);
        let pv = self.value(uv);
        let (h, w, c) = match *fv.shape() {
            [h, w, c] => (h, w, c),
            ref s => panic!("bilinear_sample expects [H, W, C], got {s:?}"),
        };
        assert_eq!(pv.cols(), 2, "bilinear_sample: uv must be [N, 2]");
        let n = pv.rows();
        struct Tap {
            x0: usize,
            x1: usize,
            y0: usize,
            y1: usize,
            tx: f64,
            ty: f64,
        }
        let taps: Vec<Tap> = (0..n)
            .map(|r| {
                let (u, v) = (pv.data()[2 * r], pv.data()[2 * r + 1]);
                let (x0, x1, tx) = bilinear_axis(u / stride - 0.5, w);
                let (y0, y1, ty) = bilinear_axis(v / stride - 0.5, h);
                Tap { x0, x1, y0, y1, tx, ty }
            })
            .collect();
        let at = move |y: usize, x: usize| (y * w + x) * c;
        let fdata = fv.data();
        let mut out = vec![0.0; n * c];
        for (r, t) in taps.iter().enumerate() {
            let corners = [
                (at(t.y0, t.x0), (1.0 - t.ty) * (1.0 - t.tx)),
                (at(t.y0, t.x1), (1.0 - t.ty) * t.tx),
                (at(t.y1, t.x0), t.ty * (1.0 - t.tx)),
                (at(t.y1, t.x1), t.ty * t.tx),
            ];
            let dst = &mut out[r * c..(r + 1) * c];
            for (s, wgt) in corners {
                dst.iter_mut().zip(&fdata[s..s + c]).for_each(|(d, v)| *d += wgt * v);
            }
        }
        self.custom_lazy(Tensor::new(vec![n, c], out), &[fmap, uv], move || {
            Box::new(move |g, grads| {
                if let Some(gf) = grads.acc(fmap) {
                    for (r, t) in taps.iter().enumerate() {
                        let src = &g[r * c..(r + 1) * c];
                        let corners = [
                            (at(t.y0, t.x0), (1.0 - t.ty) * (1.0 - t.tx)),
                            (at(t.y0, t.x1), (1.0 - t.ty) * t.tx),
                            (at(t.y1, t.x0), t.ty * (1.0 - t.tx)),
                            (at(t.y1, t.x1), t.ty * t.tx),
                        ];
                        for (s, wgt) in corners {
                            gf[s..s + c].iter_mut().zip(src).for_each(|(d, v)| *d += wgt * v);
                        }
                    }
                }
                if let Some(gp) = grads.acc(uv) {
                    let f = fv.data();
                    for (r, t) in taps.iter().enumerate() {
                        let src = &g[r * c..(r + 1) * c];
                        let dot = |a: usize| -> f64 { src.iter().zip(&f[a..a + c]).map(|(x, y)| x * y).sum() };
                        let (f00, f01, f10, f11) =
                            (dot(at(t.y0, t.x0)), dot(at(t.y0, t.x1)), dot(at(t.y1, t.x0)), dot(at(t.y1, t.x1)));
                        // taps collapse onto one cell at the clamped border, so
                        // the differences below vanish there
                        let dfx = (1.0 - t.ty) * (f01 - f00) + t.ty * (f11 - f10);
                        let dfy = (1.0 - t.tx) * (f10 - f00) + t.tx * (f11 - f01);
                        gp[2 * r] += dfx / stride;
                        gp[2 * r + 1] += dfy / stride;
                    }
                }
            })
        })
    }
}
