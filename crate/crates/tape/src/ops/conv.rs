//! Channels-last convolutions via chunked im2col + GEMM.
//!
//! Columns are rebuilt in the backward pass instead of being stored, so the
//! peak memory of a convolution is bounded by one chunk of columns.

use std::rc::Rc;

use crate::ops::linalg::gemm;
use crate::{Graph, Tensor, Var};

const NO_TAP: u32 = u32::MAX;
/// Upper bound on the number of column entries materialized at once.
const CHUNK_ELEMS: usize = 1 << 21;

/// How out-of-range taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Zero,
    /// Wrap around the spatial extent.
    Circular,
}

/// Padding on each side of a 2-d map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Pad2d {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Pad2d {
    pub fn same(p: usize) -> Self {
        Self { top: p, left: p, bottom: p, right: p }
    }
}

/// Tap table: for each output position and kernel offset, the flat input
/// position or `NO_TAP`.
struct Taps {
    table: Vec<u32>,
    taps_per_row: usize,
    out_positions: usize,
}

fn conv_forward(x: &[f64], ci: usize, taps: &Taps, w: &[f64], co: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let kdim = taps.taps_per_row * ci;
    let rows_per_chunk = (CHUNK_ELEMS / kdim.max(1)).max(1);
    let mut out = vec![0.0; taps.out_positions * co];
    let mut cols = vec![0.0; rows_per_chunk.min(taps.out_positions) * kdim];
    let mut start = 0;
    while start < taps.out_positions {
        let n = rows_per_chunk.min(taps.out_positions - start);
        fill_cols(x, ci, taps, start, n, &mut cols[..n * kdim]);
        gemm(n, kdim, co, &cols[..n * kdim], false, w, false, 0.0, &mut out[start * co..(start + n) * co]);
        start += n;
    }
    if let Some(b) = bias {
        for row in out.chunks_mut(co) {
            row.iter_mut().zip(b).for_each(|(d, s)| *d += s);
        }
    }
    out
}

fn fill_cols(x: &[f64], ci: usize, taps: &Taps, start: usize, n: usize, cols: &mut [f64]) {
    let k = taps.taps_per_row;
    for r in 0..n {
        let trow = &taps.table[(start + r) * k..(start + r + 1) * k];
        for (t, &src) in trow.iter().enumerate() {
            let dst = &mut cols[(r * k + t) * ci..(r * k + t + 1) * ci];
            if src == NO_TAP {
                dst.fill(0.0);
            } else {
                let s = src as usize * ci;
                dst.copy_from_slice(&x[s..s + ci]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    ci: usize,
    taps: &Taps,
    w: &[f64],
    co: usize,
    g: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
) {
    let kdim = taps.taps_per_row * ci;
    let rows_per_chunk = (CHUNK_ELEMS / kdim.max(1)).max(1);
    let mut cols = vec![0.0; rows_per_chunk.min(taps.out_positions) * kdim];
    let k = taps.taps_per_row;
    let mut start = 0;
    while start < taps.out_positions {
        let n = rows_per_chunk.min(taps.out_positions - start);
        let gchunk = &g[start * co..(start + n) * co];
        if let Some(gw) = gw.as_deref_mut() {
            fill_cols(x, ci, taps, start, n, &mut cols[..n * kdim]);
            gemm(kdim, n, co, &cols[..n * kdim], true, gchunk, false, 1.0, gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gcols = &mut cols[..n * kdim];
            gemm(n, co, kdim, gchunk, false, w, true, 0.0, gcols);
            for r in 0..n {
                let trow = &taps.table[(start + r) * k..(start + r + 1) * k];
                for (t, &src) in trow.iter().enumerate() {
                    if src != NO_TAP {
                        let s = src as usize * ci;
                        let gsrc = &gcols[(r * k + t) * ci..(r * k + t + 1) * ci];
                        gx[s..s + ci].iter_mut().zip(gsrc).for_each(|(d, v)| *d += v);
                    }
                }
            }
        }
        start += n;
    }
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

impl Graph {
    /// 2-d convolution of `x[H, W, Ci]` with `w[kh, kw, Ci, Co]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: Pad2d,
        mode: Padding,
    ) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (h, wd, ci) = match *xv.shape() {
            [h, w, c] => (h, w, c),
            ref s => panic!("conv2d expects [H, W, C], got {s:?}"),
        };
        let (kh, kw, wci, co) = match *wv.shape() {
            [a, b, c, d] => (a, b, c, d),
            ref s => panic!("conv2d weight expects [kh, kw, Ci, Co], got {s:?}"),
        };
        assert_eq!(wci, ci, "conv2d: input has {ci} channels, weight expects {wci}");
        assert!(stride > 0);
        let ph = h + pad.top + pad.bottom;
        let pw = wd + pad.left + pad.right;
        assert!(ph >= kh && pw >= kw, "conv2d: kernel larger than padded input");
        let ho = (ph - kh) / stride + 1;
        let wo = (pw - kw) / stride + 1;
        let mut table = Vec::with_capacity(ho * wo * kh * kw);
        for oy in 0..ho {
            for ox in 0..wo {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let iy = (oy * stride + dy) as isize - pad.top as isize;
                        let ix = (ox * stride + dx) as isize - pad.left as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd;
                        let idx = if inside {
                            iy as usize * wd + ix as usize
                        } else if mode == Padding::Circular {
                            wrap(iy, h) * wd + wrap(ix, wd)
                        } else {
                            table.push(NO_TAP);
                            continue;
                        };
                        table.push(idx as u32);
                    }
                }
            }
        }
        let taps = Rc::new(Taps { table, taps_per_row: kh * kw, out_positions: ho * wo });
        self.conv_common(x, w, bias, xv, wv, ci, co, taps, vec![ho, wo, co])
    }

    /// 3-d convolution of `x[X, Y, Z, Ci]` with a cubic kernel
    /// `w[k, k, k, Ci, Co]`, stride 1 and zero "same" padding (`k` odd).
    pub fn conv3d(&self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (nx, ny, nz, ci) = match *xv.shape() {
            [a, b, c, d] => (a, b, c, d),
            ref s => panic!("conv3d expects [X, Y, Z, C], got {s:?}"),
        };
        let (k, wci, co) = match *wv.shape() {
            [a, b, c, d, e] if a == b && b == c => (a, d, e),
            ref s => panic!("conv3d weight expects [k, k, k, Ci, Co], got {s:?}"),
        };
        assert_eq!(wci, ci, "conv3d: input has {ci} channels, weight expects {wci}");
        assert!(k % 2 == 1, "conv3d: kernel size must be odd");
        let r = (k / 2) as isize;
        let mut table = Vec::with_capacity(nx * ny * nz * k * k * k);
        for x0 in 0..nx as isize {
            for y0 in 0..ny as isize {
                for z0 in 0..nz as isize {
                    for dx in -r..=r {
                        for dy in -r..=r {
                            for dz in -r..=r {
                                let (ix, iy, iz) = (x0 + dx, y0 + dy, z0 + dz);
                                let inside = ix >= 0
                                    && iy >= 0
                                    && iz >= 0
                                    && (ix as usize) < nx
                                    && (iy as usize) < ny
                                    && (iz as usize) < nz;
                                table.push(if inside {
                                    ((ix as usize * ny + iy as usize) * nz + iz as usize) as u32
                                } else {
                                    NO_TAP
                                });
                            }
                        }
                    }
                }
            }
        }
        let taps = Rc::new(Taps { table, taps_per_row: k * k * k, out_positions: nx * ny * nz });
        self.conv_common(x, w, bias, xv, wv, ci, co, taps, vec![nx, ny, nz, co])
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_common(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        xv: Rc<Tensor>,
        wv: Rc<Tensor>,
        ci: usize,
        co: usize,
        taps: Rc<Taps>,
        out_shape: Vec<usize>,
    ) -> Var {
        let bv = bias.map(|b| self.value(b));
        if let Some(b) = &bv {
            assert_eq!(b.len(), co, "conv bias length");
        }
        let out = conv_forward(xv.data(), ci, &taps, wv.data(), co, bv.as_ref().map(|b| b.data()));
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.custom_lazy(Tensor::new(out_shape, out), &parents, move || {
            Box::new(move |g, grads| {
                if let Some(b) = bias {
                    if let Some(gb) = grads.acc(b) {
                        for row in g.chunks(co) {
                            gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                        }
                    }
                }
                // gx and gw live in distinct slots; take one out to satisfy
                // the borrow checker.
                let mut gw_buf = grads.acc(w).map(|s| s.to_vec());
                let gx = grads.acc(x);
                conv_backward(xv.data(), ci, &taps, wv.data(), co, g, gx, gw_buf.as_deref_mut());
                if let Some(buf) = gw_buf {
                    if let Some(gw) = grads.acc(w) {
                        gw.copy_from_slice(&buf);
                    }
                }
            })
        })
    }

    /// Transposed 3-d convolution with kernel 2 and stride 2:
    /// `x[X, Y, Z, Ci]`, `w[2, 2, 2, Ci, Co]` to `[2X, 2Y, 2Z, Co]`.
    pub fn conv_transpose3d_2x(&self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (nx, ny, nz, ci) = match *xv.shape() {
            [a, b, c, d] => (a, b, c, d),
            ref s => panic!("conv_transpose3d expects [X, Y, Z, C], got {s:?}"),
        };
        let co = match *wv.shape() {
            [2, 2, 2, c, o] if c == ci => o,
            ref s => panic!("conv_transpose3d weight expects [2, 2, 2, {ci}, Co], got {s:?}"),
        };
        let bv = bias.map(|b| self.value(b));
        let s = nx * ny * nz;
        let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
        let out_index = move |p: usize, t: usize| -> usize {
            let (x0, y0, z0) = (p / (ny * nz), (p / nz) % ny, p % nz);
            let (a, b, c) = (t / 4, (t / 2) % 2, t % 2);
            ((2 * x0 + a) * oy + 2 * y0 + b) * oz + 2 * z0 + c
        };
        let mut out = vec![0.0; ox * oy * oz * co];
        let mut tmp = vec![0.0; s * co];
        for t in 0..8 {
            gemm(s, ci, co, xv.data(), false, &wv.data()[t * ci * co..(t + 1) * ci * co], false, 0.0, &mut tmp);
            for p in 0..s {
                let o = out_index(p, t);
                out[o * co..(o + 1) * co].copy_from_slice(&tmp[p * co..(p + 1) * co]);
            }
        }
        if let Some(b) = &bv {
            for row in out.chunks_mut(co) {
                row.iter_mut().zip(b.data()).for_each(|(d, s)| *d += s);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.custom_lazy(Tensor::new(vec![ox, oy, oz, co], out), &parents, move || {
            Box::new(move |g, grads| {
                if let Some(b) = bias {
                    if let Some(gb) = grads.acc(b) {
                        for row in g.chunks(co) {
                            gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                        }
                    }
                }
                let mut gt = vec![0.0; s * co];
                let mut gw_local = grads.acc(w).map(|_| vec![0.0; 8 * ci * co]);
                let mut gx_local = grads.acc(x).map(|_| vec![0.0; s * ci]);
                for t in 0..8 {
                    for p in 0..s {
                        let o = out_index(p, t);
                        gt[p * co..(p + 1) * co].copy_from_slice(&g[o * co..(o + 1) * co]);
                    }
                    if let Some(gw) = gw_local.as_mut() {
                        gemm(ci, s, co, xv.data(), true, &gt, false, 1.0, &mut gw[t * ci * co..(t + 1) * ci * co]);
                    }
                    if let Some(gx) = gx_local.as_mut() {
                        gemm(s, co, ci, &gt, false, &wv.data()[t * ci * co..(t + 1) * ci * co], true, 1.0, gx);
                    }
                }
                if let (Some(buf), Some(gw)) = (gw_local, grads.acc(w)) {
                    gw.iter_mut().zip(&buf).for_each(|(d, s)| *d += s);
                }
                if let (Some(buf), Some(gx)) = (gx_local, grads.acc(x)) {
                    gx.iter_mut().zip(&buf).for_each(|(d, s)| *d += s);
                }
            })
        })
    }
}
