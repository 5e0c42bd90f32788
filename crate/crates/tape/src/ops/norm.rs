//! Batch-independent normalization layers.

use crate::{Graph, Tensor, Var};

impl Graph {
    /// Per-row normalization of `x[N, C]` with affine `gamma[C]`, `beta[C]`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let c = xv.cols();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * is;
            }
        }
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for j in 0..c {
                out[r * c + j] = xhat[r * c + j] * gv.data()[j] + bv.data()[j];
            }
        }
        self.custom_lazy(Tensor::new(xv.shape(), out), &[x, gamma, beta], move || {
            Box::new(move |g, grads| {
                if let Some(gg) = grads.acc(gamma) {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gb) = grads.acc(beta) {
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                }
                if let Some(gx) = grads.acc(x) {
                    let mut gxhat = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            gxhat[j] = g[r * c + j] * gv.data()[j];
                        }
                        let m1 = gxhat.iter().sum::<f64>() / c as f64;
                        let m2 = gxhat
                            .iter()
                            .zip(&xhat[r * c..(r + 1) * c])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += inv_std[r] * (gxhat[j] - m1 - xhat[r * c + j] * m2);
                        }
                    }
                }
            })
        })
    }

    /// Group normalization of a channels-last map `x[..., C]`: statistics are
    /// taken over every spatial position and the `C / groups` channels of each
    /// group.
    pub fn group_norm(&self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let c = xv.cols();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let s = xv.rows();
        let cg = c / groups;
        let count = (s * cg) as f64;
        let data = xv.data();
        let mut mean = vec![0.0; groups];
        let mut inv_std = vec![0.0; groups];
        for p in 0..s {
            for j in 0..c {
                mean[j / cg] += data[p * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; groups];
        for p in 0..s {
            for j in 0..c {
                let d = data[p * c + j] - mean[j / cg];
                var[j / cg] += d * d;
            }
        }
        for k in 0..groups {
            inv_std[k] = 1.0 / (var[k] / count + eps).sqrt();
        }
        let mut xhat = vec![0.0; s * c];
        let mut out = vec![0.0; s * c];
        for p in 0..s {
            for j in 0..c {
                let h = (data[p * c + j] - mean[j / cg]) * inv_std[j / cg];
                xhat[p * c + j] = h;
                out[p * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.custom_lazy(Tensor::new(xv.shape(), out), &[x, gamma, beta], move || {
            Box::new(move |g, grads| {
                if let Some(gg) = grads.acc(gamma) {
                    for p in 0..s {
                        for j in 0..c {
                            gg[j] += g[p * c + j] * xhat[p * c + j];
                        }
                    }
                }
                if let Some(gb) = grads.acc(beta) {
                    for p in 0..s {
                        for j in 0..c {
                            gb[j] += g[p * c + j];
                        }
                    }
                }
                if let Some(gx) = grads.acc(x) {
                    let mut m1 = vec![0.0; groups];
                    let mut m2 = vec![0.0; groups];
                    for p in 0..s {
                        for j in 0..c {
                            let gh = g[p * c + j] * gv.data()[j];
                            m1[j / cg] += gh;
                            m2[j / cg] += gh * xhat[p * c + j];
                        }
                    }
                    for k in 0..groups {
                        m1[k] /= count;
                        m2[k] /= count;
                    }
                    for p in 0..s {
                        for j in 0..c {
                            let k = j / cg;
                            let gh = g[p * c + j] * gv.data()[j];
                            gx[p * c + j] += inv_std[k] * (gh - m1[k] - xhat[p * c + j] * m2[k]);
                        }
                    }
                }
            })
        })
    }
}
