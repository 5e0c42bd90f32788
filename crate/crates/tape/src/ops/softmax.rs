use std::rc::Rc;

use crate::{Graph, Tensor, Var};

/// Row-wise softmax over the entries whose mask bit is set. Masked entries
/// (and rows with no unmasked entry) come out exactly zero.
pub fn masked_softmax_rows(logits: &[f64], mask: &[bool], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for ((row, m), dst) in logits.chunks(k).zip(mask.chunks(k)).zip(out.chunks_mut(k)) {
        let mut max = f64::NEG_INFINITY;
        for (&v, &ok) in row.iter().zip(m) {
            if ok && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut z = 0.0;
        for ((&v, &ok), d) in row.iter().zip(m).zip(dst.iter_mut()) {
            if ok {
                *d = (v - max).exp();
                z += *d;
            }
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

impl Graph {
    /// Masked row softmax of `logits[N, K]`; see [`masked_softmax_rows`].
    pub fn masked_softmax(&self, logits: Var, mask: Rc<Vec<bool>>) -> Var {
        let lv = self.value(logits);
        let k = lv.cols();
        assert_eq!(mask.len(), lv.len(), "masked_softmax: mask size");
        let p = masked_softmax_rows(lv.data(), &mask, k);
        let pv = Rc::new(p.clone());
        self.custom(
            Tensor::new(lv.shape(), p),
            &[logits],
            Box::new(move |g, grads| {
                if let Some(gl) = grads.acc(logits) {
                    for ((prow, grow), dst) in pv.chunks(k).zip(g.chunks(k)).zip(gl.chunks_mut(k)) {
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((d, &pi), &gi) in dst.iter_mut().zip(prow).zip(grow) {
                            *d += pi * (gi - dot);
                        }
                    }
                }
            }),
        )
    }
}
