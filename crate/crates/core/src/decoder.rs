//! Coarse-to-fine occupancy decoder.
//!
//! Each of the four stages applies two `3x3x3` convolutions with group norm
//! and ReLU, emits that level's occupancy through a `1x1x1` head and a
//! sigmoid, then doubles the resolution for the next stage. The finest
//! stage's activations before its head are the tracking features.

use rand::Rng;
use voxtrack_tape::{Binder, Graph, ParamStore, Tensor, Var};

use crate::costvolume::CostVolume;
use crate::error::{Error, Result};
use crate::geometry::VoxelGridSpec;
use crate::grid::{OccupancyGrid, ProbGrid};
use crate::nn;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    Trilinear,
    Transposed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Channels of the four stages, coarsest first. The last entry is the
    /// width of the tracking features.
    pub channels: [usize; 4],
    pub groups: usize,
    pub upsample: Upsample,
    /// Occupancy threshold; probabilities equal to it count as occupied.
    pub threshold: f64,
    /// Initial bias of the occupancy heads.
    pub head_bias: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: [64, 32, 16, 16],
            groups: 4,
            upsample: Upsample::Trilinear,
            threshold: 0.5,
            head_bias: -1.0,
        }
    }
}

/// Four probability grids (coarsest first), their thresholded versions and
/// the finest-level tracking features `[N_4, D_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyPyramid {
    pub probs: Vec<ProbGrid>,
    pub binary: Vec<OccupancyGrid>,
    pub track_features: Tensor,
}

/// Graph handles of one decoder pass.
pub struct DecoderOutput {
    /// Per-level probabilities, flattened to `[N_i]`.
    pub probs: [Var; 4],
    pub track_features: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNet {
    pub cfg: DecoderConfig,
    pub in_channels: usize,
}

/// Elementwise `p >= theta`.
pub fn threshold(probs: &ProbGrid, theta: f64) -> OccupancyGrid {
    probs.map(|&p| p >= theta)
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.channels.iter().any(|&c| c == 0 || c % self.groups != 0) {
            return Err(Error::Config(format!(
                "decoder.groups={} must divide every decoder channel count {:?}",
                self.groups, self.channels
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("eval.threshold={} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

impl DecoderNet {
    pub fn new(cfg: DecoderConfig, in_channels: usize) -> Self {
        DecoderNet { cfg, in_channels }
    }

    pub fn track_channels(&self) -> usize {
        self.cfg.channels[3]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let ch = self.cfg.channels;
        for k in 0..4 {
            let cin = if k == 0 { self.in_channels } else { ch[k - 1] };
            let p = format!("decoder.stage{k}");
            store.init_kaiming(format!("{p}.conv1.w"), &[3, 3, 3, cin, ch[k]], 27 * cin, rng);
            store.init_const(format!("{p}.conv1.b"), &[ch[k]], 0.0);
            nn::init_norm(store, &format!("{p}.norm1"), ch[k]);
            store.init_kaiming(format!("{p}.conv2.w"), &[3, 3, 3, ch[k], ch[k]], 27 * ch[k], rng);
            store.init_const(format!("{p}.conv2.b"), &[ch[k]], 0.0);
            nn::init_norm(store, &format!("{p}.norm2"), ch[k]);
            store.init_uniform(format!("{p}.head.w"), &[ch[k], 1], (3.0 / ch[k] as f64).sqrt(), rng);
            store.init_const(format!("{p}.head.b"), &[1], self.cfg.head_bias);
            if k < 3 && self.cfg.upsample == Upsample::Transposed {
                store.init_kaiming(format!("{p}.up.w"), &[2, 2, 2, ch[k], ch[k]], ch[k], rng);
                store.init_const(format!("{p}.up.b"), &[ch[k]], 0.0);
            }
        }
    }

    /// Decodes `cv[n_x, n_y, n_z, D]` on the coarsest grid.
    pub fn forward(&self, b: &Binder, cv: Var) -> DecoderOutput {
        let g = b.graph();
        let mut x = cv;
        let mut probs = Vec::with_capacity(4);
        let mut track = None;
        for k in 0..4 {
            let p = format!("decoder.stage{k}");
            let y = g.conv3d(x, b.param(&format!("{p}.conv1.w")), Some(b.param(&format!("{p}.conv1.b"))));
            let y = g.relu(nn::group_norm(b, &format!("{p}.norm1"), y, self.cfg.groups));
            let y = g.conv3d(y, b.param(&format!("{p}.conv2.w")), Some(b.param(&format!("{p}.conv2.b"))));
            let y = g.relu(nn::group_norm(b, &format!("{p}.norm2"), y, self.cfg.groups));
            let logits = nn::linear(b, &format!("{p}.head"), y);
            let n = g.value(logits).len();
            probs.push(g.reshape(g.sigmoid(logits), &[n]));
            if k < 3 {
                x = match self.cfg.upsample {
                    Upsample::Trilinear => g.upsample_trilinear2x(y),
                    Upsample::Transposed => {
                        g.conv_transpose3d_2x(y, b.param(&format!("{p}.up.w")), Some(b.param(&format!("{p}.up.b"))))
                    }
                };
            } else {
                let c = self.track_channels();
                track = Some(g.reshape(y, &[n, c]));
            }
        }
        DecoderOutput { probs: [probs[0], probs[1], probs[2], probs[3]], track_features: track.unwrap() }
    }

    /// Collects one pass into an [`OccupancyPyramid`].
    pub fn assemble(&self, g: &Graph, spec: &VoxelGridSpec, out: &DecoderOutput) -> OccupancyPyramid {
        let probs: Vec<ProbGrid> =
            (0..4).map(|k| ProbGrid::from_vec(spec.dims(k + 1), g.value(out.probs[k]).data().to_vec())).collect();
        let binary = probs.iter().map(|p| threshold(p, self.cfg.threshold)).collect();
        OccupancyPyramid { probs, binary, track_features: (*g.value(out.track_features)).clone() }
    }
}

/// Runs the decoder on a coarsest-grid cost volume.
pub fn decode(net: &DecoderNet, spec: &VoxelGridSpec, cv: &CostVolume, params: &ParamStore) -> Result<OccupancyPyramid> {
    let want = spec.dims(1);
    if cv.grid_dims != want || cv.costs.shape() != [want[0], want[1], want[2], net.in_channels] {
        return Err(Error::Invalid(format!(
            "cost volume {:?} does not match the coarsest grid {:?} x {}",
            cv.costs.shape(),
            want,
            net.in_channels
        )));
    }
    let g = Graph::no_grad();
    let b = Binder::frozen(&g, params);
    let out = net.forward(&b, g.constant(cv.costs.clone()));
    Ok(net.assemble(&g, spec, &out))
}
