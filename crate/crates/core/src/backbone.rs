//! Shared-weight convolutional feature pyramid.
//!
//! A stride-4 patchify stem and three stride-2 stages produce bottom-up maps
//! at strides 4, 8, 16 and 32; 1x1 laterals, a nearest-neighbour top-down
//! pathway and 3x3 smoothing convolutions bring every level to `D` channels.

use rand::Rng;
use voxtrack_tape::{Binder, Graph, Pad2d, Padding, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn;

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Output channels `D` of every pyramid level.
    pub channels: usize,
    /// Bottom-up channels of the four stages.
    pub stage_channels: [usize; 4],
    pub groups: usize,
    pub padding: Padding,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { channels: 64, stage_channels: [16, 32, 48, 64], groups: 4, padding: Padding::Zero }
    }
}

/// Four feature maps `[H_i, W_i, D]`, finest (stride 4) first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

impl FeaturePyramid {
    pub fn channels(&self) -> usize {
        self.levels[0].cols()
    }

    pub fn dims(&self, level: usize) -> (usize, usize) {
        let s = self.levels[level - 1].shape();
        (s[0], s[1])
    }
}

/// Spatial dims of the four levels for an `h x w` input (floor division at
/// every stage).
pub fn pyramid_dims(h: usize, w: usize) -> [(usize, usize); 4] {
    let mut d = [(h / 4, w / 4); 4];
    for i in 1..4 {
        d[i] = (d[i - 1].0 / 2, d[i - 1].1 / 2);
    }
    d
}

/// Bottom-up and merged maps of one forward pass.
pub struct BackboneOutput {
    pub bottom_up: [Var; 4],
    pub pyramid: [Var; 4],
}

const DOWN_PAD: Pad2d = Pad2d { top: 1, left: 1, bottom: 0, right: 0 };

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.stage_channels.contains(&0) || self.groups == 0 {
            return Err(Error::Config("backbone channel and group counts must be positive".into()));
        }
        for c in self.stage_channels.iter().chain([&self.channels]) {
            if c % self.groups != 0 {
                return Err(Error::Config(format!(
                    "backbone.groups={} does not divide channel count {c}",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let sc = self.stage_channels;
        let d = self.channels;
        let conv = |store: &mut ParamStore, rng: &mut _, name: &str, k: usize, ci: usize, co: usize| {
            store.init_kaiming(format!("{name}.w"), &[k, k, ci, co], k * k * ci, rng);
            store.init_const(format!("{name}.b"), &[co], 0.0);
        };
        conv(store, rng, "backbone.stem", 4, 3, sc[0]);
        nn::init_norm(store, "backbone.stem_norm", sc[0]);
        for s in 0..4 {
            let cin = if s == 0 { sc[0] } else { sc[s - 1] };
            if s > 0 {
                conv(store, rng, &format!("backbone.stage{s}.down"), 3, cin, sc[s]);
                nn::init_norm(store, &format!("backbone.stage{s}.down_norm"), sc[s]);
            }
            conv(store, rng, &format!("backbone.stage{s}.conv"), 3, sc[s], sc[s]);
            nn::init_norm(store, &format!("backbone.stage{s}.norm"), sc[s]);
            conv(store, rng, &format!("backbone.lateral{s}"), 1, sc[s], d);
            conv(store, rng, &format!("backbone.smooth{s}"), 3, d, d);
        }
    }

    fn conv(&self, b: &Binder, name: &str, x: Var, stride: usize, pad: Pad2d) -> Var {
        let g = b.graph();
        g.conv2d(x, b.param(&format!("{name}.w")), Some(b.param(&format!("{name}.b"))), stride, pad, self.padding)
    }

    fn conv_norm_relu(&self, b: &Binder, name: &str, norm: &str, x: Var, stride: usize, pad: Pad2d) -> Var {
        let y = self.conv(b, name, x, stride, pad);
        b.graph().relu(nn::group_norm(b, norm, y, self.groups))
    }

    /// Runs the network on `image[H, W, 3]` (any size with `H, W >= 32`).
    pub fn forward(&self, b: &Binder, image: Var) -> BackboneOutput {
        let g = b.graph();
        let stem = self.conv_norm_relu(b, "backbone.stem", "backbone.stem_norm", image, 4, Pad2d::default());
        let mut x = stem;
        let mut bottom = Vec::with_capacity(4);
        for s in 0..4 {
            if s > 0 {
                x = self.conv_norm_relu(
                    b,
                    &format!("backbone.stage{s}.down"),
                    &format!("backbone.stage{s}.down_norm"),
                    x,
                    2,
                    DOWN_PAD,
                );
            }
            x = self.conv_norm_relu(
                b,
                &format!("backbone.stage{s}.conv"),
                &format!("backbone.stage{s}.norm"),
                x,
                1,
                Pad2d::same(1),
            );
            bottom.push(x);
        }
        let mut merged: Vec<Var> = vec![bottom[3]; 4];
        let mut top = self.conv(b, "backbone.lateral3", bottom[3], 1, Pad2d::default());
        merged[3] = top;
        for s in (0..3).rev() {
            let lat = self.conv(b, &format!("backbone.lateral{s}"), bottom[s], 1, Pad2d::default());
            let shape = g.shape(lat);
            top = g.add(lat, g.upsample_nearest2d(top, shape[0], shape[1]));
            merged[s] = top;
        }
        let pyramid = [0, 1, 2, 3].map(|s| self.conv(b, &format!("backbone.smooth{s}"), merged[s], 1, Pad2d::same(1)));
        BackboneOutput { bottom_up: [bottom[0], bottom[1], bottom[2], bottom[3]], pyramid }
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w, 3] if h % 32 == 0 && w % 32 == 0 && h > 0 && w > 0 => Ok((h, w)),
        [h, w, 3] => Err(Error::Invalid(format!("image dims {h}x{w} are not multiples of 32"))),
        ref s => Err(Error::Invalid(format!("expected an [H, W, 3] image, got {s:?}"))),
    }
}

pub fn extract_features(cfg: &BackboneConfig, image: &Tensor, params: &ParamStore) -> Result<FeaturePyramid> {
    check_image(image)?;
    let g = Graph::no_grad();
    let b = Binder::frozen(&g, params);
    let out = cfg.forward(&b, g.constant(image.clone()));
    Ok(FeaturePyramid { levels: out.pyramid.map(|v| (*g.value(v)).clone()) })
}

/// Runs both images through the same weights.
pub fn extract_stereo(
    cfg: &BackboneConfig,
    left: &Tensor,
    right: &Tensor,
    params: &ParamStore,
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    if left.shape() != right.shape() {
        return Err(Error::Invalid(format!(
            "stereo images differ in size: {:?} vs {:?}",
            left.shape(),
            right.shape()
        )));
    }
    Ok((extract_features(cfg, left, params)?, extract_features(cfg, right, params)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![h, w, 3], |_| rng.gen_range(0.0..1.0))
    }

    fn setup(cfg: &BackboneConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    #[test]
    fn level_shapes() {
        let cfg = BackboneConfig { channels: 16, stage_channels: [8, 8, 16, 16], ..Default::default() };
        let store = setup(&cfg, 0);
        let pyr = extract_features(&cfg, &random_image(64, 96, 1), &store).unwrap();
        let dims: Vec<_> = (1..=4).map(|l| pyr.dims(l)).collect();
        assert_eq!(dims, vec![(16, 24), (8, 12), (4, 6), (2, 3)]);
        assert!(pyr.levels.iter().all(|t| t.cols() == 16));
        assert!(extract_features(&cfg, &random_image(60, 96, 1), &store).is_err());
    }

    #[test]
    fn floor_rule_on_odd_sizes() {
        assert_eq!(pyramid_dims(400, 880), [(100, 220), (50, 110), (25, 55), (12, 27)]);
        let cfg = BackboneConfig { channels: 4, stage_channels: [4, 4, 4, 4], groups: 2, ..Default::default() };
        let store = setup(&cfg, 0);
        let g = Graph::no_grad();
        let b = Binder::frozen(&g, &store);
        let out = cfg.forward(&b, g.constant(random_image(400, 880, 2)));
        for (v, (h, w)) in out.pyramid.iter().zip(pyramid_dims(400, 880)) {
            assert_eq!(g.shape(*v), vec![h, w, 4]);
        }
    }

    #[test]
    fn stereo_weight_sharing() {
        let cfg = BackboneConfig { channels: 8, stage_channels: [8, 8, 8, 8], ..Default::default() };
        let store = setup(&cfg, 3);
        let (a, b) = (random_image(32, 64, 4), random_image(32, 64, 5));
        let (pa, pb) = extract_stereo(&cfg, &a, &a, &store).unwrap();
        assert_eq!(pa, pb);
        let (l, r) = extract_stereo(&cfg, &a, &b, &store).unwrap();
        let (r2, l2) = extract_stereo(&cfg, &b, &a, &store).unwrap();
        assert_eq!((l, r), (l2, r2));
        assert!(extract_stereo(&cfg, &a, &random_image(64, 64, 0), &store).is_err());
    }

    fn shift_cols(t: &Tensor, by: usize) -> Tensor {
        let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        Tensor::from_fn(vec![h, w, c], |i| {
            let (y, x, k) = (i / (w * c), (i / c) % w, i % c);
            t.data()[(y * w + (x + w - by) % w) * c + k]
        })
    }

    #[test]
    fn translation_equivariance_with_circular_padding() {
        let cfg = BackboneConfig {
            channels: 8,
            stage_channels: [8, 8, 8, 8],
            groups: 2,
            padding: Padding::Circular,
        };
        let store = setup(&cfg, 6);
        let img = random_image(64, 128, 7);
        let run = |im: &Tensor| {
            let g = Graph::no_grad();
            let b = Binder::frozen(&g, &store);
            let o = cfg.forward(&b, g.constant(im.clone()));
            ((*g.value(o.bottom_up[0])).clone(), (*g.value(o.pyramid[0])).clone())
        };
        let (c1, f1) = run(&img);
        // one stride-4 step moves the stride-4 bottom-up map by one cell
        let (c1s, _) = run(&shift_cols(&img, 4));
        assert!(shift_cols(&c1, 1).max_abs_diff(&c1s) < 1e-10);
        // a full stride-32 step moves the merged finest level by eight cells
        let (_, f1s) = run(&shift_cols(&img, 32));
        assert!(shift_cols(&f1, 8).max_abs_diff(&f1s) < 1e-10);
    }

    #[test]
    fn gradient_wrt_input_pixels() {
        let cfg = BackboneConfig { channels: 2, stage_channels: [2, 2, 2, 2], groups: 1, padding: Padding::Zero };
        let store = setup(&cfg, 8);
        let img = random_image(32, 32, 9);
        let r = voxtrack_tape::gradcheck::check(
            |g, v| {
                let b = Binder::frozen(g, &store);
                let o = cfg.forward(&b, v[0]);
                let mut acc = g.sum(g.mul(o.pyramid[0], o.pyramid[0]));
                for l in 1..4 {
                    acc = g.add(acc, g.sum(o.pyramid[l]));
                }
                acc
            },
            &[img],
            1e-5,
        );
        assert!(r.max_rel_error() < 1e-3, "{:?}", r.rel_errors);
    }
}
