//! Scalar-loop reference implementations and fixtures shared by the
//! integration tests and the acceptance harness.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxtrack::backbone::FeaturePyramid;
use voxtrack::costvolume::{CostVolumeNet, CrossView, DmcConfig, Fusion, OffsetMode, StereoFeatures};
use voxtrack::decoder::{DecoderConfig, DecoderNet};
use voxtrack::geometry::{BoundDims, CameraModel, StereoRig, VoxelGridSpec};
use voxtrack::grid::OccupancyGrid;
use voxtrack::losses::{soft_iou_var, tracking_loss_var};
use voxtrack::tape::{Binder, Graph, ParamStore, Tensor, Var};
use voxtrack::tracker::{neighbor_table, track_var};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- scalar nn

fn param<'a>(s: &'a ParamStore, name: &str) -> &'a [f64] {
    s.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

pub fn linear(s: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = param(s, &format!("{name}.w"));
    let b = param(s, &format!("{name}.b"));
    let dout = b.len();
    assert_eq!(w.len(), x.len() * dout);
    let mut out = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for j in 0..dout {
            out[j] += xi * w[i * dout + j];
        }
    }
    out
}

pub fn layer_norm(s: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let gamma = param(s, &format!("{name}.gamma"));
    let beta = param(s, &format!("{name}.beta"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(j, v)| (v - mean) / sd * gamma[j] + beta[j]).collect()
}

pub fn mlp2(s: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let h = linear(s, &format!("{name}.fc1"), x);
    let h: Vec<f64> = layer_norm(s, &format!("{name}.norm"), &h).into_iter().map(|v| v.max(0.0)).collect();
    linear(s, &format!("{name}.fc2"), &h)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ------------------------------------------------------------ geometry

/// Pixel of world point `p` in a camera with identity rotation, or `None`
/// when it is behind the near plane or more than a pixel outside the image.
pub fn project(cam: &CameraModel, p: [f64; 3]) -> Option<(f64, f64)> {
    assert_eq!(cam.rotation, nalgebra::Matrix3::identity());
    let c = [p[0] + cam.translation.x, p[1] + cam.translation.y, p[2] + cam.translation.z];
    if c[2] <= cam.z_near {
        return None;
    }
    let u = cam.fx * c[0] / c[2] + cam.cx;
    let v = cam.fy * c[1] / c[2] + cam.cy;
    let inside = u >= -1.0 && u <= cam.image_width as f64 + 1.0 && v >= -1.0 && v <= cam.image_height as f64 + 1.0;
    inside.then_some((u, v))
}

/// Tent-weighted lookup: the continuous cell coordinate of pixel `u` is
/// `u / stride - 1/2`, clamped into the map, and each cell `k` gets weight
/// `max(0, 1 - |k - x|)`.
pub fn sample(fmap: &Tensor, u: f64, v: f64, stride: usize) -> Vec<f64> {
    let [h, w, c] = [fmap.shape()[0], fmap.shape()[1], fmap.shape()[2]];
    let x = (u / stride as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (v / stride as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let mut out = vec![0.0; c];
    for i in 0..h {
        let wy = (1.0 - (i as f64 - y).abs()).max(0.0);
        if wy == 0.0 {
            continue;
        }
        for j in 0..w {
            let wx = (1.0 - (j as f64 - x).abs()).max(0.0);
            if wx == 0.0 {
                continue;
            }
            for k in 0..c {
                out[k] += wy * wx * fmap.data()[(i * w + j) * c + k];
            }
        }
    }
    out
}

pub fn fourier(x: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for &v in x {
        for b in 0..bands {
            let a = 2f64.powi(b as i32) * std::f64::consts::PI * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Centroids of a grid level, x-outer and z-inner.
pub fn centroids(spec: &VoxelGridSpec, level: usize) -> Vec<[f64; 3]> {
    let d = spec.dims(level);
    let (lo, hi) = (spec.roi_min(), spec.roi_max());
    let mut out = Vec::new();
    for ix in 0..d[0] {
        for iy in 0..d[1] {
            for iz in 0..d[2] {
                let idx = [ix, iy, iz];
                out.push([0, 1, 2].map(|a| lo[a] + (idx[a] as f64 + 0.5) * (hi[a] - lo[a]) / d[a] as f64));
            }
        }
    }
    out
}

// --------------------------------------------------------- cost volume

/// A small stereo setup with random feature pyramids and a randomized
/// cost-volume network.
pub struct TinyStereo {
    pub spec: VoxelGridSpec,
    pub rig: StereoRig,
    pub net: CostVolumeNet,
    pub params: ParamStore,
    pub left: FeaturePyramid,
    pub right: FeaturePyramid,
}

pub fn tiny_stereo(seed: u64, cfg: DmcConfig, channels: usize) -> TinyStereo {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = VoxelGridSpec::new([-1.0, -0.5, 2.0], [1.0, 0.5, 4.0], [2, 1, 2], 4).unwrap();
    let rig = StereoRig::new(CameraModel::new(48.0, 48.0, 32.0, 32.0, 64, 64).unwrap(), 0.3).unwrap();
    let net = CostVolumeNet::new(cfg, spec.clone(), channels);
    let mut params = ParamStore::new();
    net.init(&mut params, &mut rng);
    params.map_values(|_, t| {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    });
    let pyramid = |rng: &mut ChaCha8Rng| FeaturePyramid {
        levels: STRIDES.map(|s| rand_tensor(rng, &[64 / s, 64 / s, channels], 1.0)),
    };
    let left = pyramid(&mut rng);
    let right = pyramid(&mut rng);
    TinyStereo { spec, rig, net, params, left, right }
}

pub fn dmc_config(rng: &mut impl Rng) -> DmcConfig {
    DmcConfig {
        num_samples: rng.gen_range(1..=4),
        num_blocks: 1,
        fourier_bands: rng.gen_range(1..=3),
        offset_mode: if rng.gen_bool(0.5) { OffsetMode::Centered } else { OffsetMode::Literal },
        cross_view: if rng.gen_bool(0.5) { CrossView::Concat } else { CrossView::Average },
        fusion: if rng.gen_bool(0.8) { Fusion::Full } else { Fusion::NoFusion },
        query_level: rng.gen_range(1..=2),
        ffn_mult: 1,
    }
}

impl TinyStereo {
    /// Both views' features at level `scale`, zero where the projection is
    /// unusable.
    pub fn view_features(&self, p: [f64; 3], scale: usize) -> (Vec<f64>, Vec<f64>) {
        let c = self.net.channels;
        let s = STRIDES[scale - 1];
        let look = |cam: &CameraModel, fm: &Tensor| match project(cam, p) {
            Some((u, v)) => sample(fm, u, v, s),
            None => vec![0.0; c],
        };
        (look(&self.rig.left, &self.left.levels[scale - 1]), look(&self.rig.right, &self.right.levels[scale - 1]))
    }

    /// `q = MLP(fourier(p)) + (F_4^L(P^L p) + F_4^R(P^R p)) / 2`.
    pub fn query_oracle(&self, p: [f64; 3]) -> Vec<f64> {
        let (lo, hi) = (self.spec.roi_min(), self.spec.roi_max());
        let norm = [0, 1, 2].map(|a| (p[a] - lo[a]) / (hi[a] - lo[a]));
        let pos = mlp2(&self.params, "dmc.pos", &fourier(&norm, self.net.cfg.fourier_bands));
        let (fl, fr) = self.view_features(p, 4);
        pos.iter().zip(fl.iter().zip(&fr)).map(|(a, (l, r))| a + (l + r) / 2.0).collect()
    }

    /// `c_i = MLP_i(F_i^L ⊕ F_i^R)`, or of their mean without concatenation.
    pub fn scale_cost_oracle(&self, block: usize, scale: usize, p: [f64; 3]) -> Vec<f64> {
        let (fl, fr) = self.view_features(p, scale);
        let x: Vec<f64> = match self.net.cfg.cross_view {
            CrossView::Concat => fl.into_iter().chain(fr).collect(),
            CrossView::Average => fl.iter().zip(&fr).map(|(l, r)| (l + r) / 2.0).collect(),
        };
        mlp2(&self.params, &format!("dmc.block{block}.scale{scale}"), &x)
    }

    pub fn fuse_oracle(&self, block: usize, costs: &[Vec<f64>; 4]) -> Vec<f64> {
        let d = costs[0].len();
        let mean: Vec<f64> = (0..d).map(|j| costs.iter().map(|c| c[j]).sum::<f64>() / 4.0).collect();
        let name = format!("dmc.block{block}.fuse");
        match (self.net.cfg.fusion, self.net.cfg.cross_view) {
            (Fusion::NoFusion, _) => mean,
            (Fusion::Full, CrossView::Concat) => mlp2(&self.params, &name, &costs.concat()),
            (Fusion::Full, CrossView::Average) => mlp2(&self.params, &name, &mean),
        }
    }

    pub fn cost_oracle(&self, block: usize, p: [f64; 3]) -> Vec<f64> {
        let costs = [1, 2, 3, 4].map(|i| self.scale_cost_oracle(block, i, p));
        self.fuse_oracle(block, &costs)
    }

    /// `sum_s A_s c(p + delta_s) W_s` for the query at centroid `p` with
    /// normalized state `h`.
    pub fn aggregate_oracle(&self, block: usize, p: [f64; 3], h: &[f64]) -> Vec<f64> {
        let ns = self.net.cfg.num_samples;
        let d = self.net.channels;
        let l1 = self.spec.voxel_size(1);
        let logits = mlp2(&self.params, &format!("dmc.block{block}.offset"), h);
        let gates: Vec<f64> = linear(&self.params, &format!("dmc.block{block}.attn"), h).into_iter().map(sigmoid).collect();
        let mix = param(&self.params, &format!("dmc.block{block}.mix"));
        let mut out = vec![0.0; d];
        for s in 0..ns {
            let delta = [0, 1, 2].map(|a| {
                let sg = sigmoid(logits[3 * s + a]);
                match self.net.cfg.offset_mode {
                    OffsetMode::Centered => (sg - 0.5) * l1,
                    OffsetMode::Literal => sg * l1,
                }
            });
            let c = self.cost_oracle(block, [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]]);
            for j in 0..d {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += c[i] * mix[(s * d + i) * d + j];
                }
                out[j] += gates[s] * acc;
            }
        }
        out
    }

    pub fn with_graph<T>(&self, f: impl FnOnce(&Graph, &Binder, &StereoFeatures) -> T) -> T {
        let g = Graph::no_grad();
        let b = Binder::frozen(&g, &self.params);
        let feats = StereoFeatures::constant(&g, &self.left, &self.right, &self.rig);
        f(&g, &b, &feats)
    }
}

/// Random points around the ROI; some project outside the images or lie
/// behind the cameras.
pub fn probe_points(rng: &mut impl Rng, n: usize) -> Vec<[f64; 3]> {
    let mut pts: Vec<[f64; 3]> =
        (0..n).map(|_| [rng.gen_range(-1.5..1.5), rng.gen_range(-0.8..0.8), rng.gen_range(1.5..4.5)]).collect();
    pts.push([3.0, 0.0, 2.0]);
    pts.push([0.0, 0.0, -1.0]);
    pts.push([0.0, 0.0, 0.05]);
    pts
}

pub fn points_tensor(pts: &[[f64; 3]]) -> Tensor {
    Tensor::new(vec![pts.len(), 3], pts.iter().flatten().copied().collect())
}

/// Largest deviation of each cost-volume equation from its scalar oracle
/// on one random instance: query encoding, per-scale cost, scale fusion
/// and sample aggregation.
pub fn cost_volume_oracle_errors(seed: u64) -> [(&'static str, f64); 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = dmc_config(&mut rng);
    let d = rng.gen_range(2..=8);
    let t = tiny_stereo(seed ^ 0x5eed, cfg, d);

    let enc = voxtrack::costvolume::encode_queries(&t.net, &t.left, &t.right, &t.rig, &t.params).unwrap();
    let cents = centroids(&t.spec, t.net.cfg.query_level);
    let want: Vec<f64> = cents.iter().flat_map(|&p| t.query_oracle(p)).collect();
    let e_query = max_abs_diff(enc.encodings.data(), &want);

    let pts = probe_points(&mut rng, 6);
    let e_scale = t.with_graph(|g, b, f| {
        let pv = g.constant(points_tensor(&pts));
        (1..=4)
            .map(|i| {
                let got = g.value(t.net.per_scale_cost(b, 0, i, pv, f));
                let want: Vec<f64> = pts.iter().flat_map(|&p| t.scale_cost_oracle(0, i, p)).collect();
                max_abs_diff(got.data(), &want)
            })
            .fold(0.0, f64::max)
    });

    let costs: [Tensor; 4] = [0; 4].map(|_| rand_tensor(&mut rng, &[5, d], 1.0));
    let e_fuse = t.with_graph(|g, b, _| {
        let vars = [0, 1, 2, 3].map(|i| g.constant(costs[i].clone()));
        let got = g.value(t.net.fuse_scales(b, 0, vars));
        let want: Vec<f64> = (0..5).flat_map(|r| t.fuse_oracle(0, &[0, 1, 2, 3].map(|i| costs[i].row(r).to_vec()))).collect();
        max_abs_diff(got.data(), &want)
    });

    let h = rand_tensor(&mut rng, &[cents.len(), d], 1.0);
    let e_agg = t.with_graph(|g, b, f| {
        let got = g.value(t.net.aggregate_costs(b, 0, g.constant(h.clone()), f));
        let want: Vec<f64> = cents.iter().enumerate().flat_map(|(n, &p)| t.aggregate_oracle(0, p, h.row(n))).collect();
        max_abs_diff(got.data(), &want)
    });
    [("query encoding", e_query), ("per-scale cost", e_scale), ("scale fusion", e_fuse), ("sample aggregation", e_agg)]
}

// ------------------------------------------------------------- matching

pub fn coords(dims: [usize; 3], flat: usize) -> [i64; 3] {
    [(flat / (dims[1] * dims[2])) as i64, ((flat / dims[2]) % dims[1]) as i64, (flat % dims[2]) as i64]
}

/// Softmax matching by brute force over the whole `t + 1` grid: for every
/// occupied source, the probabilities of every candidate (keyed by flat
/// index) and the expected motion in voxels.
pub fn matching_oracle(
    feat_t: &Tensor,
    occ_t: &OccupancyGrid,
    feat_t1: &Tensor,
    occ_t1: &OccupancyGrid,
    bound: BoundDims,
    match_all: bool,
    tau: f64,
) -> Vec<(BTreeMap<usize, f64>, [f64; 3])> {
    let dims = occ_t.dims;
    let half = bound.half();
    let unit = |r: &[f64]| {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect::<Vec<_>>()
    };
    let mut out = Vec::new();
    for s in 0..occ_t.len() {
        if !occ_t.data[s] {
            continue;
        }
        let cs = coords(dims, s);
        let a = unit(feat_t.row(s));
        let mut logits = BTreeMap::new();
        for t in 0..occ_t1.len() {
            let ct = coords(dims, t);
            let near = (0..3).all(|k| (ct[k] - cs[k]).abs() <= half[k]);
            if near && (match_all || occ_t1.data[t]) {
                let b = unit(feat_t1.row(t));
                logits.insert(t, tau * a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>());
            }
        }
        let mx = logits.values().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.values().map(|l| (l - mx).exp()).sum();
        let probs: BTreeMap<usize, f64> = logits.iter().map(|(&t, l)| (t, (l - mx).exp() / z)).collect();
        let mut m = [0.0; 3];
        if !probs.is_empty() {
            for (&t, &p) in &probs {
                let ct = coords(dims, t);
                for k in 0..3 {
                    m[k] += p * ct[k] as f64;
                }
            }
            for k in 0..3 {
                m[k] -= cs[k] as f64;
            }
        }
        out.push((probs, m));
    }
    out
}

pub struct MatchInstance {
    pub feat_t: Tensor,
    pub occ_t: OccupancyGrid,
    pub feat_t1: Tensor,
    pub occ_t1: OccupancyGrid,
    pub bound: BoundDims,
    pub match_all: bool,
    pub tau: f64,
}

/// Grids up to `max_dims`, random occupancy, features and odd bounds.
pub fn match_instance(rng: &mut impl Rng, max_dims: [usize; 3]) -> MatchInstance {
    let dims = max_dims.map(|m| rng.gen_range(1..=m));
    let n: usize = dims.iter().product();
    let c = rng.gen_range(1..=8);
    let density = rng.gen_range(0.2..0.9);
    let mut occ = || OccupancyGrid::from_vec(dims, (0..n).map(|_| rng.gen_bool(density)).collect());
    let occ_t = occ();
    let occ_t1 = occ();
    let odd = |rng: &mut dyn rand::RngCore, m: usize| 2 * rng.gen_range(0..=m) + 1;
    let bound = BoundDims::new(odd(rng, 2), odd(rng, 1), odd(rng, 2)).unwrap();
    MatchInstance {
        feat_t: rand_tensor(rng, &[n, c], 1.0),
        occ_t,
        feat_t1: rand_tensor(rng, &[n, c], 1.0),
        occ_t1,
        bound,
        match_all: rng.gen_bool(0.5),
        tau: rng.gen_range(0.5..20.0),
    }
}

/// Largest deviations from the brute-force oracle of the bounded matcher's
/// probabilities and motions and of the differentiable tracking path.
pub fn matching_oracle_errors(seed: u64) -> [(&'static str, f64); 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = match_instance(&mut rng, [4, 4, 4]);
    let oracle = matching_oracle(&m.feat_t, &m.occ_t, &m.feat_t1, &m.occ_t1, m.bound, m.match_all, m.tau);
    let dims = m.occ_t.dims;

    let s = voxtrack::tracker::bounded_similarity(&m.feat_t, &m.occ_t, &m.feat_t1, &m.occ_t1, m.bound, m.match_all).unwrap();
    let mut e_prob: f64 = 0.0;
    let empty = oracle.iter().any(|(p, _)| p.is_empty());
    let motions = if empty {
        // the checked API refuses sources without candidates; compare via
        // the tracker, which leaves them at zero
        None
    } else {
        let p = voxtrack::tracker::match_distribution(&s, m.tau).unwrap();
        for (i, (probs, _)) in oracle.iter().enumerate() {
            for (j, &t) in p.targets[i * p.k..(i + 1) * p.k].iter().enumerate() {
                let want = if t == voxtrack::tracker::NO_TARGET { 0.0 } else { probs[&(t as usize)] };
                e_prob = e_prob.max((p.row(i)[j] - want).abs());
            }
            let listed = p.targets[i * p.k..(i + 1) * p.k].iter().filter(|&&t| t != voxtrack::tracker::NO_TARGET).count();
            assert_eq!(listed, probs.len(), "candidate sets differ");
        }
        Some(p.motions())
    };
    let want: Vec<f64> = oracle.iter().flat_map(|(_, mv)| *mv).collect();
    let mut e_motion = 0.0;
    if let Some(mv) = motions {
        e_motion = max_abs_diff(&mv.concat(), &want);
    }

    let g = Graph::no_grad();
    let sources = m.occ_t.occupied();
    let table = Rc::new(neighbor_table(dims, &sources, m.bound, (!m.match_all).then_some(&m.occ_t1)));
    let v = track_var(
        &g,
        g.constant(m.feat_t.clone()),
        g.constant(m.feat_t1.clone()),
        g.constant(Tensor::new(vec![1], vec![(m.tau - voxtrack::tracker::TAU_FLOOR).ln()])),
        dims,
        &sources,
        table,
        m.bound.volume(),
    );
    let dense = g.value(v);
    let got: Vec<f64> = sources.iter().flat_map(|&s| dense.row(s).to_vec()).collect();
    let e_var = max_abs_diff(&got, &want);
    [("match probabilities", e_prob), ("motion M = P G1 - G0", e_motion), ("differentiable tracking", e_var)]
}

/// `M = P G_{t+1} - G_t` written out for a random row-stochastic `P`.
pub fn motion_formula_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nt, nt1) = (rng.gen_range(1..6), rng.gen_range(1..9));
    let mut p = vec![0.0; nt * nt1];
    for row in p.chunks_mut(nt1) {
        row.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let g1: Vec<[f64; 3]> = (0..nt1).map(|_| [0; 3].map(|_| rng.gen_range(0..8) as f64)).collect();
    let g0: Vec<[f64; 3]> = (0..nt).map(|_| [0; 3].map(|_| rng.gen_range(0..8) as f64)).collect();
    let got = voxtrack::tracker::motion_vectors(&p, &g1, &g0);
    let mut err: f64 = 0.0;
    for i in 0..nt {
        for k in 0..3 {
            let mut e = -g0[i][k];
            for j in 0..nt1 {
                e += p[i * nt1 + j] * g1[j][k];
            }
            err = err.max((e - got[i][k]).abs());
        }
    }
    err
}

// ------------------------------------------------------------ gradients

/// Worst per-parameter relative error `|a - n| / max(|a|, |n|)` between
/// reverse-mode gradients of `loss` and central differences, over at most
/// `per_param` entries of each parameter, with that parameter's name.
pub fn param_gradcheck(
    params: &ParamStore,
    loss: impl Fn(&Graph, &Binder) -> Var,
    per_param: usize,
    h: f64,
) -> (f64, String) {
    let g = Graph::new();
    let b = Binder::new(&g, params);
    let l = loss(&g, &b);
    let analytic = b.grads(&g.backward(l));
    let eval = |store: &ParamStore| {
        let g = Graph::no_grad();
        let b = Binder::frozen(&g, store);
        g.value(loss(&g, &b)).item()
    };
    let mut work = params.clone();
    let mut worst = (0.0, String::new());
    for (name, grad) in &analytic {
        let len = grad.len();
        let step = (len / per_param).max(1);
        let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for j in (0..len).step_by(step).take(per_param) {
            let orig = work.get(name).unwrap().data()[j];
            work.get_mut(name).unwrap().data_mut()[j] = orig + h;
            let plus = eval(&work);
            work.get_mut(name).unwrap().data_mut()[j] = orig - h;
            let minus = eval(&work);
            work.get_mut(name).unwrap().data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * h);
            d2 += (num - grad[j]).powi(2);
            a2 += grad[j] * grad[j];
            n2 += num * num;
        }
        let rel = if a2.max(n2) == 0.0 { 0.0 } else { d2.sqrt() / a2.sqrt().max(n2.sqrt()) };
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    worst
}

/// Soft-IoU loss gradient with respect to the probabilities.
pub fn soft_iou_gradcheck(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [3, 2, 4];
    let gt = OccupancyGrid::from_vec(dims, (0..24).map(|_| rng.gen_bool(0.4)).collect());
    let probs = Tensor::from_fn(vec![24], |_| rng.gen_range(0.05..0.95));
    let r = voxtrack::tape::gradcheck::check(|g, v| soft_iou_var(g, v[0], &gt), &[probs], 1e-6);
    r.max_rel_error()
}

/// One cost-volume block (offsets, bilinear sampling, fusion and
/// aggregation) with respect to its parameters and to the features.
pub fn dmc_gradcheck(seed: u64) -> (f64, String) {
    let cfg = DmcConfig {
        num_samples: 2,
        num_blocks: 1,
        fourier_bands: 2,
        offset_mode: OffsetMode::Centered,
        cross_view: CrossView::Concat,
        fusion: Fusion::Full,
        query_level: 1,
        ffn_mult: 1,
    };
    let mut t = tiny_stereo(seed, cfg, 3);
    // moderate weights keep the pre-activations away from ReLU kinks
    t.params.map_values(|_, x| x.data_mut().iter_mut().for_each(|v| *v *= 0.7));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let proj = rand_tensor(&mut rng, &[4 * 3], 1.0);
    let net = t.net.clone();
    let (left, right, rig) = (t.left.clone(), t.right.clone(), t.rig.clone());
    let param_err = param_gradcheck(
        &t.params,
        |g, b| {
            let f = StereoFeatures::constant(g, &left, &right, &rig);
            let out = net.forward(b, &f);
            g.sum(g.mul(g.reshape(out, &[12]), g.constant(proj.clone())))
        },
        6,
        1e-6,
    );
    let store = t.params.clone();
    let feats = voxtrack::tape::gradcheck::check(
        |g, v| {
            let b = Binder::frozen(g, &store);
            let f = StereoFeatures { left: [v[0], v[1], v[2], v[3]], right: [v[4], v[5], v[6], v[7]], rig: &rig };
            let out = net.forward(&b, &f);
            g.sum(g.mul(g.reshape(out, &[12]), g.constant(proj.clone())))
        },
        &[left.levels.to_vec(), right.levels.to_vec()].concat(),
        1e-6,
    );
    if feats.max_rel_error() > param_err.0 {
        (feats.max_rel_error(), "pyramid features".into())
    } else {
        param_err
    }
}

/// Decoder (all four heads and tracking features) with respect to its
/// parameters and its input cost volume.
pub fn decoder_gradcheck(seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // two channels per group: with one, the norm cancels conv biases and
    // their true gradient is exactly zero
    let cfg = DecoderConfig { channels: [4, 4, 4, 4], groups: 2, ..DecoderConfig::default() };
    let net = DecoderNet::new(cfg, 4);
    let mut params = ParamStore::new();
    net.init(&mut params, &mut rng);
    params.map_values(|_, t| t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2)));
    let cv = rand_tensor(&mut rng, &[2, 1, 2, 4], 1.0);
    let dims = [[2, 1, 2], [4, 2, 4], [8, 4, 8], [16, 8, 16]];
    let gts: Vec<OccupancyGrid> =
        dims.iter().map(|&d| OccupancyGrid::from_vec(d, (0..d.iter().product()).map(|_| rng.gen_bool(0.3)).collect())).collect();
    let n4 = 16 * 8 * 16;
    let tproj = rand_tensor(&mut rng, &[n4 * 4], 1.0);
    let loss = |g: &Graph, b: &Binder, x: Var| {
        let out = net.forward(b, x);
        let mut acc = g.sum(g.mul(g.reshape(out.track_features, &[n4 * 4]), g.constant(tproj.clone())));
        for k in 0..4 {
            acc = g.add(acc, soft_iou_var(g, out.probs[k], &gts[k]));
        }
        acc
    };
    let p = param_gradcheck(&params, |g, b| loss(g, b, g.constant(cv.clone())), 4, 1e-6);
    let x = voxtrack::tape::gradcheck::check(|g, v| loss(g, &Binder::frozen(g, &params), v[0]), &[cv.clone()], 1e-6);
    if x.max_rel_error() > p.0 {
        (x.max_rel_error(), "input cost volume".into())
    } else {
        p
    }
}

/// Tracking loss through bounded matching with respect to both frames'
/// features and the logit scale.
pub fn tracking_gradcheck(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [4, 2, 4];
    let n = 32;
    let occ = OccupancyGrid::from_vec(dims, (0..n).map(|_| rng.gen_bool(0.5)).collect());
    let sources = occ.occupied();
    let bound = BoundDims::new(3, 1, 3).unwrap();
    let table = Rc::new(neighbor_table(dims, &sources, bound, None));
    let gt: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), 0.0, rng.gen_range(-1.0..1.0)]).collect();
    let inputs = [rand_tensor(&mut rng, &[n, 3], 1.0), rand_tensor(&mut rng, &[n, 3], 1.0), Tensor::new(vec![1], vec![1.2])];
    let r = voxtrack::tape::gradcheck::check(
        |g, v| {
            let m = track_var(g, v[0], v[1], v[2], dims, &sources, table.clone(), bound.volume());
            tracking_loss_var(g, m, &gt, 0.5)
        },
        &inputs,
        1e-6,
    );
    r.max_rel_error()
}

// ---------------------------------------------------- bounded vs dense

/// Compares bounded and dense similarity on one instance: every stored
/// slot must equal its dense entry bit for bit, every dense entry outside
/// the slots must be `-inf`, the bounded path must store exactly
/// `N_t * b_x * b_y * b_z` values, and both motion fields must agree.
pub fn bounded_dense_agreement(m: &MatchInstance) -> Result<(), String> {
    use voxtrack::tracker::{bounded_similarity, dense_similarity, NO_TARGET};
    let b = bounded_similarity(&m.feat_t, &m.occ_t, &m.feat_t1, &m.occ_t1, m.bound, m.match_all).map_err(|e| e.to_string())?;
    let d = dense_similarity(&m.feat_t, &m.occ_t, &m.feat_t1, &m.occ_t1, m.bound, m.match_all, 64).map_err(|e| e.to_string())?;
    if b.sources != d.sources {
        return Err("source lists differ".into());
    }
    let k = m.bound.volume();
    if b.stored_elements() != b.sources.len() * k {
        return Err(format!("bounded path stores {} values for {} sources x {k}", b.stored_elements(), b.sources.len()));
    }
    let n = d.columns.len();
    let col_of: BTreeMap<usize, usize> = d.columns.iter().enumerate().map(|(j, &t)| (t, j)).collect();
    for i in 0..b.sources.len() {
        let mut seen = vec![false; n];
        for j in 0..k {
            let t = b.targets[i * k + j];
            if t == NO_TARGET {
                continue;
            }
            let col = col_of[&(t as usize)];
            seen[col] = true;
            let (x, y) = (b.values[i * k + j], d.values[i * n + col]);
            if x.to_bits() != y.to_bits() {
                return Err(format!("source {i} target {t}: bounded {x:e} vs dense {y:e}"));
            }
        }
        for (col, s) in seen.iter().enumerate() {
            if !s && d.values[i * n + col] != f64::NEG_INFINITY {
                return Err(format!("source {i}: dense column {col} outside the box is not masked"));
            }
        }
    }
    if let Ok(p) = voxtrack::tracker::match_distribution(&b, m.tau) {
        let pd = voxtrack::tracker::dense_match_distribution(&d, m.tau);
        let f = |idx: &[usize]| idx.iter().map(|&t| coords(d.dims, t).map(|v| v as f64)).collect::<Vec<_>>();
        let dense = voxtrack::tracker::motion_vectors(&pd, &f(&d.columns), &f(&d.sources));
        let err = max_abs_diff(&p.motions().concat(), &dense.concat());
        if err > 1e-12 {
            return Err(format!("motion fields differ by {err:e}"));
        }
    }
    Ok(())
}

// ------------------------------------------------------------ pipeline

/// Desk grid with a very small network, paths under `dir`.
pub fn tiny_run_config(dir: &std::path::Path) -> voxtrack::pipeline::RunConfig {
    let mut cfg = voxtrack::pipeline::RunConfig::default();
    cfg.backbone.channels = 8;
    cfg.backbone.stage_channels = [4, 4, 8, 8];
    cfg.backbone.groups = 2;
    cfg.dmc.num_samples = 2;
    cfg.dmc.num_blocks = 1;
    cfg.dmc.fourier_bands = 2;
    cfg.decoder.channels = [8, 4, 4, 4];
    cfg.decoder.groups = 2;
    cfg.train.batch = 2;
    cfg.train.checkpoint = dir.join("model.ckpt");
    cfg.data.train = dir.join("train");
    cfg.synth_out = dir.join("train");
    cfg.eval.out = dir.join("eval");
    cfg
}

/// Writes `n` synthetic samples to `cfg.synth_out`.
pub fn generate(cfg: &voxtrack::pipeline::RunConfig, n: usize, seed: u64) -> voxtrack::synthdata::DatasetStats {
    let synth = voxtrack::synthdata::SynthConfig { num_samples: n, seed, ..cfg.synth.clone() };
    let rig = cfg.camera.rig().unwrap();
    let bound = cfg.tracker.bound(cfg.grid.finest_size()).unwrap();
    voxtrack::synthdata::generate_dataset(&synth, &cfg.grid, &rig, 1.0 / cfg.tracker.fps, bound, &cfg.synth_out).unwrap()
}
