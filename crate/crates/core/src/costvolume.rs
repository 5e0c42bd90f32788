//! Voxel-query cost volume built by deformable cross-attention into the two
//! feature pyramids.
//!
//! Every query voxel samples `N_s` learned 3D points around its centroid,
//! projects each into both images at all four pyramid levels, turns the
//! left/right feature pair of each level into a per-scale matching cost,
//! fuses the four scales and aggregates the samples with per-sample gates and
//! mixing matrices. Blocks are pre-norm residual: `q += agg(LN(q))`, then
//! `q += ffn(LN(q))`.

use std::rc::Rc;

use rand::Rng;
use voxtrack_tape::{Binder, Graph, ParamStore, Tensor, Var};

use crate::backbone::{FeaturePyramid, STRIDES};
use crate::error::{Error, Result};
use crate::geometry::{fourier_encode, StereoRig, Vec3, VoxelGridSpec};
use crate::nn;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffsetMode {
    /// `(sigmoid - 0.5) * l_1`, symmetric around the centroid.
    Centered,
    /// `sigmoid * l_1`.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossView {
    Concat,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Scale costs concatenated (or averaged) and passed through the fusion MLP.
    Full,
    /// Mean of the scale costs with no fusion MLP.
    NoFusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmcConfig {
    pub num_samples: usize,
    pub num_blocks: usize,
    pub fourier_bands: usize,
    pub offset_mode: OffsetMode,
    pub cross_view: CrossView,
    pub fusion: Fusion,
    /// Grid level whose voxels act as queries (1 = coarsest).
    pub query_level: usize,
    pub ffn_mult: usize,
}

impl Default for DmcConfig {
    fn default() -> Self {
        DmcConfig {
            num_samples: 8,
            num_blocks: 2,
            fourier_bands: 8,
            offset_mode: OffsetMode::Centered,
            cross_view: CrossView::Concat,
            fusion: Fusion::Full,
            query_level: 1,
            ffn_mult: 2,
        }
    }
}

/// Encoded voxel queries, one row per voxel of the query grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelQuerySet {
    pub encodings: Tensor,
    pub centroids: Vec<Vec3>,
    pub grid_dims: [usize; 3],
}

/// `[n_x, n_y, n_z, D]` matching costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub costs: Tensor,
    pub grid_dims: [usize; 3],
}

/// Pyramids of both views bound to a graph, plus the rig projecting into them.
#[derive(Clone, Copy)]
pub struct StereoFeatures<'a> {
    pub left: [Var; 4],
    pub right: [Var; 4],
    pub rig: &'a StereoRig,
}

impl<'a> StereoFeatures<'a> {
    pub fn constant(g: &Graph, left: &FeaturePyramid, right: &FeaturePyramid, rig: &'a StereoRig) -> Self {
        StereoFeatures {
            left: [0, 1, 2, 3].map(|i| g.constant(left.levels[i].clone())),
            right: [0, 1, 2, 3].map(|i| g.constant(right.levels[i].clone())),
            rig,
        }
    }
}

/// Cost-volume network: configuration, grid and channel width.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolumeNet {
    pub cfg: DmcConfig,
    pub spec: VoxelGridSpec,
    pub channels: usize,
}

fn mask_tensor(mask: &[bool]) -> Tensor {
    Tensor::new(vec![mask.len()], mask.iter().map(|&m| m as u8 as f64).collect())
}

impl DmcConfig {
    pub fn validate(&self, spec: &VoxelGridSpec) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("dmc.num_samples must be at least 1".into()));
        }
        if self.fourier_bands == 0 {
            return Err(Error::Config("dmc.fourier_bands must be at least 1".into()));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("dmc.ffn_mult must be at least 1".into()));
        }
        if !(1..=spec.num_levels()).contains(&self.query_level) {
            return Err(Error::Config(format!(
                "dmc.query_level={} outside 1..={}",
                self.query_level,
                spec.num_levels()
            )));
        }
        Ok(())
    }
}

impl CostVolumeNet {
    pub fn new(cfg: DmcConfig, spec: VoxelGridSpec, channels: usize) -> Self {
        CostVolumeNet { cfg, spec, channels }
    }

    pub fn query_dims(&self) -> [usize; 3] {
        self.spec.dims(self.cfg.query_level)
    }

    pub fn num_queries(&self) -> usize {
        self.spec.num_voxels(self.cfg.query_level)
    }

    fn scale_in(&self) -> usize {
        match self.cfg.cross_view {
            CrossView::Concat => 2 * self.channels,
            CrossView::Average => self.channels,
        }
    }

    fn fuse_in(&self) -> usize {
        match self.cfg.cross_view {
            CrossView::Concat => 4 * self.channels,
            CrossView::Average => self.channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.channels;
        let ns = self.cfg.num_samples;
        nn::init_mlp2(store, rng, "dmc.pos", 6 * self.cfg.fourier_bands, d, d);
        for k in 0..self.cfg.num_blocks {
            let p = format!("dmc.block{k}");
            nn::init_norm(store, &format!("{p}.norm1"), d);
            nn::init_mlp2(store, rng, &format!("{p}.offset"), d, d, 3 * ns);
            // start sampling close to the centroid
            store.init_uniform(format!("{p}.offset.fc2.w"), &[d, 3 * ns], 0.1 / (d as f64).sqrt(), rng);
            nn::init_linear(store, rng, &format!("{p}.attn"), d, ns);
            store.init_uniform(format!("{p}.attn.w"), &[d, ns], 0.1 / (d as f64).sqrt(), rng);
            store.init_uniform(format!("{p}.mix"), &[ns, d, d], (12.0 / (ns * d) as f64).sqrt(), rng);
            for i in 1..=4 {
                nn::init_mlp2(store, rng, &format!("{p}.scale{i}"), self.scale_in(), d, d);
            }
            if self.cfg.fusion == Fusion::Full {
                nn::init_mlp2(store, rng, &format!("{p}.fuse"), self.fuse_in(), d, d);
            }
            nn::init_norm(store, &format!("{p}.norm2"), d);
            nn::init_linear(store, rng, &format!("{p}.ffn.fc1"), d, self.cfg.ffn_mult * d);
            nn::init_linear(store, rng, &format!("{p}.ffn.fc2"), self.cfg.ffn_mult * d, d);
        }
    }

    /// Query-grid centroids as an `[N, 3]` tensor.
    pub fn centroid_tensor(&self) -> Tensor {
        let cents = self.spec.voxel_centroids(self.cfg.query_level).unwrap();
        Tensor::new(vec![cents.len(), 3], cents.iter().flat_map(|c| [c.x, c.y, c.z]).collect())
    }

    /// Fourier features of the normalized query centroids, `[N, 6B]`.
    pub fn positional_features(&self) -> Tensor {
        let cents = self.spec.voxel_centroids(self.cfg.query_level).unwrap();
        let b = self.cfg.fourier_bands;
        let mut data = Vec::with_capacity(cents.len() * 6 * b);
        for c in &cents {
            data.extend(fourier_encode(&self.spec.normalize_centroid(c).unwrap(), b));
        }
        Tensor::new(vec![cents.len(), 6 * b], data)
    }

    /// Features of both views sampled at `points[M, 3]` on pyramid level
    /// `scale`, with invalid projections zeroed.
    pub fn sample_views(&self, g: &Graph, points: Var, scale: usize, feats: &StereoFeatures) -> (Var, Var) {
        let stride = STRIDES[scale - 1] as f64;
        let (uv_l, m_l) = feats.rig.left.project_var(g, points);
        let (uv_r, m_r) = feats.rig.right.project_var(g, points);
        let f_l = g.bilinear_sample(feats.left[scale - 1], uv_l, stride);
        let f_r = g.bilinear_sample(feats.right[scale - 1], uv_r, stride);
        let f_l = g.scale_rows(f_l, g.constant(mask_tensor(&m_l)));
        let f_r = g.scale_rows(f_r, g.constant(mask_tensor(&m_r)));
        (f_l, f_r)
    }

    /// `q = MLP(fourier(p)) + (F_4^L(P^L p) + F_4^R(P^R p)) / 2`.
    pub fn encode_queries(&self, b: &Binder, feats: &StereoFeatures) -> Var {
        let g = b.graph();
        let pos = nn::mlp2(b, "dmc.pos", g.constant(self.positional_features()));
        let pts = g.constant(self.centroid_tensor());
        let (f_l, f_r) = self.sample_views(g, pts, 4, feats);
        g.add(pos, g.scale(g.add(f_l, f_r), 0.5))
    }

    /// Offsets `[N_s * N, 3]` in meters, sample-major (row `s * N + n`).
    pub fn sample_offsets(&self, b: &Binder, block: usize, h: Var) -> Var {
        let g = b.graph();
        let n = g.value(h).rows();
        let ns = self.cfg.num_samples;
        let logits = nn::mlp2(b, &format!("dmc.block{block}.offset"), h);
        let rows = g.reshape(logits, &[n * ns, 3]);
        let perm: Vec<usize> = (0..ns).flat_map(|s| (0..n).map(move |q| q * ns + s)).collect();
        let rows = g.gather_rows(rows, Rc::new(perm));
        let l1 = self.spec.voxel_size(1);
        let sig = g.sigmoid(rows);
        match self.cfg.offset_mode {
            OffsetMode::Centered => g.scale(g.add_scalar(sig, -0.5), l1),
            OffsetMode::Literal => g.scale(sig, l1),
        }
    }

    /// `c_i = MLP_i(F_i^L ⊕ F_i^R)` at every row of `points[M, 3]`.
    pub fn per_scale_cost(&self, b: &Binder, block: usize, scale: usize, points: Var, feats: &StereoFeatures) -> Var {
        let g = b.graph();
        let (f_l, f_r) = self.sample_views(g, points, scale, feats);
        let x = match self.cfg.cross_view {
            CrossView::Concat => g.concat_cols(&[f_l, f_r]),
            CrossView::Average => g.scale(g.add(f_l, f_r), 0.5),
        };
        nn::mlp2(b, &format!("dmc.block{block}.scale{scale}"), x)
    }

    /// `c = MLP(c_1 ⊕ c_2 ⊕ c_3 ⊕ c_4)`.
    pub fn fuse_scales(&self, b: &Binder, block: usize, costs: [Var; 4]) -> Var {
        let g = b.graph();
        let mean = || g.scale(g.add_n(&costs), 0.25);
        match (self.cfg.fusion, self.cfg.cross_view) {
            (Fusion::NoFusion, _) => mean(),
            (Fusion::Full, CrossView::Concat) => nn::mlp2(b, &format!("dmc.block{block}.fuse"), g.concat_cols(&costs)),
            (Fusion::Full, CrossView::Average) => nn::mlp2(b, &format!("dmc.block{block}.fuse"), mean()),
        }
    }

    /// Sampling points `[N_s * N, 3]`: centroids plus the learned offsets.
    pub fn sample_points(&self, b: &Binder, block: usize, h: Var) -> Var {
        let g = b.graph();
        let offsets = self.sample_offsets(b, block, h);
        let cents = self.centroid_tensor();
        let ns = self.cfg.num_samples;
        let tiled = Tensor::new(vec![ns * cents.rows(), 3], cents.data().repeat(ns));
        g.add(offsets, g.constant(tiled))
    }

    /// `sum_s A_s (c(p + delta_s) W_s)` for every query; `h` is the
    /// normalized query state.
    pub fn aggregate_costs(&self, b: &Binder, block: usize, h: Var, feats: &StereoFeatures) -> Var {
        let g = b.graph();
        let n = g.value(h).rows();
        let d = self.channels;
        let ns = self.cfg.num_samples;
        let pts = self.sample_points(b, block, h);
        let costs = [1, 2, 3, 4].map(|i| self.per_scale_cost(b, block, i, pts, feats));
        let c = self.fuse_scales(b, block, costs);
        let gates = g.sigmoid(nn::linear(b, &format!("dmc.block{block}.attn"), h));
        let mix = g.reshape(b.param(&format!("dmc.block{block}.mix")), &[ns * d, d]);
        let terms: Vec<Var> = (0..ns)
            .map(|s| {
                let cs = g.slice_rows(c, s * n, n);
                let ws = g.slice_rows(mix, s * d, d);
                g.scale_rows(g.matmul(cs, ws), g.slice_cols(gates, s, 1))
            })
            .collect();
        g.add_n(&terms)
    }

    pub fn block(&self, b: &Binder, block: usize, q: Var, feats: &StereoFeatures) -> Var {
        let g = b.graph();
        let p = format!("dmc.block{block}");
        let h = nn::layer_norm(b, &format!("{p}.norm1"), q);
        let q = g.add(q, self.aggregate_costs(b, block, h, feats));
        let h = nn::layer_norm(b, &format!("{p}.norm2"), q);
        let h = g.relu(nn::linear(b, &format!("{p}.ffn.fc1"), h));
        g.add(q, nn::linear(b, &format!("{p}.ffn.fc2"), h))
    }

    /// Cost volume `[n_x, n_y, n_z, D]` on the query grid.
    pub fn forward(&self, b: &Binder, feats: &StereoFeatures) -> Var {
        let g = b.graph();
        let mut q = self.encode_queries(b, feats);
        for k in 0..self.cfg.num_blocks {
            q = self.block(b, k, q, feats);
        }
        let [nx, ny, nz] = self.query_dims();
        g.reshape(q, &[nx, ny, nz, self.channels])
    }
}

fn check_pyramids(net: &CostVolumeNet, l: &FeaturePyramid, r: &FeaturePyramid) -> Result<()> {
    for p in [l, r] {
        if p.channels() != net.channels {
            return Err(Error::Invalid(format!(
                "pyramid has {} channels, network expects {}",
                p.channels(),
                net.channels
            )));
        }
    }
    Ok(())
}

pub fn encode_queries(
    net: &CostVolumeNet,
    left: &FeaturePyramid,
    right: &FeaturePyramid,
    rig: &StereoRig,
    params: &ParamStore,
) -> Result<VoxelQuerySet> {
    check_pyramids(net, left, right)?;
    let g = Graph::no_grad();
    let b = Binder::frozen(&g, params);
    let feats = StereoFeatures::constant(&g, left, right, rig);
    let q = net.encode_queries(&b, &feats);
    Ok(VoxelQuerySet {
        encodings: (*g.value(q)).clone(),
        centroids: net.spec.voxel_centroids(net.cfg.query_level)?,
        grid_dims: net.query_dims(),
    })
}

pub fn build_cost_volume(
    net: &CostVolumeNet,
    left: &FeaturePyramid,
    right: &FeaturePyramid,
    rig: &StereoRig,
    params: &ParamStore,
) -> Result<CostVolume> {
    check_pyramids(net, left, right)?;
    let g = Graph::no_grad();
    let b = Binder::frozen(&g, params);
    let feats = StereoFeatures::constant(&g, left, right, rig);
    let cv = net.forward(&b, &feats);
    Ok(CostVolume { costs: (*g.value(cv)).clone(), grid_dims: net.query_dims() })
}
