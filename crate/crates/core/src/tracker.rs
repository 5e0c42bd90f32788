//! Voxel matching between consecutive frames.
//!
//! Occupied finest-grid voxels at `t` are compared by cosine similarity with
//! the voxels of `t + 1` inside a box around their own position. A row-wise
//! softmax of the scaled similarities gives a matching distribution; the
//! expected target coordinate minus the source coordinate is the voxel's
//! motion, in voxel units.
//!
//! Bounded storage keeps `K = b_x * b_y * b_z` slots per source, one per box
//! offset in x-outer/z-inner order, so memory is `O(N_t * K)`. Slots outside
//! the grid or excluded by the occupancy mask hold `-inf`.

use std::rc::Rc;

use voxtrack_tape::{masked_softmax_rows, Graph, Tensor, Var};

use crate::decoder::OccupancyPyramid;
use crate::error::{Error, Result};
use crate::geometry::{bound_dims, unflatten, BoundDims};
use crate::grid::OccupancyGrid;

/// Lower limit of the logit scale; the learnable parameter is
/// `log(tau - TAU_FLOOR)`.
pub const TAU_FLOOR: f64 = 1e-2;

/// Marks a slot with no target.
pub const NO_TARGET: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    /// Fastest trackable speed, m/s.
    pub velocity: f64,
    /// Frame rate, frames/s.
    pub fps: f64,
    /// Compare against every voxel in the box rather than only occupied ones.
    pub match_all: bool,
    pub bounded: bool,
    pub init_logit_scale: f64,
    /// Largest dense similarity matrix the unbounded path may allocate.
    pub dense_limit_mb: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            velocity: 33.3,
            fps: 26.0,
            match_all: true,
            bounded: true,
            init_logit_scale: 10.0,
            dense_limit_mb: 1024,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.velocity > 0.0 && self.fps > 0.0) {
            return Err(Error::Config(format!(
                "tracker.velocity and tracker.fps must be positive (got {}, {})",
                self.velocity, self.fps
            )));
        }
        if !(self.init_logit_scale > TAU_FLOOR) {
            return Err(Error::Config(format!("tracker.logit_scale must exceed {TAU_FLOOR}")));
        }
        Ok(())
    }

    pub fn bound(&self, l4: f64) -> Result<BoundDims> {
        bound_dims(self.velocity, self.fps, l4)
    }

    /// Stored value of the logit-scale parameter.
    pub fn init_log_tau(&self) -> f64 {
        (self.init_logit_scale - TAU_FLOOR).ln()
    }
}

/// Logit scale from its stored parameter.
pub fn logit_scale(log_tau: f64) -> f64 {
    log_tau.exp() + TAU_FLOOR
}

fn coords_f64(dims: [usize; 3], flat: usize) -> [f64; 3] {
    unflatten(dims, flat).map(|c| c as f64)
}

/// Unit-length rows; zero rows stay zero.
pub fn normalize_rows(feat: &Tensor) -> Tensor {
    let g = Graph::no_grad();
    let v = g.l2_normalize_rows(g.constant(feat.clone()));
    (*g.value(v)).clone()
}

/// Target flat index of each `(source, offset)` slot, or [`NO_TARGET`] when
/// the offset leaves the grid or the target is unoccupied and `targets` is
/// given.
pub fn neighbor_table(dims: [usize; 3], sources: &[usize], bound: BoundDims, targets: Option<&OccupancyGrid>) -> Vec<u32> {
    let offsets = bound.offsets();
    let mut table = Vec::with_capacity(sources.len() * offsets.len());
    for &s in sources {
        let c = unflatten(dims, s).map(|v| v as i64);
        for o in &offsets {
            let t = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
            let inside = (0..3).all(|a| t[a] >= 0 && t[a] < dims[a] as i64);
            let slot = if inside {
                let flat = ((t[0] as usize * dims[1]) + t[1] as usize) * dims[2] + t[2] as usize;
                match targets {
                    Some(occ) if !occ.data[flat] => NO_TARGET,
                    _ => flat as u32,
                }
            } else {
                NO_TARGET
            };
            table.push(slot);
        }
    }
    table
}

/// Dot products of normalized source rows with their table targets;
/// masked slots are zero here and carry `false` in the returned mask.
fn slot_dots(src: &[f64], tgt: &[f64], c: usize, table: &[u32], k: usize) -> (Vec<f64>, Vec<bool>) {
    let mut out = vec![0.0; table.len()];
    let mut mask = vec![false; table.len()];
    for (i, (row, slots)) in out.chunks_mut(k).zip(table.chunks(k)).enumerate() {
        let a = &src[i * c..(i + 1) * c];
        for (j, &t) in slots.iter().enumerate() {
            if t != NO_TARGET {
                let b = &tgt[t as usize * c..(t as usize + 1) * c];
                row[j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
                mask[i * k + j] = true;
            }
        }
    }
    (out, mask)
}

/// Expected target coordinate minus source coordinate per row; rows with no
/// probability mass give zero.
fn expected_motion(probs: &[f64], table: &[u32], k: usize, dims: [usize; 3], sources: &[usize]) -> Vec<[f64; 3]> {
    sources
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let row = &probs[i * k..(i + 1) * k];
            let slots = &table[i * k..(i + 1) * k];
            if slots.iter().all(|&t| t == NO_TARGET) {
                return [0.0; 3];
            }
            let mut e = [0.0; 3];
            for (&p, &t) in row.iter().zip(slots) {
                if t != NO_TARGET {
                    let c = coords_f64(dims, t as usize);
                    for a in 0..3 {
                        e[a] += p * c[a];
                    }
                }
            }
            let c = coords_f64(dims, s);
            [e[0] - c[0], e[1] - c[1], e[2] - c[2]]
        })
        .collect()
}

/// Similarities of every occupied voxel at `t` against its box at `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundedSimilarity {
    pub dims: [usize; 3],
    pub bound: BoundDims,
    pub sources: Vec<usize>,
    /// `N_t x K` target indices.
    pub targets: Vec<u32>,
    /// `N_t x K` cosine similarities, `-inf` where masked.
    pub values: Vec<f64>,
}

impl BoundedSimilarity {
    pub fn k(&self) -> usize {
        self.bound.volume()
    }

    /// Number of stored similarity entries.
    pub fn stored_elements(&self) -> usize {
        self.values.len()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.targets.iter().map(|&t| t != NO_TARGET).collect()
    }
}

fn check_features(feat_t: &Tensor, occ_t: &OccupancyGrid, feat_t1: &Tensor, occ_t1: &OccupancyGrid) -> Result<()> {
    if occ_t.dims != occ_t1.dims {
        return Err(Error::Invalid(format!("grid dims differ: {:?} vs {:?}", occ_t.dims, occ_t1.dims)));
    }
    let n = occ_t.len();
    if feat_t.shape().len() != 2 || feat_t.rows() != n || feat_t1.shape() != feat_t.shape() {
        return Err(Error::Invalid(format!(
            "features {:?} / {:?} do not match {} grid voxels",
            feat_t.shape(),
            feat_t1.shape(),
            n
        )));
    }
    Ok(())
}

pub fn bounded_similarity(
    feat_t: &Tensor,
    occ_t: &OccupancyGrid,
    feat_t1: &Tensor,
    occ_t1: &OccupancyGrid,
    bound: BoundDims,
    match_all: bool,
) -> Result<BoundedSimilarity> {
    check_features(feat_t, occ_t, feat_t1, occ_t1)?;
    let dims = occ_t.dims;
    let c = feat_t.cols();
    let sources = occ_t.occupied();
    let targets = neighbor_table(dims, &sources, bound, if match_all { None } else { Some(occ_t1) });
    let nt = normalize_rows(feat_t);
    let nt1 = normalize_rows(feat_t1);
    let src: Vec<f64> = sources.iter().flat_map(|&s| nt.row(s).iter().copied()).collect();
    let (mut values, mask) = slot_dots(&src, nt1.data(), c, &targets, bound.volume());
    values.iter_mut().zip(&mask).filter(|(_, &m)| !m).for_each(|(v, _)| *v = f64::NEG_INFINITY);
    Ok(BoundedSimilarity { dims, bound, sources, targets, values })
}

/// Full `N_t x N_cols` similarity matrix against every voxel (or every
/// occupied voxel) of `t + 1`, with entries outside `bound` set to `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSimilarity {
    pub dims: [usize; 3],
    pub sources: Vec<usize>,
    pub columns: Vec<usize>,
    pub values: Vec<f64>,
}

/// Bytes of a dense similarity matrix.
pub fn dense_bytes(n_sources: usize, n_columns: usize) -> u128 {
    n_sources as u128 * n_columns as u128 * std::mem::size_of::<f64>() as u128
}

#[allow(clippy::too_many_arguments)]
pub fn dense_similarity(
    feat_t: &Tensor,
    occ_t: &OccupancyGrid,
    feat_t1: &Tensor,
    occ_t1: &OccupancyGrid,
    bound: BoundDims,
    match_all: bool,
    limit_mb: u64,
) -> Result<DenseSimilarity> {
    check_features(feat_t, occ_t, feat_t1, occ_t1)?;
    let dims = occ_t.dims;
    let sources = occ_t.occupied();
    let columns: Vec<usize> = if match_all { (0..occ_t1.len()).collect() } else { occ_t1.occupied() };
    let bytes = dense_bytes(sources.len(), columns.len());
    if bytes > limit_mb as u128 * (1 << 20) {
        return Err(Error::MemoryGuard { needed_mb: bytes as f64 / (1u64 << 20) as f64, limit_mb });
    }
    let c = feat_t.cols();
    let nt = normalize_rows(feat_t);
    let nt1 = normalize_rows(feat_t1);
    let h = bound.half();
    let mut values = Vec::with_capacity(sources.len() * columns.len());
    for &s in &sources {
        let a = nt.row(s);
        let cs = unflatten(dims, s).map(|v| v as i64);
        for &t in &columns {
            let ct = unflatten(dims, t).map(|v| v as i64);
            let inside = (0..3).all(|ax| (ct[ax] - cs[ax]).abs() <= h[ax]);
            values.push(if inside {
                a.iter().zip(&nt1.data()[t * c..(t + 1) * c]).map(|(x, y)| x * y).sum()
            } else {
                f64::NEG_INFINITY
            });
        }
    }
    Ok(DenseSimilarity { dims, sources, columns, values })
}

/// Row-stochastic matches over the stored slots of a [`BoundedSimilarity`].
#[derive(Clone, Debug, PartialEq)]
pub struct MatchDistribution {
    pub dims: [usize; 3],
    pub sources: Vec<usize>,
    pub targets: Vec<u32>,
    pub k: usize,
    pub probs: Vec<f64>,
    pub tau: f64,
    /// Sources whose box held no candidate; their rows are all zero.
    pub empty_rows: Vec<usize>,
}

impl MatchDistribution {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    /// Motion of every source voxel in voxel units.
    pub fn motions(&self) -> Vec<[f64; 3]> {
        expected_motion(&self.probs, &self.targets, self.k, self.dims, &self.sources)
    }
}

fn softmax_slots(s: &BoundedSimilarity, tau: f64) -> MatchDistribution {
    let k = s.k();
    let mask = s.mask();
    let logits: Vec<f64> = s.values.iter().zip(&mask).map(|(&v, &m)| if m { v * tau } else { 0.0 }).collect();
    let probs = masked_softmax_rows(&logits, &mask, k);
    let empty_rows = (0..s.sources.len()).filter(|&i| !mask[i * k..(i + 1) * k].contains(&true)).collect();
    MatchDistribution {
        dims: s.dims,
        sources: s.sources.clone(),
        targets: s.targets.clone(),
        k,
        probs,
        tau,
        empty_rows,
    }
}

/// Row softmax of `tau * S`; fails when a row has no finite entry.
pub fn match_distribution(s: &BoundedSimilarity, tau: f64) -> Result<MatchDistribution> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("logit scale must be positive, got {tau}")));
    }
    let p = softmax_slots(s, tau);
    if let Some(&i) = p.empty_rows.first() {
        return Err(Error::Invalid(format!("source voxel {} has no candidate inside its bound", s.sources[i])));
    }
    Ok(p)
}

/// Dense row softmax of `tau * S` over the finite entries of each row.
pub fn dense_match_distribution(s: &DenseSimilarity, tau: f64) -> Vec<f64> {
    let mask: Vec<bool> = s.values.iter().map(|v| v.is_finite()).collect();
    let logits: Vec<f64> = s.values.iter().zip(&mask).map(|(&v, &m)| if m { v * tau } else { 0.0 }).collect();
    masked_softmax_rows(&logits, &mask, s.columns.len().max(1))
}

/// `M = P G_{t+1} - G_t` for a dense `P[N_t, N_{t+1}]`.
pub fn motion_vectors(p: &[f64], g_t1: &[[f64; 3]], g_t: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = g_t1.len();
    assert_eq!(p.len(), g_t.len() * n, "motion_vectors: P is not N_t x N_t1");
    g_t.iter()
        .enumerate()
        .map(|(i, src)| {
            let mut e = [0.0; 3];
            for (&w, c) in p[i * n..(i + 1) * n].iter().zip(g_t1) {
                for a in 0..3 {
                    e[a] += w * c[a];
                }
            }
            [e[0] - src[0], e[1] - src[1], e[2] - src[2]]
        })
        .collect()
}

/// Motions of the occupied voxels at `t`, in voxel units of the finest grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelFlowField {
    pub dims: [usize; 3],
    pub source_indices: Vec<usize>,
    pub motions: Vec<[f64; 3]>,
    pub mask: OccupancyGrid,
    /// Sources left at zero motion because their box had no candidate.
    pub flagged: Vec<usize>,
}

impl VoxelFlowField {
    pub fn empty(dims: [usize; 3]) -> Self {
        VoxelFlowField {
            dims,
            source_indices: Vec::new(),
            motions: Vec::new(),
            mask: OccupancyGrid::filled(dims, false),
            flagged: Vec::new(),
        }
    }

    /// Flow for every voxel of the grid; unoccupied voxels carry zero.
    pub fn dense(&self) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; self.mask.len()];
        for (&s, m) in self.source_indices.iter().zip(&self.motions) {
            out[s] = *m;
        }
        out
    }
}

/// Matches the finest level of `out_t` against `out_t1`.
pub fn track(out_t: &OccupancyPyramid, out_t1: &OccupancyPyramid, cfg: &TrackerConfig, l4: f64, tau: f64) -> Result<VoxelFlowField> {
    let occ_t = out_t.binary.last().ok_or_else(|| Error::Invalid("empty occupancy pyramid".into()))?;
    let occ_t1 = out_t1.binary.last().ok_or_else(|| Error::Invalid("empty occupancy pyramid".into()))?;
    track_grids(&out_t.track_features, occ_t, &out_t1.track_features, occ_t1, cfg, l4, tau)
}

pub fn track_grids(
    feat_t: &Tensor,
    occ_t: &OccupancyGrid,
    feat_t1: &Tensor,
    occ_t1: &OccupancyGrid,
    cfg: &TrackerConfig,
    l4: f64,
    tau: f64,
) -> Result<VoxelFlowField> {
    let bound = cfg.bound(l4)?;
    let dims = occ_t.dims;
    if cfg.bounded {
        let s = bounded_similarity(feat_t, occ_t, feat_t1, occ_t1, bound, cfg.match_all)?;
        let p = softmax_slots(&s, tau);
        let flagged = p.empty_rows.iter().map(|&i| p.sources[i]).collect();
        Ok(VoxelFlowField { dims, motions: p.motions(), source_indices: p.sources, mask: occ_t.clone(), flagged })
    } else {
        let s = dense_similarity(feat_t, occ_t, feat_t1, occ_t1, bound, cfg.match_all, cfg.dense_limit_mb)?;
        let probs = dense_match_distribution(&s, tau);
        let n = s.columns.len();
        let g_t1: Vec<[f64; 3]> = s.columns.iter().map(|&t| coords_f64(dims, t)).collect();
        let g_t: Vec<[f64; 3]> = s.sources.iter().map(|&t| coords_f64(dims, t)).collect();
        let mut motions = motion_vectors(&probs, &g_t1, &g_t);
        let mut flagged = Vec::new();
        for (i, m) in motions.iter_mut().enumerate() {
            if !s.values[i * n..(i + 1) * n].iter().any(|v| v.is_finite()) {
                *m = [0.0; 3];
                flagged.push(s.sources[i]);
            }
        }
        Ok(VoxelFlowField { dims, motions, source_indices: s.sources, mask: occ_t.clone(), flagged })
    }
}

/// Differentiable bounded tracking of `sources` given finest-grid features
/// of both frames (`[N, C]` each) and the stored logit-scale parameter.
/// Returns the dense `[N, 3]` motion field (zero outside `sources`).
pub fn track_var(
    g: &Graph,
    feat_t: Var,
    feat_t1: Var,
    log_tau: Var,
    dims: [usize; 3],
    sources: &[usize],
    table: Rc<Vec<u32>>,
    k: usize,
) -> Var {
    let n = dims.iter().product::<usize>();
    if sources.is_empty() {
        return g.constant(Tensor::zeros(vec![n, 3]));
    }
    let nt = g.l2_normalize_rows(feat_t);
    let nt1 = g.l2_normalize_rows(feat_t1);
    let src = g.gather_rows(nt, Rc::new(sources.to_vec()));
    let sims = slot_similarity_var(g, src, nt1, table.clone(), k);
    let tau = g.add_scalar(g.exp(log_tau), TAU_FLOOR);
    let mask: Rc<Vec<bool>> = Rc::new(table.iter().map(|&t| t != NO_TARGET).collect());
    let p = g.masked_softmax(g.mul_scalar_var(sims, tau), mask);
    let m = expected_motion_var(g, p, table, k, dims, sources);
    g.scatter_rows(m, Rc::new(sources.to_vec()), n)
}

fn slot_similarity_var(g: &Graph, src: Var, tgt: Var, table: Rc<Vec<u32>>, k: usize) -> Var {
    let sv = g.value(src);
    let tv = g.value(tgt);
    let c = sv.cols();
    let rows = sv.rows();
    let (out, _) = slot_dots(sv.data(), tv.data(), c, &table, k);
    g.custom_lazy(Tensor::new(vec![rows, k], out), &[src, tgt], move || {
        Box::new(move |gr, grads| {
            if let Some(gs) = grads.acc(src) {
                for i in 0..rows {
                    for j in 0..k {
                        let t = table[i * k + j];
                        let w = gr[i * k + j];
                        if t != NO_TARGET && w != 0.0 {
                            let b = &tv.data()[t as usize * c..(t as usize + 1) * c];
                            gs[i * c..(i + 1) * c].iter_mut().zip(b).for_each(|(d, v)| *d += w * v);
                        }
                    }
                }
            }
            if let Some(gt) = grads.acc(tgt) {
                for i in 0..rows {
                    let a = &sv.data()[i * c..(i + 1) * c];
                    for j in 0..k {
                        let t = table[i * k + j];
                        let w = gr[i * k + j];
                        if t != NO_TARGET && w != 0.0 {
                            gt[t as usize * c..(t as usize + 1) * c].iter_mut().zip(a).for_each(|(d, v)| *d += w * v);
                        }
                    }
                }
            }
        })
    })
}

fn expected_motion_var(g: &Graph, p: Var, table: Rc<Vec<u32>>, k: usize, dims: [usize; 3], sources: &[usize]) -> Var {
    let pv = g.value(p);
    let m = expected_motion(pv.data(), &table, k, dims, sources);
    let rows = sources.len();
    g.custom(
        Tensor::new(vec![rows, 3], m.concat()),
        &[p],
        Box::new(move |gr, grads| {
            if let Some(gp) = grads.acc(p) {
                for i in 0..rows {
                    for j in 0..k {
                        let t = table[i * k + j];
                        if t != NO_TARGET {
                            let c = coords_f64(dims, t as usize);
                            gp[i * k + j] += gr[3 * i] * c[0] + gr[3 * i + 1] * c[1] + gr[3 * i + 2] * c[2];
                        }
                    }
                }
            }
        }),
    )
}
