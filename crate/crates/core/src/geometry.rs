//! Cameras, voxel grids, projection, positional encoding and the tracking
//! bound.
//!
//! All coordinates live in the left-camera frame: x right, y down, z forward,
//! in meters. Voxel grids are ordered row-major over `(x, y, z)` with `z`
//! varying fastest.

use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use nalgebra::{Matrix3, Vector3};
use voxtrack_tape::{Graph, Tensor, Var};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Default near-plane distance below which projections are flagged invalid.
pub const DEFAULT_Z_NEAR: f64 = 0.1;

/// One rectified pinhole camera.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation in meters.
    pub translation: Vec3,
    pub image_width: usize,
    pub image_height: usize,
    pub z_near: f64,
}

/// Pixel coordinates of a projected point and whether they are usable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

impl CameraModel {
    /// Camera with identity extrinsics.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, image_width: usize, image_height: usize) -> Result<Self> {
        Self::with_extrinsics(fx, fy, cx, cy, Matrix3::identity(), Vec3::zeros(), image_width, image_height)
    }

    /// 128 x 64 camera with a 90 degree horizontal field of view.
    pub fn desk() -> Self {
        Self::new(64.0, 64.0, 64.0, 32.0, 128, 64).unwrap()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_extrinsics(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vec3,
        image_width: usize,
        image_height: usize,
    ) -> Result<Self> {
        let cam = CameraModel {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            image_width,
            image_height,
            z_near: DEFAULT_Z_NEAR,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy));
        }
        if !(0.0 <= self.cx && self.cx < self.image_width as f64) {
            return bad(format!("cx={} outside [0, {})", self.cx, self.image_width));
        }
        if !(0.0 <= self.cy && self.cy < self.image_height as f64) {
            return bad(format!("cy={} outside [0, {})", self.cy, self.image_height));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if !(err <= 1e-9) {
            return bad(format!("rotation is not orthonormal (|RtR - I| = {err:e})"));
        }
        if !(self.z_near > 0.0) {
            return bad(format!("z_near must be positive, got {}", self.z_near));
        }
        Ok(())
    }

    /// World point in this camera's frame.
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn project(&self, p: &Vec3) -> Projection {
        let c = self.to_camera(p);
        let u = self.fx * c.x / c.z + self.cx;
        let v = self.fy * c.y / c.z + self.cy;
        let valid = c.z > self.z_near && self.in_margin(u, v);
        Projection { u, v, valid }
    }

    fn in_margin(&self, u: f64, v: f64) -> bool {
        (-1.0..=self.image_width as f64 + 1.0).contains(&u) && (-1.0..=self.image_height as f64 + 1.0).contains(&v)
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-frame direction (not normalized) of the ray through pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let d = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.rotation.transpose() * d
    }

    /// The same camera after resizing the image to `width x height`
    /// (focal length and principal point scale per axis).
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.image_width as f64;
        let sy = height as f64 / self.image_height as f64;
        CameraModel {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            image_width: width,
            image_height: height,
            ..self.clone()
        }
    }

    /// Differentiable projection of `points[N, 3]` to `uv[N, 2]`. Rows behind
    /// the near plane produce `(0, 0)` with zero gradient; the returned mask
    /// holds the validity flag of every row.
    pub fn project_var(&self, g: &Graph, points: Var) -> (Var, Rc<Vec<bool>>) {
        let pv = g.value(points);
        assert_eq!(pv.cols(), 3, "project_var expects [N, 3]");
        let n = pv.rows();
        let mut uv = vec![0.0; 2 * n];
        let mut valid = vec![false; n];
        // d(u, v)/d(point) per row, row-major 2x3
        let mut jac = vec![0.0; 6 * n];
        let r = self.rotation;
        for i in 0..n {
            let p = Vec3::from_row_slice(pv.row(i));
            let c = self.to_camera(&p);
            if c.z <= self.z_near {
                continue;
            }
            let u = self.fx * c.x / c.z + self.cx;
            let v = self.fy * c.y / c.z + self.cy;
            uv[2 * i] = u;
            uv[2 * i + 1] = v;
            valid[i] = self.in_margin(u, v);
            let iz = 1.0 / c.z;
            for k in 0..3 {
                jac[6 * i + k] = self.fx * (r[(0, k)] * iz - c.x * r[(2, k)] * iz * iz);
                jac[6 * i + 3 + k] = self.fy * (r[(1, k)] * iz - c.y * r[(2, k)] * iz * iz);
            }
        }
        let out = g.custom(
            Tensor::new(vec![n, 2], uv),
            &[points],
            Box::new(move |gr, grads| {
                if let Some(gp) = grads.acc(points) {
                    for i in 0..n {
                        for k in 0..3 {
                            gp[3 * i + k] += gr[2 * i] * jac[6 * i + k] + gr[2 * i + 1] * jac[6 * i + 3 + k];
                        }
                    }
                }
            }),
        );
        (out, Rc::new(valid))
    }
}

/// Rectified stereo pair; the right camera is the left one shifted by the
/// baseline along +x.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoRig {
    pub left: CameraModel,
    pub right: CameraModel,
    pub baseline: f64,
}

impl StereoRig {
    pub fn new(left: CameraModel, baseline: f64) -> Result<Self> {
        if !(baseline >= 0.0) || !baseline.is_finite() {
            return Err(Error::Invalid(format!("baseline must be non-negative, got {baseline}")));
        }
        left.validate()?;
        let mut right = left.clone();
        right.translation = left.translation - Vec3::new(baseline, 0.0, 0.0);
        Ok(StereoRig { left, right, baseline })
    }

    /// [`CameraModel::desk`] with a 0.5 m baseline.
    pub fn desk() -> Self {
        Self::new(CameraModel::desk(), 0.5).unwrap()
    }

    pub fn resized(&self, width: usize, height: usize) -> Self {
        StereoRig { left: self.left.resized(width, height), right: self.right.resized(width, height), baseline: self.baseline }
    }

    pub fn calibration(&self) -> Calibration {
        let c = &self.left;
        Calibration {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            baseline_m: self.baseline,
            image_width: c.image_width,
            image_height: c.image_height,
        }
    }
}

/// Contents of a `calib.txt` file.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline_m: f64,
    pub image_width: usize,
    pub image_height: usize,
}

impl Calibration {
    pub fn rig(&self) -> Result<StereoRig> {
        let left = CameraModel::new(self.fx, self.fy, self.cx, self.cy, self.image_width, self.image_height)?;
        StereoRig::new(left, self.baseline_m)
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut vals: [Option<f64>; 7] = [None; 7];
        const KEYS: [&str; 7] = ["fx", "fy", "cx", "cy", "baseline_m", "image_width", "image_height"];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let slot = KEYS
                .iter()
                .position(|&name| name == k)
                .ok_or_else(|| Error::format(path, format!("line {}: unknown key `{k}`", lineno + 1)))?;
            let x: f64 = v
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: `{v}` is not a number", lineno + 1)))?;
            vals[slot] = Some(x);
        }
        let mut get = |i: usize| vals[i].take().ok_or_else(|| Error::format(path, format!("missing key `{}`", KEYS[i])));
        let (fx, fy, cx, cy, baseline_m) = (get(0)?, get(1)?, get(2)?, get(3)?, get(4)?);
        let dim = |x: f64, name: &str| {
            if x >= 1.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(Error::format(path, format!("`{name}` must be a positive integer, got {x}")))
            }
        };
        let image_width = dim(get(5)?, "image_width")?;
        let image_height = dim(get(6)?, "image_height")?;
        Ok(Calibration { fx, fy, cx, cy, baseline_m, image_width, image_height })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [("fx", self.fx), ("fy", self.fy), ("cx", self.cx), ("cy", self.cy), ("baseline_m", self.baseline_m)] {
            writeln!(s, "{k}={v}").unwrap();
        }
        writeln!(s, "image_width={}", self.image_width).unwrap();
        writeln!(s, "image_height={}", self.image_height).unwrap();
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Region of interest tiled by a pyramid of cubic-voxel grids. Level 1 is
/// the coarsest; each further level halves the side length and doubles the
/// count along every axis.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGridSpec {
    roi_min: [f64; 3],
    roi_max: [f64; 3],
    base_dims: [usize; 3],
    num_levels: usize,
    l1: f64,
}

impl VoxelGridSpec {
    pub fn new(roi_min: [f64; 3], roi_max: [f64; 3], base_dims: [usize; 3], num_levels: usize) -> Result<Self> {
        let bad = |m: String| Err(Error::Invalid(m));
        if num_levels == 0 {
            return bad("num_levels must be at least 1".into());
        }
        if base_dims.iter().any(|&n| n == 0) {
            return bad(format!("base_dims must be positive, got {base_dims:?}"));
        }
        for a in 0..3 {
            if !(roi_max[a] > roi_min[a]) {
                return bad(format!("roi_max must exceed roi_min on every axis ({roi_min:?} .. {roi_max:?})"));
            }
        }
        let l1 = (roi_max[0] - roi_min[0]) / base_dims[0] as f64;
        for a in 1..3 {
            let la = (roi_max[a] - roi_min[a]) / base_dims[a] as f64;
            if (la - l1).abs() > 1e-9 * l1 {
                return bad(format!(
                    "base_dims {base_dims:?} do not tile the ROI with cubic voxels (side {l1} m on x, {la} m on axis {a})"
                ));
            }
        }
        Ok(VoxelGridSpec { roi_min, roi_max, base_dims, num_levels, l1 })
    }

    /// 18 x 6 x 30 m in front of the camera, 3 m coarsest voxels, four levels
    /// down to 0.375 m (48 x 16 x 80 at the finest level).
    pub fn paper() -> Self {
        Self::new([-8.0, -3.0, 0.0], [10.0, 3.0, 30.0], [6, 2, 10], 4).unwrap()
    }

    /// 8 x 4 x 8 m, 4 m coarsest voxels, four levels down to 0.5 m
    /// (16 x 8 x 16 at the finest level).
    pub fn desk() -> Self {
        Self::new([-4.0, -2.0, 0.0], [4.0, 2.0, 8.0], [2, 1, 2], 4).unwrap()
    }

    pub fn roi_min(&self) -> [f64; 3] {
        self.roi_min
    }

    pub fn roi_max(&self) -> [f64; 3] {
        self.roi_max
    }

    pub fn base_dims(&self) -> [usize; 3] {
        self.base_dims
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.roi_max[a] - self.roi_min[a])
    }

    fn check_level(&self, level: usize) {
        assert!(
            (1..=self.num_levels).contains(&level),
            "level {level} outside 1..={}",
            self.num_levels
        );
    }

    /// Voxel side length at `level` (1-based).
    pub fn voxel_size(&self, level: usize) -> f64 {
        self.check_level(level);
        self.l1 / (1u64 << (level - 1)) as f64
    }

    pub fn voxel_sizes(&self) -> Vec<f64> {
        (1..=self.num_levels).map(|l| self.voxel_size(l)).collect()
    }

    pub fn finest_size(&self) -> f64 {
        self.voxel_size(self.num_levels)
    }

    pub fn dims(&self, level: usize) -> [usize; 3] {
        self.check_level(level);
        self.base_dims.map(|n| n << (level - 1))
    }

    pub fn finest_dims(&self) -> [usize; 3] {
        self.dims(self.num_levels)
    }

    pub fn num_voxels(&self, level: usize) -> usize {
        self.dims(level).iter().product()
    }

    pub fn flat_index(&self, level: usize, idx: [usize; 3]) -> usize {
        flat_index(self.dims(level), idx)
    }

    pub fn unflatten(&self, level: usize, flat: usize) -> [usize; 3] {
        unflatten(self.dims(level), flat)
    }

    pub fn centroid(&self, level: usize, idx: [usize; 3]) -> Vec3 {
        let l = self.voxel_size(level);
        Vec3::from_fn(|a, _| self.roi_min[a] + (idx[a] as f64 + 0.5) * l)
    }

    /// Centroids of every voxel at `level` in row-major `(x, y, z)` order.
    pub fn voxel_centroids(&self, level: usize) -> Result<Vec<Vec3>> {
        if !(1..=self.num_levels).contains(&level) {
            return Err(Error::Invalid(format!("level {level} outside 1..={}", self.num_levels)));
        }
        let n = self.num_voxels(level);
        Ok((0..n).map(|f| self.centroid(level, self.unflatten(level, f))).collect())
    }

    /// Maps a point inside the ROI to `[0, 1]^3`.
    pub fn normalize_centroid(&self, p: &Vec3) -> Result<[f64; 3]> {
        let mut out = [0.0; 3];
        for a in 0..3 {
            if !(self.roi_min[a] <= p[a] && p[a] <= self.roi_max[a]) {
                return Err(Error::Invalid(format!("point {:?} lies outside the ROI", p.as_slice())));
            }
            out[a] = (p[a] - self.roi_min[a]) / (self.roi_max[a] - self.roi_min[a]);
        }
        Ok(out)
    }

    /// Index of the voxel at `level` containing `p`; points on the upper ROI
    /// faces belong to the last voxel.
    pub fn voxel_of(&self, level: usize, p: &Vec3) -> Option<[usize; 3]> {
        let dims = self.dims(level);
        let l = self.voxel_size(level);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if !(self.roi_min[a] <= p[a] && p[a] <= self.roi_max[a]) {
                return None;
            }
            idx[a] = (((p[a] - self.roi_min[a]) / l).floor() as usize).min(dims[a] - 1);
        }
        Some(idx)
    }
}

pub fn flat_index(dims: [usize; 3], idx: [usize; 3]) -> usize {
    debug_assert!(idx[0] < dims[0] && idx[1] < dims[1] && idx[2] < dims[2]);
    (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]
}

pub fn unflatten(dims: [usize; 3], flat: usize) -> [usize; 3] {
    [flat / (dims[1] * dims[2]), (flat / dims[2]) % dims[1], flat % dims[2]]
}

/// A voxel address checked against its level's dims.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VoxelIndex {
    pub level: usize,
    pub ix: usize,
    pub iy: usize,
    pub iz: usize,
}

impl VoxelIndex {
    pub fn new(spec: &VoxelGridSpec, level: usize, [ix, iy, iz]: [usize; 3]) -> Result<Self> {
        if !(1..=spec.num_levels()).contains(&level) {
            return Err(Error::Invalid(format!("level {level} outside 1..={}", spec.num_levels())));
        }
        let d = spec.dims(level);
        if ix >= d[0] || iy >= d[1] || iz >= d[2] {
            return Err(Error::Invalid(format!("index ({ix}, {iy}, {iz}) outside level-{level} dims {d:?}")));
        }
        Ok(VoxelIndex { level, ix, iy, iz })
    }

    pub fn flat(&self, spec: &VoxelGridSpec) -> usize {
        spec.flat_index(self.level, [self.ix, self.iy, self.iz])
    }
}

/// Sinusoidal features of `x`, ordered coordinate-major, band-minor, sine
/// before cosine: `sin(2^b pi x_j), cos(2^b pi x_j)`.
pub fn fourier_encode(x: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bands * x.len());
    for &xj in x {
        for b in 0..bands {
            let a = (1u64 << b) as f64 * std::f64::consts::PI * xj;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Bilinear lookup of `fmap[H', W', D]` at full-image pixel `(u, v)`; see
/// [`Graph::bilinear_sample`] for the alignment and border rules.
pub fn bilinear_sample(fmap: &Tensor, u: f64, v: f64, stride: usize) -> Vec<f64> {
    let g = Graph::no_grad();
    let f = g.constant(fmap.clone());
    let uv = g.constant(Tensor::new(vec![1, 2], vec![u, v]));
    g.value(g.bilinear_sample(f, uv, stride as f64)).data().to_vec()
}

/// Odd extents of the box searched around a voxel when matching it in the
/// next frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundDims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl BoundDims {
    pub fn new(x: usize, y: usize, z: usize) -> Result<Self> {
        if [x, y, z].iter().any(|&b| b % 2 == 0) {
            return Err(Error::Invalid(format!("bound extents must be odd, got ({x}, {y}, {z})")));
        }
        Ok(BoundDims { x, y, z })
    }

    /// Bound large enough to reach every voxel of a grid with `dims`.
    pub fn covering(dims: [usize; 3]) -> Self {
        BoundDims { x: 2 * dims[0] - 1, y: 2 * dims[1] - 1, z: 2 * dims[2] - 1 }
    }

    pub fn volume(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn half(&self) -> [i64; 3] {
        [self.x, self.y, self.z].map(|b| (b / 2) as i64)
    }

    /// All offsets in the box, x outermost and z innermost.
    pub fn offsets(&self) -> Vec<[i64; 3]> {
        let h = self.half();
        let mut out = Vec::with_capacity(self.volume());
        for dx in -h[0]..=h[0] {
            for dy in -h[1]..=h[1] {
                for dz in -h[2]..=h[2] {
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }

    pub fn contains(&self, d: [f64; 3]) -> bool {
        let h = self.half();
        (0..3).all(|a| d[a].abs() <= h[a] as f64)
    }
}

/// Search box for objects moving at most `v` m/s observed at `f` frames/s
/// on a finest grid of side `l4`: `2 ceil(v / f / l4) + 1` horizontally and
/// in depth, 3 vertically.
pub fn bound_dims(v: f64, f: f64, l4: f64) -> Result<BoundDims> {
    if !(v > 0.0 && f > 0.0 && l4 > 0.0) || !(v.is_finite() && f.is_finite() && l4.is_finite()) {
        return Err(Error::Invalid(format!("bound_dims needs positive finite v, f, l4 (got {v}, {f}, {l4})")));
    }
    let d = v / f;
    let r = (d / l4).ceil() as usize;
    Ok(BoundDims { x: 2 * r + 1, y: 3, z: 2 * r + 1 })
}
