//! Synthetic stereo scenes with exact occupancy and voxel-flow ground truth,
//! point-cloud voxelization, and the on-disk dataset layout.
//!
//! ```text
//! root/manifest.tsv
//! root/sample_k/left_t.png  right_t.png  left_t1.png  right_t1.png
//! root/sample_k/calib.txt
//! root/sample_k/occ_t.level{1..4}.odtv  occ_t1.level{1..4}.odtv
//! root/sample_k/flow.odtf
//! ```
//!
//! Real stereo data can be ingested through the same layout without the
//! ground-truth files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxtrack_tape::Tensor;

use crate::error::{Error, Result};
use crate::geometry::{BoundDims, Calibration, CameraModel, StereoRig, Vec3, VoxelGridSpec};
use crate::grid::{or_pyramid, OccupancyGrid};
use crate::io::{self, FlowDump, FlowRecord};

/// Voxels whose centroid lies more than this far below the viewpoint
/// (`y` points down) are removed from the ground truth.
pub const GROUND_REMOVAL_Y: f64 = 1.5;
/// Depth of the textured backdrop plane.
pub const BACKDROP_Z: f64 = 40.0;
pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Full edge lengths along the object's local axes.
    Box { size: [f64; 3] },
    Sphere { radius: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    /// Center at `t = 0`.
    pub position: Vec3,
    /// Rotation about the vertical axis, radians.
    pub yaw: f64,
    /// Meters per second.
    pub velocity: Vec3,
    pub texture_seed: u64,
}

impl SceneObject {
    pub fn center(&self, t: f64) -> Vec3 {
        self.position + self.velocity * t
    }

    /// Object-to-world rotation.
    pub fn rotation(&self) -> Matrix3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
    }

    /// Half extents of the world-axis-aligned bounding box.
    pub fn aabb_half(&self) -> Vec3 {
        match self.shape {
            Shape::Sphere { radius } => Vec3::repeat(radius),
            Shape::Box { size } => {
                let r = self.rotation();
                let h = Vec3::from(size) / 2.0;
                Vec3::from_fn(|i, _| (0..3).map(|j| r[(i, j)].abs() * h[j]).sum())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub rig: StereoRig,
    pub frame_dt: f64,
    /// Rendered ground plane; not part of the occupancy ground truth.
    pub ground_plane_y: f64,
}

impl SceneSpec {
    pub fn empty(rig: StereoRig, frame_dt: f64) -> Self {
        SceneSpec { objects: Vec::new(), rig, frame_dt, ground_plane_y: GROUND_REMOVAL_Y }
    }

    /// Checks the baseline, the frame interval and that some object reaches
    /// into the depth range of `spec`.
    pub fn validate(&self, spec: &VoxelGridSpec) -> Result<()> {
        if !(self.rig.baseline > 0.0) {
            return Err(Error::Invalid(format!("scene baseline must be positive, got {}", self.rig.baseline)));
        }
        if !(self.frame_dt > 0.0) {
            return Err(Error::Invalid(format!("frame interval must be positive, got {}", self.frame_dt)));
        }
        let (z0, z1) = (spec.roi_min()[2], spec.roi_max()[2]);
        let reaches = self.objects.iter().any(|o| {
            let (c, h) = (o.position.z, o.aabb_half().z);
            c - h < z1 && c + h > z0
        });
        if !reaches {
            return Err(Error::Invalid("no object overlaps the depth range of the grid".into()));
        }
        Ok(())
    }
}

/// Occupancy of voxels touched by an object's surface only, or of every
/// voxel overlapping its volume.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fill {
    #[default]
    Surface,
    Solid,
}

// ---------------------------------------------------------------------------
// procedural texture

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix(
        seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ (z as u64).wrapping_mul(0x1656_67B1_9E37_79F9),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1)`.
pub fn value_noise(seed: u64, p: [f64; 3]) -> f64 {
    let i = p.map(|v| v.floor());
    let f = [p[0] - i[0], p[1] - i[1], p[2] - i[2]].map(|t| t * t * (3.0 - 2.0 * t));
    let [x, y, z] = i.map(|v| v as i64);
    let mut acc = 0.0;
    for c in 0..8 {
        let (dx, dy, dz) = (c >> 2 & 1, c >> 1 & 1, c & 1);
        let w = [(dx, 0), (dy, 1), (dz, 2)].iter().map(|&(d, a)| if d == 1 { f[a] } else { 1.0 - f[a] }).product::<f64>();
        acc += w * lattice(seed, x + dx, y + dy, z + dz);
    }
    acc
}

fn fractal(seed: u64, p: Vec3, freq: f64) -> f64 {
    let a = value_noise(seed, (p * freq).into());
    let b = value_noise(seed.wrapping_add(1), (p * 2.0 * freq).into());
    (0.65 * a + 0.35 * b).clamp(0.0, 1.0)
}

fn base_color(seed: u64) -> Vec3 {
    Vec3::new(lattice(seed, 1, 0, 0), lattice(seed, 0, 1, 0), lattice(seed, 0, 0, 1)).map(|c| 0.35 + 0.65 * c)
}

// ---------------------------------------------------------------------------
// rendering

const LIGHT: [f64; 3] = [0.3, -0.8, -0.5];
const GROUND_SEED: u64 = 0x5EED_0001;
const BACKDROP_SEED: u64 = 0x5EED_0002;

/// What a pixel's ray hit first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Object(usize),
    Ground,
    Backdrop,
    Sky,
}

struct Hit {
    dist: f64,
    normal: Vec3,
    local: Vec3,
}

fn hit_object(o: &SceneObject, t: f64, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
    let r = o.rotation();
    let lo = r.transpose() * (origin - o.center(t));
    let ld = r.transpose() * dir;
    match o.shape {
        Shape::Box { size } => {
            let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
            for a in 0..3 {
                let h = size[a] / 2.0;
                if ld[a].abs() < 1e-15 {
                    if lo[a].abs() > h {
                        return None;
                    }
                    continue;
                }
                let (mut n, mut f) = ((-h - lo[a]) / ld[a], (h - lo[a]) / ld[a]);
                if n > f {
                    std::mem::swap(&mut n, &mut f);
                }
                if n > t0 {
                    t0 = n;
                    axis = a;
                }
                t1 = t1.min(f);
            }
            if t0 > t1 || t0 <= 0.0 {
                return None;
            }
            let mut n = Vec3::zeros();
            n[axis] = -ld[axis].signum();
            Some(Hit { dist: t0, normal: r * n, local: lo + ld * t0 })
        }
        Shape::Sphere { radius } => {
            let b = lo.dot(&ld);
            let c = lo.norm_squared() - radius * radius;
            let a = ld.norm_squared();
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let d = (-b - disc.sqrt()) / a;
            if d <= 0.0 {
                return None;
            }
            let local = lo + ld * d;
            Some(Hit { dist: d, normal: r * local / radius, local })
        }
    }
}

fn shade(albedo: Vec3, normal: &Vec3) -> Vec3 {
    let l = Vec3::from(LIGHT).normalize();
    albedo * (0.4 + 0.6 * normal.dot(&l).max(0.0))
}

/// Color and surface of the first hit along a ray.
fn trace(scene: &SceneSpec, t: f64, origin: &Vec3, dir: &Vec3) -> (Vec3, Surface) {
    let mut best: Option<(usize, Hit)> = None;
    for (i, o) in scene.objects.iter().enumerate() {
        if let Some(h) = hit_object(o, t, origin, dir) {
            if best.as_ref().is_none_or(|(_, b)| h.dist < b.dist) {
                best = Some((i, h));
            }
        }
    }
    let ground = (dir.y > 0.0).then(|| (scene.ground_plane_y - origin.y) / dir.y).filter(|&d| d > 0.0);
    let backdrop = (dir.z > 0.0).then(|| (BACKDROP_Z - origin.z) / dir.z).filter(|&d| d > 0.0);
    let obj_dist = best.as_ref().map_or(f64::INFINITY, |(_, h)| h.dist);
    let ground_dist = ground.unwrap_or(f64::INFINITY);
    let back_dist = backdrop.unwrap_or(f64::INFINITY);
    if obj_dist < ground_dist && obj_dist < back_dist {
        let (i, h) = best.unwrap();
        let o = &scene.objects[i];
        let albedo = base_color(o.texture_seed) * (0.45 + 0.55 * fractal(o.texture_seed, h.local, 5.0));
        (shade(albedo, &h.normal), Surface::Object(i))
    } else if ground_dist < back_dist {
        let p = origin + dir * ground_dist;
        let v = fractal(GROUND_SEED, Vec3::new(p.x, 0.0, p.z), 2.0);
        (Vec3::new(0.45, 0.42, 0.38) * (0.5 + 0.5 * v), Surface::Ground)
    } else if back_dist.is_finite() {
        let p = origin + dir * back_dist;
        let v = fractal(BACKDROP_SEED, Vec3::new(p.x, p.y, 0.0), 0.5);
        (Vec3::new(0.55, 0.65, 0.8) * (0.5 + 0.5 * v), Surface::Backdrop)
    } else {
        (Vec3::new(0.6, 0.7, 0.9), Surface::Sky)
    }
}

fn to_rgb(c: Vec3) -> Rgb<u8> {
    Rgb([c.x, c.y, c.z].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

/// Renders one camera at time `t`, one ray through each pixel center, and
/// reports which surface every pixel shows.
pub fn render_view(scene: &SceneSpec, cam: &CameraModel, t: f64) -> (RgbImage, Vec<Surface>) {
    let (w, h) = (cam.image_width, cam.image_height);
    let origin = cam.center();
    let mut img = RgbImage::new(w as u32, h as u32);
    let mut ids = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let dir = cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            let (c, s) = trace(scene, t, &origin, &dir);
            img.put_pixel(x as u32, y as u32, to_rgb(c));
            ids.push(s);
        }
    }
    (img, ids)
}

/// Left and right images of the scene at time `t`.
pub fn render_stereo(scene: &SceneSpec, t: f64) -> (RgbImage, RgbImage) {
    (render_view(scene, &scene.rig.left, t).0, render_view(scene, &scene.rig.right, t).0)
}

/// `image[H, W, 3]` with channels scaled to `[-0.5, 0.5]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0 - 0.5).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

// ---------------------------------------------------------------------------
// ground truth

/// Whether an object at time `t` touches the axis-aligned cube with center
/// `c` and half side `a`. Overlaps are open: sharing only a boundary does
/// not count.
pub fn object_touches_cube(o: &SceneObject, t: f64, c: &Vec3, a: f64, fill: Fill) -> bool {
    let center = o.center(t);
    match o.shape {
        Shape::Sphere { radius } => {
            let d = c - center;
            let near = d.map(|v| (v.abs() - a).max(0.0)).norm();
            let far = d.map(|v| v.abs() + a).norm();
            near < radius && (fill == Fill::Solid || radius < far)
        }
        Shape::Box { size } => {
            let h = Vec3::from(size) / 2.0;
            let r = o.rotation();
            let d = c - center;
            // separating axes in the horizontal plane: the cube's x, z and the box's local x, z
            let bx = Vec3::new(r[(0, 0)], 0.0, r[(2, 0)]);
            let bz = Vec3::new(r[(0, 2)], 0.0, r[(2, 2)]);
            let axes = [Vec3::x(), Vec3::z(), bx, bz];
            for n in &axes {
                let rb = h.x * bx.dot(n).abs() + h.z * bz.dot(n).abs();
                let rc = a * (n.x.abs() + n.z.abs());
                if d.dot(n).abs() >= rb + rc {
                    return false;
                }
            }
            if d.y.abs() >= h.y + a {
                return false;
            }
            if fill == Fill::Solid {
                return true;
            }
            // the cube misses the shell when all its corners lie strictly inside
            let rt = r.transpose();
            let inside = (0..8).all(|k| {
                let corner = c + Vec3::new(
                    if k & 4 != 0 { a } else { -a },
                    if k & 2 != 0 { a } else { -a },
                    if k & 1 != 0 { a } else { -a },
                );
                let l = rt * (corner - center);
                (0..3).all(|i| l[i].abs() < h[i])
            });
            !inside
        }
    }
}

/// Finest-level ground truth at time `t` before pooling.
pub fn gt_occupancy_finest(scene: &SceneSpec, spec: &VoxelGridSpec, t: f64, fill: Fill) -> OccupancyGrid {
    let level = spec.num_levels();
    let dims = spec.dims(level);
    let a = spec.voxel_size(level) / 2.0;
    let mut grid = OccupancyGrid::filled(dims, false);
    for f in 0..grid.len() {
        let c = spec.centroid(level, grid.coords(f));
        if c.y > GROUND_REMOVAL_Y {
            continue;
        }
        grid.data[f] = scene.objects.iter().any(|o| object_touches_cube(o, t, &c, a, fill));
    }
    grid
}

/// Ground-truth occupancy pyramid at time `t`, coarsest level first.
pub fn gt_occupancy(scene: &SceneSpec, spec: &VoxelGridSpec, t: f64, fill: Fill) -> Vec<OccupancyGrid> {
    or_pyramid(gt_occupancy_finest(scene, spec, t, fill), spec.num_levels())
}

/// Points covering an object's surface with roughly `spacing` between them,
/// in object coordinates.
pub fn surface_points(shape: &Shape, spacing: f64) -> Vec<Vec3> {
    let mut out = Vec::new();
    match *shape {
        Shape::Box { size } => {
            for axis in 0..3 {
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                let nu = (size[u] / spacing).ceil().max(1.0) as usize;
                let nv = (size[v] / spacing).ceil().max(1.0) as usize;
                for sign in [-1.0, 1.0] {
                    for i in 0..nu {
                        for j in 0..nv {
                            let mut p = Vec3::zeros();
                            p[axis] = sign * size[axis] / 2.0;
                            p[u] = ((i as f64 + 0.5) / nu as f64 - 0.5) * size[u];
                            p[v] = ((j as f64 + 0.5) / nv as f64 - 0.5) * size[v];
                            out.push(p);
                        }
                    }
                }
            }
        }
        Shape::Sphere { radius } => {
            let n = (4.0 * std::f64::consts::PI * radius * radius / (spacing * spacing)).ceil().max(1.0) as usize;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            for i in 0..n {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let phi = golden * i as f64;
                out.push(Vec3::new(r * phi.cos(), y, r * phi.sin()) * radius);
            }
        }
    }
    out
}

/// Dense finest-grid displacement over `dt` in voxel units: the mean
/// displacement of surface points inside each occupied voxel at `t`, zero
/// elsewhere. Occupied voxels no sample point reached take the mean over the
/// objects touching them.
pub fn gt_voxel_flow(scene: &SceneSpec, spec: &VoxelGridSpec, t: f64, dt: f64, fill: Fill) -> Result<Vec<[f64; 3]>> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("flow interval must be positive, got {dt}")));
    }
    let occ = gt_occupancy_finest(scene, spec, t, fill);
    Ok(flow_for(scene, spec, &occ, t, dt, fill))
}

fn flow_for(scene: &SceneSpec, spec: &VoxelGridSpec, occ: &OccupancyGrid, t: f64, dt: f64, fill: Fill) -> Vec<[f64; 3]> {
    let level = spec.num_levels();
    let l = spec.voxel_size(level);
    let mut sum = vec![Vec3::zeros(); occ.len()];
    let mut count = vec![0usize; occ.len()];
    for o in &scene.objects {
        let disp = o.velocity * dt / l;
        let r = o.rotation();
        let c = o.center(t);
        for p in surface_points(&o.shape, l / 4.0) {
            if let Some(idx) = spec.voxel_of(level, &(c + r * p)) {
                let f = occ.index(idx);
                if occ.data[f] {
                    sum[f] += disp;
                    count[f] += 1;
                }
            }
        }
    }
    let a = l / 2.0;
    (0..occ.len())
        .map(|f| {
            if !occ.data[f] {
                return [0.0; 3];
            }
            if count[f] > 0 {
                return (sum[f] / count[f] as f64).into();
            }
            let cen = spec.centroid(level, occ.coords(f));
            let touching: Vec<Vec3> = scene
                .objects
                .iter()
                .filter(|o| object_touches_cube(o, t, &cen, a, fill))
                .map(|o| o.velocity * dt / l)
                .collect();
            if touching.is_empty() {
                [0.0; 3]
            } else {
                (touching.iter().sum::<Vec3>() / touching.len() as f64).into()
            }
        })
        .collect()
}

/// Occupancy pyramid from a metric point cloud: a finest voxel is occupied
/// when at least `min_points` points fall inside it. Points outside the ROI
/// and voxels below the ground-removal height are dropped.
pub fn voxelize_pointcloud(points: &[Vec3], spec: &VoxelGridSpec, min_points: usize) -> Vec<OccupancyGrid> {
    let level = spec.num_levels();
    let dims = spec.dims(level);
    let mut counts = vec![0usize; dims.iter().product()];
    for p in points {
        if let Some(idx) = spec.voxel_of(level, p) {
            counts[crate::geometry::flat_index(dims, idx)] += 1;
        }
    }
    let mut grid = OccupancyGrid::filled(dims, false);
    for (f, &c) in counts.iter().enumerate() {
        grid.data[f] = c >= min_points.max(1) && spec.centroid(level, grid.coords(f)).y <= GROUND_REMOVAL_Y;
    }
    or_pyramid(grid, spec.num_levels())
}

// ---------------------------------------------------------------------------
// scene sampling

/// Scene sampler and dataset settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Edge length range of boxes, meters.
    pub box_size: [f64; 2],
    pub sphere_radius: [f64; 2],
    pub sphere_fraction: f64,
    /// Per-frame displacement range in finest voxels, largest axis.
    pub motion_voxels: [usize; 2],
    pub fill: Fill,
    pub ground_plane_y: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_samples: 50,
            seed: 0,
            min_objects: 1,
            max_objects: 3,
            box_size: [0.6, 1.6],
            sphere_radius: [0.3, 0.8],
            sphere_fraction: 0.3,
            motion_voxels: [1, 3],
            fill: Fill::Surface,
            ground_plane_y: GROUND_REMOVAL_Y,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!("synth objects range [{}, {}] is empty or zero", self.min_objects, self.max_objects));
        }
        for (name, r) in [("box_size", self.box_size), ("sphere_radius", self.sphere_radius)] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(format!("synth.{name} range [{}, {}] is invalid", r[0], r[1]));
            }
        }
        if !(0.0..=1.0).contains(&self.sphere_fraction) {
            return bad(format!("synth.sphere_fraction must lie in [0, 1], got {}", self.sphere_fraction));
        }
        if self.motion_voxels[0] > self.motion_voxels[1] {
            return bad(format!("synth motion range [{}, {}] is empty", self.motion_voxels[0], self.motion_voxels[1]));
        }
        Ok(())
    }
}

/// Seed of sample `k` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, k: usize) -> u64 {
    splitmix(seed ^ splitmix(k as u64))
}

fn in_image(cam: &CameraModel, p: &Vec3) -> Option<(f64, f64)> {
    let c = cam.to_camera(p);
    if c.z <= cam.z_near {
        return None;
    }
    let u = cam.fx * c.x / c.z + cam.cx;
    let v = cam.fy * c.y / c.z + cam.cy;
    let ok = (0.0..=cam.image_width as f64).contains(&u) && (0.0..=cam.image_height as f64).contains(&v);
    ok.then_some((u, v))
}

/// Image-space bounding rectangle of an object's box corners, if every
/// corner is in view.
fn screen_rect(o: &SceneObject, t: f64, cam: &CameraModel) -> Option<[f64; 4]> {
    let c = o.center(t);
    let h = o.aabb_half();
    let mut rect = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for k in 0..8 {
        let s = Vec3::new(
            if k & 4 != 0 { h.x } else { -h.x },
            if k & 2 != 0 { h.y } else { -h.y },
            if k & 1 != 0 { h.z } else { -h.z },
        );
        let (u, v) = in_image(cam, &(c + s))?;
        rect = [rect[0].min(u), rect[1].min(v), rect[2].max(u), rect[3].max(v)];
    }
    Some(rect)
}

fn rects_overlap(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

fn inside_roi(o: &SceneObject, t: f64, spec: &VoxelGridSpec) -> bool {
    let c = o.center(t);
    let h = o.aabb_half();
    (0..3).all(|a| c[a] - h[a] > spec.roi_min()[a] && c[a] + h[a] < spec.roi_max()[a])
}

/// Draws a scene whose objects stay inside the ROI and the view of both
/// cameras at `t = 0` and `t = frame_dt`, never overlap on screen, and move
/// by a whole number of finest voxels per frame within `bound`.
pub fn sample_scene(
    cfg: &SynthConfig,
    spec: &VoxelGridSpec,
    rig: &StereoRig,
    frame_dt: f64,
    bound: BoundDims,
    seed: u64,
) -> Result<SceneSpec> {
    cfg.validate()?;
    let half = bound.half();
    if cfg.motion_voxels[1] as i64 > half[0].min(half[2]) {
        return Err(Error::Config(format!(
            "synth motion up to {} voxels exceeds the tracking bound {}x{}x{}",
            cfg.motion_voxels[1], bound.x, bound.y, bound.z
        )));
    }
    let l = spec.finest_size();
    let (lo, hi) = (spec.roi_min(), spec.roi_max());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = SceneSpec { objects: Vec::new(), rig: rig.clone(), frame_dt, ground_plane_y: cfg.ground_plane_y };
    let target = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut attempts = 0;
    while scene.objects.len() < target {
        attempts += 1;
        if attempts > 2000 {
            if scene.objects.len() >= cfg.min_objects {
                break;
            }
            return Err(Error::Invalid(format!("could not place {} objects in the view after 2000 draws", cfg.min_objects)));
        }
        let shape = if rng.gen_bool(cfg.sphere_fraction) {
            Shape::Sphere { radius: rng.gen_range(cfg.sphere_radius[0]..=cfg.sphere_radius[1]) }
        } else {
            Shape::Box { size: [0; 3].map(|_| rng.gen_range(cfg.box_size[0]..=cfg.box_size[1])) }
        };
        let position = Vec3::new(rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1]), rng.gen_range(lo[2]..hi[2]));
        let yaw = rng.gen_range(-0.6..0.6);
        let (m0, m1) = (cfg.motion_voxels[0] as i64, cfg.motion_voxels[1] as i64);
        let d = loop {
            let d = [rng.gen_range(-m1..=m1), 0, rng.gen_range(-m1..=m1)];
            let m = d[0].abs().max(d[2].abs());
            if (m0..=m1).contains(&m) {
                break d;
            }
        };
        if (0..3).any(|a| d[a].abs() > half[a]) {
            continue;
        }
        let velocity = Vec3::new(d[0] as f64, d[1] as f64, d[2] as f64) * (l / frame_dt);
        let o = SceneObject { shape, position, yaw, velocity, texture_seed: rng.gen() };
        let ok = [0.0, frame_dt].iter().all(|&t| {
            inside_roi(&o, t, spec)
                && [&rig.left, &rig.right].iter().all(|cam| {
                    let Some(r) = screen_rect(&o, t, cam) else { return false };
                    scene.objects.iter().all(|p| screen_rect(p, t, cam).is_some_and(|q| !rects_overlap(&r, &q)))
                })
        });
        if ok {
            scene.objects.push(o);
        }
    }
    Ok(scene)
}

// ---------------------------------------------------------------------------
// frame pairs and datasets

/// Two consecutive stereo frames with their ground truth.
#[derive(Clone, Debug)]
pub struct FramePair {
    pub scene: SceneSpec,
    pub left_t: RgbImage,
    pub right_t: RgbImage,
    pub left_t1: RgbImage,
    pub right_t1: RgbImage,
    pub calib: Calibration,
    /// Coarsest level first.
    pub occ_t: Vec<OccupancyGrid>,
    pub occ_t1: Vec<OccupancyGrid>,
    /// Finest-grid displacement from `t` to `t + 1` in voxel units.
    pub flow: Vec<[f64; 3]>,
}

pub fn make_frame_pair(scene: &SceneSpec, spec: &VoxelGridSpec, fill: Fill) -> FramePair {
    let dt = scene.frame_dt;
    let (left_t, right_t) = render_stereo(scene, 0.0);
    let (left_t1, right_t1) = render_stereo(scene, dt);
    let occ_t = gt_occupancy(scene, spec, 0.0, fill);
    let occ_t1 = gt_occupancy(scene, spec, dt, fill);
    let flow = flow_for(scene, spec, occ_t.last().unwrap(), 0.0, dt, fill);
    FramePair { scene: scene.clone(), left_t, right_t, left_t1, right_t1, calib: scene.rig.calibration(), occ_t, occ_t1, flow }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

fn load_png(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?.to_rgb8())
}

fn occ_name(frame: &str, level: usize) -> String {
    format!("occ_{frame}.level{level}.odtv")
}

/// Writes a frame pair into `dir`, staging it in a sibling directory that is
/// renamed into place once complete.
pub fn write_frame_pair(pair: &FramePair, spec: &VoxelGridSpec, dir: &Path) -> Result<()> {
    let mut staging = dir.as_os_str().to_owned();
    staging.push(".tmp");
    let staging = PathBuf::from(staging);
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    for (img, name) in [
        (&pair.left_t, "left_t.png"),
        (&pair.right_t, "right_t.png"),
        (&pair.left_t1, "left_t1.png"),
        (&pair.right_t1, "right_t1.png"),
    ] {
        save_png(img, &staging.join(name))?;
    }
    pair.calib.write(&staging.join("calib.txt"))?;
    for (frame, pyr) in [("t", &pair.occ_t), ("t1", &pair.occ_t1)] {
        for (j, g) in pyr.iter().enumerate() {
            io::write_occupancy(&staging.join(occ_name(frame, j + 1)), g, j + 1, spec.voxel_size(j + 1))?;
        }
    }
    let finest = pair.occ_t.last().unwrap();
    let records = finest
        .occupied()
        .into_iter()
        .map(|f| FlowRecord { index: finest.coords(f).map(|v| v as u32), motion: pair.flow[f].map(|v| v as f32) })
        .collect();
    FlowDump { dims: finest.dims, voxel_size: spec.finest_size() as f32, records }.write(&staging.join("flow.odtf"))?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub objects: usize,
}

pub fn write_manifest(root: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::from("sample\tseed\tobjects\n");
    for e in entries {
        writeln!(s, "{}\t{}\t{}", e.name, e.seed, e.objects).unwrap();
    }
    io::write_atomic(&root.join(MANIFEST), s.as_bytes())
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("sample\tseed\tobjects") {
        return Err(Error::format(&path, "missing manifest header `sample\\tseed\\tobjects`"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::format(&path, format!("line {}: expected `name<TAB>seed<TAB>objects`", i + 2));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                name: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad())?,
                objects: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Summary of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub samples: usize,
    /// Mean occupied fraction of the finest ground-truth grid at `t`.
    pub mean_occupancy: f64,
}

/// Writes `cfg.num_samples` seeded frame pairs and the manifest under `root`.
pub fn generate_dataset(
    cfg: &SynthConfig,
    spec: &VoxelGridSpec,
    rig: &StereoRig,
    frame_dt: f64,
    bound: BoundDims,
    root: &Path,
) -> Result<DatasetStats> {
    cfg.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(cfg.num_samples);
    let mut occ_sum = 0.0;
    for k in 0..cfg.num_samples {
        let seed = sample_seed(cfg.seed, k);
        let scene = sample_scene(cfg, spec, rig, frame_dt, bound, seed)?;
        let pair = make_frame_pair(&scene, spec, cfg.fill);
        let finest = pair.occ_t.last().unwrap();
        occ_sum += finest.count() as f64 / finest.len() as f64;
        let name = format!("sample_{k}");
        write_frame_pair(&pair, spec, &root.join(&name))?;
        log::debug!("wrote {name} ({} objects, {} occupied voxels)", scene.objects.len(), finest.count());
        entries.push(ManifestEntry { name, seed, objects: scene.objects.len() });
    }
    write_manifest(root, &entries)?;
    let mean_occupancy = if cfg.num_samples == 0 { 0.0 } else { occ_sum / cfg.num_samples as f64 };
    Ok(DatasetStats { samples: cfg.num_samples, mean_occupancy })
}

/// A sample read back from disk; ground truth and the second frame are
/// optional so plain stereo captures load too.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub left_t: Tensor,
    pub right_t: Tensor,
    pub frame_t1: Option<(Tensor, Tensor)>,
    pub calib: Calibration,
    pub occ_t: Option<Vec<OccupancyGrid>>,
    pub occ_t1: Option<Vec<OccupancyGrid>>,
    pub flow: Option<Vec<[f64; 3]>>,
}

fn load_pyramid(dir: &Path, frame: &str, spec: &VoxelGridSpec) -> Result<Option<Vec<OccupancyGrid>>> {
    if !dir.join(occ_name(frame, 1)).exists() {
        return Ok(None);
    }
    (1..=spec.num_levels())
        .map(|j| {
            let path = dir.join(occ_name(frame, j));
            let d = io::read_occupancy(&path)?;
            if d.grid.dims != spec.dims(j) {
                return Err(Error::format(&path, format!("grid dims {:?} do not match {:?}", d.grid.dims, spec.dims(j))));
            }
            Ok(d.grid)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn load_sample(dir: &Path, spec: &VoxelGridSpec) -> Result<Sample> {
    let calib = Calibration::read(&dir.join("calib.txt"))?;
    let img = |name: &str| -> Result<Tensor> {
        let path = dir.join(name);
        let im = load_png(&path)?;
        if im.dimensions() != (calib.image_width as u32, calib.image_height as u32) {
            return Err(Error::format(&path, format!("image is {:?}, calibration says {}x{}", im.dimensions(), calib.image_width, calib.image_height)));
        }
        Ok(image_to_tensor(&im))
    };
    let frame_t1 = if dir.join("left_t1.png").exists() { Some((img("left_t1.png")?, img("right_t1.png")?)) } else { None };
    let flow_path = dir.join("flow.odtf");
    let flow = if flow_path.exists() {
        let d = FlowDump::read(&flow_path)?;
        if d.dims != spec.finest_dims() {
            return Err(Error::format(&flow_path, format!("flow dims {:?} do not match {:?}", d.dims, spec.finest_dims())));
        }
        Some(d.dense())
    } else {
        None
    };
    Ok(Sample {
        name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        left_t: img("left_t.png")?,
        right_t: img("right_t.png")?,
        frame_t1,
        calib,
        occ_t: load_pyramid(dir, "t", spec)?,
        occ_t1: load_pyramid(dir, "t1", spec)?,
        flow,
    })
}

/// Every sample listed in `root`'s manifest.
pub fn load_dataset(root: &Path, spec: &VoxelGridSpec) -> Result<Vec<Sample>> {
    read_manifest(root)?.iter().map(|e| load_sample(&root.join(&e.name), spec)).collect()
}
