//! Flat `key=value` run configuration.
//!
//! Keys are dotted (`dmc.num_samples=8`). `#` starts a comment, blank lines
//! are skipped, lists are comma separated. Unknown keys, duplicate keys in
//! one file and malformed values are rejected before any work starts.
//! `grid.preset` is applied first wherever it appears, so explicit keys
//! refine a preset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use voxtrack_tape::Padding;

use crate::backbone::BackboneConfig;
use crate::costvolume::{CrossView, DmcConfig, Fusion, OffsetMode};
use crate::decoder::{DecoderConfig, Upsample};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, StereoRig, VoxelGridSpec};
use crate::losses::LEVEL_WEIGHTS;
use crate::synthdata::{Fill, SynthConfig};
use crate::tracker::TrackerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraSettings {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub baseline: f64,
}

impl CameraSettings {
    pub fn rig(&self) -> Result<StereoRig> {
        let cam = CameraModel::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| Error::Config(format!("camera: {e}")))?;
        StereoRig::new(cam, self.baseline).map_err(|e| Error::Config(format!("camera: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub weights: [f64; 4],
    pub seed: u64,
    pub weight_decay: f64,
    /// Weight of the tracking loss in joint training.
    pub lambda: f64,
    /// Color-jitter magnitude; 0.2 draws factors from `[0.8, 1.2]`.
    pub jitter: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    /// Where training writes its checkpoint and evaluation reads it.
    pub checkpoint: PathBuf,
    /// Detection checkpoint joint training starts from.
    pub init: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs of the schedule (0 runs it to the end).
    pub stop_after: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            min_lr: 1e-8,
            epochs: 200,
            batch: 4,
            weights: LEVEL_WEIGHTS,
            seed: 0,
            weight_decay: 0.01,
            lambda: 1.0,
            jitter: 0.2,
            clip_norm: 0.0,
            checkpoint: PathBuf::from("model.ckpt"),
            init: None,
            resume: None,
            stop_after: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: PathBuf,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

/// Occupancy the tracker matches on during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackOccupancy {
    Predicted,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Depth limits in meters.
    pub ranges: Vec<f64>,
    pub split: String,
    pub track_occupancy: TrackOccupancy,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub input: PathBuf,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VizConfig {
    pub input: PathBuf,
    pub out: PathBuf,
}

/// Everything a command needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub grid: VoxelGridSpec,
    pub camera: CameraSettings,
    pub backbone: BackboneConfig,
    pub dmc: DmcConfig,
    pub decoder: DecoderConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub synth_out: PathBuf,
    pub eval: EvalConfig,
    pub infer: InferConfig,
    pub viz: VizConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

fn cfg_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v.parse().map_err(|_| cfg_err(key, format!("`{v}` is not a number")))?;
    if !x.is_finite() {
        return Err(cfg_err(key, format!("`{v}` is not finite")));
    }
    Ok(x)
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| cfg_err(key, format!("`{v}` is not a non-negative integer")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| cfg_err(key, format!("`{v}` is not a non-negative integer")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(cfg_err(key, format!("`{v}` is not true/false"))),
    }
}

fn parse_list<T>(key: &str, v: &str, each: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(|s| each(key, s.trim())).collect()
}

fn parse_array<T: Copy + Default, const N: usize>(
    key: &str,
    v: &str,
    each: impl Fn(&str, &str) -> Result<T>,
) -> Result<[T; N]> {
    let xs = parse_list(key, v, each)?;
    if xs.len() != N {
        return Err(cfg_err(key, format!("expected {N} comma-separated values, got {}", xs.len())));
    }
    let mut out = [T::default(); N];
    out.copy_from_slice(&xs);
    Ok(out)
}

fn parse_choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(n, _)| *n == v).map(|&(_, t)| t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        cfg_err(key, format!("`{v}` is not one of {}", names.join(", ")))
    })
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn list_text<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

const OFFSET_MODES: &[(&str, OffsetMode)] = &[("centered", OffsetMode::Centered), ("literal", OffsetMode::Literal)];
const CROSS_VIEWS: &[(&str, CrossView)] = &[("concat", CrossView::Concat), ("average", CrossView::Average)];
const FUSIONS: &[(&str, Fusion)] = &[("full", Fusion::Full), ("none", Fusion::NoFusion)];
const UPSAMPLES: &[(&str, Upsample)] = &[("trilinear", Upsample::Trilinear), ("transposed", Upsample::Transposed)];
const PADDINGS: &[(&str, Padding)] = &[("zero", Padding::Zero), ("circular", Padding::Circular)];
const FILLS: &[(&str, Fill)] = &[("surface", Fill::Surface), ("solid", Fill::Solid)];
const PRESETS: &[(&str, Preset)] = &[("desk", Preset::Desk), ("paper", Preset::Paper)];
const TRACK_OCC: &[(&str, TrackOccupancy)] =
    &[("predicted", TrackOccupancy::Predicted), ("ground_truth", TrackOccupancy::GroundTruth)];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], v: &T) -> &'static str {
    options.iter().find(|(_, t)| t == v).map(|(n, _)| *n).unwrap()
}

/// Raw grid fields, turned into a [`VoxelGridSpec`] once all keys are read.
struct GridFields {
    roi_min: [f64; 3],
    roi_max: [f64; 3],
    base_dims: [usize; 3],
    levels: usize,
}

impl GridFields {
    fn of(spec: &VoxelGridSpec) -> Self {
        GridFields { roi_min: spec.roi_min(), roi_max: spec.roi_max(), base_dims: spec.base_dims(), levels: spec.num_levels() }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (grid, velocity, ranges) = match p {
            Preset::Desk => (VoxelGridSpec::desk(), 39.0, vec![4.0, 8.0]),
            Preset::Paper => (VoxelGridSpec::paper(), 33.3, vec![15.0, 30.0]),
        };
        let cam = CameraModel::desk();
        RunConfig {
            preset: p,
            grid,
            camera: CameraSettings {
                fx: cam.fx,
                fy: cam.fy,
                cx: cam.cx,
                cy: cam.cy,
                width: cam.image_width,
                height: cam.image_height,
                baseline: 0.5,
            },
            backbone: BackboneConfig::default(),
            dmc: DmcConfig::default(),
            decoder: DecoderConfig::default(),
            tracker: TrackerConfig { velocity, ..TrackerConfig::default() },
            train: TrainConfig::default(),
            data: DataConfig { train: PathBuf::from("data/train"), val: None, test: None },
            synth: SynthConfig::default(),
            synth_out: PathBuf::from("data/train"),
            eval: EvalConfig {
                ranges,
                split: "train".into(),
                track_occupancy: TrackOccupancy::Predicted,
                out: PathBuf::from("eval"),
            },
            infer: InferConfig { input: PathBuf::from("sample"), out: PathBuf::from("infer_out") },
            viz: VizConfig { input: PathBuf::from("infer_out"), out: PathBuf::from("viz") },
        }
    }

    /// Parses `key=value` lines. Duplicate keys are errors.
    pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
        let mut seen = BTreeMap::new();
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key=value`, got `{line}`", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if let Some(prev) = seen.insert(k.clone(), i + 1) {
                return Err(Error::Config(format!("{origin}:{}: `{k}` already set on line {prev}", i + 1)));
            }
            out.push((k, v));
        }
        Ok(out)
    }

    /// Builds a configuration from an optional file plus `key=value`
    /// overrides, which take precedence over the file.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::parse_pairs(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not `key=value`")))?;
            pairs.retain(|(pk, _)| pk != k.trim());
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let preset = match pairs.iter().find(|(k, _)| k == "grid.preset") {
            Some((k, v)) => parse_choice(k, v, PRESETS)?,
            None => Preset::Desk,
        };
        let mut cfg = Self::preset(preset);
        let mut grid = GridFields::of(&cfg.grid);
        for (k, v) in pairs {
            cfg.set(&mut grid, k, v)?;
        }
        cfg.grid = VoxelGridSpec::new(grid.roi_min, grid.roi_max, grid.base_dims, grid.levels)
            .map_err(|e| Error::Config(format!("grid: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, grid: &mut GridFields, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "grid.preset" => {}
            "grid.roi_min" => grid.roi_min = parse_array(k, v, parse_f64)?,
            "grid.roi_max" => grid.roi_max = parse_array(k, v, parse_f64)?,
            "grid.base_dims" => grid.base_dims = parse_array(k, v, parse_usize)?,
            "grid.levels" => grid.levels = parse_usize(k, v)?,

            "camera.fx" => self.camera.fx = parse_f64(k, v)?,
            "camera.fy" => self.camera.fy = parse_f64(k, v)?,
            "camera.cx" => self.camera.cx = parse_f64(k, v)?,
            "camera.cy" => self.camera.cy = parse_f64(k, v)?,
            "camera.width" => self.camera.width = parse_usize(k, v)?,
            "camera.height" => self.camera.height = parse_usize(k, v)?,
            "camera.baseline" => self.camera.baseline = parse_f64(k, v)?,

            "backbone.channels" => self.backbone.channels = parse_usize(k, v)?,
            "backbone.stage_channels" => self.backbone.stage_channels = parse_array(k, v, parse_usize)?,
            "backbone.groups" => self.backbone.groups = parse_usize(k, v)?,
            "backbone.padding" => self.backbone.padding = parse_choice(k, v, PADDINGS)?,

            "dmc.num_samples" => self.dmc.num_samples = parse_usize(k, v)?,
            "dmc.num_blocks" => self.dmc.num_blocks = parse_usize(k, v)?,
            "dmc.fourier_bands" => self.dmc.fourier_bands = parse_usize(k, v)?,
            "dmc.offset_mode" => self.dmc.offset_mode = parse_choice(k, v, OFFSET_MODES)?,
            "dmc.cross_view" => self.dmc.cross_view = parse_choice(k, v, CROSS_VIEWS)?,
            "dmc.fusion" => self.dmc.fusion = parse_choice(k, v, FUSIONS)?,
            "dmc.query_level" => self.dmc.query_level = parse_usize(k, v)?,
            "dmc.ffn_mult" => self.dmc.ffn_mult = parse_usize(k, v)?,

            "decoder.channels" => self.decoder.channels = parse_array(k, v, parse_usize)?,
            "decoder.groups" => self.decoder.groups = parse_usize(k, v)?,
            "decoder.upsample" => self.decoder.upsample = parse_choice(k, v, UPSAMPLES)?,
            "decoder.head_bias" => self.decoder.head_bias = parse_f64(k, v)?,

            "tracker.velocity" => self.tracker.velocity = parse_f64(k, v)?,
            "tracker.fps" => self.tracker.fps = parse_f64(k, v)?,
            "tracker.match_all" => self.tracker.match_all = parse_bool(k, v)?,
            "tracker.bounded" => self.tracker.bounded = parse_bool(k, v)?,
            "tracker.logit_scale" => self.tracker.init_logit_scale = parse_f64(k, v)?,
            "tracker.dense_limit_mb" => self.tracker.dense_limit_mb = parse_u64(k, v)?,

            "train.lr" => self.train.lr = parse_f64(k, v)?,
            "train.min_lr" => self.train.min_lr = parse_f64(k, v)?,
            "train.epochs" => self.train.epochs = parse_usize(k, v)?,
            "train.batch" => self.train.batch = parse_usize(k, v)?,
            "train.weights" => self.train.weights = parse_array(k, v, parse_f64)?,
            "train.seed" => self.train.seed = parse_u64(k, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_f64(k, v)?,
            "train.lambda" => self.train.lambda = parse_f64(k, v)?,
            "train.jitter" => self.train.jitter = parse_f64(k, v)?,
            "train.clip_norm" => self.train.clip_norm = parse_f64(k, v)?,
            "train.checkpoint" => self.train.checkpoint = PathBuf::from(v),
            "train.init" => self.train.init = opt_path(v),
            "train.resume" => self.train.resume = opt_path(v),
            "train.stop_after" => self.train.stop_after = parse_usize(k, v)?,

            "data.train" => self.data.train = PathBuf::from(v),
            "data.val" => self.data.val = opt_path(v),
            "data.test" => self.data.test = opt_path(v),

            "synth.num_samples" => self.synth.num_samples = parse_usize(k, v)?,
            "synth.seed" => self.synth.seed = parse_u64(k, v)?,
            "synth.min_objects" => self.synth.min_objects = parse_usize(k, v)?,
            "synth.max_objects" => self.synth.max_objects = parse_usize(k, v)?,
            "synth.box_size" => self.synth.box_size = parse_array(k, v, parse_f64)?,
            "synth.sphere_radius" => self.synth.sphere_radius = parse_array(k, v, parse_f64)?,
            "synth.sphere_fraction" => self.synth.sphere_fraction = parse_f64(k, v)?,
            "synth.motion_voxels" => self.synth.motion_voxels = parse_array(k, v, parse_usize)?,
            "synth.fill" => self.synth.fill = parse_choice(k, v, FILLS)?,
            "synth.ground_plane_y" => self.synth.ground_plane_y = parse_f64(k, v)?,
            "synth.out" => self.synth_out = PathBuf::from(v),

            "eval.ranges" => self.eval.ranges = parse_list(k, v, parse_f64)?,
            "eval.threshold" => self.decoder.threshold = parse_f64(k, v)?,
            "eval.split" => self.eval.split = v.to_string(),
            "eval.track_occupancy" => self.eval.track_occupancy = parse_choice(k, v, TRACK_OCC)?,
            "eval.out" => self.eval.out = PathBuf::from(v),

            "infer.input" => self.infer.input = PathBuf::from(v),
            "infer.out" => self.infer.out = PathBuf::from(v),
            "viz.input" => self.viz.input = PathBuf::from(v),
            "viz.out" => self.viz.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.num_levels() != 4 {
            return Err(Error::Config(format!("grid.levels must be 4, got {}", self.grid.num_levels())));
        }
        self.camera.rig()?;
        self.backbone.validate()?;
        self.dmc.validate(&self.grid)?;
        self.decoder.validate()?;
        self.tracker.validate()?;
        self.tracker.bound(self.grid.finest_size()).map_err(|e| Error::Config(format!("tracker: {e}")))?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.min_lr >= 0.0 && t.min_lr <= t.lr) {
            return Err(Error::Config(format!("train.lr={} and train.min_lr={} need 0 <= min_lr <= lr, lr > 0", t.lr, t.min_lr)));
        }
        if t.epochs == 0 || t.batch == 0 {
            return Err(Error::Config("train.epochs and train.batch must be at least 1".into()));
        }
        if t.weights.iter().any(|&w| w < 0.0) || (t.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("train.weights {:?} must be non-negative and sum to 1", t.weights)));
        }
        if t.weight_decay < 0.0 || t.lambda < 0.0 || t.clip_norm < 0.0 {
            return Err(Error::Config("train.weight_decay, train.lambda and train.clip_norm must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&t.jitter) {
            return Err(Error::Config(format!("train.jitter={} outside [0, 1)", t.jitter)));
        }
        self.synth.validate()?;
        if self.eval.ranges.is_empty() || self.eval.ranges.iter().any(|&r| r <= 0.0) {
            return Err(Error::Config("eval.ranges needs at least one positive depth".into()));
        }
        if !["train", "val", "test"].contains(&self.eval.split.as_str()) {
            return Err(Error::Config(format!("eval.split=`{}` is not train, val or test", self.eval.split)));
        }
        Ok(())
    }

    /// Directory of the named split.
    pub fn split_dir(&self, split: &str) -> Result<PathBuf> {
        match split {
            "train" => Ok(self.data.train.clone()),
            "val" => self.data.val.clone().ok_or_else(|| Error::Config("data.val is not set".into())),
            "test" => self.data.test.clone().ok_or_else(|| Error::Config("data.test is not set".into())),
            _ => Err(Error::Config(format!("unknown split `{split}`"))),
        }
    }

    /// Canonical `key=value` listing of every setting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("grid.preset", name_of(PRESETS, &self.preset).into());
        kv("grid.roi_min", list_text(&self.grid.roi_min()));
        kv("grid.roi_max", list_text(&self.grid.roi_max()));
        kv("grid.base_dims", list_text(&self.grid.base_dims()));
        kv("grid.levels", self.grid.num_levels().to_string());
        let c = &self.camera;
        kv("camera.fx", c.fx.to_string());
        kv("camera.fy", c.fy.to_string());
        kv("camera.cx", c.cx.to_string());
        kv("camera.cy", c.cy.to_string());
        kv("camera.width", c.width.to_string());
        kv("camera.height", c.height.to_string());
        kv("camera.baseline", c.baseline.to_string());
        let b = &self.backbone;
        kv("backbone.channels", b.channels.to_string());
        kv("backbone.stage_channels", list_text(&b.stage_channels));
        kv("backbone.groups", b.groups.to_string());
        kv("backbone.padding", name_of(PADDINGS, &b.padding).into());
        let d = &self.dmc;
        kv("dmc.num_samples", d.num_samples.to_string());
        kv("dmc.num_blocks", d.num_blocks.to_string());
        kv("dmc.fourier_bands", d.fourier_bands.to_string());
        kv("dmc.offset_mode", name_of(OFFSET_MODES, &d.offset_mode).into());
        kv("dmc.cross_view", name_of(CROSS_VIEWS, &d.cross_view).into());
        kv("dmc.fusion", name_of(FUSIONS, &d.fusion).into());
        kv("dmc.query_level", d.query_level.to_string());
        kv("dmc.ffn_mult", d.ffn_mult.to_string());
        let dc = &self.decoder;
        kv("decoder.channels", list_text(&dc.channels));
        kv("decoder.groups", dc.groups.to_string());
        kv("decoder.upsample", name_of(UPSAMPLES, &dc.upsample).into());
        kv("decoder.head_bias", dc.head_bias.to_string());
        let t = &self.tracker;
        kv("tracker.velocity", t.velocity.to_string());
        kv("tracker.fps", t.fps.to_string());
        kv("tracker.match_all", t.match_all.to_string());
        kv("tracker.bounded", t.bounded.to_string());
        kv("tracker.logit_scale", t.init_logit_scale.to_string());
        kv("tracker.dense_limit_mb", t.dense_limit_mb.to_string());
        let tr = &self.train;
        kv("train.lr", tr.lr.to_string());
        kv("train.min_lr", tr.min_lr.to_string());
        kv("train.epochs", tr.epochs.to_string());
        kv("train.batch", tr.batch.to_string());
        kv("train.weights", list_text(&tr.weights));
        kv("train.seed", tr.seed.to_string());
        kv("train.weight_decay", tr.weight_decay.to_string());
        kv("train.lambda", tr.lambda.to_string());
        kv("train.jitter", tr.jitter.to_string());
        kv("train.clip_norm", tr.clip_norm.to_string());
        kv("train.checkpoint", tr.checkpoint.display().to_string());
        kv("train.init", path_text(&tr.init));
        kv("train.resume", path_text(&tr.resume));
        kv("train.stop_after", tr.stop_after.to_string());
        kv("data.train", self.data.train.display().to_string());
        kv("data.val", path_text(&self.data.val));
        kv("data.test", path_text(&self.data.test));
        let sy = &self.synth;
        kv("synth.num_samples", sy.num_samples.to_string());
        kv("synth.seed", sy.seed.to_string());
        kv("synth.min_objects", sy.min_objects.to_string());
        kv("synth.max_objects", sy.max_objects.to_string());
        kv("synth.box_size", list_text(&sy.box_size));
        kv("synth.sphere_radius", list_text(&sy.sphere_radius));
        kv("synth.sphere_fraction", sy.sphere_fraction.to_string());
        kv("synth.motion_voxels", list_text(&sy.motion_voxels));
        kv("synth.fill", name_of(FILLS, &sy.fill).into());
        kv("synth.ground_plane_y", sy.ground_plane_y.to_string());
        kv("synth.out", self.synth_out.display().to_string());
        kv("eval.ranges", list_text(&self.eval.ranges));
        kv("eval.threshold", self.decoder.threshold.to_string());
        kv("eval.split", self.eval.split.clone());
        kv("eval.track_occupancy", name_of(TRACK_OCC, &self.eval.track_occupancy).into());
        kv("eval.out", self.eval.out.display().to_string());
        kv("infer.input", self.infer.input.display().to_string());
        kv("infer.out", self.infer.out.display().to_string());
        kv("viz.input", self.viz.input.display().to_string());
        kv("viz.out", self.viz.out.display().to_string());
        s
    }

    /// SHA-256 of the settings that decide parameter shapes and meaning:
    /// grid, backbone, cost volume and decoder architecture.
    pub fn fingerprint(&self) -> [u8; 32] {
        let text = self.to_text();
        let mut h = Sha256::new();
        for line in text.lines() {
            let model = ["grid.", "backbone.", "dmc.", "decoder."].iter().any(|p| line.starts_with(p));
            if model && !line.starts_with("grid.preset") {
                h.update(line.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().into()
    }
}
