//! Evaluation, inference on stereo pairs and visualization exports.

use std::path::{Path, PathBuf};

use voxtrack_tape::ParamStore;

use crate::error::{Error, Result};
use crate::io::{flow_arrows_text, occupancy_points_text, read_occupancy, write_atomic, write_occupancy, FlowDump};
use crate::metrics::{epe_metrics, MetricAccumulator, MetricReport};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::{RunConfig, TrackOccupancy};
use crate::pipeline::model::Model;
use crate::pipeline::train::RunFlags;
use crate::synthdata::{load_dataset, load_sample, Sample};
use crate::tracker::{track_grids, VoxelFlowField};

/// Loads `path` and checks it against the configured architecture.
pub fn load_model(cfg: &RunConfig, path: &Path, flags: RunFlags) -> Result<(Model, ParamStore)> {
    let model = Model::new(cfg);
    let c = Checkpoint::read(path)?;
    c.check_fingerprint(&cfg.fingerprint(), path, flags.ignore_fingerprint)?;
    model.check_params(&c.params).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    Ok((model, c.params))
}

/// Flow between the two frames of `s`, or `None` for single-frame samples.
fn sample_flow(cfg: &RunConfig, model: &Model, params: &ParamStore, s: &Sample, pred_t: &crate::decoder::OccupancyPyramid) -> Result<Option<VoxelFlowField>> {
    let Some((l1, r1)) = &s.frame_t1 else { return Ok(None) };
    let rig = s.calib.rig()?;
    let pred_t1 = model.predict(params, l1, r1, &rig)?;
    let (occ_t, occ_t1) = match cfg.eval.track_occupancy {
        TrackOccupancy::Predicted => (pred_t.binary[3].clone(), pred_t1.binary[3].clone()),
        TrackOccupancy::GroundTruth => match (&s.occ_t, &s.occ_t1) {
            (Some(a), Some(b)) => (a[3].clone(), b[3].clone()),
            _ => return Err(Error::Invalid(format!("sample `{}` has no ground-truth occupancy to track on", s.name))),
        },
    };
    let l4 = model.spec.finest_size();
    let tau = model.logit_scale(params);
    track_grids(&pred_t.track_features, &occ_t, &pred_t1.track_features, &occ_t1, &model.tracker, l4, tau).map(Some)
}

/// Detection and flow metrics over `samples`.
pub fn evaluate(cfg: &RunConfig, model: &Model, params: &ParamStore, samples: &[Sample], split: &str) -> Result<MetricReport> {
    let spec = &model.spec;
    let mut acc = MetricAccumulator::new(split, spec.num_levels(), &cfg.eval.ranges);
    for s in samples {
        let gt = s.occ_t.as_ref().ok_or_else(|| Error::Invalid(format!("sample `{}` has no ground-truth occupancy", s.name)))?;
        let pred = model.predict(params, &s.left_t, &s.right_t, &s.calib.rig()?)?;
        acc.add_detection(&pred.binary, gt, spec);
        if let (Some(field), Some(gt_flow)) = (sample_flow(cfg, model, params, s, &pred)?, &s.flow) {
            let (epe, fg) = epe_metrics(&field.dense(), gt_flow, &gt[3], spec.finest_size())?;
            acc.add_flow(epe, fg);
        }
    }
    Ok(acc.finish())
}

/// Evaluates the checkpoint in `train.checkpoint` on `eval.split` and
/// writes `metrics.csv` and `metrics.txt` to `eval.out`.
pub fn run_eval(cfg: &RunConfig, flags: RunFlags) -> Result<MetricReport> {
    let (model, params) = load_model(cfg, &cfg.train.checkpoint, flags)?;
    let split = cfg.eval.split.as_str();
    let samples = load_dataset(&cfg.split_dir(split)?, &cfg.grid)?;
    let report = evaluate(cfg, &model, &params, &samples, split)?;
    let out = &cfg.eval.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("metrics.csv"), report.to_csv().as_bytes())?;
    write_atomic(&out.join("metrics.txt"), report.to_text().as_bytes())?;
    Ok(report)
}

/// Files written by [`infer`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InferOutput {
    pub files: Vec<PathBuf>,
    pub occupied: usize,
    pub tracked: usize,
}

/// Runs the model on the sample directory `infer.input` (`left_t.png`,
/// `right_t.png`, `calib.txt` and optionally the `t1` pair) and writes the
/// occupancy pyramid, finest-level points and, for pairs, the flow.
pub fn infer(cfg: &RunConfig, flags: RunFlags) -> Result<InferOutput> {
    let (model, params) = load_model(cfg, &cfg.train.checkpoint, flags)?;
    let s = load_sample(&cfg.infer.input, &cfg.grid)?;
    let out = &cfg.infer.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let spec = &model.spec;
    let mut res = InferOutput::default();
    let pred_t = model.predict(&params, &s.left_t, &s.right_t, &s.calib.rig()?)?;
    for (k, g) in pred_t.binary.iter().enumerate() {
        let p = out.join(format!("occ_t.level{}.odtv", k + 1));
        write_occupancy(&p, g, k + 1, spec.voxel_size(k + 1))?;
        res.files.push(p);
    }
    let l = spec.num_levels();
    res.occupied = pred_t.binary[l - 1].count();
    let p = out.join("occ_t.points.txt");
    write_atomic(&p, occupancy_points_text(&pred_t.binary[l - 1], spec, l).as_bytes())?;
    res.files.push(p);
    if s.frame_t1.is_some() {
        // predicted occupancy only; ground truth is not expected at inference
        let mut cfg = cfg.clone();
        cfg.eval.track_occupancy = TrackOccupancy::Predicted;
        if let Some(field) = sample_flow(&cfg, &model, &params, &s, &pred_t)? {
            if !field.flagged.is_empty() {
                log::warn!("{} voxels had no candidate within the search box; their flow is zero", field.flagged.len());
            }
            let dump = FlowDump::from_field(&field, spec.finest_size());
            res.tracked = dump.records.len();
            let p = out.join("flow.odtf");
            dump.write(&p)?;
            res.files.push(p);
            let p = out.join("flow.txt");
            write_atomic(&p, flow_arrows_text(&dump, spec).as_bytes())?;
            res.files.push(p);
        }
    }
    Ok(res)
}

/// Converts one dump (or every dump in a directory) under `viz.input` into
/// text files in `viz.out`. Returns the files written.
pub fn export_viz(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let input = &cfg.viz.input;
    let mut inputs = Vec::new();
    if input.is_dir() {
        for e in std::fs::read_dir(input).map_err(|e| Error::io(input, e))? {
            let p = e.map_err(|e| Error::io(input, e))?.path();
            if matches!(p.extension().and_then(|x| x.to_str()), Some("odtv" | "odtf")) {
                inputs.push(p);
            }
        }
        inputs.sort();
    } else {
        inputs.push(input.clone());
    }
    let out = &cfg.viz.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let spec = &cfg.grid;
    let mut written = Vec::new();
    for p in inputs {
        let text = match p.extension().and_then(|x| x.to_str()) {
            Some("odtv") => {
                let d = read_occupancy(&p)?;
                let level = d.level as usize;
                if level == 0 || level > spec.num_levels() || d.grid.dims != spec.dims(level) {
                    return Err(Error::format(&p, format!("level {level} grid {:?} does not fit the configured grid", d.grid.dims)));
                }
                occupancy_points_text(&d.grid, spec, level)
            }
            Some("odtf") => {
                let d = FlowDump::read(&p)?;
                if d.dims != spec.finest_dims() {
                    return Err(Error::format(&p, format!("flow grid {:?} does not fit the configured grid", d.dims)));
                }
                flow_arrows_text(&d, spec)
            }
            _ => return Err(Error::Invalid(format!("{}: expected an .odtv or .odtf file", p.display()))),
        };
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let dest = out.join(format!("{name}.txt"));
        write_atomic(&dest, text.as_bytes())?;
        written.push(dest);
    }
    Ok(written)
}
