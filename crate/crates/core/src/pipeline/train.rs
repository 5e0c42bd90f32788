//! Progressive training: detection first, then detection and tracking
//! jointly.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxtrack_tape::{clip_grad_norm, cosine_lr, AdamW, Binder, Graph, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::grid::OccupancyGrid;
use crate::losses::{detection_loss_var, tracking_loss_var};
use crate::metrics::metric_iou;
use crate::pipeline::checkpoint::{Checkpoint, Phase};
use crate::pipeline::config::RunConfig;
use crate::pipeline::model::{Model, LOG_TAU};
use crate::synthdata::Sample;
use crate::tracker::neighbor_table;

/// Brightness, contrast and saturation factors drawn from
/// `[1 - m, 1 + m]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter { brightness: 1.0, contrast: 1.0, saturation: 1.0 };

    pub fn sample(rng: &mut impl Rng, magnitude: f64) -> Self {
        if magnitude == 0.0 {
            return Self::IDENTITY;
        }
        let mut f = || rng.gen_range(1.0 - magnitude..=1.0 + magnitude);
        Jitter { brightness: f(), contrast: f(), saturation: f() }
    }

    /// Applies the factors to an `[H, W, 3]` image in `[-0.5, 0.5]`.
    /// `mean_gray` is the contrast pivot, shared across the views of one
    /// frame so both receive the identical transform.
    pub fn apply(&self, img: &Tensor, mean_gray: f64) -> Tensor {
        let mut out = img.clone();
        for px in out.data_mut().chunks_exact_mut(3) {
            let mut c = [px[0] + 0.5, px[1] + 0.5, px[2] + 0.5].map(|v| v * self.brightness);
            let pivot = mean_gray * self.brightness;
            c = c.map(|v| (v - pivot) * self.contrast + pivot);
            let gray = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
            c = c.map(|v| gray + (v - gray) * self.saturation);
            for (o, v) in px.iter_mut().zip(c) {
                *o = v.clamp(0.0, 1.0) - 0.5;
            }
        }
        out
    }
}

/// Mean luma of an image in `[-0.5, 0.5]`, on the `[0, 1]` scale.
pub fn mean_gray(img: &Tensor) -> f64 {
    let n = img.len() / 3;
    let s: f64 = img.data().chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).sum();
    s / n as f64 + 0.5
}

/// Per-epoch training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_detection_loss: f64,
    pub train_tracking_loss: Option<f64>,
    /// Finest-level IoU (percent, no range limit) over the epoch's
    /// training forward passes.
    pub train_iou4: f64,
    pub val_detection_loss: Option<f64>,
    pub val_iou4: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn rng_for(seed: u64, epoch: usize, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((epoch as u64) << 32) ^ salt);
    r
}

fn finest_iou(model: &Model, probs: &[f64], gt: &OccupancyGrid, theta: f64) -> f64 {
    let pred = OccupancyGrid::from_vec(gt.dims, probs.iter().map(|&p| p >= theta).collect());
    let l = model.spec.num_levels();
    metric_iou(&pred, gt, &model.spec, l, f64::INFINITY)
}

fn gt_of<'a>(s: &'a Sample, frame: usize) -> Result<&'a [OccupancyGrid]> {
    let g = if frame == 0 { &s.occ_t } else { &s.occ_t1 };
    g.as_deref().ok_or_else(|| Error::Invalid(format!("sample `{}` has no ground-truth occupancy", s.name)))
}

/// Loss terms of one sample on a fresh graph.
struct SampleStep {
    grads: BTreeMap<String, Vec<f64>>,
    detection: f64,
    tracking: Option<f64>,
    iou4: f64,
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    model: Model,
}

impl Trainer<'_> {
    fn detection_step(&self, params: &ParamStore, s: &Sample, jitter: Jitter) -> Result<SampleStep> {
        let g = Graph::new();
        let b = Binder::new(&g, params);
        let rig = s.calib.rig()?;
        let pivot = mean_gray(&s.left_t);
        let out = self.model.forward(&b, &jitter.apply(&s.left_t, pivot), &jitter.apply(&s.right_t, pivot), &rig)?;
        let gt = gt_of(s, 0)?;
        let loss = detection_loss_var(&g, &out.probs, gt, &self.cfg.train.weights)?;
        let grads = b.grads(&g.backward(loss));
        let iou4 = finest_iou(&self.model, g.value(out.probs[3]).data(), &gt[3], self.cfg.decoder.threshold);
        Ok(SampleStep { grads, detection: g.value(loss).item(), tracking: None, iou4 })
    }

    fn joint_step(&self, params: &ParamStore, s: &Sample, jitter: Jitter) -> Result<SampleStep> {
        let (l1, r1) = s
            .frame_t1
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("sample `{}` has no second frame", s.name)))?;
        let flow = s.flow.as_ref().ok_or_else(|| Error::Invalid(format!("sample `{}` has no flow ground truth", s.name)))?;
        let g = Graph::new();
        let b = Binder::new(&g, params);
        let rig = s.calib.rig()?;
        let p0 = mean_gray(&s.left_t);
        let p1 = mean_gray(l1);
        let out_t = self.model.forward(&b, &jitter.apply(&s.left_t, p0), &jitter.apply(&s.right_t, p0), &rig)?;
        let out_t1 = self.model.forward(&b, &jitter.apply(l1, p1), &jitter.apply(r1, p1), &rig)?;
        let (gt_t, gt_t1) = (gt_of(s, 0)?, gt_of(s, 1)?);
        let w = &self.cfg.train.weights;
        let ld = g.scale(g.add(detection_loss_var(&g, &out_t.probs, gt_t, w)?, detection_loss_var(&g, &out_t1.probs, gt_t1, w)?), 0.5);

        // tracking is supervised on the ground-truth occupied voxels of t
        let spec = &self.model.spec;
        let l4 = spec.finest_size();
        let occ_t = &gt_t[3];
        let dims = occ_t.dims;
        let sources = occ_t.occupied();
        let bound = self.model.tracker.bound(l4)?;
        let targets = (!self.model.tracker.match_all).then_some(&gt_t1[3]);
        let table = Rc::new(neighbor_table(dims, &sources, bound, targets));
        let pred = crate::tracker::track_var(
            &g,
            out_t.track_features,
            out_t1.track_features,
            b.param(LOG_TAU),
            dims,
            &sources,
            table,
            bound.volume(),
        );
        let lt = tracking_loss_var(&g, pred, flow, l4);
        let loss = g.add(ld, g.scale(lt, self.cfg.train.lambda));
        let grads = b.grads(&g.backward(loss));
        let iou4 = finest_iou(&self.model, g.value(out_t.probs[3]).data(), &gt_t[3], self.cfg.decoder.threshold);
        Ok(SampleStep { grads, detection: g.value(ld).item(), tracking: Some(g.value(lt).item()), iou4 })
    }

    fn validate_split(&self, params: &ParamStore, samples: &[Sample]) -> Result<(f64, f64)> {
        let (mut loss, mut iou) = (0.0, 0.0);
        for s in samples {
            let g = Graph::no_grad();
            let b = Binder::frozen(&g, params);
            let out = self.model.forward(&b, &s.left_t, &s.right_t, &s.calib.rig()?)?;
            let gt = gt_of(s, 0)?;
            loss += g.value(detection_loss_var(&g, &out.probs, gt, &self.cfg.train.weights)?).item();
            iou += finest_iou(&self.model, g.value(out.probs[3]).data(), &gt[3], self.cfg.decoder.threshold);
        }
        let n = samples.len().max(1) as f64;
        Ok((loss / n, iou / n))
    }

    fn run(&self, phase: Phase, mut ckpt: Checkpoint, train: &[Sample], val: &[Sample]) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::Invalid("training split has no samples".into()));
        }
        let t = &self.cfg.train;
        let end = if t.stop_after == 0 { t.epochs } else { (ckpt.epoch + t.stop_after).min(t.epochs) };
        let mut log = Vec::new();
        for epoch in ckpt.epoch..end {
            let lr = cosine_lr(epoch, t.epochs, t.lr, t.min_lr);
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng_for(t.seed, epoch, 1));
            let (mut ld, mut lt, mut iou) = (0.0, 0.0, 0.0);
            for batch in order.chunks(t.batch) {
                let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for &i in batch {
                    let jitter = Jitter::sample(&mut rng_for(t.seed, epoch, 1000 + i as u64), t.jitter);
                    let step = match phase {
                        Phase::Detection => self.detection_step(&ckpt.params, &train[i], jitter)?,
                        Phase::Joint => self.joint_step(&ckpt.params, &train[i], jitter)?,
                    };
                    if !step.detection.is_finite() || step.tracking.is_some_and(|v| !v.is_finite()) {
                        return Err(Error::Invalid(format!("non-finite loss on sample `{}` in epoch {epoch}", train[i].name)));
                    }
                    ld += step.detection;
                    lt += step.tracking.unwrap_or(0.0);
                    iou += step.iou4;
                    for (k, g) in step.grads {
                        match acc.get_mut(&k) {
                            Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                            None => {
                                acc.insert(k, g);
                            }
                        }
                    }
                }
                let inv = 1.0 / batch.len() as f64;
                acc.values_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= inv);
                if t.clip_norm > 0.0 {
                    clip_grad_norm(&mut acc, t.clip_norm);
                }
                ckpt.optimizer.update(&mut ckpt.params, &acc, lr);
            }
            let n = train.len() as f64;
            let (val_loss, val_iou) = if val.is_empty() {
                (None, None)
            } else {
                let (a, b) = self.validate_split(&ckpt.params, val)?;
                (Some(a), Some(b))
            };
            let entry = EpochLog {
                epoch,
                lr,
                train_detection_loss: ld / n,
                train_tracking_loss: (phase == Phase::Joint).then_some(lt / n),
                train_iou4: iou / n,
                val_detection_loss: val_loss,
                val_iou4: val_iou,
            };
            log::info!(
                "epoch {}/{} lr={:.3e} train L_D={:.5}{} IoU4={:.2}%{}",
                epoch + 1,
                t.epochs,
                lr,
                entry.train_detection_loss,
                entry.train_tracking_loss.map_or(String::new(), |v| format!(" L_T={v:.5}")),
                entry.train_iou4,
                match (val_loss, val_iou) {
                    (Some(l), Some(i)) => format!(" val L_D={l:.5} IoU4={i:.2}%"),
                    _ => String::new(),
                }
            );
            log.push(entry);
            ckpt.epoch = epoch + 1;
            ckpt.write(&t.checkpoint)?;
        }
        ckpt.write(&t.checkpoint)?;
        Ok(TrainOutcome { checkpoint: ckpt, log })
    }
}

fn fresh(cfg: &RunConfig, phase: Phase, params: ParamStore) -> Checkpoint {
    Checkpoint {
        fingerprint: cfg.fingerprint(),
        phase,
        epoch: 0,
        config_text: cfg.to_text(),
        params,
        optimizer: AdamW::new(cfg.train.weight_decay),
    }
}

fn load_checked(cfg: &RunConfig, model: &Model, path: &std::path::Path, allow_mismatch: bool) -> Result<Checkpoint> {
    let c = Checkpoint::read(path)?;
    c.check_fingerprint(&cfg.fingerprint(), path, allow_mismatch)?;
    model.check_params(&c.params).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    Ok(c)
}

/// Options that come from command-line flags rather than the config.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunFlags {
    pub allow_cold_start: bool,
    pub ignore_fingerprint: bool,
}

/// Trains the detection stack (backbone, cost volume, decoder) on `train`,
/// resuming from `train.resume` when set.
pub fn train_detection(cfg: &RunConfig, train: &[Sample], val: &[Sample], flags: RunFlags) -> Result<TrainOutcome> {
    let model = Model::new(cfg);
    let ckpt = match &cfg.train.resume {
        Some(p) => {
            let c = load_checked(cfg, &model, p, flags.ignore_fingerprint)?;
            if c.phase != Phase::Detection {
                return Err(Error::Config(format!("{}: cannot resume detection training from a joint checkpoint", p.display())));
            }
            c
        }
        None => fresh(cfg, Phase::Detection, model.init(cfg.train.seed)),
    };
    Trainer { cfg, model }.run(Phase::Detection, ckpt, train, val)
}

/// Trains detection and tracking together from the detection checkpoint in
/// `train.init`. Without one, a randomly initialized stack is refused unless
/// cold starts are allowed.
pub fn train_joint(cfg: &RunConfig, train: &[Sample], val: &[Sample], flags: RunFlags) -> Result<TrainOutcome> {
    let model = Model::new(cfg);
    let ckpt = if let Some(p) = &cfg.train.resume {
        let c = load_checked(cfg, &model, p, flags.ignore_fingerprint)?;
        if c.phase != Phase::Joint {
            return Err(Error::Config(format!("{}: cannot resume joint training from a detection checkpoint", p.display())));
        }
        c
    } else if let Some(p) = &cfg.train.init {
        let init = load_checked(cfg, &model, p, flags.ignore_fingerprint)?;
        fresh(cfg, Phase::Joint, init.params)
    } else if flags.allow_cold_start {
        log::warn!("joint training from random weights (cold start)");
        fresh(cfg, Phase::Joint, model.init(cfg.train.seed))
    } else {
        return Err(Error::Config(
            "joint training needs a detection checkpoint in train.init; pass --allow-cold-start to train from random weights".into(),
        ));
    };
    Trainer { cfg, model }.run(Phase::Joint, ckpt, train, val)
}
