//! The full network: shared backbone, cost volume, decoder and the tracker's
//! logit scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxtrack_tape::{Binder, Graph, ParamStore, Tensor, Var};

use crate::backbone::BackboneConfig;
use crate::costvolume::{CostVolumeNet, StereoFeatures};
use crate::decoder::{DecoderNet, DecoderOutput, OccupancyPyramid};
use crate::error::{Error, Result};
use crate::geometry::{StereoRig, VoxelGridSpec};
use crate::pipeline::config::RunConfig;
use crate::tracker::TrackerConfig;

/// Name of the stored logit-scale parameter.
pub const LOG_TAU: &str = "tracker.log_tau";

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: VoxelGridSpec,
    pub backbone: BackboneConfig,
    pub costvolume: CostVolumeNet,
    pub decoder: DecoderNet,
    pub tracker: TrackerConfig,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Self {
        let d = cfg.backbone.channels;
        Model {
            spec: cfg.grid.clone(),
            backbone: cfg.backbone.clone(),
            costvolume: CostVolumeNet::new(cfg.dmc.clone(), cfg.grid.clone(), d),
            decoder: DecoderNet::new(cfg.decoder.clone(), d),
            tracker: cfg.tracker.clone(),
        }
    }

    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, &mut rng);
        self.costvolume.init(&mut store, &mut rng);
        self.decoder.init(&mut store, &mut rng);
        store.insert(LOG_TAU, Tensor::new(vec![1], vec![self.tracker.init_log_tau()]));
        store
    }

    /// Checks that `store` holds exactly this model's parameters.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let want = self.init(0);
        for (name, t) in want.iter() {
            match store.get(name) {
                None => return Err(Error::Invalid(format!("parameter `{name}` missing"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Invalid(format!("parameter `{name}` has shape {:?}, model needs {:?}", p.shape(), t.shape())))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = store.names().find(|n| !want.contains(n)) {
            return Err(Error::Invalid(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    fn check_images(&self, left: &Tensor, right: &Tensor, rig: &StereoRig) -> Result<()> {
        let s = left.shape();
        if s != right.shape() || s.len() != 3 || s[2] != 3 {
            return Err(Error::Invalid(format!("expected two [H, W, 3] images, got {:?} and {:?}", s, right.shape())));
        }
        if (s[1], s[0]) != (rig.left.image_width, rig.left.image_height) {
            return Err(Error::Invalid(format!(
                "images are {}x{}, calibration says {}x{}",
                s[1], s[0], rig.left.image_width, rig.left.image_height
            )));
        }
        if s[0] < 32 || s[1] < 32 {
            return Err(Error::Invalid(format!("images must be at least 32x32, got {}x{}", s[1], s[0])));
        }
        Ok(())
    }

    /// Occupancy and tracking features of one stereo frame on graph `b`.
    pub fn forward(&self, b: &Binder, left: &Tensor, right: &Tensor, rig: &StereoRig) -> Result<DecoderOutput> {
        self.check_images(left, right, rig)?;
        let g = b.graph();
        let fl = self.backbone.forward(b, g.constant(left.clone()));
        let fr = self.backbone.forward(b, g.constant(right.clone()));
        let feats = StereoFeatures { left: fl.pyramid, right: fr.pyramid, rig };
        let cv = self.costvolume.forward(b, &feats);
        Ok(self.decoder.forward(b, self.to_coarsest(g, cv)))
    }

    /// Average-pools a cost volume built on a finer query grid down to the
    /// coarsest level the decoder starts from.
    fn to_coarsest(&self, g: &Graph, cv: Var) -> Var {
        match self.costvolume.cfg.query_level {
            1 => cv,
            q => g.avg_pool3d(cv, 1 << (q - 1)),
        }
    }

    pub fn predict(&self, params: &ParamStore, left: &Tensor, right: &Tensor, rig: &StereoRig) -> Result<OccupancyPyramid> {
        let g = Graph::no_grad();
        let b = Binder::frozen(&g, params);
        let out = self.forward(&b, left, right, rig)?;
        Ok(self.decoder.assemble(&g, &self.spec, &out))
    }

    pub fn logit_scale(&self, params: &ParamStore) -> f64 {
        crate::tracker::logit_scale(params.get(LOG_TAU).map_or(self.tracker.init_log_tau(), |t| t.data()[0]))
    }
}
