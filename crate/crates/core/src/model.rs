//! The full completion network: coarse stage followed by two refinement stages.

use pcomplete_tensor::{ParamStore, Scalar, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::coarse::{merge_resample, CoarseDecoder, PointEncoder, ViewEncoder, ViewFusion};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::refine::{PartialFeatures, RefineStage};
use crate::selfview::{orthogonal_viewpoints, project_all, ViewSet};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub points: PointEncoder,
    pub views: ViewEncoder,
    pub fusion: ViewFusion,
    pub coarse: CoarseDecoder,
    pub partial: PartialFeatures,
    pub stages: [RefineStage; 2],
}

/// Tape handles for every stage of one forward pass.
pub struct Outputs {
    pub coarse: Var,
    pub p0: Var,
    pub p1: Var,
    pub p2: Var,
    pub descriptor: Var,
    pub view_weights: Var,
    /// Cross-attention maps of the two refinement stages.
    pub similarity_weights: [Var; 2],
}

/// Point clouds produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Completion<T> {
    pub coarse: PointCloud<T>,
    pub p0: PointCloud<T>,
    pub p1: PointCloud<T>,
    pub p2: PointCloud<T>,
}

impl Model {
    /// Registers all parameters in `store`, initialized from `cfg.init_seed`.
    pub fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let points = PointEncoder::new(store, cfg, rng)?;
        let views = ViewEncoder::new(store, cfg, rng)?;
        let fusion = ViewFusion::new(
            store,
            views.out_width(),
            cfg.point_feature_width(),
            cfg.fusion_width,
            cfg.scaled_attention,
            rng,
        )?;
        let coarse = CoarseDecoder::new(store, cfg, rng)?;
        let partial = PartialFeatures::new(store, cfg, rng)?;
        let stages = [RefineStage::new(store, cfg, 0, rng)?, RefineStage::new(store, cfg, 1, rng)?];
        Ok(Self {
            cfg: cfg.clone(),
            points,
            views,
            fusion,
            coarse,
            partial,
            stages,
        })
    }

    /// Builds a model together with a fresh parameter store.
    pub fn init<T: Scalar>(cfg: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(cfg, &mut store)?;
        Ok((model, store))
    }

    /// Depth maps of `partial` from the configured cameras.
    pub fn render<T: Scalar>(&self, partial: &PointCloud<T>) -> Result<ViewSet<T>> {
        let all = orthogonal_viewpoints(T::of(self.cfg.view_distance));
        if self.cfg.n_views > all.len() {
            return Err(Error::Config(format!("at most {} orthogonal views are available", all.len())));
        }
        project_all(partial, &all[..self.cfg.n_views], self.cfg.resolution, self.cfg.fov_deg())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, partial: &PointCloud<T>) -> Result<Outputs> {
        let views = self.render(partial)?;
        self.forward_with_views(tape, partial, &views)
    }

    pub fn forward_with_views<T: Scalar>(&self, tape: &mut Tape<'_, T>, partial: &PointCloud<T>, views: &ViewSet<T>) -> Result<Outputs> {
        if partial.len() != self.cfg.n_in {
            return Err(Error::pre(
                "model",
                format!("expected {} input points, got {}", self.cfg.n_in, partial.len()),
            ));
        }
        let f_p = self.points.forward(tape, partial)?;
        let f_v = self.views.forward(tape, views)?;
        let vp = tape.constant(views.positions());
        let fused = self.fusion.forward(tape, f_v, f_p, vp)?;
        let coarse = self.coarse.forward(tape, fused.descriptor)?;
        let p0 = merge_resample(tape, coarse, partial, self.cfg.n0)?;
        let pf = self.partial.forward(tape, partial)?;
        let s1 = self.stages[0].forward(tape, p0, partial, pf.features, fused.descriptor)?;
        let s2 = self.stages[1].forward(tape, s1.points, partial, pf.features, fused.descriptor)?;
        Ok(Outputs {
            coarse,
            p0,
            p1: s1.points,
            p2: s2.points,
            descriptor: fused.descriptor,
            view_weights: fused.weights,
            similarity_weights: [s1.similarity_weights, s2.similarity_weights],
        })
    }

    /// Runs the network without recording gradients for later use.
    pub fn complete<T: Scalar>(&self, store: &ParamStore<T>, partial: &PointCloud<T>) -> Result<Completion<T>> {
        let mut tape = Tape::with_params(store);
        let out = self.forward(&mut tape, partial)?;
        Completion::from_outputs(&tape, &out)
    }
}

impl<T: Scalar> Completion<T> {
    pub fn from_outputs(tape: &Tape<'_, T>, out: &Outputs) -> Result<Self> {
        let get = |v: Var| PointCloud::from_tensor(tape.value(v));
        Ok(Self {
            coarse: get(out.coarse)?,
            p0: get(out.p0)?,
            p1: get(out.p1)?,
            p2: get(out.p2)?,
        })
    }
}
