//! Loss, learning-rate schedule and the training loop.

use std::path::Path;

use pcomplete_tensor::{AdamState, Checkpoint, ParamStore, Scalar, Tape, Tensor, Var};

use crate::cloud::PointCloud;
use crate::config::RunConfig;
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::metrics::{chamfer_on_tape, one_sided_on_tape, ChamferVariant};
use crate::model::{Model, Outputs};
use crate::pointops::fps;

/// Farthest-point subset of the ground truth with `n` points.
pub fn downsample_gt<T: Scalar>(gt: &PointCloud<T>, n: usize) -> Result<PointCloud<T>> {
    if n > gt.len() {
        return Err(Error::pre(
            "downsample_gt",
            format!("cannot keep {n} of {} ground-truth points", gt.len()),
        ));
    }
    Ok(gt.select(&fps(gt, n)?))
}

/// Ground truth downsampled to the sizes of `P_c`, `P_1` and `P_2`.
#[derive(Clone, Debug)]
pub struct Targets<T> {
    pub clouds: [PointCloud<T>; 3],
}

impl<T: Scalar> Targets<T> {
    pub fn new(gt: &PointCloud<T>, sizes: [usize; 3]) -> Result<Self> {
        Ok(Self {
            clouds: [
                downsample_gt(gt, sizes[0])?,
                downsample_gt(gt, sizes[1])?,
                downsample_gt(gt, sizes[2])?,
            ],
        })
    }
}

/// `CD(P_c, gt↓) + CD(P_1, gt↓) + CD(P_2, gt↓)` with the targets already
/// downsampled to each stage size.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    stages: [Var; 3],
    targets: &Targets<T>,
    variant: ChamferVariant,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (v, t) in stages.into_iter().zip(&targets.clouds) {
        if tape.shape(v)[0] != t.len() {
            return Err(Error::pre(
                "total_loss",
                format!("stage has {} points, target {}", tape.shape(v)[0], t.len()),
            ));
        }
        let tv = tape.constant(t.to_tensor());
        let cd = chamfer_on_tape(tape, v, tv, variant)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, cd)?,
            None => cd,
        });
    }
    Ok(total.expect("three stages"))
}

/// Mean distance from every input point to its nearest predicted point.
pub fn partial_matching_loss<T: Scalar>(tape: &mut Tape<'_, T>, pred: Var, partial: &PointCloud<T>) -> Result<Var> {
    let pin = tape.constant(partial.to_tensor());
    one_sided_on_tape(tape, pin, pred, ChamferVariant::L1)
}

/// One line of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,loss,lr";

    pub fn csv_line(&self) -> String {
        format!("{},{:.9e},{:.6e}", self.step, self.loss, self.lr)
    }
}

/// Training state: model, parameters, optimizer and step counter.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub step: usize,
    pairs: Vec<SamplePair<f32>>,
    targets: Vec<Targets<f32>>,
}

const STEP_KEY: &str = "train.step";

impl Trainer {
    pub fn new(cfg: &RunConfig, pairs: Vec<SamplePair<f32>>) -> Result<Self> {
        cfg.model.validate()?;
        cfg.train.validate()?;
        if pairs.is_empty() {
            return Err(Error::pre("train", "dataset is empty"));
        }
        let (model, params) = Model::init::<f32>(&cfg.model)?;
        let sizes = {
            let [_, p1, p2] = cfg.model.output_sizes();
            [cfg.model.n_coarse, p1, p2]
        };
        let mut targets = Vec::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            if p.partial.len() != cfg.model.n_in {
                return Err(Error::pre(
                    "train",
                    format!("pair {i}: {} input points, model expects {}", p.partial.len(), cfg.model.n_in),
                ));
            }
            targets.push(Targets::new(&p.complete, sizes)?);
        }
        let adam = AdamState::new(&params, cfg.train.lr);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            params,
            adam,
            step: 0,
            pairs,
            targets,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: &RunConfig, pairs: Vec<SamplePair<f32>>, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, pairs)?;
        ckpt.restore_params(&mut t.params)?;
        t.adam.import(&t.params, |name| ckpt.get(name).cloned())?;
        let step = ckpt
            .get(STEP_KEY)
            .ok_or_else(|| Error::pre("resume", "checkpoint has no training step"))?;
        t.step = step.item() as usize;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params);
        for (name, t) in self.adam.export(&self.params) {
            ck.push(name, &t);
        }
        ck.push(STEP_KEY, &Tensor::from_vec(vec![self.step as f32]));
        ck
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.cfg.train.batch_size)
    }

    /// Total steps requested by the configuration.
    pub fn planned_steps(&self) -> usize {
        self.cfg.train.steps.unwrap_or(self.cfg.train.epochs * self.steps_per_epoch())
    }

    pub fn lr_at_step(&self, step: usize) -> f64 {
        self.cfg.train.lr_at(step / self.steps_per_epoch())
    }

    fn batch(&self, step: usize) -> std::ops::Range<usize> {
        let bs = self.cfg.train.batch_size;
        let start = (step % self.steps_per_epoch()) * bs;
        start..(start + bs).min(self.pairs.len())
    }

    fn pair_loss(&self, tape: &mut Tape<'_, f32>, i: usize) -> Result<(Var, Outputs)> {
        let out = self.model.forward(tape, &self.pairs[i].partial)?;
        let mut loss = total_loss(tape, [out.coarse, out.p1, out.p2], &self.targets[i], self.cfg.train.loss)?;
        if self.cfg.train.partial_matching {
            let pm = partial_matching_loss(tape, out.p2, &self.pairs[i].partial)?;
            loss = tape.add(loss, pm)?;
        }
        Ok((loss, out))
    }

    /// Training loss of pair `i` at the current parameters.
    pub fn evaluate_pair(&self, i: usize) -> Result<f64> {
        let mut tape = Tape::with_params(&self.params);
        let (loss, _) = self.pair_loss(&mut tape, i)?;
        Ok(tape.value(loss).item() as f64)
    }

    pub fn pairs(&self) -> &[SamplePair<f32>] {
        &self.pairs
    }

    pub fn targets(&self) -> &[Targets<f32>] {
        &self.targets
    }

    /// One Adam step on the next batch. The recorded loss is the batch mean
    /// before the update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let batch = self.batch(step);
        let scale = 1.0 / batch.len() as f32;
        let mut grads: Vec<Vec<f32>> = self.params.ids().map(|id| vec![0.0; self.params.get(id).len()]).collect();
        let mut loss_sum = 0.0f64;
        for i in batch {
            let mut tape = Tape::with_params(&self.params);
            let (loss, _) = self.pair_loss(&mut tape, i).map_err(|e| match e {
                Error::Precondition { msg, .. } if msg.contains("non-finite") => Error::NonFiniteLoss {
                    step,
                    detail: format!("pair {i}: {msg}"),
                },
                other => other,
            })?;
            let l = tape.value(loss).item();
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("pair {i} loss is {l}"),
                });
            }
            loss_sum += l as f64;
            let g = tape.backward(loss)?;
            for (id, gv) in g.params() {
                for (acc, &v) in grads[id.index()].iter_mut().zip(gv) {
                    *acc += v * scale;
                }
            }
        }
        let n = self.batch(step).len() as f64;
        for (id, g) in self.params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("gradient of {} has non-finite entry {bad}", self.params.name(id)),
                });
            }
            self.params.get_mut(id).grad = Some(g);
        }
        let lr = self.lr_at_step(step);
        self.adam.lr = lr;
        self.adam.step(&mut self.params)?;
        self.params.zero_grad();
        self.step += 1;
        Ok(StepRecord {
            step,
            loss: loss_sum / n,
            lr,
        })
    }

    /// Runs `steps` steps, reporting each record as it is produced.
    pub fn run(&mut self, steps: usize, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut trace = Vec::with_capacity(steps);
        for _ in 0..steps {
            let r = self.step()?;
            on_step(&r)?;
            trace.push(r);
        }
        Ok(trace)
    }
}

const CONFIG_FILE: &str = "config.toml";

/// Writes the checkpoint tensors plus the run configuration to `dir`.
pub fn save_run(dir: &Path, cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(dir)?;
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::io(&path, e))
}

/// Loads a model and its parameters from a directory written by [`save_run`].
pub fn load_run(dir: &Path) -> Result<(RunConfig, Model, ParamStore<f32>, Checkpoint)> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let ckpt = Checkpoint::load(dir)?;
    let (model, mut params) = Model::init::<f32>(&cfg.model)?;
    ckpt.restore_params(&mut params)?;
    Ok((cfg, model, params, ckpt))
}
