//! Coarse stage: point and view encoders, view fusion into the global shape
//! descriptor, the coarse decoder and the merge with the partial input.

use pcomplete_tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::cloud::PointCloud;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{broadcast_row, Attention, Conv3x3, Linear, Mlp};
use crate::pointops::{fps, SetAbstraction};
use crate::selfview::ViewSet;

/// Hierarchical set-abstraction encoder producing one `[1, C_p]` row.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub layers: Vec<SetAbstraction>,
}

impl PointEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = 0;
        for (i, l) in cfg.point_encoder.iter().enumerate() {
            let sa = SetAbstraction::new(store, &format!("points.sa{i}"), width, &l.widths, l.centroids, l.k, rng)?;
            width = sa.out_width();
            layers.push(sa);
        }
        Ok(Self { layers })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, cloud: &PointCloud<T>) -> Result<Var> {
        let mut pts = cloud.clone();
        let mut feats = None;
        for layer in &self.layers {
            let (c, f) = layer.forward(tape, &pts, feats)?;
            pts = c;
            feats = Some(f);
        }
        feats.ok_or_else(|| Error::pre("encode_points", "encoder has no layers"))
    }
}

/// Shared-weight convolutional encoder applied to each depth map, ending in
/// global average pooling.
#[derive(Clone, Debug)]
pub struct ViewEncoder {
    pub blocks: Vec<Conv3x3>,
    /// Depths are divided by this before the first block.
    pub depth_scale: f64,
}

impl ViewEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut cin = 1;
        for (i, &c) in cfg.view_channels.iter().enumerate() {
            blocks.push(Conv3x3::new(store, &format!("views.conv{i}"), cin, c, 2, rng)?);
            cin = c;
        }
        Ok(Self {
            blocks,
            depth_scale: cfg.view_distance + cfg.half_extent,
        })
    }

    pub fn out_width(&self) -> usize {
        self.blocks.last().map(|b| b.lin.cout).unwrap_or(1)
    }

    /// `[N_V, C_v]`, one row per view.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, views: &ViewSet<T>) -> Result<Var> {
        let stack = views.depth_tensor()?;
        let (nv, h, w) = (stack.shape()[0], stack.shape()[2], stack.shape()[3]);
        let inv = T::of(1.0 / self.depth_scale);
        let mut rows = Vec::with_capacity(nv);
        for v in 0..nv {
            let data = stack.data()[v * h * w..(v + 1) * h * w].iter().map(|&d| d * inv).collect();
            let mut x = tape.constant(Tensor::new(&[h * w, 1], data)?);
            let (mut ch, mut cw) = (h, w);
            for block in &self.blocks {
                let (y, (oh, ow)) = block.forward(tape, x, ch, cw)?;
                x = tape.relu(y);
                (ch, cw) = (oh, ow);
            }
            let pooled = tape.mean_reduce(x, 0)?;
            let c = tape.shape(pooled)[0];
            rows.push(tape.reshape(pooled, &[1, c])?);
        }
        Ok(tape.concat(&rows, 0)?)
    }
}

/// Attention across views, guided by the point feature and positioned by the
/// camera locations.
#[derive(Clone, Debug)]
pub struct ViewFusion {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub pos: Linear,
    pub view_width: usize,
    pub point_width: usize,
    pub scaled: bool,
}

/// Fused descriptor `[1, D + C_p]` and the view attention matrix `[N_V, N_V]`.
pub struct Fused {
    pub descriptor: Var,
    pub weights: Var,
}

impl ViewFusion {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        view_width: usize,
        point_width: usize,
        width: usize,
        scaled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let cin = view_width + point_width;
        Ok(Self {
            q: Linear::new(store, "fusion.q", cin, width, true, rng)?,
            k: Linear::new(store, "fusion.k", cin, width, true, rng)?,
            v: Linear::new(store, "fusion.v", cin, width, true, rng)?,
            pos: Linear::new(store, "fusion.pos", 3, width, true, rng)?,
            view_width,
            point_width,
            scaled,
        })
    }

    /// `f_v: [N_V, C_v]`, `f_p: [1, C_p]`, `vp: [N_V, 3]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, f_v: Var, f_p: Var, vp: Var) -> Result<Fused> {
        let (sv, sp, sx) = (tape.shape(f_v).to_vec(), tape.shape(f_p).to_vec(), tape.shape(vp).to_vec());
        if sv.len() != 2 || sv[1] != self.view_width || sp != [1, self.point_width] || sx != [sv[0], 3] {
            return Err(Error::pre(
                "feature_fusion",
                format!(
                    "expected views [N, {}], point [1, {}], positions [N, 3]; got {sv:?}, {sp:?}, {sx:?}",
                    self.view_width, self.point_width
                ),
            ));
        }
        let guide = broadcast_row(tape, f_p, sv[0])?;
        let tokens = tape.concat(&[f_v, guide], 1)?;
        let pos = self.pos.forward(tape, vp)?;
        let q = self.q.forward(tape, tokens)?;
        let q = tape.add(q, pos)?;
        let k = self.k.forward(tape, tokens)?;
        let k = tape.add(k, pos)?;
        let v = self.v.forward(tape, tokens)?;
        let weights = crate::nn::attention_weights(tape, q, k, self.scaled)?;
        let mixed = tape.matmul(weights, v)?;
        let pooled = tape.max_reduce(mixed, 0)?;
        let d = tape.shape(pooled)[0];
        let pooled = tape.reshape(pooled, &[1, d])?;
        let descriptor = tape.concat(&[pooled, f_p], 1)?;
        Ok(Fused { descriptor, weights })
    }
}

/// Transposed convolution from the descriptor to per-point seeds, then a
/// self-attention layer and an MLP regressing coordinates.
#[derive(Clone, Debug)]
pub struct CoarseDecoder {
    pub seeds: ParamId,
    pub attention: Attention,
    pub mlp: Mlp,
    pub points: usize,
}

impl CoarseDecoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let g = cfg.descriptor_width();
        let seeds = store.register_fan_in("coarse.seeds", &[g, cfg.seed_width, cfg.n_coarse], g, rng)?;
        let attention = Attention::new_self(
            store,
            "coarse.attn",
            cfg.seed_width,
            cfg.coarse_attention,
            cfg.scaled_attention,
            rng,
        )?;
        let mut widths = vec![cfg.coarse_attention];
        widths.extend_from_slice(&cfg.coarse_mlp);
        widths.push(3);
        let mlp = Mlp::new(store, "coarse.mlp", &widths, false, rng)?;
        Ok(Self {
            seeds,
            attention,
            mlp,
            points: cfg.n_coarse,
        })
    }

    /// `[N_c, 3]` coarse coordinates from a `[1, G]` descriptor.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, descriptor: Var) -> Result<Var> {
        let w = tape.param(self.seeds);
        let seeds = tape.conv_transpose_1d(descriptor, w, 1)?;
        let h = self.attention.forward_self(tape, seeds)?.out;
        self.mlp.forward(tape, h)
    }
}

/// Farthest-point resampling of `P_c ∪ P_in` down to `n0` rows. Gradients flow
/// to the selected rows of `P_c`.
pub fn merge_resample<T: Scalar>(tape: &mut Tape<'_, T>, coarse: Var, partial: &PointCloud<T>, n0: usize) -> Result<Var> {
    let pc = PointCloud::from_tensor(tape.value(coarse))?;
    let union = pc.concat(partial);
    if n0 > union.len() {
        return Err(Error::pre(
            "merge_resample",
            format!("cannot keep {n0} of {} merged points", union.len()),
        ));
    }
    let idx = fps(&union, n0)?;
    let pin = tape.constant(partial.to_tensor());
    let merged = tape.concat(&[coarse, pin], 0)?;
    Ok(tape.select_rows(merged, &idx)?)
}
