//! Refinement stage: upsample a coarse cloud by predicting per-point offsets
//! from two paths that run side by side.
//!
//! The structure path runs self-attention over the coarse points, with each
//! point's query and key shifted by an embedding of its distance to the
//! partial input. The similarity path cross-attends from those features to
//! local features of the partial input.

use pcomplete_tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::cloud::PointCloud;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{attention_weights, broadcast_row, Attention, AttentionDecoder, Linear, Mlp};
use crate::pointops::{fps, min_dist_to_set, EdgeConv, EdgeSpace};

/// Sinusoidal embedding of `min_dist(x_i, P_in) / γ`, one `[1, C]` row per
/// coarse point. Points lying on the input get `[0, 1, 0, 1, …]`.
///
/// The embedding is a constant on the tape: nearest distances are not
/// differentiated.
pub fn incompleteness_embedding<T: Scalar>(
    tape: &mut Tape<'_, T>,
    coarse: &PointCloud<T>,
    partial: &PointCloud<T>,
    gamma: f64,
    channels: usize,
) -> Result<Var> {
    if !(gamma > 0.0) {
        return Err(Error::pre("incompleteness_embedding", "gamma must be positive"));
    }
    if channels % 2 != 0 {
        return Err(Error::pre("incompleteness_embedding", "channel count must be even"));
    }
    let positions = incompleteness_positions(coarse, partial, gamma)?;
    let p = tape.constant(Tensor::from_vec(positions));
    let h = tape.sinusoidal(p, channels)?;
    let value = tape.value(h).clone();
    Ok(tape.constant(value))
}

/// `min_dist(x_i, P_in) / γ` for every coarse point.
pub fn incompleteness_positions<T: Scalar>(coarse: &PointCloud<T>, partial: &PointCloud<T>, gamma: f64) -> Result<Vec<T>> {
    let inv = T::of(1.0 / gamma);
    Ok(min_dist_to_set(coarse, partial)?.into_iter().map(|d| d * inv).collect())
}

/// Local features of the partial input: EdgeConv in coordinate space, FPS to
/// a quarter of the points, EdgeConv in feature space. Shared by both stages.
#[derive(Clone, Debug)]
pub struct PartialFeatures {
    pub first: EdgeConv,
    pub second: EdgeConv,
    pub rows: usize,
}

/// Partial-input features and the points they belong to.
pub struct PartialOutput<T> {
    pub features: Var,
    pub points: PointCloud<T>,
}

impl PartialFeatures {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let [w1, w2] = [cfg.edge_widths[0], cfg.edge_widths[1]];
        Ok(Self {
            first: EdgeConv::new(store, "partial.edge0", &[3, w1], cfg.edge_k[0], EdgeSpace::Coordinates, rng)?,
            second: EdgeConv::new(store, "partial.edge1", &[w1, w2], cfg.edge_k[1], EdgeSpace::Features, rng)?,
            rows: cfg.partial_feature_rows(),
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, partial: &PointCloud<T>) -> Result<PartialOutput<T>> {
        let coords = tape.constant(partial.to_tensor());
        let f = self.first.forward(tape, partial, coords)?;
        let idx = fps(partial, self.rows.min(partial.len()))?;
        let points = partial.select(&idx);
        let f = tape.select_rows(f, &idx)?;
        let features = self.second.forward(tape, &points, f)?;
        Ok(PartialOutput { features, points })
    }
}

/// Incompleteness-aware self-attention followed by an attention decoder.
#[derive(Clone, Debug)]
pub struct StructureAnalysis {
    pub embed: Linear,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub decoder: AttentionDecoder,
    pub scaled: bool,
}

/// Raw attention features, decoded features and the attention matrix.
pub struct StructureOutput {
    pub raw: Var,
    pub decoded: Var,
    pub weights: Var,
}

impl StructureAnalysis {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        descriptor_width: usize,
        width: usize,
        decoder_dims: &[usize],
        scaled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            embed: Linear::new(store, &format!("{name}.embed"), 3 + descriptor_width, width, true, rng)?,
            wq: store.register_fan_in(format!("{name}.wq"), &[width, width], width, rng)?,
            wk: store.register_fan_in(format!("{name}.wk"), &[width, width], width, rng)?,
            wv: store.register_fan_in(format!("{name}.wv"), &[width, width], width, rng)?,
            decoder: AttentionDecoder::new(store, &format!("{name}.dec"), width, decoder_dims, scaled, rng)?,
            scaled,
        })
    }

    /// Per-point embedding of `concat(x_i, F_g)`.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<'_, T>, points: Var, descriptor: Var) -> Result<Var> {
        let n = tape.shape(points)[0];
        let g = broadcast_row(tape, descriptor, n)?;
        let x = tape.concat(&[points, g], 1)?;
        self.embed.forward(tape, x)
    }

    /// `softmax((f W_Q + h)(f W_K + h)ᵀ) (f W_V)`; `h = None` is plain
    /// self-attention with the same weights.
    pub fn attend<T: Scalar>(&self, tape: &mut Tape<'_, T>, f: Var, h: Option<Var>) -> Result<(Var, Var)> {
        let (wq, wk, wv) = (tape.param(self.wq), tape.param(self.wk), tape.param(self.wv));
        let mut q = tape.matmul(f, wq)?;
        let mut k = tape.matmul(f, wk)?;
        if let Some(h) = h {
            if tape.shape(h) != tape.shape(q) {
                return Err(Error::pre(
                    "structure_analysis",
                    format!("embedding shape {:?} differs from {:?}", tape.shape(h), tape.shape(q)),
                ));
            }
            q = tape.add(q, h)?;
            k = tape.add(k, h)?;
        }
        let v = tape.matmul(f, wv)?;
        let a = attention_weights(tape, q, k, self.scaled)?;
        Ok((tape.matmul(a, v)?, a))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, points: Var, descriptor: Var, h: Var) -> Result<StructureOutput> {
        if tape.shape(h)[0] != tape.shape(points)[0] {
            return Err(Error::pre("structure_analysis", "embedding rows must match point count"));
        }
        let f = self.embed(tape, points, descriptor)?;
        let (raw, weights) = self.attend(tape, f, Some(h))?;
        let decoded = self.decoder.forward(tape, raw)?;
        Ok(StructureOutput { raw, decoded, weights })
    }
}

/// Cross-attention from the structure features to the partial-input features,
/// followed by a decoder of the same shape as the structure path.
#[derive(Clone, Debug)]
pub struct SimilarityAlignment {
    pub cross: Attention,
    pub decoder: AttentionDecoder,
}

pub struct AlignmentOutput {
    pub decoded: Var,
    /// `[N, |F_in|]` cross-attention weights.
    pub weights: Var,
}

impl SimilarityAlignment {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        partial_width: usize,
        decoder_dims: &[usize],
        scaled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            cross: Attention::new_cross(store, &format!("{name}.cross"), width, partial_width, width, scaled, rng)?,
            decoder: AttentionDecoder::new(store, &format!("{name}.dec"), width, decoder_dims, scaled, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, query: Var, partial: Var) -> Result<AlignmentOutput> {
        let out = self.cross.forward_cross(tape, query, partial)?;
        let decoded = self.decoder.forward(tape, out.out)?;
        Ok(AlignmentOutput {
            decoded,
            weights: out.weights,
        })
    }
}

/// Maps `concat(F_Q', F_H')` to `rN` offsets: a linear expansion reshaped to
/// `rN` rows, then an MLP down to three coordinates. Row `i` belongs to
/// coarse point `⌊i / r⌋`.
#[derive(Clone, Debug)]
pub struct OffsetHead {
    pub expand: Linear,
    pub mlp: Mlp,
    pub rate: usize,
    pub unit: usize,
}

impl OffsetHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input_width: usize,
        unit: usize,
        hidden: usize,
        rate: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if rate == 0 {
            return Err(Error::pre("offset_head", "rate must be at least 1"));
        }
        Ok(Self {
            expand: Linear::new(store, &format!("{name}.expand"), input_width, unit * rate, true, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[unit, hidden, 3], false, rng)?,
            rate,
            unit,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, structure: Var, similarity: Var) -> Result<Var> {
        let n = tape.shape(structure)[0];
        let f = tape.concat(&[structure, similarity], 1)?;
        if tape.shape(f)[1] != self.expand.cin {
            return Err(Error::pre(
                "offset_head",
                format!("expected {} combined channels, got {:?}", self.expand.cin, tape.shape(f)),
            ));
        }
        let e = self.expand.forward(tape, f)?;
        let e = tape.relu(e);
        let e = tape.reshape(e, &[n * self.rate, self.unit])?;
        self.mlp.forward(tape, e)
    }
}

/// `P_next[i] = P_prev[⌊i / r⌋] + offsets[i]`.
pub fn apply_offsets<T: Scalar>(tape: &mut Tape<'_, T>, prev: Var, offsets: Var, rate: usize) -> Result<Var> {
    let n = tape.shape(prev)[0];
    if tape.shape(offsets) != [n * rate, 3] {
        return Err(Error::pre(
            "apply_offsets",
            format!("expected [{}, 3] offsets, got {:?}", n * rate, tape.shape(offsets)),
        ));
    }
    let parents: Vec<usize> = (0..n * rate).map(|i| i / rate).collect();
    let rep = tape.select_rows(prev, &parents)?;
    Ok(tape.add(rep, offsets)?)
}

/// One refinement stage.
#[derive(Clone, Debug)]
pub struct RefineStage {
    pub structure: StructureAnalysis,
    pub similarity: SimilarityAlignment,
    pub offsets: OffsetHead,
    pub rate: usize,
    pub gamma: f64,
    pub width: usize,
}

/// Stage output with the intermediate attention maps.
pub struct StageOutput {
    pub points: Var,
    pub offsets: Var,
    pub structure_weights: Var,
    pub similarity_weights: Var,
}

impl RefineStage {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        stage: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let rate = cfg.rates[stage];
        let mut dims = cfg.decoder_hidden[stage].clone();
        dims.push(cfg.offset_unit * rate);
        let name = format!("refine{stage}");
        let c = cfg.embed_width;
        let partial_width = cfg.edge_widths[1];
        let s = cfg.scaled_attention;
        Ok(Self {
            structure: StructureAnalysis::new(store, &format!("{name}.structure"), cfg.descriptor_width(), c, &dims, s, rng)?,
            similarity: SimilarityAlignment::new(store, &format!("{name}.similarity"), c, partial_width, &dims, s, rng)?,
            offsets: OffsetHead::new(
                store,
                &format!("{name}.offset"),
                2 * cfg.offset_unit * rate,
                cfg.offset_unit,
                cfg.offset_hidden,
                rate,
                rng,
            )?,
            rate,
            gamma: cfg.gamma,
            width: c,
        })
    }

    /// Upsamples `prev` (`[N, 3]`) by the stage rate.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        prev: Var,
        partial: &PointCloud<T>,
        partial_features: Var,
        descriptor: Var,
    ) -> Result<StageOutput> {
        let prev_cloud = PointCloud::from_tensor(tape.value(prev))?;
        let h = incompleteness_embedding(tape, &prev_cloud, partial, self.gamma, self.width)?;
        let s = self.structure.forward(tape, prev, descriptor, h)?;
        let a = self.similarity.forward(tape, s.raw, partial_features)?;
        let offsets = self.offsets.forward(tape, s.decoded, a.decoded)?;
        let points = apply_offsets(tape, prev, offsets, self.rate)?;
        Ok(StageOutput {
            points,
            offsets,
            structure_weights: s.weights,
            similarity_weights: a.weights,
        })
    }
}
