//! Parameterized layers built from tape operations.
//!
//! Layers hold only [`ParamId`]s; values live in the model's [`ParamStore`], so
//! the same layer runs in `f32` for training and in `f64` for gradient checks.

use pcomplete_tensor::{ParamId, ParamStore, Scalar, Tape, Var};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.register_fan_in(format!("{name}.w"), &[cin, cout], cin, rng)?;
        let b = if bias {
            Some(store.register_fan_in(format!("{name}.b"), &[cout], cin, rng)?)
        } else {
            None
        };
        Ok(Self { w, b, cin, cout })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        Ok(tape.linear(x, w, b)?)
    }
}

/// Stack of pointwise linear layers with ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Apply ReLU after the last layer as well.
    pub final_relu: bool,
}

impl Mlp {
    /// `widths[0]` is the input width; each following entry adds a layer.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        final_relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::pre("mlp", format!("needs at least two widths, got {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, final_relu })
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map(|l| l.cout).unwrap_or(0)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last || self.final_relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Row-stochastic attention weights `softmax(q kᵀ [/ √d])` over keys.
pub fn attention_weights<T: Scalar>(tape: &mut Tape<'_, T>, q: Var, k: Var, scaled: bool) -> Result<Var> {
    let mut logits = tape.matmul_nt(q, k)?;
    if scaled {
        let d = tape.shape(q)[1] as f64;
        logits = tape.scale(logits, T::of(1.0 / d.sqrt()));
    }
    Ok(tape.softmax(logits, 1)?)
}

/// Transformer-style attention block:
/// `b = softmax((x Wq)(y Wk)ᵀ) (y Wv)`, `h = b + x`, `z = h + Linear(h)`.
///
/// Self-attention uses `y = x`. When the query width differs from the hidden
/// width an input projection is applied first.
#[derive(Clone, Debug)]
pub struct Attention {
    pub in_proj: Option<Linear>,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
    pub dim: usize,
    pub kv_width: usize,
    pub scaled: bool,
}

/// Output of an attention block along with its weight matrix (queries × keys).
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

impl Attention {
    /// Self-attention taking `cin`-wide rows to `dim`-wide rows.
    pub fn new_self<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        dim: usize,
        scaled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(store, name, cin, None, dim, scaled, rng)
    }

    /// Cross-attention: queries are `cin` wide, keys/values `kv_width` wide.
    pub fn new_cross<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        kv_width: usize,
        dim: usize,
        scaled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(store, name, cin, Some(kv_width), dim, scaled, rng)
    }

    fn build<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        kv_width: Option<usize>,
        dim: usize,
        scaled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let in_proj = if cin != dim {
            Some(Linear::new(store, &format!("{name}.in"), cin, dim, true, rng)?)
        } else {
            None
        };
        let kv = kv_width.unwrap_or(dim);
        let wq = store.register_fan_in(format!("{name}.wq"), &[dim, dim], dim, rng)?;
        let wk = store.register_fan_in(format!("{name}.wk"), &[kv, dim], kv, rng)?;
        let wv = store.register_fan_in(format!("{name}.wv"), &[kv, dim], kv, rng)?;
        let out = Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?;
        Ok(Self {
            in_proj,
            wq,
            wk,
            wv,
            out,
            dim,
            kv_width: kv,
            scaled,
        })
    }

    /// Self-attention over the rows of `x`.
    pub fn forward_self<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<AttentionOutput> {
        let x = match &self.in_proj {
            Some(p) => p.forward(tape, x)?,
            None => x,
        };
        self.attend(tape, x, x)
    }

    /// Cross-attention of `x` (queries) against `kv` (keys and values).
    pub fn forward_cross<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, kv: Var) -> Result<AttentionOutput> {
        let x = match &self.in_proj {
            Some(p) => p.forward(tape, x)?,
            None => x,
        };
        if tape.shape(kv).get(1) != Some(&self.kv_width) {
            return Err(Error::pre(
                "cross attention",
                format!("key/value rows must be {} wide, got {:?}", self.kv_width, tape.shape(kv)),
            ));
        }
        self.attend(tape, x, kv)
    }

    fn attend<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, kv: Var) -> Result<AttentionOutput> {
        let (wq, wk, wv) = (tape.param(self.wq), tape.param(self.wk), tape.param(self.wv));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(kv, wk)?;
        let v = tape.matmul(kv, wv)?;
        let weights = attention_weights(tape, q, k, self.scaled)?;
        let b = tape.matmul(weights, v)?;
        let h = tape.add(b, x)?;
        let lin = self.out.forward(tape, h)?;
        let out = tape.add(h, lin)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Stack of self-attention layers with the given hidden widths.
#[derive(Clone, Debug)]
pub struct AttentionDecoder {
    pub layers: Vec<Attention>,
}

impl AttentionDecoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        dims: &[usize],
        scaled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::pre("attention decoder", "needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(dims.len());
        let mut width = cin;
        for (i, &d) in dims.iter().enumerate() {
            layers.push(Attention::new_self(store, &format!("{name}.{i}"), width, d, scaled, rng)?);
            width = d;
        }
        Ok(Self { layers })
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map(|l| l.dim).unwrap_or(0)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward_self(tape, h)?.out;
        }
        Ok(h)
    }
}

/// 3×3 convolution with zero padding 1 over an image stored as `[H·W, C]`
/// rows, lowered to a row gather plus a linear layer.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub lin: Linear,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            lin: Linear::new(store, name, 9 * cin, cout, true, rng)?,
            stride,
        })
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    /// Returns the output rows and its `(height, width)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, h: usize, w: usize) -> Result<(Var, (usize, usize))> {
        let cin = self.lin.cin / 9;
        if tape.shape(x) != [h * w, cin] {
            return Err(Error::pre(
                "conv3x3",
                format!("expected [{}, {cin}] input, got {:?}", h * w, tape.shape(x)),
            ));
        }
        let (oh, ow) = self.out_size(h, w);
        let mut index = Vec::with_capacity(oh * ow * 9);
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        let ix = (ox * self.stride + kx) as isize - 1;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        index.push(inside.then(|| iy as usize * w + ix as usize));
                    }
                }
            }
        }
        let patches = tape.gather(x, index)?;
        let cols = tape.reshape(patches, &[oh * ow, 9 * cin])?;
        Ok((self.lin.forward(tape, cols)?, (oh, ow)))
    }
}

/// Repeats a `[1, C]` row `n` times.
pub fn broadcast_row<T: Scalar>(tape: &mut Tape<'_, T>, row: Var, n: usize) -> Result<Var> {
    Ok(tape.select_rows(row, &vec![0; n])?)
}
