//! Model, training and run configuration with the built-in profiles.
//!
//! A run file is TOML: `profile = "desk"` selects the defaults, and optional
//! `[model]` / `[train]` tables override individual fields. Unknown keys are
//! rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ChamferVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Pcn,
    Shapenet55,
    Desk,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Pcn, Profile::Shapenet55, Profile::Desk];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Pcn => "pcn",
            Profile::Shapenet55 => "shapenet55",
            Profile::Desk => "desk",
        }
    }

    pub fn model(self) -> ModelConfig {
        match self {
            Profile::Pcn => ModelConfig::pcn(),
            Profile::Shapenet55 => ModelConfig::shapenet55(),
            Profile::Desk => ModelConfig::desk(),
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Profile::Pcn => TrainConfig {
                lr: 1e-4,
                decay: 0.7,
                decay_every: 40,
                batch_size: 12,
                epochs: 400,
                seed: 0,
                steps: None,
                loss: ChamferVariant::L1,
                partial_matching: false,
            },
            Profile::Shapenet55 => TrainConfig {
                lr: 1e-4,
                decay: 0.98,
                decay_every: 2,
                batch_size: 16,
                epochs: 300,
                seed: 0,
                steps: None,
                loss: ChamferVariant::L2,
                partial_matching: true,
            },
            Profile::Desk => TrainConfig {
                lr: 1e-4,
                decay: 1.0,
                decay_every: 1,
                batch_size: 4,
                epochs: 1000,
                seed: 0,
                steps: None,
                loss: ChamferVariant::L1,
                partial_matching: false,
            },
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown profile `{s}` (expected pcn, shapenet55 or desk)")))
    }
}

/// One set-abstraction layer. `centroids == None` is the global layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetAbstractionConfig {
    pub widths: Vec<usize>,
    pub centroids: Option<usize>,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Partial input size.
    pub n_in: usize,
    /// Size of the merged coarse cloud.
    pub n0: usize,
    /// Size of the decoded coarse cloud before merging.
    pub n_coarse: usize,
    /// Upsampling rates of the two refinement stages.
    pub rates: [usize; 2],
    pub point_encoder: Vec<SetAbstractionConfig>,

    pub n_views: usize,
    pub resolution: usize,
    pub view_distance: f64,
    /// Half-extent of the normalized coordinate range.
    pub half_extent: f64,
    /// Output widths of the four stride-2 convolution blocks.
    pub view_channels: Vec<usize>,
    /// Width of the view-fusion query/key/value embeddings.
    pub fusion_width: usize,

    /// Channels per point produced by the transposed convolution.
    pub seed_width: usize,
    pub coarse_attention: usize,
    /// Hidden widths of the coordinate regression MLP.
    pub coarse_mlp: Vec<usize>,

    /// EdgeConv output widths; the first runs in coordinate space.
    pub edge_widths: Vec<usize>,
    pub edge_k: Vec<usize>,
    /// Attention embedding width in the refinement stages.
    pub embed_width: usize,
    /// Hidden decoder widths before the final `offset_unit · r` layer, per stage.
    pub decoder_hidden: [Vec<usize>; 2],
    /// Per-point width after reshaping to `rN` rows.
    pub offset_unit: usize,
    pub offset_hidden: usize,
    /// Distance scale of the incompleteness embedding.
    pub gamma: f64,
    /// Divide attention logits by √d.
    pub scaled_attention: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn pcn() -> Self {
        Self {
            n_in: 2048,
            n0: 512,
            n_coarse: 512,
            rates: [4, 8],
            point_encoder: vec![
                SetAbstractionConfig {
                    widths: vec![64, 128],
                    centroids: Some(512),
                    k: 16,
                },
                SetAbstractionConfig {
                    widths: vec![256],
                    centroids: Some(128),
                    k: 16,
                },
                SetAbstractionConfig {
                    widths: vec![512, 256],
                    centroids: None,
                    k: 0,
                },
            ],
            n_views: 3,
            resolution: 224,
            view_distance: 0.7,
            half_extent: 0.5,
            view_channels: vec![32, 64, 128, 256],
            fusion_width: 256,
            seed_width: 64,
            coarse_attention: 512,
            coarse_mlp: vec![256, 64],
            edge_widths: vec![64, 256],
            edge_k: vec![16, 8],
            embed_width: 256,
            decoder_hidden: [vec![768], vec![512]],
            offset_unit: 128,
            offset_hidden: 64,
            gamma: 0.2,
            scaled_attention: false,
            init_seed: 0,
        }
    }

    pub fn shapenet55() -> Self {
        Self {
            n0: 1024,
            n_coarse: 1024,
            rates: [2, 4],
            view_distance: 1.5,
            half_extent: 1.0,
            decoder_hidden: [vec![], vec![]],
            ..Self::pcn()
        }
    }

    /// Small configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            n_in: 512,
            n0: 128,
            n_coarse: 128,
            rates: [2, 2],
            point_encoder: vec![
                SetAbstractionConfig {
                    widths: vec![32, 64],
                    centroids: Some(128),
                    k: 16,
                },
                SetAbstractionConfig {
                    widths: vec![128],
                    centroids: Some(32),
                    k: 16,
                },
                SetAbstractionConfig {
                    widths: vec![128, 64],
                    centroids: None,
                    k: 0,
                },
            ],
            n_views: 3,
            resolution: 64,
            view_distance: 0.7,
            half_extent: 0.5,
            view_channels: vec![8, 16, 32, 64],
            fusion_width: 64,
            seed_width: 32,
            coarse_attention: 64,
            coarse_mlp: vec![64, 32],
            edge_widths: vec![32, 64],
            edge_k: vec![16, 8],
            embed_width: 64,
            decoder_hidden: [vec![96], vec![96]],
            offset_unit: 32,
            offset_hidden: 16,
            gamma: 0.2,
            scaled_attention: false,
            init_seed: 0,
        }
    }

    pub fn point_feature_width(&self) -> usize {
        self.point_encoder
            .last()
            .and_then(|l| l.widths.last())
            .copied()
            .unwrap_or(0)
    }

    /// Width of the global shape descriptor.
    pub fn descriptor_width(&self) -> usize {
        self.fusion_width + self.point_feature_width()
    }

    pub fn fov_deg(&self) -> f64 {
        crate::selfview::framing_fov_deg(self.view_distance, self.half_extent)
    }

    /// Number of rows of the partial-input features used by the refiners.
    pub fn partial_feature_rows(&self) -> usize {
        (self.n_in / 4).max(1)
    }

    pub fn output_sizes(&self) -> [usize; 3] {
        let p1 = self.n0 * self.rates[0];
        [self.n0, p1, p1 * self.rates[1]]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_in == 0 || self.n0 == 0 || self.n_coarse == 0 {
            return bad("point counts must be positive".into());
        }
        if self.n0 > self.n_coarse + self.n_in {
            return bad(format!("n0 = {} exceeds n_coarse + n_in", self.n0));
        }
        if self.rates.contains(&0) {
            return bad("upsampling rates must be at least 1".into());
        }
        if self.point_encoder.is_empty() || self.point_encoder.iter().any(|l| l.widths.is_empty()) {
            return bad("point encoder needs layers with non-empty widths".into());
        }
        let mut n = self.n_in;
        for (i, l) in self.point_encoder.iter().enumerate() {
            if let Some(m) = l.centroids {
                if m == 0 || m > n || l.k == 0 {
                    return bad(format!("set abstraction {i}: need 1 <= centroids <= {n} and k >= 1"));
                }
                n = m;
            } else if i + 1 != self.point_encoder.len() {
                return bad("only the last set abstraction may be global".into());
            }
        }
        if self.point_encoder.last().is_some_and(|l| l.centroids.is_some()) {
            return bad("the last set abstraction must be global".into());
        }
        if self.n_views == 0 || self.resolution < 8 || self.view_channels.len() != 4 {
            return bad("need at least one view, resolution >= 8 and four view blocks".into());
        }
        if !(self.view_distance > 0.0 && self.half_extent > 0.0 && self.gamma > 0.0) {
            return bad("view distance, half extent and gamma must be positive".into());
        }
        if self.edge_widths.len() != 2 || self.edge_k.len() != 2 || self.edge_k.contains(&0) {
            return bad("partial feature extractor needs two EdgeConv layers with k >= 1".into());
        }
        if self.embed_width % 2 != 0 {
            return bad("embed_width must be even (sinusoidal channel pairs)".into());
        }
        if self.coarse_mlp.is_empty() && self.coarse_attention == 0 {
            return bad("coarse decoder widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps (overrides `epochs`).
    pub steps: Option<usize>,
    pub loss: ChamferVariant,
    /// Add the one-sided input coverage term to the loss.
    pub partial_matching: bool,
}

impl TrainConfig {
    /// `lr₀ · decay^⌊epoch / decay_every⌋`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_every.max(1)) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("need lr > 0 and 0 < decay <= 1".into()));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch_size and decay_every must be positive".into()));
        }
        Ok(())
    }
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_profile(profile: Profile) -> Self {
        Self {
            profile,
            model: profile.model(),
            train: profile.train(),
        }
    }

    /// Parses a run file: profile defaults with per-field overrides.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile: Profile = match file.remove("profile") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            None => Profile::Desk,
        };
        let base = Self::from_profile(profile);
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merged.remove("profile");
        merge(&mut merged, file, "")?;
        merged.insert("profile".into(), toml::Value::String(profile.name().into()));
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Recursively overlays `over` onto `base`; keys missing from `base` are errors.
fn merge(base: &mut toml::Table, over: toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in over {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (None, _) if !known_optional(&path) => {
                return Err(Error::Config(format!("unknown key `{path}`")));
            }
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &path)?,
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    Ok(())
}

/// Optional fields that serialize to nothing when unset.
fn known_optional(path: &str) -> bool {
    matches!(path, "train.steps")
}
