//! Synthetic shape pairs and the on-disk dataset layout:
//! `pairs/NNNN.partial.xyz`, `pairs/NNNN.complete.xyz` and `index.json`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use pcomplete_tensor::Scalar;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    BoxFrame,
    Cylinder,
    Sphere,
    Chair,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::BoxFrame, Category::Cylinder, Category::Sphere, Category::Chair];

    pub fn name(self) -> &'static str {
        match self {
            Category::BoxFrame => "box_frame",
            Category::Cylinder => "cylinder",
            Category::Sphere => "sphere",
            Category::Chair => "chair",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair<T> {
    pub partial: PointCloud<T>,
    pub complete: PointCloud<T>,
    pub category: Category,
    /// Fraction of the complete cloud that survived the cut.
    pub kept: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub gt_points: usize,
    pub input_points: usize,
    pub half_extent: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            gt_points: 1024,
            input_points: 512,
            half_extent: 0.5,
        }
    }
}

/// Resizes a cloud to exactly `n` points: a random subset when larger,
/// random duplicates appended when smaller.
pub fn fit_to_size<T: Scalar, R: Rng>(cloud: &PointCloud<T>, n: usize, rng: &mut R) -> Result<PointCloud<T>> {
    if n == 0 {
        return Err(Error::pre("fit_to_size", "target size must be positive"));
    }
    let len = cloud.len();
    let mut idx: Vec<usize> = (0..len).collect();
    if len >= n {
        idx.shuffle(rng);
        idx.truncate(n);
    } else {
        idx.extend((len..n).map(|_| rng.gen_range(0..len)));
    }
    Ok(cloud.select(&idx))
}

fn sample_shape<R: Rng>(cat: Category, n: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(n);
    match cat {
        Category::BoxFrame => {
            let h = [0; 3].map(|_| rng.gen_range(0.4..1.0));
            // 12 edges: 4 parallel to each axis
            let lens: Vec<f64> = (0..12).map(|e| 2.0 * h[e / 4]).collect();
            let total: f64 = lens.iter().sum();
            for _ in 0..n {
                let mut t = rng.gen_range(0.0..total);
                let mut e = 0;
                while t >= lens[e] && e < 11 {
                    t -= lens[e];
                    e += 1;
                }
                let axis = e / 4;
                let (s1, s2) = (if e % 2 == 0 { -1.0 } else { 1.0 }, if (e / 2) % 2 == 0 { -1.0 } else { 1.0 });
                let mut p = [0.0; 3];
                p[axis] = -h[axis] + t;
                p[(axis + 1) % 3] = s1 * h[(axis + 1) % 3];
                p[(axis + 2) % 3] = s2 * h[(axis + 2) % 3];
                pts.push(p);
            }
        }
        Category::Cylinder => {
            let r = rng.gen_range(0.3..0.8);
            let hh = rng.gen_range(0.3..1.0);
            let side = 2.0 * PI * r * 2.0 * hh;
            let cap = PI * r * r;
            for _ in 0..n {
                let u = rng.gen_range(0.0..side + 2.0 * cap);
                let th = rng.gen_range(0.0..2.0 * PI);
                if u < side {
                    pts.push([r * th.cos(), r * th.sin(), rng.gen_range(-hh..hh)]);
                } else {
                    let rr = r * rng.gen::<f64>().sqrt();
                    let z = if u < side + cap { -hh } else { hh };
                    pts.push([rr * th.cos(), rr * th.sin(), z]);
                }
            }
        }
        Category::Sphere => {
            let r = rng.gen_range(0.4..1.0);
            for _ in 0..n {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let th = rng.gen_range(0.0..2.0 * PI);
                let s = (1.0 - z * z).sqrt();
                pts.push([r * s * th.cos(), r * s * th.sin(), r * z]);
            }
        }
        Category::Chair => {
            // horizontal seat and vertical back sharing the rear edge
            let w = rng.gen_range(0.5..1.0);
            let d = rng.gen_range(0.5..1.0);
            let bh = rng.gen_range(0.5..1.0);
            let seat_z = rng.gen_range(-0.5..0.0);
            let seat = 4.0 * w * d;
            let back = 2.0 * w * bh;
            for _ in 0..n {
                let x = rng.gen_range(-w..w);
                if rng.gen_range(0.0..seat + back) < seat {
                    pts.push([x, rng.gen_range(-d..d), seat_z]);
                } else {
                    pts.push([x, d, seat_z + rng.gen_range(0.0..bh)]);
                }
            }
        }
    }
    pts
}

/// Random rotation about z, then center and scale so the largest coordinate
/// magnitude is `0.9 · half_extent`.
fn place<R: Rng>(pts: &mut [[f64; 3]], half_extent: f64, rng: &mut R) {
    let (s, c) = rng.gen_range(0.0..2.0 * PI).sin_cos();
    for p in pts.iter_mut() {
        *p = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
    let ext = (0..3).map(|a| 0.5 * (hi[a] - lo[a])).fold(0.0, f64::max).max(1e-9);
    let scale = 0.9 * half_extent / ext;
    for p in pts.iter_mut() {
        *p = [0, 1, 2].map(|a| (p[a] - center[a]) * scale);
    }
}

/// Removes every point beyond a random plane so that between 25% and 75% of
/// the points remain. Returns the kept indices in their original order.
pub fn half_space_cut<R: Rng>(pts: &[[f64; 3]], rng: &mut R) -> Vec<usize> {
    let dir = loop {
        let d: [f64; 3] = [0; 3].map(|_| rng.gen_range(-1.0..1.0));
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            break d.map(|c| c / n);
        }
    };
    let n = pts.len();
    let frac = rng.gen_range(0.25..=0.75);
    let keep = ((frac * n as f64).round() as usize).clamp(n.div_ceil(4), (3 * n) / 4).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let proj = |i: usize| pts[i][0] * dir[0] + pts[i][1] * dir[1] + pts[i][2] * dir[2];
    order.sort_by(|&a, &b| proj(a).total_cmp(&proj(b)).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

/// Generates one pair from its own random stream.
pub fn synth_pair<T: Scalar>(seed: u64, index: u64, opts: &SynthOptions) -> Result<SamplePair<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let category = Category::ALL[rng.gen_range(0..Category::ALL.len())];
    let mut pts = sample_shape(category, opts.gt_points, &mut rng);
    place(&mut pts, opts.half_extent, &mut rng);
    let complete = PointCloud::<T>::from_f64(&pts)?;
    let kept_idx = half_space_cut(&pts, &mut rng);
    let kept = kept_idx.len() as f64 / pts.len() as f64;
    let partial = fit_to_size(&complete.select(&kept_idx), opts.input_points, &mut rng)?;
    Ok(SamplePair {
        partial,
        complete,
        category,
        kept,
    })
}

pub fn synth_dataset<T: Scalar>(count: usize, seed: u64, opts: &SynthOptions) -> Result<Vec<SamplePair<T>>> {
    if count == 0 {
        return Err(Error::pre("synth_dataset", "count must be at least 1"));
    }
    (0..count as u64).map(|i| synth_pair(seed, i, opts)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub category: Category,
    pub stream: u64,
    pub kept: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub options: SynthOptions,
    pub pairs: Vec<IndexEntry>,
}

pub fn pair_id(i: usize) -> String {
    format!("{i:04}")
}

pub fn write_dataset<T: Scalar>(dir: &Path, pairs: &[SamplePair<T>], seed: u64, opts: &SynthOptions) -> Result<()> {
    let pdir = dir.join("pairs");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let id = pair_id(i);
        p.partial.write_xyz(&pdir.join(format!("{id}.partial.xyz")))?;
        p.complete.write_xyz(&pdir.join(format!("{id}.complete.xyz")))?;
        entries.push(IndexEntry {
            id,
            category: p.category,
            stream: i as u64,
            kept: p.kept,
        });
    }
    let index = DatasetIndex {
        seed,
        options: opts.clone(),
        pairs: entries,
    };
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<(DatasetIndex, Vec<SamplePair<T>>)> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    let pdir = dir.join("pairs");
    let pairs = index
        .pairs
        .iter()
        .map(|e| {
            Ok(SamplePair {
                partial: PointCloud::read_xyz(&pdir.join(format!("{}.partial.xyz", e.id)))?,
                complete: PointCloud::read_xyz(&pdir.join(format!("{}.complete.xyz", e.id)))?,
                category: e.category,
                kept: e.kept,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, pairs))
}
