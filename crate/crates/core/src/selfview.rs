//! Self-projection: render a point cloud into depth maps from fixed cameras.
//!
//! Each point is projected through a pinhole camera and splatted into a single
//! pixel; the pixel keeps the smallest ray depth. Empty pixels hold 0.

use std::fs;
use std::path::{Path, PathBuf};

use pcomplete_tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewpoint<T> {
    pub position: [T; 3],
    pub look_at: [T; 3],
    pub up: [T; 3],
}

fn sub<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot<T: Scalar>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize<T: Scalar>(a: [T; 3]) -> Option<[T; 3]> {
    let n = dot(a, a).sqrt();
    (n > T::zero() && n.is_finite()).then(|| a.map(|c| c / n))
}

impl<T: Scalar> Viewpoint<T> {
    /// Camera basis `(right, up, forward)`; fails when the position equals the
    /// target or `up` is parallel to the viewing direction.
    pub fn basis(&self) -> Result<[[T; 3]; 3]> {
        let degenerate = || Error::pre("viewpoint", "degenerate camera basis");
        let forward = normalize(sub(self.look_at, self.position)).ok_or_else(degenerate)?;
        let right = normalize(cross(forward, self.up)).ok_or_else(degenerate)?;
        let up = cross(right, forward);
        Ok([right, up, forward])
    }

    pub fn distance(&self) -> T {
        let d = sub(self.position, self.look_at);
        dot(d, d).sqrt()
    }
}

/// Cameras on the +x, +y and +z axes at `distance`, looking at the origin.
/// The x and y cameras use +z as up; the z camera uses +x.
pub fn orthogonal_viewpoints<T: Scalar>(distance: T) -> Vec<Viewpoint<T>> {
    let (o, d, one) = (T::zero(), distance, T::one());
    let origin = [o; 3];
    vec![
        Viewpoint {
            position: [d, o, o],
            look_at: origin,
            up: [o, o, one],
        },
        Viewpoint {
            position: [o, d, o],
            look_at: origin,
            up: [o, o, one],
        },
        Viewpoint {
            position: [o, o, d],
            look_at: origin,
            up: [one, o, o],
        },
    ]
}

/// Field of view (degrees) that frames a shape of half-extent `half_extent`
/// seen from `distance`: `2·atan(1.1·R/d)`.
pub fn framing_fov_deg(distance: f64, half_extent: f64) -> f64 {
    2.0 * (1.1 * half_extent / distance).atan().to_degrees()
}

/// Randomly perturbs each camera: rotation of the position about the target by
/// at most `max_angle_deg`, and a distance change of at most `max_distance`.
pub fn jitter_viewpoints<T: Scalar, R: Rng>(
    views: &[Viewpoint<T>],
    max_angle_deg: f64,
    max_distance: f64,
    rng: &mut R,
) -> Vec<Viewpoint<T>> {
    views
        .iter()
        .map(|v| {
            let rel = sub(v.position, v.look_at).map(|c| c.to_f64_lossy());
            let axis = loop {
                let a = [0; 3].map(|_| rng.gen_range(-1.0..1.0));
                if let Some(a) = normalize(a) {
                    break a;
                }
            };
            let theta = rng.gen_range(-max_angle_deg..=max_angle_deg).to_radians();
            // Rodrigues rotation
            let (s, c) = theta.sin_cos();
            let kxv = cross(axis, rel);
            let kdv = dot(axis, rel);
            let rot: [f64; 3] = [0, 1, 2].map(|i| rel[i] * c + kxv[i] * s + axis[i] * kdv * (1.0 - c));
            let len = dot(rot, rot).sqrt();
            let target = (len + rng.gen_range(-max_distance..=max_distance)).max(1e-3);
            let pos: [f64; 3] = [0, 1, 2].map(|i| v.look_at[i].to_f64_lossy() + rot[i] * target / len);
            Viewpoint {
                position: pos.map(T::of),
                look_at: v.look_at,
                up: v.up,
            }
        })
        .collect()
}

/// Row-major `height × width` depth raster; 0 marks an empty pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T> {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<T>,
}

impl<T: Scalar> DepthMap<T> {
    pub fn at(&self, row: usize, col: usize) -> T {
        self.depth[row * self.width + col]
    }

    pub fn occupied(&self) -> usize {
        self.depth.iter().filter(|&&d| d > T::zero()).count()
    }
}

pub fn render_depth<T: Scalar>(cloud: &PointCloud<T>, view: &Viewpoint<T>, res: usize, fov_deg: f64) -> Result<DepthMap<T>> {
    if res < 8 {
        return Err(Error::pre("render_depth", format!("resolution {res} is below 8")));
    }
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::pre("render_depth", format!("field of view {fov_deg} outside (0, 180)")));
    }
    let [right, up, forward] = view.basis()?;
    let focal = T::one() / T::of((fov_deg.to_radians() / 2.0).tan());
    let (w, h) = (res, res);
    let half = T::of(0.5);
    let mut depth = vec![T::zero(); w * h];
    for p in cloud.points() {
        let rel = sub(*p, view.position);
        let (cx, cy, cz) = (dot(rel, right), dot(rel, up), dot(rel, forward));
        if !(cz > T::zero()) {
            continue;
        }
        let x_ndc = cx / cz * focal;
        let y_ndc = cy / cz * focal;
        let col = ((x_ndc + T::one()) * half * T::of(w as f64)).floor();
        let row = ((T::one() - y_ndc) * half * T::of(h as f64)).floor();
        if col < T::zero() || row < T::zero() || col >= T::of(w as f64) || row >= T::of(h as f64) {
            continue;
        }
        let ray = (cx * cx + cy * cy + cz * cz).sqrt();
        let slot = &mut depth[row.to_usize().unwrap_or(0) * w + col.to_usize().unwrap_or(0)];
        if *slot == T::zero() || ray < *slot {
            *slot = ray;
        }
    }
    Ok(DepthMap { width: w, height: h, depth })
}

/// Depth maps of one cloud together with the cameras that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet<T> {
    pub maps: Vec<DepthMap<T>>,
    pub views: Vec<Viewpoint<T>>,
    pub fov_deg: f64,
}

impl<T: Scalar> ViewSet<T> {
    /// Maps stacked as `[N_V, 1, H, W]`.
    pub fn depth_tensor(&self) -> Result<Tensor<T>> {
        let first = self.maps.first().ok_or_else(|| Error::pre("view set", "no views"))?;
        let (h, w) = (first.height, first.width);
        if self.maps.iter().any(|m| m.height != h || m.width != w) {
            return Err(Error::pre("view set", "depth maps differ in resolution"));
        }
        let data = self.maps.iter().flat_map(|m| m.depth.iter().copied()).collect();
        Ok(Tensor::new(&[self.maps.len(), 1, h, w], data)?)
    }

    /// Camera positions as `[N_V, 3]`.
    pub fn positions(&self) -> Tensor<T> {
        let data = self.views.iter().flat_map(|v| v.position).collect();
        Tensor::new(&[self.views.len(), 3], data).expect("N_V x 3")
    }
}

pub fn project_all<T: Scalar>(cloud: &PointCloud<T>, views: &[Viewpoint<T>], res: usize, fov_deg: f64) -> Result<ViewSet<T>> {
    let maps = views
        .iter()
        .map(|v| render_depth(cloud, v, res, fov_deg))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet {
        maps,
        views: views.to_vec(),
        fov_deg,
    })
}

/// Sidecar metadata written next to a raw raster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterMeta {
    pub width: usize,
    pub height: usize,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_deg: f64,
    pub background: f64,
}

impl RasterMeta {
    pub fn for_view<T: Scalar>(map: &DepthMap<T>, view: &Viewpoint<T>, fov_deg: f64) -> Self {
        let f = |v: [T; 3]| v.map(|c| c.to_f64_lossy());
        Self {
            width: map.width,
            height: map.height,
            position: f(view.position),
            look_at: f(view.look_at),
            up: f(view.up),
            fov_deg,
            background: 0.0,
        }
    }

    /// Metadata for a raster that does not come from a camera.
    pub fn plain(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            position: [0.0; 3],
            look_at: [0.0; 3],
            up: [0.0; 3],
            fov_deg: 0.0,
            background: 0.0,
        }
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<stem>.depth` (f32 little-endian, row-major) and `<stem>.meta.json`.
pub fn write_raster<T: Scalar>(stem: &Path, values: &[T], meta: &RasterMeta) -> Result<()> {
    if values.len() != meta.width * meta.height {
        return Err(Error::pre(
            "write_raster",
            format!("{} values for a {}x{} raster", values.len(), meta.height, meta.width),
        ));
    }
    if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_f32_lossy().to_le_bytes()).collect();
    let raw = with_suffix(stem, ".depth");
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let meta_path = with_suffix(stem, ".meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&meta_path, e))
}

pub fn write_depth<T: Scalar>(stem: &Path, map: &DepthMap<T>, view: &Viewpoint<T>, fov_deg: f64) -> Result<()> {
    write_raster(stem, &map.depth, &RasterMeta::for_view(map, view, fov_deg))
}

/// Reads a raster pair written by [`write_raster`].
pub fn read_raster(stem: &Path) -> Result<(Vec<f32>, RasterMeta)> {
    let meta_path = with_suffix(stem, ".meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: RasterMeta = serde_json::from_str(&text)?;
    let raw = with_suffix(stem, ".depth");
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() != 4 * meta.width * meta.height {
        return Err(Error::Parse {
            path: raw,
            line: 0,
            msg: format!("{} bytes for a {}x{} raster", bytes.len(), meta.height, meta.width),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((values, meta))
}

/// Reads a depth map and its camera.
pub fn read_depth(stem: &Path) -> Result<(DepthMap<f32>, Viewpoint<f32>, f64)> {
    let (depth, meta) = read_raster(stem)?;
    let f = |v: [f64; 3]| v.map(|c| c as f32);
    Ok((
        DepthMap {
            width: meta.width,
            height: meta.height,
            depth,
        },
        Viewpoint {
            position: f(meta.position),
            look_at: f(meta.look_at),
            up: f(meta.up),
        },
        meta.fov_deg,
    ))
}
