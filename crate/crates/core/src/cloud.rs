//! Point clouds and the ASCII `.xyz` format (one `x y z` triple per line,
//! `#` starts a comment).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pcomplete_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<[T; 3]>,
}

impl<T: Scalar> PointCloud<T> {
    /// Fails on an empty list or any non-finite coordinate.
    pub fn new(points: Vec<[T; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::pre("point cloud", "needs at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::pre("point cloud", format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn from_f64(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| p.map(T::of)).collect())
    }

    /// Builds a cloud from a `[N, 3]` tensor.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] != 3 {
            return Err(Error::pre("point cloud", format!("expected [N, 3], got {:?}", t.shape())));
        }
        Self::new(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&[self.len(), 3], self.flat()).expect("N x 3")
    }

    pub fn flat(&self) -> Vec<T> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn points(&self) -> &[[T; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, i: usize) -> [T; 3] {
        self.points[i]
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
        }
    }

    /// Concatenation `self ∪ other` (rows of `self` first).
    pub fn concat(&self, other: &Self) -> Self {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        Self { points }
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud<U> {
        PointCloud {
            points: self.points.iter().map(|p| p.map(|c| U::of(c.to_f64_lossy()))).collect(),
        }
    }

    /// Largest distance from the origin.
    pub fn radius(&self) -> T {
        self.points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(T::zero(), T::max)
    }

    pub fn map(&self, f: impl Fn([T; 3]) -> [T; 3]) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn to_xyz_string(&self) -> String {
        let mut s = String::with_capacity(self.len() * 32);
        for p in &self.points {
            let _ = writeln!(
                s,
                "{} {} {}",
                fmt6(p[0].to_f64_lossy()),
                fmt6(p[1].to_f64_lossy()),
                fmt6(p[2].to_f64_lossy())
            );
        }
        s
    }

    pub fn parse_xyz(text: &str, path: &Path) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 coordinates, found {}", fields.len())));
            }
            let mut p = [T::zero(); 3];
            for (slot, f) in p.iter_mut().zip(&fields) {
                let v: f64 = f.parse().map_err(|_| bad(format!("invalid number `{f}`")))?;
                if !v.is_finite() {
                    return Err(bad(format!("non-finite coordinate `{f}`")));
                }
                *slot = T::of(v);
            }
            points.push(p);
        }
        if points.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: "no points".into(),
            });
        }
        Ok(Self { points })
    }

    pub fn read_xyz(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_xyz(&text, path)
    }

    pub fn write_xyz(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_xyz_string()).map_err(|e| Error::io(path, e))
    }
}

/// Six significant digits in scientific notation; round-trips at that precision.
fn fmt6(v: f64) -> String {
    format!("{v:.5e}")
}
