use pcomplete_tensor::Scalar;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

#[inline]
pub(crate) fn sq_dist<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index of the lexicographically smallest `(x, y, z)`; ties go to the lower index.
pub fn lexicographic_min<T: Scalar>(cloud: &PointCloud<T>) -> usize {
    let pts = cloud.points();
    let mut best = 0;
    for (i, p) in pts.iter().enumerate().skip(1) {
        let b = &pts[best];
        let less = p
            .iter()
            .zip(b)
            .find(|(x, y)| x != y)
            .is_some_and(|(x, y)| x < y);
        if less {
            best = i;
        }
    }
    best
}

/// Farthest point sampling.
///
/// Starts from the lexicographically smallest point, then repeatedly takes the
/// unselected point with the largest distance to the selected set. Ties go to
/// the lower index, so the result does not depend on input order for clouds
/// without exact distance ties.
pub fn fps<T: Scalar>(cloud: &PointCloud<T>, m: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 {
        return Err(Error::pre("fps", "sample count must be at least 1"));
    }
    if m > n {
        return Err(Error::pre("fps", format!("cannot sample {m} points from {n}")));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![T::infinity(); n];
    let mut current = lexicographic_min(cloud);
    for _ in 0..m {
        selected.push(current);
        taken[current] = true;
        let c = pts[current];
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = sq_dist(&pts[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => current = b,
            None => break,
        }
    }
    Ok(selected)
}
