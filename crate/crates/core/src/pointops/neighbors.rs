use pcomplete_tensor::Scalar;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

use super::sampling::sq_dist;

/// Which neighbor-search backend to use. Both return identical results.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Search {
    #[default]
    Brute,
    /// Uniform grid over the reference cloud (3-D only).
    Grid,
}

/// `K` nearest reference ids per query row, sorted by distance then id.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex<T> {
    pub k: usize,
    /// Row-major `N × K` reference ids.
    pub indices: Vec<usize>,
    /// Row-major `N × K` Euclidean distances.
    pub distances: Vec<T>,
}

impl<T: Scalar> NeighborIndex<T> {
    pub fn rows(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn row_distances(&self, i: usize) -> &[T] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

/// Bounded buffer of the best `(sq_dist, id)` pairs, ordered lexicographically.
struct TopK<T> {
    k: usize,
    items: Vec<(T, usize)>,
}

impl<T: Scalar> TopK<T> {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn before(a: (T, usize), b: (T, usize)) -> bool {
        a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
    }

    #[inline]
    fn offer(&mut self, d: T, id: usize) {
        if self.items.len() == self.k && !Self::before((d, id), self.items[self.k - 1]) {
            return;
        }
        let pos = self.items.partition_point(|&e| Self::before(e, (d, id)));
        self.items.insert(pos, (d, id));
        self.items.truncate(self.k);
    }

    fn full(&self) -> bool {
        self.items.len() == self.k
    }

    fn worst(&self) -> T {
        self.items.last().map(|e| e.0).unwrap_or(T::infinity())
    }

    /// Writes `k_out` entries, repeating the nearest when fewer were found.
    fn emit(&self, k_out: usize, ids: &mut Vec<usize>, dists: &mut Vec<T>) {
        for j in 0..k_out {
            let (d, id) = self.items.get(j).copied().unwrap_or(self.items[0]);
            ids.push(id);
            dists.push(d.sqrt());
        }
    }
}

fn sq_dist_rows<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// Exact brute-force k-NN over flat row-major vectors of width `dim`.
///
/// When `k` exceeds the reference size the row is padded by repeating the
/// nearest neighbor.
pub fn knn_rows<T: Scalar>(query: &[T], reference: &[T], dim: usize, k: usize) -> Result<NeighborIndex<T>> {
    if k == 0 {
        return Err(Error::pre("knn", "K must be at least 1"));
    }
    if dim == 0 || reference.is_empty() {
        return Err(Error::pre("knn", "reference set is empty"));
    }
    let n_ref = reference.len() / dim;
    let kk = k.min(n_ref);
    let nq = query.len() / dim;
    let mut indices = Vec::with_capacity(nq * k);
    let mut distances = Vec::with_capacity(nq * k);
    for q in query.chunks(dim) {
        let mut top = TopK::new(kk);
        for (j, r) in reference.chunks(dim).enumerate() {
            top.offer(sq_dist_rows(q, r), j);
        }
        top.emit(k, &mut indices, &mut distances);
    }
    Ok(NeighborIndex { k, indices, distances })
}

pub fn knn<T: Scalar>(query: &PointCloud<T>, reference: &PointCloud<T>, k: usize) -> Result<NeighborIndex<T>> {
    knn_with(query, reference, k, Search::Brute)
}

pub fn knn_with<T: Scalar>(
    query: &PointCloud<T>,
    reference: &PointCloud<T>,
    k: usize,
    search: Search,
) -> Result<NeighborIndex<T>> {
    match search {
        Search::Brute => knn_rows(&query.flat(), &reference.flat(), 3, k),
        Search::Grid => {
            if k == 0 {
                return Err(Error::pre("knn", "K must be at least 1"));
            }
            let grid = Grid::build(reference);
            let kk = k.min(reference.len());
            let mut indices = Vec::with_capacity(query.len() * k);
            let mut distances = Vec::with_capacity(query.len() * k);
            for q in query.points() {
                grid.search(reference, q, kk).emit(k, &mut indices, &mut distances);
            }
            Ok(NeighborIndex { k, indices, distances })
        }
    }
}

/// Nearest reference id and squared distance for every query point.
pub fn nearest<T: Scalar>(query: &PointCloud<T>, reference: &PointCloud<T>) -> Vec<(usize, T)> {
    let refs = reference.points();
    query
        .points()
        .iter()
        .map(|q| {
            let mut best = (0usize, T::infinity());
            for (j, r) in refs.iter().enumerate() {
                let d = sq_dist(q, r);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Euclidean distance from each point of `x` to the nearest point of `y`.
pub fn min_dist_to_set<T: Scalar>(x: &PointCloud<T>, y: &PointCloud<T>) -> Result<Vec<T>> {
    if y.is_empty() {
        return Err(Error::pre("min_dist_to_set", "target set is empty"));
    }
    Ok(nearest(x, y).into_iter().map(|(_, d)| d.sqrt()).collect())
}

/// Uniform voxel grid over a reference cloud.
struct Grid {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: ids of cell `c` are `ids[start[c]..start[c + 1]]`.
    start: Vec<usize>,
    ids: Vec<usize>,
}

impl Grid {
    fn build<T: Scalar>(cloud: &PointCloud<T>) -> Self {
        let pts: Vec<[f64; 3]> = cloud.points().iter().map(|p| p.map(|c| c.to_f64_lossy())).collect();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &pts {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ext: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]).max(1e-9)).collect();
        let target_cells = (pts.len() as f64 / 2.0).max(1.0);
        let cell = (ext[0] * ext[1] * ext[2] / target_cells).cbrt().max(ext.iter().cloned().fold(0.0, f64::max) / 64.0);
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).min(256));
        let n_cells = dims[0] * dims[1] * dims[2];
        let cell_of = |p: &[f64; 3]| {
            let c = [0, 1, 2].map(|a| (((p[a] - lo[a]) / cell).floor().max(0.0) as usize).min(dims[a] - 1));
            (c[2] * dims[1] + c[1]) * dims[0] + c[0]
        };
        let mut counts = vec![0usize; n_cells + 1];
        for p in &pts {
            counts[cell_of(p) + 1] += 1;
        }
        for c in 0..n_cells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut ids = vec![0; pts.len()];
        for (i, p) in pts.iter().enumerate() {
            let c = cell_of(p);
            ids[fill[c]] = i;
            fill[c] += 1;
        }
        Self {
            origin: lo,
            cell,
            dims,
            start: counts,
            ids,
        }
    }

    fn search<T: Scalar>(&self, reference: &PointCloud<T>, q: &[T; 3], k: usize) -> TopK<T> {
        let refs = reference.points();
        let qf = q.map(|c| c.to_f64_lossy());
        let center = [0, 1, 2].map(|a| {
            let c = ((qf[a] - self.origin[a]) / self.cell).floor();
            c.clamp(0.0, (self.dims[a] - 1) as f64) as isize
        });
        let max_shell = *self.dims.iter().max().unwrap() as isize;
        let mut top = TopK::new(k);
        for s in 0..=max_shell {
            for z in center[2] - s..=center[2] + s {
                for y in center[1] - s..=center[1] + s {
                    for x in center[0] - s..=center[0] + s {
                        let on_shell = (x - center[0]).abs() == s || (y - center[1]).abs() == s || (z - center[2]).abs() == s;
                        if !on_shell {
                            continue;
                        }
                        let c = [x, y, z];
                        if (0..3).any(|a| c[a] < 0 || c[a] >= self.dims[a] as isize) {
                            continue;
                        }
                        let cid = ((z as usize) * self.dims[1] + y as usize) * self.dims[0] + x as usize;
                        for &id in &self.ids[self.start[cid]..self.start[cid + 1]] {
                            top.offer(sq_dist(q, &refs[id]), id);
                        }
                    }
                }
            }
            // every unvisited cell is at least `s` whole cells away
            let bound = s as f64 * self.cell;
            if top.full() && top.worst().to_f64_lossy() < bound * bound * (1.0 - 1e-6) {
                break;
            }
        }
        top
    }
}
