use pcomplete_tensor::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::nn::Mlp;

use super::neighbors::{knn, knn_rows};
use super::sampling::fps;

/// Set abstraction: sample centroids, group neighbors, run a shared MLP on
/// `concat(neighbor_xyz - centroid_xyz, neighbor_feature)` and max-pool.
///
/// With `centroids == None` the layer is global: every point is grouped around
/// a single centroid at the origin and pooled to one row.
#[derive(Clone, Debug)]
pub struct SetAbstraction {
    pub mlp: Mlp,
    pub centroids: Option<usize>,
    pub k: usize,
    pub feature_width: usize,
}

impl SetAbstraction {
    /// `widths` lists MLP output widths; the input width is `3 + feature_width`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        feature_width: usize,
        widths: &[usize],
        centroids: Option<usize>,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if centroids.is_some() && k == 0 {
            return Err(Error::pre("set abstraction", "K must be at least 1"));
        }
        let mut all = vec![3 + feature_width];
        all.extend_from_slice(widths);
        Ok(Self {
            mlp: Mlp::new(store, name, &all, true, rng)?,
            centroids,
            k,
            feature_width,
        })
    }

    pub fn out_width(&self) -> usize {
        self.mlp.out_width()
    }

    /// `features` is `[N, feature_width]` (or `None` when the width is zero).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        cloud: &PointCloud<T>,
        features: Option<Var>,
    ) -> Result<(PointCloud<T>, Var)> {
        if let Some(f) = features {
            if tape.shape(f) != [cloud.len(), self.feature_width] {
                return Err(Error::pre(
                    "set abstraction",
                    format!(
                        "expected [{}, {}] features, got {:?}",
                        cloud.len(),
                        self.feature_width,
                        tape.shape(f)
                    ),
                ));
            }
        } else if self.feature_width != 0 {
            return Err(Error::pre("set abstraction", "features missing"));
        }
        let (centers, groups, k) = match self.centroids {
            Some(m) => {
                let idx = fps(cloud, m)?;
                let centers = cloud.select(&idx);
                let nb = knn(&centers, cloud, self.k)?;
                (centers, nb.indices, self.k)
            }
            None => {
                let origin = PointCloud::new(vec![[T::zero(); 3]])?;
                (origin, (0..cloud.len()).collect(), cloud.len())
            }
        };
        let pts = cloud.points();
        let mut rel = Vec::with_capacity(groups.len() * 3);
        for (g, &j) in groups.iter().enumerate() {
            let c = centers.get(g / k);
            rel.extend((0..3).map(|a| pts[j][a] - c[a]));
        }
        let rel = tape.constant(Tensor::new(&[groups.len(), 3], rel)?);
        let input = match features {
            Some(f) => {
                let nf = tape.select_rows(f, &groups)?;
                tape.concat(&[rel, nf], 1)?
            }
            None => rel,
        };
        let h = self.mlp.forward(tape, input)?;
        let c = self.mlp.out_width();
        let h = tape.reshape(h, &[centers.len(), k, c])?;
        Ok((centers, tape.max_reduce(h, 1)?))
    }
}

/// Where EdgeConv looks for neighbors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeSpace {
    Coordinates,
    Features,
}

/// Edge convolution: `max_j mlp(concat(f_i, f_j - f_i))` over the K nearest
/// neighbors of each point.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub mlp: Mlp,
    pub k: usize,
    pub space: EdgeSpace,
}

impl EdgeConv {
    /// `widths[0]` is the per-point input width.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        k: usize,
        space: EdgeSpace,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::pre("edgeconv", "K must be at least 1"));
        }
        let mut all = widths.to_vec();
        if let Some(first) = all.first_mut() {
            *first *= 2;
        }
        Ok(Self {
            mlp: Mlp::new(store, name, &all, true, rng)?,
            k,
            space,
        })
    }

    pub fn out_width(&self) -> usize {
        self.mlp.out_width()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, cloud: &PointCloud<T>, features: Var) -> Result<Var> {
        let n = cloud.len();
        let shape = tape.shape(features).to_vec();
        if shape.len() != 2 || shape[0] != n {
            return Err(Error::pre("edgeconv", format!("expected {n} feature rows, got {shape:?}")));
        }
        let nb = match self.space {
            EdgeSpace::Coordinates => knn(cloud, cloud, self.k)?,
            EdgeSpace::Features => {
                let f = tape.value(features).data();
                knn_rows(f, f, shape[1], self.k)?
            }
        };
        let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, self.k)).collect();
        let fi = tape.select_rows(features, &centers)?;
        let fj = tape.select_rows(features, &nb.indices)?;
        let diff = tape.sub(fj, fi)?;
        let edge = tape.concat(&[fi, diff], 1)?;
        let h = self.mlp.forward(tape, edge)?;
        let c = self.mlp.out_width();
        let h = tape.reshape(h, &[n, self.k, c])?;
        Ok(tape.max_reduce(h, 1)?)
    }
}
