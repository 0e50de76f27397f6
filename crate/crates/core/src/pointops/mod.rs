//! Geometric kernels over point sets and the learned blocks built on them.

mod blocks;
mod neighbors;
mod sampling;

pub use blocks::{EdgeConv, EdgeSpace, SetAbstraction};
pub use neighbors::{knn, knn_rows, knn_with, min_dist_to_set, nearest, NeighborIndex, Search};
pub use sampling::{fps, lexicographic_min};
