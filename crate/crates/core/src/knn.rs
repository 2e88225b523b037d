//! Exact nearest-neighbour queries over a fixed point set.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};

use crate::error::{LodeError, Result};
use crate::grid::Vec3;

pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
    len: usize,
}

impl PointIndex {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(LodeError::EmptyInput);
        }
        let entries: Vec<[f64; 3]> = points.iter().map(|p| [p[0], p[1], p[2]]).collect();
        let tree = ImmutableKdTree::new_from_slice(&entries).map_err(|e| LodeError::Config(format!("kd-tree: {e:?}")))?;
        Ok(Self { tree, len: points.len() })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Index and Euclidean distance of the closest point.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let r = self.tree.query(&[q[0], q[1], q[2]]).nearest_one::<SquaredEuclidean<f64>>().execute();
        (r.item as usize, r.distance.sqrt())
    }

    /// Indices of the `k` closest points, nearest first; ties break by index.
    pub fn k_nearest(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.len);
        let Some(n) = NonZero::new(k) else {
            return Vec::new();
        };
        let mut v: Vec<(usize, f64)> = self
            .tree
            .query(&[q[0], q[1], q[2]])
            .nearest_n::<SquaredEuclidean<f64>>(n)
            .execute()
            .into_iter()
            .map(|r| (r.item as usize, r.distance.sqrt()))
            .collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        v
    }
}
