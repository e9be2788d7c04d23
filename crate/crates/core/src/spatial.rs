//! Exact nearest-neighbour queries over a static point set.

use std::collections::HashMap;
use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;

pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
    len: usize,
}

impl PointIndex {
    pub fn new(points: impl IntoIterator<Item = Vector3<f64>>) -> Self {
        let pts: Vec<[f64; 3]> = points.into_iter().map(|p| [p.x, p.y, p.z]).collect();
        let len = pts.len();
        let tree = ImmutableKdTree::new_from_slice(&pts).expect("k-d tree construction");
        Self { tree, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Nearest point as `(index, squared distance)`.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.len == 0 {
            return None;
        }
        let r = self
            .tree
            .query(&[q.x, q.y, q.z])
            .nearest_one::<SquaredEuclidean<f64>>()
            .execute();
        Some((r.item as usize, r.distance))
    }

    /// Up to `k` nearest points, closest first.
    pub fn nearest_k(&self, q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let Some(k) = NonZero::new(k.min(self.len)) else {
            return Vec::new();
        };
        self.tree
            .query(&[q.x, q.y, q.z])
            .nearest_n::<SquaredEuclidean<f64>>(k)
            .execute()
            .into_iter()
            .map(|r| (r.item as usize, r.distance))
            .collect()
    }

    /// All points within `radius`, closest first.
    pub fn within(&self, q: &Vector3<f64>, radius: f64) -> Vec<(usize, f64)> {
        if self.len == 0 {
            return Vec::new();
        }
        self.tree
            .query(&[q.x, q.y, q.z])
            .within::<SquaredEuclidean<f64>>(radius * radius)
            .execute()
            .into_iter()
            .map(|r| (r.item as usize, r.distance))
            .collect()
    }
}

/// Greedy minimum-spacing filter: keeps a point only if no previously kept
/// point lies within `spacing`. Visits points in order, so the result is
/// deterministic; every dropped point has a kept neighbour within `spacing`.
pub fn spacing_filter(points: &[Vector3<f64>], spacing: f64) -> Vec<usize> {
    if spacing <= 0.0 {
        return (0..points.len()).collect();
    }
    let cell = |p: &Vector3<f64>| {
        (
            (p.x / spacing).floor() as i64,
            (p.y / spacing).floor() as i64,
            (p.z / spacing).floor() as i64,
        )
    };
    let s2 = spacing * spacing;
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    let mut kept = Vec::new();
    'outer: for (i, p) in points.iter().enumerate() {
        let (cx, cy, cz) = cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        if bucket.iter().any(|&j| (points[j] - p).norm_squared() < s2) {
                            continue 'outer;
                        }
                    }
                }
            }
        }
        grid.entry((cx, cy, cz)).or_default().push(i);
        kept.push(i);
    }
    kept
}

/// One representative (the first visited) per cubic voxel.
pub fn voxel_filter(points: &[Vector3<f64>], voxel: f64) -> Vec<usize> {
    if voxel <= 0.0 {
        return (0..points.len()).collect();
    }
    let mut seen = std::collections::HashSet::new();
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            seen.insert((
                (p.x / voxel).floor() as i64,
                (p.y / voxel).floor() as i64,
                (p.z / voxel).floor() as i64,
            ))
        })
        .map(|(i, _)| i)
        .collect()
}
