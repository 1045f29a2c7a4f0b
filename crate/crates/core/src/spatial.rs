//! Fixed-radius neighbor counting over dense clouds.
//!
//! The index is a voxel hash grid rather than a kd-tree: every query here is
//! a fixed-radius count (never k-NN), the point sets are bounded-density
//! LiDAR accumulations, and a hash grid gives branch-free cell shells and
//! trivially parallel batch queries. `count_brute` is the correctness
//! oracle: a linear scan implementing the same strict `< r` predicate.
//!
//! Counting is exact. The predicate compares squared distances against r^2,
//! so no epsilon slack is introduced anywhere; a point at distance exactly
//! `r` is excluded, and a query coincident with an indexed point counts it
//! (distance 0).

use std::collections::HashMap;

use rayon::prelude::*;

use crate::geom::{Point3, PointCloud};

type CellKey = (i64, i64, i64);

fn cell_of(p: &Point3, cell_size: f64) -> CellKey {
    (
        (p.x / cell_size).floor() as i64,
        (p.y / cell_size).floor() as i64,
        (p.z / cell_size).floor() as i64,
    )
}

/// Immutable spatial index answering "how many points lie strictly within
/// radius r of q".
#[derive(Debug, Clone)]
pub struct RadiusCountIndex {
    cell_size: f64,
    cells: HashMap<CellKey, Vec<Point3>>,
    total_points: usize,
}

/// Bucket every point of `cloud` into cells of side `cell_size`.
///
/// The cell of a point is `(floor(x/s), floor(y/s), floor(z/s))`; floor, not
/// truncation, so negative coordinates bucket correctly.
pub fn build_index(cloud: &PointCloud, cell_size: f64) -> RadiusCountIndex {
    assert!(cell_size > 0.0, "cell_size must be positive");
    let mut cells: HashMap<CellKey, Vec<Point3>> = HashMap::new();
    for &p in &cloud.points {
        cells.entry(cell_of(&p, cell_size)).or_default().push(p);
    }
    RadiusCountIndex { cell_size, cells, total_points: cloud.len() }
}

impl RadiusCountIndex {
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn total_points(&self) -> usize {
        self.total_points
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Number of indexed points with Euclidean distance strictly less than
    /// `r` from `q`. Scans only the cells overlapping the query ball.
    pub fn count_within(&self, q: Point3, r: f64) -> usize {
        assert!(r > 0.0, "radius must be positive");
        let s = self.cell_size;
        let r_sq = r * r;
        let lo = (
            ((q.x - r) / s).floor() as i64,
            ((q.y - r) / s).floor() as i64,
            ((q.z - r) / s).floor() as i64,
        );
        let hi = (
            ((q.x + r) / s).floor() as i64,
            ((q.y + r) / s).floor() as i64,
            ((q.z + r) / s).floor() as i64,
        );
        let mut count = 0usize;
        for ix in lo.0..=hi.0 {
            for iy in lo.1..=hi.1 {
                for iz in lo.2..=hi.2 {
                    if let Some(points) = self.cells.get(&(ix, iy, iz)) {
                        for p in points {
                            if p.distance_squared(&q) < r_sq {
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        count
    }

    /// Per-query counts, order-preserving and identical to sequential
    /// `count_within` calls; the map over queries runs in parallel.
    pub fn count_within_batch(&self, queries: &[Point3], r: f64) -> Vec<usize> {
        assert!(r > 0.0, "radius must be positive");
        queries.par_iter().map(|&q| self.count_within(q, r)).collect()
    }
}

/// Reference implementation of the neighbor count: a full linear scan with
/// the same strict `< r` predicate.
pub fn count_brute(cloud: &PointCloud, q: Point3, r: f64) -> usize {
    assert!(r > 0.0, "radius must be positive");
    let r_sq = r * r;
    cloud.points.iter().filter(|p| p.distance_squared(&q) < r_sq).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    #[test]
    fn empty_cloud_empty_index() {
        let idx = build_index(&PointCloud::empty(), 1.0);
        assert_eq!(idx.total_points(), 0);
        assert_eq!(idx.count_within(pt(3.0, 4.0, 5.0), 10.0), 0);
    }

    #[test]
    fn single_point_at_origin() {
        let idx = build_index(&PointCloud::new(vec![pt(0.0, 0.0, 0.0)]), 1.0);
        assert_eq!(idx.num_cells(), 1);
        assert_eq!(idx.total_points(), 1);
        // the point itself is at distance 0 < r
        assert_eq!(idx.count_within(pt(0.0, 0.0, 0.0), 0.5), 1);
    }

    #[test]
    fn negative_coordinates_floor_not_truncate() {
        let cloud = PointCloud::new(vec![pt(-0.1, 0.0, 0.0)]);
        assert_eq!(cell_of(&cloud.points[0], 1.0), (-1, 0, 0));
        let idx = build_index(&cloud, 1.0);
        assert_eq!(idx.count_within(pt(-0.1, 0.0, 0.0), 0.01), 1);
    }

    #[test]
    fn boundary_point_excluded() {
        let r = 0.25;
        let cloud = PointCloud::new(vec![pt(r, 0.0, 0.0)]);
        assert_eq!(count_brute(&cloud, pt(0.0, 0.0, 0.0), r), 0);
        let idx = build_index(&cloud, r);
        assert_eq!(idx.count_within(pt(0.0, 0.0, 0.0), r), 0);
        // just inside counts
        assert_eq!(idx.count_within(pt(1e-12, 0.0, 0.0), r), 1);
    }

    #[test]
    fn coincident_points_both_count() {
        let cloud = PointCloud::new(vec![pt(1.0, 1.0, 1.0), pt(1.0, 1.0, 1.0)]);
        assert_eq!(count_brute(&cloud, pt(1.0, 1.0, 1.0), 0.1), 2);
        let idx = build_index(&cloud, 0.1);
        assert_eq!(idx.count_within(pt(1.0, 1.0, 1.0), 0.1), 2);
    }

    #[test]
    fn total_points_matches_cell_sum() {
        let cloud = PointCloud::new(
            (0..500)
                .map(|i| pt((i as f64 * 0.37) % 7.0 - 3.0, (i as f64 * 0.11) % 5.0, i as f64 * 0.01))
                .collect(),
        );
        let idx = build_index(&cloud, 0.8);
        let sum: usize = idx.cells.values().map(|v| v.len()).sum();
        assert_eq!(sum, idx.total_points());
        assert_eq!(sum, cloud.len());
    }

    #[test]
    fn batch_equals_sequential() {
        let cloud = PointCloud::new(
            (0..2000)
                .map(|i| {
                    let t = i as f64;
                    pt((t * 0.713) % 10.0, (t * 0.291) % 10.0, (t * 0.137) % 4.0)
                })
                .collect(),
        );
        let idx = build_index(&cloud, 0.3);
        let queries: Vec<Point3> =
            (0..300).map(|i| pt((i as f64 * 0.19) % 10.0, (i as f64 * 0.41) % 10.0, 1.0)).collect();
        let batch = idx.count_within_batch(&queries, 0.3);
        for (i, &q) in queries.iter().enumerate() {
            assert_eq!(batch[i], idx.count_within(q, 0.3));
        }
        assert!(idx.count_within_batch(&[], 0.3).is_empty());
    }

    fn arb_cloud() -> impl Strategy<Value = Vec<Point3>> {
        proptest::collection::vec(
            (-4.0f64..4.0, -4.0f64..4.0, -4.0f64..4.0).prop_map(|(x, y, z)| pt(x, y, z)),
            0..400,
        )
    }

    proptest! {
        #[test]
        fn index_matches_brute_force(
            pts in arb_cloud(),
            (qx, qy, qz) in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0),
            r in 0.05f64..2.0,
        ) {
            let cloud = PointCloud::new(pts);
            let q = pt(qx, qy, qz);
            let expect = count_brute(&cloud, q, r);
            for cell in [r / 2.0, r, 2.0 * r] {
                let idx = build_index(&cloud, cell);
                prop_assert_eq!(idx.count_within(q, r), expect);
            }
        }
    }
}
