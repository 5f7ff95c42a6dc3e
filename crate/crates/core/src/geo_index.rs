//! Planar geometry primitives and an exact k-nearest-neighbor index.
//!
//! Displacements are always taken as `d(u, v) = p_u - p_v` and bearings are
//! `atan2` of that displacement, wrapped into `[-pi, pi)`.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn sub(&self, other: &Point2) -> Point2 {
        Point2::new(self.x - other.x, self.y - other.y)
    }

    pub fn scale(&self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }

    /// Squared Euclidean distance. Every distance comparison in the crate goes
    /// through this expression so index and brute-force scans agree bitwise.
    #[inline]
    pub fn dist2(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        self.dist2(other).sqrt()
    }
}

/// Distance and bearing of the displacement `p_u - p_v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGeometry {
    pub distance: f64,
    pub bearing: f64,
}

/// Wraps an angle into the half-open interval `[-pi, pi)`.
pub fn wrap_bearing(angle: f64) -> Result<f64> {
    if !angle.is_finite() {
        return Err(Error::invalid(format!("non-finite angle {angle}")));
    }
    Ok(wrap_unchecked(angle))
}

pub(crate) fn wrap_unchecked(angle: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = (angle + PI).rem_euclid(two_pi) - PI;
    // rem_euclid can round up to exactly 2*pi for inputs just below a multiple
    if r >= PI {
        r -= two_pi;
    }
    if r < -PI {
        r = -PI;
    }
    r
}

pub fn pair_geometry(u: &Point2, v: &Point2) -> Result<PairGeometry> {
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::invalid("non-finite point in pair geometry"));
    }
    let d = u.sub(v);
    let distance = (d.x * d.x + d.y * d.y).sqrt();
    let bearing = if distance == 0.0 {
        0.0
    } else {
        wrap_unchecked(d.y.atan2(d.x))
    };
    Ok(PairGeometry { distance, bearing })
}

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable kd-tree over a point set. Ids are the positions in the input
/// sequence. Queries return the same ids, in the same order, as an
/// exhaustive scan sorted by `(squared distance, id)`.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point2>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

pub fn build_index(points: &[Point2]) -> Result<SpatialIndex> {
    SpatialIndex::new(points.to_vec())
}

impl SpatialIndex {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("spatial index needs at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::invalid(format!("non-finite point at id {i}")));
        }
        let mut index = SpatialIndex {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        let n = index.points.len();
        index.build(0, n);
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: usize) -> Point2 {
        self.points[id]
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let slot = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        let (mut lo, mut hi) = (
            Point2::new(f64::INFINITY, f64::INFINITY),
            Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        );
        for &i in &self.order[start..end] {
            let p = self.points[i];
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        let axis = if hi.x - lo.x >= hi.y - lo.y { 0 } else { 1 };
        let coord = |p: &Point2| if axis == 0 { p.x } else { p.y };
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            coord(&points[a])
                .partial_cmp(&coord(&points[b]))
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let value = coord(&self.points[self.order[mid]]);
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[slot] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    /// The `k` nearest ids to `center`, ascending by distance then id.
    pub fn knn(&self, center: &Point2, k: usize, exclude: Option<usize>) -> Vec<usize> {
        self.knn_with_dist2(center, k, exclude)
            .into_iter()
            .map(|(_, id)| id)
            .collect()
    }

    pub fn knn_with_dist2(
        &self,
        center: &Point2,
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<(f64, usize)> {
        if k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search(0, center, k, exclude, &mut best);
        best
    }

    fn search(
        &self,
        node: usize,
        center: &Point2,
        k: usize,
        exclude: Option<usize>,
        best: &mut Vec<(f64, usize)>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    if Some(id) == exclude {
                        continue;
                    }
                    let cand = (center.dist2(&self.points[id]), id);
                    if best.len() == k && cmp_candidate(&cand, best.last().unwrap()).is_ge() {
                        continue;
                    }
                    let pos = best
                        .binary_search_by(|probe| cmp_candidate(probe, &cand))
                        .unwrap_or_else(|e| e);
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let c = if axis == 0 { center.x } else { center.y };
                let (near, far) = if c < value { (left, right) } else { (right, left) };
                self.search(near, center, k, exclude, best);
                let plane = (c - value) * (c - value);
                if best.len() < k || plane <= best.last().unwrap().0 {
                    self.search(far, center, k, exclude, best);
                }
            }
        }
    }
}

fn cmp_candidate(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

pub fn knn(index: &SpatialIndex, center: &Point2, k: usize, exclude: Option<usize>) -> Vec<usize> {
    index.knn(center, k, exclude)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Point2], c: &Point2, k: usize, exclude: Option<usize>) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, p)| (c.dist2(p), i))
            .collect();
        all.sort_by(cmp_candidate);
        all.truncate(k);
        all.into_iter().map(|(_, i)| i).collect()
    }

    fn cloud(n: usize, seed: u64) -> Vec<Point2> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)))
            .collect()
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_bearing(0.0).unwrap(), 0.0);
        assert_eq!(wrap_bearing(PI).unwrap(), -PI);
        assert!((wrap_bearing(1.5 * PI).unwrap() + 0.5 * PI).abs() < 1e-12);
        assert!(wrap_bearing(f64::NAN).is_err());
        for a in [-7.0 * PI, -PI, -1e-300, 1e-17, 123.456, -PI - 1e-15] {
            let w = wrap_bearing(a).unwrap();
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
        }
    }

    #[test]
    fn pair_geometry_examples() {
        let g = pair_geometry(&Point2::new(3.0, 4.0), &Point2::new(0.0, 0.0)).unwrap();
        assert_eq!(g.distance, 5.0);
        assert!((g.bearing - 0.927_295_218_001_612_2).abs() < 1e-12);
        let g = pair_geometry(&Point2::new(2.0, 2.0), &Point2::new(2.0, 2.0)).unwrap();
        assert_eq!((g.distance, g.bearing), (0.0, 0.0));
        let g = pair_geometry(&Point2::new(0.0, 0.0), &Point2::new(0.0, 1.0)).unwrap();
        assert_eq!(g.distance, 1.0);
        assert!((g.bearing + PI / 2.0).abs() < 1e-15);
        assert!(pair_geometry(&Point2::new(f64::INFINITY, 0.0), &Point2::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn index_small_cases() {
        assert!(build_index(&[]).is_err());
        let one = build_index(&[Point2::new(1.0, 1.0)]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.knn(&Point2::new(0.0, 0.0), 3, None), vec![0]);

        let idx = build_index(&[
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(5.0, 0.0),
        ])
        .unwrap();
        assert_eq!(idx.knn(&Point2::new(0.4, 0.0), 2, None), vec![0, 1]);
        assert_eq!(idx.knn(&Point2::new(0.4, 0.0), 10, None), vec![0, 1, 2]);
        assert_eq!(idx.knn(&Point2::new(0.4, 0.0), 2, Some(0)), vec![1, 2]);

        let dup = build_index(&[Point2::new(2.0, 2.0), Point2::new(9.0, 9.0), Point2::new(2.0, 2.0)])
            .unwrap();
        assert_eq!(dup.knn(&Point2::new(2.0, 2.0), 2, None), vec![0, 2]);
    }

    #[test]
    fn index_matches_brute_force() {
        let pts = cloud(500, 11);
        let idx = build_index(&pts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for q in 0..60 {
            let c = Point2::new(rng.random_range(-10.0..110.0), rng.random_range(-10.0..110.0));
            let exclude = if q % 3 == 0 { Some(q) } else { None };
            for k in 1..=20 {
                assert_eq!(idx.knn(&c, k, exclude), brute(&pts, &c, k, exclude));
            }
        }
        for k in [1, 16] {
            for (i, p) in pts.iter().enumerate().take(50) {
                assert_eq!(idx.knn(p, k, Some(i)), brute(&pts, p, k, Some(i)));
            }
        }
    }

    #[test]
    fn index_on_lattice_with_ties() {
        // integer lattice produces many exact distance ties
        let pts: Vec<Point2> = (0..400)
            .map(|i| Point2::new((i % 20) as f64, (i / 20) as f64))
            .collect();
        let idx = build_index(&pts).unwrap();
        for c in [Point2::new(10.0, 10.0), Point2::new(0.5, 0.5), Point2::new(3.0, 7.5)] {
            for k in [1, 4, 9, 13, 25] {
                assert_eq!(idx.knn(&c, k, None), brute(&pts, &c, k, None));
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn knn_prefix_stable(seed in 0u64..500, k in 1usize..30) {
            let pts = cloud(200, seed);
            let idx = build_index(&pts).unwrap();
            let c = Point2::new(50.0, 40.0);
            let a = idx.knn(&c, k, None);
            let b = idx.knn(&c, k + 1, None);
            proptest::prop_assert_eq!(&a[..], &b[..a.len()]);
        }

        #[test]
        fn pair_geometry_symmetry(ux in -1e3f64..1e3, uy in -1e3f64..1e3, vx in -1e3f64..1e3, vy in -1e3f64..1e3) {
            let u = Point2::new(ux, uy);
            let v = Point2::new(vx, vy);
            let a = pair_geometry(&u, &v).unwrap();
            let b = pair_geometry(&v, &u).unwrap();
            proptest::prop_assert_eq!(a.distance, b.distance);
            if a.distance > 0.0 {
                let diff = wrap_unchecked(a.bearing - b.bearing - PI);
                proptest::prop_assert!(diff.abs() < 1e-12);
            }
        }
    }
}
