//! Exact k-nearest-neighbour search on the sphere.
//!
//! Latitude/longitude pairs are mapped to unit vectors; the chord length
//! between two unit vectors is a monotone function of their great-circle
//! distance, so Euclidean k-NN on the embedded points returns exactly the
//! haversine neighbours. Ties are broken by the smaller index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

pub fn unit_vector(lat_deg: f64, lon_deg: f64) -> [f64; 3] {
    let (lat, lon) = (lat_deg.to_radians(), lon_deg.to_radians());
    [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (la1, lo1) = (a[0].to_radians(), a[1].to_radians());
    let (la2, lo2) = (b[0].to_radians(), b[1].to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const LEAF: usize = 8;

/// Static kd-tree stored implicitly in a permutation of the points.
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<u32>,
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axis = vec![0u8; points.len()];
        build(&points, &mut order, &mut axis, 0);
        Self { points, order, axis }
    }

    /// The `k` nearest points to point `query`, excluding itself, sorted by
    /// distance then index.
    pub fn nearest_excluding(&self, query: usize, k: usize) -> Vec<u32> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, self.order.len(), query, k, &mut heap);
        let mut out = heap.into_sorted_vec();
        out.truncate(k);
        out.into_iter().map(|c| c.index).collect()
    }

    fn offer(&self, heap: &mut BinaryHeap<Candidate>, k: usize, cand: Candidate) {
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(worst) = heap.peek() {
            if cand < *worst {
                heap.pop();
                heap.push(cand);
            }
        }
    }

    fn search(&self, lo: usize, hi: usize, query: usize, k: usize, heap: &mut BinaryHeap<Candidate>) {
        let q = &self.points[query];
        if hi - lo <= LEAF {
            for &i in &self.order[lo..hi] {
                if i as usize != query {
                    let cand = Candidate {
                        d2: dist2(q, &self.points[i as usize]),
                        index: i,
                    };
                    self.offer(heap, k, cand);
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let ax = self.axis[mid] as usize;
        let pivot = self.order[mid];
        let p = &self.points[pivot as usize];
        if pivot as usize != query {
            self.offer(
                heap,
                k,
                Candidate {
                    d2: dist2(q, p),
                    index: pivot,
                },
            );
        }
        let diff = q[ax] - p[ax];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, query, k, heap);
        let need_far = heap.len() < k || heap.peek().is_some_and(|w| diff * diff <= w.d2);
        if need_far {
            self.search(far.0, far.1, query, k, heap);
        }
    }
}

fn build(points: &[[f64; 3]], order: &mut [u32], axis: &mut [u8], offset: usize) {
    let n = order.len();
    if n <= LEAF {
        return;
    }
    let mut best_axis = 0;
    let mut best_spread = f64::NEG_INFINITY;
    for ax in 0..3 {
        let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in order.iter() {
            let v = points[i as usize][ax];
            mn = mn.min(v);
            mx = mx.max(v);
        }
        if mx - mn > best_spread {
            best_spread = mx - mn;
            best_axis = ax;
        }
    }
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][best_axis]
            .total_cmp(&points[b as usize][best_axis])
            .then(a.cmp(&b))
    });
    axis[offset + mid] = best_axis as u8;
    let (left, right) = order.split_at_mut(mid);
    build(points, left, axis, offset);
    build(points, &mut right[1..], axis, offset + mid + 1);
}

/// Directed k-NN lists, one per point.
pub fn knn_lists(coords: &[[f64; 2]], k: usize) -> Vec<Vec<u32>> {
    let pts = coords.iter().map(|c| unit_vector(c[0], c[1])).collect();
    let tree = KdTree::new(pts);
    (0..coords.len()).map(|i| tree.nearest_excluding(i, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn brute(coords: &[[f64; 2]], i: usize, k: usize) -> Vec<u32> {
        let mut d: Vec<(f64, u32)> = coords
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, c)| (haversine_km(coords[i], *c), j as u32))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|x| x.1).collect()
    }

    #[test]
    fn matches_brute_force_haversine() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let coords: Vec<[f64; 2]> = (0..600)
            .map(|_| [rng.random_range(-33.0..5.0), rng.random_range(-73.0..-35.0)])
            .collect();
        let lists = knn_lists(&coords, 5);
        for i in 0..coords.len() {
            let want = brute(&coords, i, 5);
            let mut got = lists[i].clone();
            let mut want_sorted = want.clone();
            got.sort();
            want_sorted.sort();
            assert_eq!(got, want_sorted, "point {i}");
        }
    }

    #[test]
    fn duplicates_break_ties_by_index() {
        let coords = vec![[0.0, 0.0]; 6];
        let lists = knn_lists(&coords, 2);
        assert_eq!(lists[0], vec![1, 2]);
        assert_eq!(lists[3], vec![0, 1]);
    }

    #[test]
    fn haversine_known_distance() {
        // one degree of latitude along a meridian
        let d = haversine_km([0.0, 10.0], [1.0, 10.0]);
        assert!((d - EARTH_RADIUS_KM * 1f64.to_radians()).abs() < 1e-9);
    }
}
