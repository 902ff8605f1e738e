//! Uniform-grid spatial hash for exact nearest-neighbour queries.

use crate::geometry::Vec3;
use std::collections::HashMap;

type Key = [i64; 3];

#[derive(Debug, Clone)]
pub struct SpatialHash {
    cell: f64,
    points: Vec<Vec3>,
    cells: HashMap<Key, Vec<usize>>,
    lo: Key,
    hi: Key,
}

impl SpatialHash {
    /// Panics if `cell` is not positive and finite.
    pub fn new(points: &[Vec3], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "cell size must be positive");
        let mut cells: HashMap<Key, Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let k = key(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            cells.entry(k).or_default().push(i);
        }
        Self { cell, points: points.to_vec(), cells, lo, hi }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn scan(&self, k: Key, q: &Vec3, best: &mut Option<(usize, f64)>) {
        if let Some(ids) = self.cells.get(&k) {
            for &i in ids {
                let d = (self.points[i] - q).norm();
                let better = match *best {
                    None => true,
                    Some((bi, bd)) => d < bd || (d == bd && i < bi),
                };
                if better {
                    *best = Some((i, d));
                }
            }
        }
    }

    /// Nearest point within `radius` (inclusive), ties to the lower index.
    /// `radius` must not exceed the cell size.
    pub fn nearest_within(&self, q: &Vec3, radius: f64) -> Option<(usize, f64)> {
        debug_assert!(radius <= self.cell * (1.0 + 1e-12));
        let c = key(q, self.cell);
        let mut best = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    self.scan([c[0] + dx, c[1] + dy, c[2] + dz], q, &mut best);
                }
            }
        }
        best.filter(|&(_, d)| d <= radius)
    }

    /// Nearest point at any distance, ties to the lower index.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let c = key(q, self.cell);
        let max_ring = (0..3).map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs())).max().unwrap_or(0);
        let mut best = None;
        for ring in 0..=max_ring {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) == ring {
                            self.scan([c[0] + dx, c[1] + dy, c[2] + dz], q, &mut best);
                        }
                    }
                }
            }
            // Anything in ring + 1 or beyond is at least ring * cell away.
            if let Some((_, d)) = best {
                if d < ring as f64 * self.cell {
                    break;
                }
            }
        }
        best
    }
}

fn key(p: &Vec3, cell: f64) -> Key {
    [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(points: &[Vec3], q: &Vec3) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let d = (p - q).norm();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best
    }

    #[test]
    fn ties_go_to_lower_index() {
        let pts = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)];
        let h = SpatialHash::new(&pts, 2.0);
        assert_eq!(h.nearest_within(&Vec3::zeros(), 2.0), Some((0, 1.0)));
        assert_eq!(h.nearest(&Vec3::zeros()), Some((0, 1.0)));
        assert_eq!(h.nearest_within(&Vec3::new(5.0, 0.0, 0.0), 2.0), None);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0, -20.0f64..20.0), 1..80),
            q in (-30.0f64..30.0, -30.0f64..30.0, -30.0f64..30.0),
            cell in 0.3f64..6.0,
        ) {
            let pts: Vec<Vec3> = pts.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
            let q = Vec3::new(q.0, q.1, q.2);
            let h = SpatialHash::new(&pts, cell);
            let b = brute(&pts, &q).unwrap();
            prop_assert_eq!(h.nearest(&q).unwrap(), b);
            let w = h.nearest_within(&q, cell);
            if b.1 <= cell { prop_assert_eq!(w, Some(b)); } else { prop_assert_eq!(w, None); }
        }
    }
}
