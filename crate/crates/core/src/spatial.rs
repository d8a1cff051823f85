//! Uniform-grid nearest-neighbour index over 3D points.

use crate::camera::Vec3;

/// Bucketed point set answering exact nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct NearestNeighborGrid {
    points: Vec<Vec3>,
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: points of cell `c` are `indices[starts[c]..starts[c + 1]]`.
    starts: Vec<usize>,
    indices: Vec<usize>,
}

const MAX_DIM: usize = 64;

impl NearestNeighborGrid {
    /// Builds the index. `points` must be non-empty.
    pub fn new(points: &[Vec3]) -> Self {
        assert!(!points.is_empty(), "nearest-neighbour grid needs points");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = hi - lo;
        let max_ext = ext.max().max(1e-12);
        // Aim for ~2 points per occupied cell, measured against the bounding volume.
        let vol = ext.iter().map(|e| e.max(max_ext * 1e-3)).product::<f64>();
        let mut cell = (2.0 * vol / points.len() as f64).cbrt();
        cell = cell.max(max_ext / MAX_DIM as f64);
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).min(MAX_DIM + 1));
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut grid = Self {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            starts: vec![0; n_cells + 1],
            indices: vec![0; points.len()],
        };
        let ids: Vec<usize> = points
            .iter()
            .map(|p| grid.cell_id(grid.cell_of(p)))
            .collect();
        for &c in &ids {
            grid.starts[c + 1] += 1;
        }
        for c in 0..n_cells {
            grid.starts[c + 1] += grid.starts[c];
        }
        let mut fill = grid.starts.clone();
        for (i, &c) in ids.iter().enumerate() {
            grid.indices[fill[c]] = i;
            fill[c] += 1;
        }
        grid
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn cell_of(&self, p: &Vec3) -> [i64; 3] {
        [0, 1, 2].map(|a| {
            let x = ((p[a] - self.origin[a]) / self.cell).floor();
            (x as i64).clamp(0, self.dims[a] as i64 - 1)
        })
    }

    #[inline]
    fn cell_id(&self, c: [i64; 3]) -> usize {
        (c[0] as usize * self.dims[1] + c[1] as usize) * self.dims[2] + c[2] as usize
    }

    /// Index and squared distance of the closest stored point.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let c = self.cell_of(q);
        let max_r = *self.dims.iter().max().unwrap() as i64;
        let mut best = (usize::MAX, f64::INFINITY);
        for r in 0..=max_r {
            for dx in -r..=r {
                let x = c[0] + dx;
                if x < 0 || x >= self.dims[0] as i64 {
                    continue;
                }
                for dy in -r..=r {
                    let y = c[1] + dy;
                    if y < 0 || y >= self.dims[1] as i64 {
                        continue;
                    }
                    let on_shell_xy = dx.abs() == r || dy.abs() == r;
                    for dz in -r..=r {
                        if !on_shell_xy && dz.abs() != r {
                            continue;
                        }
                        let z = c[2] + dz;
                        if z < 0 || z >= self.dims[2] as i64 {
                            continue;
                        }
                        let id = self.cell_id([x, y, z]);
                        for &i in &self.indices[self.starts[id]..self.starts[id + 1]] {
                            let d = (self.points[i] - q).norm_squared();
                            if d < best.1 || (d == best.1 && i < best.0) {
                                best = (i, d);
                            }
                        }
                    }
                }
            }
            // Every unvisited cell is at least r cells away.
            let reach = r as f64 * self.cell;
            if best.0 != usize::MAX && best.1 <= reach * reach {
                break;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 2, 17, 300] {
            let pts: Vec<Vec3> = (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random(),
                        rng.random::<f64>() * 0.1,
                        rng.random::<f64>() * 3.0,
                    )
                })
                .collect();
            let grid = NearestNeighborGrid::new(&pts);
            for _ in 0..200 {
                let q = Vec3::new(
                    rng.random_range(-1.0..2.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..4.0),
                );
                let brute = pts
                    .iter()
                    .map(|p| (p - q).norm_squared())
                    .fold(f64::INFINITY, f64::min);
                let (_, d) = grid.nearest(&q);
                assert_eq!(d, brute);
            }
        }
    }

    #[test]
    fn coincident_points() {
        let pts = vec![Vec3::new(1.0, 1.0, 1.0); 5];
        let grid = NearestNeighborGrid::new(&pts);
        assert_eq!(grid.nearest(&Vec3::new(1.0, 1.0, 1.0)), (0, 0.0));
        assert_eq!(grid.nearest(&Vec3::new(2.0, 1.0, 1.0)).1, 1.0);
    }
}
