//! k-nearest-neighbor search: a brute-force reference and a uniform hash
//! grid with expanding shell search. The two must agree bit for bit; the
//! grid path is only a throughput optimization.

use std::collections::HashMap;

use rayon::prelude::*;

use super::{dist2, NeighborIndex, PointCloud};
use crate::error::{Error, Result};

/// Brute-force k-NN for each support id. Self-queries include the support
/// point itself (distance 0). Ties break to the lowest source index; if
/// the cloud has fewer than `k` points, rows pad by repeating the nearest.
pub fn knn(source: &PointCloud, support_ids: &[u32], k: usize) -> Result<NeighborIndex> {
    validate(source, support_ids, k)?;
    let mut indices = vec![0u32; support_ids.len() * k];
    indices
        .par_chunks_mut(k)
        .zip(support_ids.par_iter())
        .for_each(|(row, &q)| {
            let qp = source.point(q as usize);
            let mut cand: Vec<(f64, u32)> = source
                .coords()
                .iter()
                .enumerate()
                .map(|(i, &p)| (dist2(qp, p), i as u32))
                .collect();
            cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            fill_row(row, &cand, k);
        });
    Ok(NeighborIndex::new(indices, support_ids.to_vec(), k))
}

/// Same contract as [`knn`], backed by a uniform hash grid with expanding
/// shell search.
pub fn knn_grid(source: &PointCloud, support_ids: &[u32], k: usize) -> Result<NeighborIndex> {
    validate(source, support_ids, k)?;
    let grid = HashGrid::build(source);
    let mut indices = vec![0u32; support_ids.len() * k];
    indices
        .par_chunks_mut(k)
        .zip(support_ids.par_iter())
        .for_each(|(row, &q)| {
            let cand = grid.candidates(source, source.point(q as usize), k);
            fill_row(row, &cand, k);
        });
    Ok(NeighborIndex::new(indices, support_ids.to_vec(), k))
}

/// Reusable grid for repeated single-point queries (rejection sampling
/// runs one query per pick).
pub struct KnnGrid<'a> {
    source: &'a PointCloud,
    grid: HashGrid,
}

impl<'a> KnnGrid<'a> {
    pub fn build(source: &'a PointCloud) -> KnnGrid<'a> {
        KnnGrid {
            source,
            grid: HashGrid::build(source),
        }
    }

    /// The k nearest source indices of the point at `id`, sorted, padded
    /// like [`knn`] rows.
    pub fn k_nearest(&self, id: u32, k: usize) -> Vec<u32> {
        let cand = self
            .grid
            .candidates(self.source, self.source.point(id as usize), k);
        let mut row = vec![0u32; k];
        fill_row(&mut row, &cand, k);
        row
    }
}

fn validate(source: &PointCloud, support_ids: &[u32], k: usize) -> Result<()> {
    if source.is_empty() {
        return Err(Error::EmptyInput("knn on an empty cloud".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("knn requires k >= 1".into()));
    }
    if let Some(&bad) = support_ids.iter().find(|&&q| q as usize >= source.len()) {
        return Err(Error::Parameter(format!(
            "support id {bad} out of range for {} points",
            source.len()
        )));
    }
    Ok(())
}

fn fill_row(row: &mut [u32], sorted_candidates: &[(f64, u32)], k: usize) {
    let take = sorted_candidates.len().min(k);
    for (dst, src) in row.iter_mut().zip(sorted_candidates.iter().take(take)) {
        *dst = src.1;
    }
    for j in take..k {
        row[j] = sorted_candidates[0].1;
    }
}

/// For each fine position, the index of its nearest coarse position
/// (ties to the lowest index). Used by nearest-neighbor upsampling.
pub fn nearest_indices(coarse: &[[f64; 3]], fine: &[[f64; 3]]) -> Result<Vec<u32>> {
    if coarse.is_empty() {
        return Err(Error::EmptyInput("nearest_indices with no coarse points".into()));
    }
    Ok(fine
        .par_iter()
        .map(|&p| {
            let mut best = (dist2(p, coarse[0]), 0u32);
            for (i, &c) in coarse.iter().enumerate().skip(1) {
                let d = dist2(p, c);
                if d < best.0 {
                    best = (d, i as u32);
                }
            }
            best.1
        })
        .collect())
}

struct HashGrid {
    cells: HashMap<(i32, i32, i32), Vec<u32>>,
    cell_size: f64,
    min_cell: (i32, i32, i32),
    max_cell: (i32, i32, i32),
}

impl HashGrid {
    fn build(source: &PointCloud) -> HashGrid {
        let diag = source.bounding_diag();
        // diag / cbrt(N) keeps a handful of points per cell on uniform
        // data; degenerate (all-coincident) clouds use a dummy size.
        let cell_size = if diag > 0.0 {
            diag / (source.len() as f64).cbrt()
        } else {
            1.0
        };
        let mut cells: HashMap<(i32, i32, i32), Vec<u32>> = HashMap::new();
        let mut min_cell = (i32::MAX, i32::MAX, i32::MAX);
        let mut max_cell = (i32::MIN, i32::MIN, i32::MIN);
        for (i, &p) in source.coords().iter().enumerate() {
            let key = cell_of(p, cell_size);
            min_cell.0 = min_cell.0.min(key.0);
            min_cell.1 = min_cell.1.min(key.1);
            min_cell.2 = min_cell.2.min(key.2);
            max_cell.0 = max_cell.0.max(key.0);
            max_cell.1 = max_cell.1.max(key.1);
            max_cell.2 = max_cell.2.max(key.2);
            cells.entry(key).or_default().push(i as u32);
        }
        HashGrid {
            cells,
            cell_size,
            min_cell,
            max_cell,
        }
    }

    /// Candidates sorted by (distance, index), guaranteed to contain the
    /// true k nearest: shells expand until the k-th best distance is
    /// covered by the scanned radius.
    fn candidates(&self, source: &PointCloud, q: [f64; 3], k: usize) -> Vec<(f64, u32)> {
        let center = cell_of(q, self.cell_size);
        let max_ring = {
            let dx = (center.0 - self.min_cell.0).max(self.max_cell.0 - center.0);
            let dy = (center.1 - self.min_cell.1).max(self.max_cell.1 - center.1);
            let dz = (center.2 - self.min_cell.2).max(self.max_cell.2 - center.2);
            dx.max(dy).max(dz).max(0)
        };
        let mut cand: Vec<(f64, u32)> = Vec::with_capacity(2 * k);
        for ring in 0..=max_ring {
            self.scan_ring(source, q, center, ring, &mut cand);
            if cand.len() >= k {
                cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let covered = ring as f64 * self.cell_size;
                if cand[k - 1].0 <= covered * covered {
                    return cand;
                }
            }
        }
        cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand
    }

    fn scan_ring(
        &self,
        source: &PointCloud,
        q: [f64; 3],
        center: (i32, i32, i32),
        ring: i32,
        cand: &mut Vec<(f64, u32)>,
    ) {
        let mut visit = |key: (i32, i32, i32)| {
            if let Some(ids) = self.cells.get(&key) {
                for &i in ids {
                    cand.push((dist2(q, source.point(i as usize)), i));
                }
            }
        };
        if ring == 0 {
            visit(center);
            return;
        }
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                for dz in -ring..=ring {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                        continue;
                    }
                    visit((center.0 + dx, center.1 + dy, center.2 + dz));
                }
            }
        }
    }
}

fn cell_of(p: [f64; 3], cell_size: f64) -> (i32, i32, i32) {
    (
        (p[0] / cell_size).floor() as i32,
        (p[1] / cell_size).floor() as i32,
        (p[2] / cell_size).floor() as i32,
    )
}
