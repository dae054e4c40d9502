//! Support-point selection strategies.
//!
//! The space-quantization sampler discretizes the bounding box with a
//! regular voxel grid, keeps one point per non-empty voxel, and repeats
//! on the leftovers with the voxel size halved until enough points are
//! selected; overshoot in the final pass is discarded at random. The
//! first voxel size comes from the rule `v = diag / sqrt(q)`. Farthest
//! point sampling, plain random sampling, and neighborhood-rejection
//! sampling serve as baselines, and a dichotomic search recovers the
//! empirically optimal voxel size for validating the rule.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{KnnGrid, PointCloud};

mod bench;
pub use bench::{loglog_slope, median, run_sampling_bench, run_voxel_rule, BenchRow, VoxelRuleRow};

/// Strategy tag carried by every report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Random,
    Quantized,
    Fps,
    Rejection,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Quantized => "quantized",
            Strategy::Fps => "fps",
            Strategy::Rejection => "rejection",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        match s {
            "random" => Some(Strategy::Random),
            "quantized" => Some(Strategy::Quantized),
            "fps" => Some(Strategy::Fps),
            "rejection" => Some(Strategy::Rejection),
            _ => None,
        }
    }

    pub const ALL: [Strategy; 4] = [
        Strategy::Random,
        Strategy::Quantized,
        Strategy::Fps,
        Strategy::Rejection,
    ];
}

/// Output of every sampling strategy: the selected source indices (no
/// duplicates), the number of quantization passes (1 for non-iterative
/// strategies), and the wall time of the selection itself.
#[derive(Debug, Clone)]
pub struct SamplerReport {
    pub selected: Vec<u32>,
    pub iterations: u32,
    pub elapsed: f64,
    pub strategy: Strategy,
}

/// Voxel edge length for a target support count: `diag / sqrt(q)`.
///
/// An axis-aligned plane crossing a cube split into `a^3` voxels
/// intersects `a^2` of them, so aiming at `|Q| = a^2` occupied voxels
/// makes the edge proportional to `1/sqrt(|Q|)`, with the bounding-box
/// diagonal as the proportionality factor.
pub fn voxel_size_rule(diag: f64, q_count: usize) -> Result<f64> {
    if diag <= 0.0 || !diag.is_finite() {
        return Err(Error::Parameter(format!(
            "voxel size rule needs a positive diagonal, got {diag}"
        )));
    }
    if q_count == 0 {
        return Err(Error::Parameter("q_count must be at least 1".into()));
    }
    Ok(diag / (q_count as f64).sqrt())
}

fn check_q(cloud: &PointCloud, q_count: usize) -> Result<()> {
    if q_count == 0 || q_count > cloud.len() {
        return Err(Error::Cardinality {
            requested: q_count,
            available: cloud.len(),
        });
    }
    Ok(())
}

/// Number of distinct occupied voxels at edge length `v`, grid anchored
/// at the bounding-box minimum corner.
pub fn occupied_voxels(cloud: &PointCloud, v: f64) -> usize {
    let (lo, _) = cloud.bounding_box();
    let mut keys: std::collections::HashSet<(i32, i32, i32)> =
        std::collections::HashSet::with_capacity(cloud.len());
    for &p in cloud.coords() {
        keys.insert(voxel_key(p, lo, v));
    }
    keys.len()
}

#[inline]
fn voxel_key(p: [f64; 3], lo: [f64; 3], v: f64) -> (i32, i32, i32) {
    (
        ((p[0] - lo[0]) / v).floor() as i32,
        ((p[1] - lo[1]) / v).floor() as i32,
        ((p[2] - lo[2]) / v).floor() as i32,
    )
}

/// Space-quantization sampling. Within each non-empty voxel the
/// not-yet-selected point nearest the voxel center wins (remaining ties
/// to the lowest index); passes repeat on the leftovers with `v / 2`
/// until the count is reached, and a final-pass overshoot is discarded
/// uniformly at random with the given seed.
pub fn quantized_sampling(cloud: &PointCloud, q_count: usize, seed: u64) -> Result<SamplerReport> {
    check_q(cloud, q_count)?;
    let start = Instant::now();
    let diag = cloud.bounding_diag();
    if diag <= 0.0 {
        // All points coincide: every pass has one occupied voxel whose
        // winner is the lowest remaining index, so pass p selects point
        // p - 1. Short-circuit that outcome.
        return Ok(SamplerReport {
            selected: (0..q_count as u32).collect(),
            iterations: q_count as u32,
            elapsed: start.elapsed().as_secs_f64(),
            strategy: Strategy::Quantized,
        });
    }
    let mut v = voxel_size_rule(diag, q_count)?;
    let (lo, hi) = cloud.bounding_box();

    let n = cloud.len();
    let mut selected: Vec<u32> = Vec::with_capacity(q_count);
    let mut remaining: Vec<u32> = Vec::new(); // pass 1 runs over all points
    let mut iterations = 0u32;
    loop {
        iterations += 1;
        let pass_points = if iterations == 1 { None } else { Some(&remaining[..]) };
        let winners = pass_winners(cloud, pass_points, lo, hi, v);
        if selected.len() + winners.len() >= q_count {
            let need = q_count - selected.len();
            if winners.len() > need {
                // Keep a uniform subset of this final pass only; earlier
                // passes are strictly better spread. The winner order is
                // a deterministic function of the input, so the seeded
                // draw is reproducible.
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = rand::seq::index::sample(&mut rng, winners.len(), need);
                selected.extend(keep.iter().map(|i| winners[i]));
            } else {
                selected.extend(winners);
            }
            break;
        }
        let winner_set: std::collections::HashSet<u32> = winners.iter().copied().collect();
        selected.extend(&winners);
        if iterations == 1 {
            remaining = (0..n as u32).filter(|i| !winner_set.contains(i)).collect();
        } else {
            remaining.retain(|i| !winner_set.contains(i));
        }
        // coincident duplicates never separate; the floor keeps the
        // scaled coordinates finite while passes keep consuming ties
        v = (v * 0.5).max(diag * 1e-12);
    }
    Ok(SamplerReport {
        selected,
        iterations,
        elapsed: start.elapsed().as_secs_f64(),
        strategy: Strategy::Quantized,
    })
}

/// One quantization pass: per occupied voxel, the remaining point
/// nearest the voxel center, ties to the lowest index.
///
/// The comparison packs (f32 center distance, point index) into one u64
/// whose numeric order is exactly (distance, then lowest index), so the
/// per-voxel winner is a single min; the reduction is associative and
/// independent of scan order. Dense-grid winners come back in
/// first-claim order, a deterministic function of the input.
fn pass_winners(
    cloud: &PointCloud,
    remaining: Option<&[u32]>,
    lo: [f64; 3],
    hi: [f64; 3],
    v: f64,
) -> Vec<u32> {
    // Dense cell array when the grid is small enough; hashing otherwise.
    const DENSE_CAP: f64 = (1u64 << 21) as f64;
    let inv = 1.0 / v;
    let countf = |a: usize| ((hi[a] - lo[a]) * inv).floor() + 1.0;
    let totalf = countf(0) * countf(1) * countf(2);
    let coords = cloud.coords();

    let scaled = |i: u32| -> (f64, f64, f64) {
        let p = coords[i as usize];
        (
            (p[0] - lo[0]) * inv,
            (p[1] - lo[1]) * inv,
            (p[2] - lo[2]) * inv,
        )
    };
    let dist_key = |i: u32, fx: f64, fy: f64, fz: f64| -> u64 {
        let d2 = (fx * fx + fy * fy + fz * fz) as f32;
        ((d2.to_bits() as u64) << 32) | i as u64
    };

    if totalf <= DENSE_CAP {
        let (ny, nz) = (countf(1) as usize, countf(2) as usize);
        let total = totalf as usize;
        let mut winner = vec![u64::MAX; total];
        let mut occupied: Vec<u32> = Vec::new();
        let mut visit = |i: u32| {
            let (ux, uy, uz) = scaled(i);
            // coordinates are non-negative after the shift, so the
            // integer cast is the floor
            let (cx, cy, cz) = (ux as usize, uy as usize, uz as usize);
            let cell = (cx * ny + cy) * nz + cz;
            let key = dist_key(i, ux - cx as f64 - 0.5, uy - cy as f64 - 0.5, uz - cz as f64 - 0.5);
            let slot = &mut winner[cell];
            if *slot == u64::MAX {
                occupied.push(cell as u32);
                *slot = key;
            } else if key < *slot {
                *slot = key;
            }
        };
        match remaining {
            None => (0..coords.len() as u32).for_each(&mut visit),
            Some(ids) => ids.iter().copied().for_each(&mut visit),
        }
        occupied
            .iter()
            .map(|&c| (winner[c as usize] & 0xFFFF_FFFF) as u32)
            .collect()
    } else {
        let mut best: HashMap<(u64, u64, u64), u64> = HashMap::new();
        let mut visit = |i: u32| {
            let (ux, uy, uz) = scaled(i);
            let (cx, cy, cz) = (ux as u64, uy as u64, uz as u64);
            let key = dist_key(i, ux - cx as f64 - 0.5, uy - cy as f64 - 0.5, uz - cz as f64 - 0.5);
            best.entry((cx, cy, cz))
                .and_modify(|slot| {
                    if key < *slot {
                        *slot = key;
                    }
                })
                .or_insert(key);
        };
        match remaining {
            None => (0..coords.len() as u32).for_each(&mut visit),
            Some(ids) => ids.iter().copied().for_each(&mut visit),
        }
        let mut winners: Vec<u32> = best
            .values()
            .map(|&key| (key & 0xFFFF_FFFF) as u32)
            .collect();
        winners.sort_unstable();
        winners
    }
}

/// Farthest point sampling: the seed picks the first point uniformly,
/// then each step appends the unselected point with the largest distance
/// to the selected set (ties to the lowest index).
pub fn farthest_point_sampling(
    cloud: &PointCloud,
    q_count: usize,
    seed: u64,
) -> Result<SamplerReport> {
    check_q(cloud, q_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..cloud.len()) as u32;
    farthest_point_sampling_from(cloud, q_count, first)
}

/// Farthest point sampling with an explicit first pick.
pub fn farthest_point_sampling_from(
    cloud: &PointCloud,
    q_count: usize,
    first: u32,
) -> Result<SamplerReport> {
    check_q(cloud, q_count)?;
    if first as usize >= cloud.len() {
        return Err(Error::Parameter(format!("first pick {first} out of range")));
    }
    let start = Instant::now();
    let n = cloud.len();
    let coords = cloud.coords();
    let mut selected = Vec::with_capacity(q_count);
    let mut taken = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut last = first;
    selected.push(first);
    taken[first as usize] = true;
    while selected.len() < q_count {
        let lp = coords[last as usize];
        let mut best = (-1.0f64, u32::MAX);
        for (i, &p) in coords.iter().enumerate() {
            let dx = p[0] - lp[0];
            let dy = p[1] - lp[1];
            let dz = p[2] - lp[2];
            let d2 = dx * dx + dy * dy + dz * dz;
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if !taken[i] && min_d2[i] > best.0 {
                best = (min_d2[i], i as u32);
            }
        }
        last = best.1;
        selected.push(last);
        taken[last as usize] = true;
    }
    Ok(SamplerReport {
        selected,
        iterations: 1,
        elapsed: start.elapsed().as_secs_f64(),
        strategy: Strategy::Fps,
    })
}

/// Uniform sampling without replacement.
pub fn random_sampling(cloud: &PointCloud, q_count: usize, seed: u64) -> Result<SamplerReport> {
    check_q(cloud, q_count)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selected: Vec<u32> = rand::seq::index::sample(&mut rng, cloud.len(), q_count)
        .iter()
        .map(|i| i as u32)
        .collect();
    Ok(SamplerReport {
        selected,
        iterations: 1,
        elapsed: start.elapsed().as_secs_f64(),
        strategy: Strategy::Random,
    })
}

/// Neighborhood-rejection sampling: picks are uniform among never-seen
/// points; a pick marks itself and its k nearest neighbors as seen. When
/// the unseen pool runs dry before reaching the quota, the pool resets to
/// all unselected points and picking continues.
pub fn rejection_sampling(
    cloud: &PointCloud,
    q_count: usize,
    k: usize,
    seed: u64,
) -> Result<SamplerReport> {
    check_q(cloud, q_count)?;
    let start = Instant::now();
    let n = cloud.len();
    let grid = (k > 0).then(|| KnnGrid::build(cloud));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected: Vec<u32> = Vec::with_capacity(q_count);
    let mut picked = vec![false; n];
    let mut seen = vec![false; n];
    let mut pool: Vec<u32> = (0..n as u32).collect();
    while selected.len() < q_count {
        // Lazy deletion: entries may have been marked seen since they
        // were queued; skip those. An empty pool triggers the reset.
        let pick = loop {
            if pool.is_empty() {
                pool = (0..n as u32).filter(|&i| !picked[i as usize]).collect();
                for i in 0..n {
                    seen[i] = picked[i];
                }
            }
            let at = rng.gen_range(0..pool.len());
            let candidate = pool.swap_remove(at);
            if !seen[candidate as usize] {
                break candidate;
            }
        };
        selected.push(pick);
        picked[pick as usize] = true;
        seen[pick as usize] = true;
        if let Some(grid) = &grid {
            for neighbor in grid.k_nearest(pick, k) {
                seen[neighbor as usize] = true;
            }
        }
    }
    Ok(SamplerReport {
        selected,
        iterations: 1,
        elapsed: start.elapsed().as_secs_f64(),
        strategy: Strategy::Rejection,
    })
}

/// Largest voxel length in `[diag/N, diag]` whose single quantization
/// pass yields at least `q_count` occupied voxels, found by bisection
/// (at most 40 halvings, stopping once the bracket width drops below
/// `tolerance * diag`).
pub fn dichotomic_optimal_voxel(
    cloud: &PointCloud,
    q_count: usize,
    tolerance: f64,
) -> Result<f64> {
    check_q(cloud, q_count)?;
    if tolerance <= 0.0 {
        return Err(Error::Parameter(format!(
            "tolerance must be positive, got {tolerance}"
        )));
    }
    let diag = cloud.bounding_diag();
    if diag <= 0.0 {
        return Err(Error::Parameter(
            "dichotomic search needs a non-degenerate cloud".into(),
        ));
    }
    let mut lo = diag / cloud.len() as f64;
    let mut hi = diag;
    if occupied_voxels(cloud, lo) < q_count {
        return Err(Error::SearchFailure(format!(
            "fewer than {q_count} occupied voxels even at the lower bracket {lo}"
        )));
    }
    if occupied_voxels(cloud, hi) >= q_count {
        return Ok(hi);
    }
    for _ in 0..40 {
        if hi - lo <= tolerance * diag {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if occupied_voxels(cloud, mid) >= q_count {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cube_corners() -> PointCloud {
        let corners: Vec<[f64; 3]> = (0..8)
            .map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64])
            .collect();
        PointCloud::new(corners).unwrap()
    }

    fn uniform_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn voxel_rule_values() {
        let v = voxel_size_rule(3.0f64.sqrt(), 256).unwrap();
        assert!((v - 3.0f64.sqrt() / 16.0).abs() < 1e-12);
        assert!((v - 0.10825).abs() < 1e-4);
        assert_eq!(voxel_size_rule(2.5, 1).unwrap(), 2.5);
        assert!(voxel_size_rule(0.0, 4).is_err());
    }

    #[test]
    fn plane_occupies_a_squared_voxels() {
        // Axis-aligned plane at height 0.5 in a unit cube, 4x4x4 grid:
        // exactly 16 occupied voxels (plus the two corner anchors).
        let a = 4usize;
        let mut coords = Vec::new();
        for i in 0..a {
            for j in 0..a {
                coords.push([
                    (i as f64 + 0.3) / a as f64,
                    (j as f64 + 0.4) / a as f64,
                    0.5,
                ]);
                coords.push([
                    (i as f64 + 0.7) / a as f64,
                    (j as f64 + 0.6) / a as f64,
                    0.5,
                ]);
            }
        }
        coords.push([0.0, 0.0, 0.0]);
        coords.push([1.0, 1.0, 1.0]);
        let cloud = PointCloud::new(coords).unwrap();
        let occ = occupied_voxels(&cloud, 0.25);
        assert_eq!(occ, a * a + 2);
    }

    #[test]
    fn quantized_cube_corners_single_pass() {
        // v = sqrt(3)/sqrt(8) ~ 0.612 puts each corner in its own voxel.
        let cloud = unit_cube_corners();
        let report = quantized_sampling(&cloud, 8, 0).unwrap();
        assert_eq!(report.iterations, 1);
        let mut sel = report.selected.clone();
        sel.sort_unstable();
        assert_eq!(sel, (0..8).collect::<Vec<u32>>());
    }

    #[test]
    fn quantized_full_count_selects_everything() {
        let cloud = uniform_cloud(100, 5);
        let report = quantized_sampling(&cloud, 100, 0).unwrap();
        let mut sel = report.selected.clone();
        sel.sort_unstable();
        assert_eq!(sel, (0..100).collect::<Vec<u32>>());
    }

    #[test]
    fn quantized_no_duplicates_and_exact_count() {
        let cloud = uniform_cloud(500, 11);
        for q in [1usize, 3, 250, 499] {
            let report = quantized_sampling(&cloud, q, 7).unwrap();
            assert_eq!(report.selected.len(), q);
            let mut sel = report.selected.clone();
            sel.sort_unstable();
            sel.dedup();
            assert_eq!(sel.len(), q);
        }
    }

    #[test]
    fn quantized_first_pass_distinct_voxels() {
        let cloud = uniform_cloud(400, 3);
        let q = 60usize;
        let v = voxel_size_rule(cloud.bounding_diag(), q).unwrap();
        let report = quantized_sampling(&cloud, q, 1).unwrap();
        let (lo, _) = cloud.bounding_box();
        if report.iterations == 1 {
            let mut keys = std::collections::HashSet::new();
            for &i in &report.selected {
                assert!(keys.insert(voxel_key(cloud.point(i as usize), lo, v)));
            }
        }
    }

    #[test]
    fn quantized_iterations_bounded_empirically() {
        // 10k uniform points, q = 5k: at most 3 passes for >= 95% of
        // seeds (regression bound measured over 100 seeded runs).
        let cloud = uniform_cloud(10_000, 42);
        let mut ok = 0;
        for seed in 0..100u64 {
            let report = quantized_sampling(&cloud, 5_000, seed).unwrap();
            if report.iterations <= 3 {
                ok += 1;
            }
        }
        assert!(ok >= 95, "only {ok}/100 runs stayed within 3 passes");
    }

    #[test]
    fn quantized_deterministic() {
        let cloud = uniform_cloud(300, 9);
        let a = quantized_sampling(&cloud, 120, 4).unwrap();
        let b = quantized_sampling(&cloud, 120, 4).unwrap();
        assert_eq!(a.selected, b.selected);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn quantized_q_too_large_errors() {
        let cloud = unit_cube_corners();
        assert!(matches!(
            quantized_sampling(&cloud, 9, 0),
            Err(Error::Cardinality { .. })
        ));
    }

    #[test]
    fn fps_collinear_hand_simulation() {
        let cloud = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ])
        .unwrap();
        let report = farthest_point_sampling_from(&cloud, 4, 0).unwrap();
        assert_eq!(report.selected, vec![0, 3, 1, 2]);
    }

    #[test]
    fn fps_single_pick_is_seeded_first() {
        let cloud = uniform_cloud(50, 2);
        let a = farthest_point_sampling(&cloud, 1, 33).unwrap();
        let b = farthest_point_sampling(&cloud, 1, 33).unwrap();
        assert_eq!(a.selected.len(), 1);
        assert_eq!(a.selected, b.selected);
    }

    #[test]
    fn fps_square_corners_beat_center() {
        let cloud = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
        ])
        .unwrap();
        let report = farthest_point_sampling_from(&cloud, 4, 0).unwrap();
        let mut sel = report.selected.clone();
        sel.sort_unstable();
        assert_eq!(sel, vec![0, 1, 2, 3]);
    }

    #[test]
    fn random_full_selection_and_determinism() {
        let cloud = uniform_cloud(40, 8);
        let report = random_sampling(&cloud, 40, 1).unwrap();
        let mut sel = report.selected.clone();
        sel.sort_unstable();
        assert_eq!(sel, (0..40).collect::<Vec<u32>>());
        let a = random_sampling(&cloud, 10, 5).unwrap();
        let b = random_sampling(&cloud, 10, 5).unwrap();
        assert_eq!(a.selected, b.selected);
    }

    #[test]
    fn random_single_pick_frequencies() {
        // 10_000 draws of 1-of-4: each index frequency within 4 sigma of
        // 0.25 (binomial sigma = sqrt(p(1-p)/n)).
        let cloud = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        let mut counts = [0usize; 4];
        let n = 10_000;
        for seed in 0..n {
            let report = random_sampling(&cloud, 1, seed as u64).unwrap();
            counts[report.selected[0] as usize] += 1;
        }
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - 0.25).abs() < 4.0 * sigma,
                "frequency {freq} outside 4 sigma"
            );
        }
    }

    #[test]
    fn rejection_k0_single_pick_frequencies() {
        // k = 0 reduces to pure random sampling; check uniformity the
        // same way as the random baseline.
        let cloud = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        let mut counts = [0usize; 4];
        let n = 10_000;
        for seed in 0..n {
            let report = rejection_sampling(&cloud, 1, 0, seed as u64).unwrap();
            counts[report.selected[0] as usize] += 1;
        }
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn rejection_single_pick() {
        let cloud = uniform_cloud(30, 4);
        let report = rejection_sampling(&cloud, 1, 16, 9).unwrap();
        assert_eq!(report.selected.len(), 1);
    }

    #[test]
    fn rejection_non_adjacent_before_first_reset() {
        // Replay oracle: with a small quota no reset can occur, so every
        // pick must land outside all previously seen neighborhoods,
        // re-derived here with the brute-force k-NN path.
        use crate::geometry::knn;
        let cloud = uniform_cloud(100, 31);
        let k = 16usize;
        let q = 5usize;
        let report = rejection_sampling(&cloud, q, k, 3).unwrap();
        let mut seen = vec![false; 100];
        for &pick in &report.selected {
            assert!(!seen[pick as usize], "pick {pick} was already seen");
            let idx = knn(&cloud, &[pick], k).unwrap();
            for &nb in idx.row(0) {
                seen[nb as usize] = true;
            }
        }
    }

    #[test]
    fn rejection_resets_pool_when_exhausted() {
        // k large relative to the cloud: the pool dries up before the
        // quota; the reset keeps the sampler going to exactly q picks.
        let cloud = uniform_cloud(60, 8);
        let report = rejection_sampling(&cloud, 40, 30, 5).unwrap();
        assert_eq!(report.selected.len(), 40);
        let mut sel = report.selected.clone();
        sel.sort_unstable();
        sel.dedup();
        assert_eq!(sel.len(), 40, "picks stay duplicate-free across resets");
    }

    #[test]
    fn dichotomic_plane_recovers_inverse_a() {
        // Dense samples on the face z = 0.5 of the unit cube; with
        // q = a^2 the optimal edge is 1/a up to the bracket tolerance
        // plus the discretization of the sampling.
        let a = 8usize;
        let mut coords = Vec::new();
        for i in 0..64 {
            for j in 0..64 {
                coords.push([i as f64 / 63.0, j as f64 / 63.0, 0.5]);
            }
        }
        // anchors give the bounding box the full cube extent
        coords.push([0.0, 0.0, 0.0]);
        coords.push([1.0, 1.0, 1.0]);
        let cloud = PointCloud::new(coords).unwrap();
        let tol = 1e-4;
        let v = dichotomic_optimal_voxel(&cloud, a * a, tol).unwrap();
        assert!(occupied_voxels(&cloud, v) >= a * a);
        assert!(
            (v - 1.0 / a as f64).abs() < 0.05,
            "v = {v}, expected about {}",
            1.0 / a as f64
        );
    }

    #[test]
    fn dichotomic_q_equals_n_below_pairwise_gap() {
        let cloud = unit_cube_corners();
        let v = dichotomic_optimal_voxel(&cloud, 8, 1e-4).unwrap();
        assert_eq!(occupied_voxels(&cloud, v), 8);
        // pairwise gap on the unit cube is 1; the result stays at that
        // scale
        assert!(v <= 1.0 + 1e-6);
    }

    #[test]
    fn dichotomic_occupancy_monotone_on_bracket() {
        // Sweep oracle: occupied count is non-increasing in v for this
        // cloud across the search bracket.
        let cloud = uniform_cloud(300, 17);
        let diag = cloud.bounding_diag();
        let lo = diag / 300.0;
        let mut last = usize::MAX;
        for step in 0..30 {
            let v = lo + (diag - lo) * step as f64 / 29.0;
            let occ = occupied_voxels(&cloud, v);
            assert!(occ <= last, "occupancy increased at v={v}");
            last = occ;
        }
    }

    #[test]
    fn dichotomic_unreachable_q_errors() {
        // Two tight clusters: 8 occupied voxels are unreachable at the
        // lower bracket, which is far coarser than the cluster size.
        let mut coords = Vec::new();
        for i in 0..4 {
            coords.push([i as f64 * 1e-9, 0.0, 0.0]);
        }
        for i in 0..4 {
            coords.push([1.0 + i as f64 * 1e-9, 0.0, 0.0]);
        }
        let cloud = PointCloud::new(coords).unwrap();
        assert!(matches!(
            dichotomic_optimal_voxel(&cloud, 8, 1e-3),
            Err(Error::SearchFailure(_))
        ));
    }
}
