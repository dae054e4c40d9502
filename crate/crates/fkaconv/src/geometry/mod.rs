//! Point-cloud containers, bounding geometry, k-NN search, and
//! neighborhood normalization.

mod knn;

pub use knn::{knn, knn_grid, nearest_indices, KnnGrid};

use crate::error::{Error, Result};

/// Coordinates with optional per-point features and labels. Coordinates
/// are `f64` so geometry (ties, voxel keys) is deterministic regardless
/// of the float width used for training.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f64; 3]>,
    features: Option<Features>,
    labels: Option<Vec<i64>>,
}

/// Row-major per-point feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    data: Vec<f64>,
    width: usize,
}

impl Features {
    pub fn new(data: Vec<f64>, width: usize) -> Result<Self> {
        if width == 0 || data.len() % width != 0 {
            return Err(Error::Parameter(format!(
                "feature data of {} values does not split into rows of {width}",
                data.len()
            )));
        }
        Ok(Features { data, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyInput("point cloud with zero points".into()));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite coordinate".into()));
        }
        Ok(PointCloud {
            coords,
            features: None,
            labels: None,
        })
    }

    pub fn with_features(mut self, features: Features) -> Result<Self> {
        if features.data.len() / features.width != self.len() {
            return Err(Error::dims(
                "features",
                &[features.data.len() / features.width],
                &[self.len()],
            ));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::dims("labels", &[labels.len()], &[self.len()]));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.coords[i]
    }

    pub fn features(&self) -> Option<&Features> {
        self.features.as_ref()
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = self.coords[0];
        let mut hi = self.coords[0];
        for p in &self.coords[1..] {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Euclidean length of the bounding-box diagonal.
    pub fn bounding_diag(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        let mut acc = 0.0;
        for a in 0..3 {
            let d = hi[a] - lo[a];
            acc += d * d;
        }
        acc.sqrt()
    }

    /// Copy with every point shifted by `t` (tests and scene assembly).
    pub fn translated(&self, t: [f64; 3]) -> PointCloud {
        let coords = self
            .coords
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect();
        PointCloud {
            coords,
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Sub-cloud at `ids`, carrying features and labels along.
    pub fn select(&self, ids: &[u32]) -> Result<PointCloud> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("selection of zero points".into()));
        }
        let coords = ids.iter().map(|&i| self.coords[i as usize]).collect();
        let features = self.features.as_ref().map(|f| Features {
            width: f.width,
            data: ids
                .iter()
                .flat_map(|&i| f.row(i as usize).iter().copied())
                .collect(),
        });
        let labels = self
            .labels
            .as_ref()
            .map(|l| ids.iter().map(|&i| l[i as usize]).collect());
        Ok(PointCloud {
            coords,
            features,
            labels,
        })
    }
}

pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Per-support-point neighbor lists into a source cloud. Each row is
/// sorted by ascending distance to its support point (ties by lowest
/// source index); deficient neighborhoods pad by repeating the nearest
/// point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    indices: Vec<u32>,
    support_ids: Vec<u32>,
    k: usize,
}

impl NeighborIndex {
    pub(crate) fn new(indices: Vec<u32>, support_ids: Vec<u32>, k: usize) -> Self {
        debug_assert_eq!(indices.len(), support_ids.len() * k);
        NeighborIndex {
            indices,
            support_ids,
            k,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_support(&self) -> usize {
        self.support_ids.len()
    }

    pub fn support_ids(&self) -> &[u32] {
        &self.support_ids
    }

    pub fn row(&self, s: usize) -> &[u32] {
        &self.indices[s * self.k..(s + 1) * self.k]
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }
}

/// Neighbor coordinates expressed in each support point's frame and
/// divided by the layer radius, plus the batch's mean neighborhood
/// radius (the EMA input).
#[derive(Debug, Clone)]
pub struct NormalizedNeighborhoods {
    /// `S x k x 3`, row-major, dimensionless.
    pub local_coords: Vec<f64>,
    pub num_support: usize,
    pub k: usize,
    /// Mean over support points of the farthest-neighbor distance, in
    /// source units.
    pub batch_mean_radius: f64,
}

/// Raw per-neighbor offsets `p_i - q` plus the batch mean of per-support
/// max neighbor distance. `normalize_neighborhoods` divides these by a
/// supplied radius; the layer computes them first so the radius update
/// can use the current batch.
pub fn neighborhood_offsets(source: &PointCloud, index: &NeighborIndex) -> (Vec<f64>, f64) {
    let s = index.num_support();
    let k = index.k();
    let mut offsets = vec![0.0f64; s * k * 3];
    let mut radius_sum = 0.0f64;
    for si in 0..s {
        let q = source.point(index.support_ids()[si] as usize);
        let mut max_d2 = 0.0f64;
        for (j, &n) in index.row(si).iter().enumerate() {
            let p = source.point(n as usize);
            let base = (si * k + j) * 3;
            offsets[base] = p[0] - q[0];
            offsets[base + 1] = p[1] - q[1];
            offsets[base + 2] = p[2] - q[2];
            let d2 = dist2(p, q);
            if d2 > max_d2 {
                max_d2 = d2;
            }
        }
        radius_sum += max_d2.sqrt();
    }
    (offsets, radius_sum / s as f64)
}

/// Center each neighborhood at its support point and divide by `r_t`.
pub fn normalize_neighborhoods(
    source: &PointCloud,
    index: &NeighborIndex,
    r_t: f64,
) -> Result<NormalizedNeighborhoods> {
    if r_t <= 0.0 {
        return Err(Error::Parameter(format!(
            "normalization radius must be positive, got {r_t}"
        )));
    }
    let (mut local, batch_mean_radius) = neighborhood_offsets(source, index);
    let inv = 1.0 / r_t;
    for v in &mut local {
        *v *= inv;
    }
    Ok(NormalizedNeighborhoods {
        local_coords: local,
        num_support: index.num_support(),
        k: index.k(),
        batch_mean_radius,
    })
}
