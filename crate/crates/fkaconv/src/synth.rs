//! Seeded synthetic scenes: primitives for the toy classification task,
//! planar rooms for the voxel-rule validation, and uniform cubes for the
//! sampling benchmarks. Generators are pure functions of their spec.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Derive an independent stream seed (splitmix64 round over seed+stream).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Plane,
    Sphere,
    Cube,
    PlanarRoom,
    UniformCube,
}

impl SceneKind {
    pub fn parse(s: &str) -> Option<SceneKind> {
        match s {
            "plane" => Some(SceneKind::Plane),
            "sphere" => Some(SceneKind::Sphere),
            "cube" => Some(SceneKind::Cube),
            "planar-room" => Some(SceneKind::PlanarRoom),
            "uniform-cube" => Some(SceneKind::UniformCube),
            _ => None,
        }
    }
}

/// Similarity transform applied after noise: scale, then rotation
/// (extrinsic X, then Y, then Z), then translation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transform {
    pub rotation_xyz: [f64; 3],
    pub translation: [f64; 3],
    pub scale: f64,
}

impl Default for Transform {
    fn default() -> Self {
        Transform {
            rotation_xyz: [0.0; 3],
            translation: [0.0; 3],
            scale: 1.0,
        }
    }
}

impl Transform {
    fn matrix(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.rotation_xyz;
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        matmul3(rz, matmul3(ry, rx))
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.matrix();
        let s = self.scale;
        let v = [p[0] * s, p[1] * s, p[2] * s];
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2] + self.translation[0],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2] + self.translation[1],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2] + self.translation[2],
        ]
    }
}

fn matmul3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                c[i][j] += a[i][k] * bk[j];
            }
        }
    }
    c
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub n_points: usize,
    /// Isotropic Gaussian noise sigma, in primitive units.
    pub sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub transform: Transform,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, n_points: usize, sigma: f64, seed: u64) -> SceneSpec {
        SceneSpec {
            kind,
            n_points,
            sigma,
            seed,
            transform: Transform::default(),
        }
    }
}

/// Standard normal via Box-Muller on the scene stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Seeded surface sampling of the primitive, Gaussian noise, then the
/// transform. Planar rooms label points by face (0 floor, 1 and 2 the
/// two walls).
pub fn generate(spec: &SceneSpec) -> Result<PointCloud> {
    if spec.n_points < 8 {
        return Err(Error::Parameter(format!(
            "scenes need at least 8 points, got {}",
            spec.n_points
        )));
    }
    if spec.sigma < 0.0 {
        return Err(Error::Parameter("noise sigma must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_points;
    let mut coords: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut labels: Option<Vec<i64>> = None;
    match spec.kind {
        SceneKind::Plane => {
            for _ in 0..n {
                coords.push([rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, 0.0]);
            }
        }
        SceneKind::Sphere => {
            for _ in 0..n {
                let v = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                coords.push([0.5 * v[0] / len, 0.5 * v[1] / len, 0.5 * v[2] / len]);
            }
        }
        SceneKind::Cube => {
            // six faces of a unit cube centered at the origin
            for _ in 0..n {
                let face = rng.gen_range(0..6u8);
                let (u, w) = (rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
                let half = 0.5;
                coords.push(match face {
                    0 => [half, u, w],
                    1 => [-half, u, w],
                    2 => [u, half, w],
                    3 => [u, -half, w],
                    4 => [u, w, half],
                    _ => [u, w, -half],
                });
            }
        }
        SceneKind::PlanarRoom => {
            // Floor W x D at z=0, wall W x H at y=0, wall D x H at x=0.
            // Room proportions draw from the scene stream: wider than
            // tall, floor longer than deep.
            let w = rng.gen_range(3.5..6.0);
            let d = rng.gen_range(2.0..3.5);
            let h = rng.gen_range(2.2..3.0);
            let areas = [w * d, w * h, d * h];
            let total = areas[0] + areas[1] + areas[2];
            let mut labs = Vec::with_capacity(n);
            for _ in 0..n {
                let pick = rng.gen::<f64>() * total;
                let (face, a, b) = if pick < areas[0] {
                    (0i64, w, d)
                } else if pick < areas[0] + areas[1] {
                    (1, w, h)
                } else {
                    (2, d, h)
                };
                let (u, v) = (rng.gen::<f64>() * a, rng.gen::<f64>() * b);
                coords.push(match face {
                    0 => [u, v, 0.0],
                    1 => [u, 0.0, v],
                    _ => [0.0, u, v],
                });
                labs.push(face);
            }
            labels = Some(labs);
        }
        SceneKind::UniformCube => {
            for _ in 0..n {
                coords.push([rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()]);
            }
        }
    }
    if spec.sigma > 0.0 {
        for p in &mut coords {
            for c in p.iter_mut() {
                *c += spec.sigma * normal(&mut rng);
            }
        }
    }
    for p in &mut coords {
        *p = spec.transform.apply(*p);
    }
    let cloud = PointCloud::new(coords)?;
    match labels {
        Some(l) => cloud.with_labels(l),
        None => Ok(cloud),
    }
}

/// Balanced spheres/cubes/planes under random rigid transforms and scale
/// jitter in [0.8, 1.2]. Labels: 0 sphere, 1 cube, 2 plane.
pub fn make_toy_classification(
    n_per_class: usize,
    n_points: usize,
    seed: u64,
) -> Result<Vec<(PointCloud, u32)>> {
    if n_per_class == 0 {
        return Err(Error::Parameter("n_per_class must be at least 1".into()));
    }
    let kinds = [SceneKind::Sphere, SceneKind::Cube, SceneKind::Plane];
    let mut out = Vec::with_capacity(3 * n_per_class);
    for (label, &kind) in kinds.iter().enumerate() {
        for i in 0..n_per_class {
            let stream = mix_seed(seed, (label * n_per_class + i) as u64);
            let mut trng = ChaCha8Rng::seed_from_u64(mix_seed(stream, 0xF0));
            let transform = Transform {
                rotation_xyz: [
                    trng.gen::<f64>() * std::f64::consts::TAU,
                    trng.gen::<f64>() * std::f64::consts::TAU,
                    trng.gen::<f64>() * std::f64::consts::TAU,
                ],
                translation: [
                    trng.gen_range(-1.0..1.0),
                    trng.gen_range(-1.0..1.0),
                    trng.gen_range(-1.0..1.0),
                ],
                scale: trng.gen_range(0.8..1.2),
            };
            let spec = SceneSpec {
                kind,
                n_points,
                sigma: 0.01,
                seed: stream,
                transform,
            };
            out.push((generate(&spec)?, label as u32));
        }
    }
    Ok(out)
}

/// Nearest-centroid classifier on raw coordinates: each cloud collapses
/// to its centroid, classes to the mean of their training centroids.
/// With random per-cloud translations this stays near chance, which is
/// the point of the baseline.
pub fn nearest_centroid_accuracy(
    train: &[(PointCloud, u32)],
    test: &[(PointCloud, u32)],
) -> f64 {
    let centroid = |cloud: &PointCloud| -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for p in cloud.coords() {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        for v in &mut c {
            *v /= cloud.len() as f64;
        }
        c
    };
    let n_classes = train.iter().map(|(_, l)| *l).max().unwrap_or(0) as usize + 1;
    let mut sums = vec![[0.0f64; 3]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (cloud, label) in train {
        let c = centroid(cloud);
        for a in 0..3 {
            sums[*label as usize][a] += c[a];
        }
        counts[*label as usize] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in s.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    let mut correct = 0usize;
    for (cloud, label) in test {
        let c = centroid(cloud);
        let mut best = (f64::INFINITY, 0u32);
        for (k, proto) in sums.iter().enumerate() {
            let d = (c[0] - proto[0]).powi(2)
                + (c[1] - proto[1]).powi(2)
                + (c[2] - proto[2]).powi(2);
            if d < best.0 {
                best = (d, k as u32);
            }
        }
        if best.1 == *label {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}
