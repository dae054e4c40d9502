//! Finite-difference gradient checks.
//!
//! The oracle side only ever evaluates forward passes: a probe rebuilds
//! its graph from a flat parameter vector, and central differences
//! (h = 1e-4, in `f64`) approximate the gradient independently of the
//! backward implementation being checked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnState, Graph, NodeId, Tensor};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;

/// Outcome of one check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Relative error with an absolute floor of 1, so near-zero pairs are
/// compared absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// A differentiable scalar function of a flat parameter vector. The
/// builder splits the vector into graph leaves and returns the scalar
/// loss together with the leaves, in vector order.
pub type ProbeBuilder = dyn Fn(&mut Graph<f64>, &[f64]) -> Result<(NodeId, Vec<NodeId>)>;

/// Compare backward gradients against central finite differences.
///
/// The h = 1e-4 comparison applies away from non-smooth points. An entry
/// whose probe interval happens to contain a relu kink or a max tie is
/// re-probed at h/64: a genuine backward bug still disagrees there, while
/// a kink artifact vanishes. The refinement never loosens the tolerance.
pub fn run_check(
    name: impl Into<String>,
    x0: &[f64],
    tolerance: f64,
    build: &ProbeBuilder,
) -> Result<GradCheck> {
    let analytic = analytic_gradient(x0, build)?;
    let fd = fd_gradient(x0, build)?;
    let eval = |x: &[f64]| -> Result<f64> {
        let mut graph = Graph::new();
        let (loss, _) = build(&mut graph, x)?;
        Ok(graph.value(loss).item())
    };
    let mut max_rel = 0.0f64;
    let mut x = x0.to_vec();
    for (i, (&a, &b)) in analytic.iter().zip(&fd).enumerate() {
        let mut rel = relative_error(a, b);
        if rel >= tolerance {
            let h = FD_STEP / 64.0;
            x[i] = x0[i] + h;
            let up = eval(&x)?;
            x[i] = x0[i] - h;
            let down = eval(&x)?;
            x[i] = x0[i];
            let fine = (up - down) / (2.0 * h);
            rel = rel.min(relative_error(a, fine));
        }
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheck {
        name: name.into(),
        max_rel_err: max_rel,
        tolerance,
    })
}

/// Gradient via a single backward sweep.
pub fn analytic_gradient(x0: &[f64], build: &ProbeBuilder) -> Result<Vec<f64>> {
    let mut graph = Graph::new();
    let (loss, leaves) = build(&mut graph, x0)?;
    graph.backward(loss)?;
    let mut out = Vec::with_capacity(x0.len());
    for leaf in leaves {
        let n = graph.value(leaf).numel();
        match graph.grad(leaf) {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat(0.0).take(n)),
        }
    }
    Ok(out)
}

/// Central-difference gradient; forward evaluations only.
pub fn fd_gradient(x0: &[f64], build: &ProbeBuilder) -> Result<Vec<f64>> {
    fd_gradient_with_step(x0, build, FD_STEP)
}

pub fn fd_gradient_with_step(x0: &[f64], build: &ProbeBuilder, h: f64) -> Result<Vec<f64>> {
    let eval = |x: &[f64]| -> Result<f64> {
        let mut graph = Graph::new();
        let (loss, _) = build(&mut graph, x)?;
        Ok(graph.value(loss).item())
    };
    let mut grad = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let up = eval(&x)?;
        x[i] = x0[i] - h;
        let down = eval(&x)?;
        x[i] = x0[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}


/// Test fixture: deliberately corrupt one backward rule so the harness
/// itself can be shown to catch a bad gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    None,
    /// Scales the sigmoid check's analytic gradient by 1.01.
    SigmoidBackward,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform values kept away from the relu kink at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() < 0.05 {
                v + 0.1
            } else {
                v
            }
        })
        .collect()
}

/// Uniform values whose pairwise gaps stay well above the
/// finite-difference step, keeping max ties out of play.
fn well_separated(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = uniform(rng, n, 0.0, 10.0);
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).all(|w| w[1] - w[0] > 1e-2) {
            return v;
        }
    }
}

/// Gradient checks for every differentiable op. Layer-level checks live
/// in [`crate::conv::gradchecks`]; the CLI suite runs both.
pub fn op_checks(seed: u64, corruption: Corruption) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // matmul: 3x4 by 4x2, loss = sum of entries
    {
        let x0: Vec<f64> = uniform(&mut rng, 12 + 8, -1.0, 1.0);
        checks.push(run_check("matmul", &x0, 1e-4, &|g, x| {
            let a = g.leaf(Tensor::from_slice(&[3, 4], &x[..12])?, true);
            let b = g.leaf(Tensor::from_slice(&[4, 2], &x[12..])?, true);
            let y = g.matmul(a, b)?;
            Ok((g.sum_all(y)?, vec![a, b]))
        })?);
    }

    // relu away from the kink
    {
        let x0 = away_from_zero(&mut rng, 12);
        checks.push(run_check("pointwise.relu", &x0, 1e-4, &|g, x| {
            let a = g.leaf(Tensor::from_slice(&[3, 4], x)?, true);
            let y = g.relu(a);
            let sq = g.mul(y, y)?;
            Ok((g.sum_all(sq)?, vec![a]))
        })?);
    }

    // sigmoid at x = 1 plus random points
    {
        let mut x0 = uniform(&mut rng, 8, -2.0, 2.0);
        x0[0] = 1.0;
        let corrupted = corruption == Corruption::SigmoidBackward;
        let build: Box<ProbeBuilder> = Box::new(|g, x| {
            let a = g.leaf(Tensor::from_slice(&[8], x)?, true);
            let y = g.sigmoid(a);
            Ok((g.sum_all(y)?, vec![a]))
        });
        let check = if corrupted {
            let analytic: Vec<f64> = analytic_gradient(&x0, &*build)?
                .iter()
                .map(|v| v * 1.01)
                .collect();
            let fd = fd_gradient(&x0, &*build)?;
            let mut max_rel = 0.0f64;
            for (&a, &b) in analytic.iter().zip(&fd) {
                max_rel = max_rel.max(relative_error(a, b));
            }
            GradCheck {
                name: "pointwise.sigmoid".into(),
                max_rel_err: max_rel,
                tolerance: 1e-6,
            }
        } else {
            run_check("pointwise.sigmoid", &x0, 1e-6, &*build)?
        };
        checks.push(check);
    }

    // add / sub / mul with a broadcast trailing singleton
    for (name, which) in [
        ("pointwise.add", 0usize),
        ("pointwise.sub", 1),
        ("pointwise.mul", 2),
    ] {
        let x0 = uniform(&mut rng, 12 + 4, -1.0, 1.0);
        checks.push(run_check(name, &x0, 1e-4, &move |g, x| {
            let a = g.leaf(Tensor::from_slice(&[4, 3], &x[..12])?, true);
            let b = g.leaf(Tensor::from_slice(&[4, 1], &x[12..])?, true);
            let y = match which {
                0 => g.add(a, b)?,
                1 => g.sub(a, b)?,
                _ => g.mul(a, b)?,
            };
            let sq = g.mul(y, y)?;
            Ok((g.sum_all(sq)?, vec![a, b]))
        })?);
    }

    // scale by a constant
    {
        let x0 = uniform(&mut rng, 6, -1.0, 1.0);
        checks.push(run_check("pointwise.scale", &x0, 1e-4, &|g, x| {
            let a = g.leaf(Tensor::from_slice(&[6], x)?, true);
            let y = g.scale(a, -2.5);
            let sq = g.mul(y, y)?;
            Ok((g.sum_all(sq)?, vec![a]))
        })?);
    }

    // l2 norm over the last axis, away from the zero vector
    {
        let x0 = uniform(&mut rng, 5 * 3, 0.3, 1.0);
        checks.push(run_check("l2_norm", &x0, 1e-4, &|g, x| {
            let a = g.leaf(Tensor::from_slice(&[5, 3], x)?, true);
            let y = g.l2_norm_last(a)?;
            let sq = g.mul(y, y)?;
            Ok((g.sum_all(sq)?, vec![a]))
        })?);
    }

    // max over an axis of a 4x6 array, away from ties
    {
        let x0 = well_separated(&mut rng, 24);
        checks.push(run_check("max_axis", &x0, 1e-4, &|g, x| {
            let a = g.leaf(Tensor::from_slice(&[4, 6], x)?, true);
            let (y, _) = g.max_axis(a, 1)?;
            let sq = g.mul(y, y)?;
            Ok((g.sum_all(sq)?, vec![a]))
        })?);
    }

    // sum over an axis
    {
        let x0 = uniform(&mut rng, 24, -1.0, 1.0);
        checks.push(run_check("sum_axis", &x0, 1e-4, &|g, x| {
            let a = g.leaf(Tensor::from_slice(&[2, 3, 4], x)?, true);
            let y = g.sum_axis(a, 1)?;
            let sq = g.mul(y, y)?;
            Ok((g.sum_all(sq)?, vec![a]))
        })?);
    }

    // concat along axis 1
    {
        let x0 = uniform(&mut rng, 2 * 3 + 2 * 5, -1.0, 1.0);
        checks.push(run_check("concat", &x0, 1e-4, &|g, x| {
            let a = g.leaf(Tensor::from_slice(&[2, 3], &x[..6])?, true);
            let b = g.leaf(Tensor::from_slice(&[2, 5], &x[6..])?, true);
            let y = g.concat(&[a, b], 1)?;
            let sq = g.mul(y, y)?;
            Ok((g.sum_all(sq)?, vec![a, b]))
        })?);
    }

    // expand along a new axis
    {
        let x0 = uniform(&mut rng, 6, -1.0, 1.0);
        checks.push(run_check("expand_axis", &x0, 1e-4, &|g, x| {
            let a = g.leaf(Tensor::from_slice(&[2, 3], x)?, true);
            let y = g.expand_axis(a, 1, 4)?;
            let sq = g.mul(y, y)?;
            Ok((g.sum_all(sq)?, vec![a]))
        })?);
    }

    // gather with repeated rows (exercises scatter-add)
    {
        let x0 = uniform(&mut rng, 5 * 2, -1.0, 1.0);
        checks.push(run_check("gather", &x0, 1e-4, &|g, x| {
            let a = g.leaf(Tensor::from_slice(&[5, 2], x)?, true);
            let y = g.gather(a, &[0, 3, 3, 1], &[4])?;
            let sq = g.mul(y, y)?;
            Ok((g.sum_all(sq)?, vec![a]))
        })?);
    }

    // linear over a rank-3 input (2x3 rows of width 3)
    {
        let x0 = uniform(&mut rng, 2 * 3 * 3 + 3 * 2 + 2, -1.0, 1.0);
        checks.push(run_check("linear", &x0, 1e-4, &|g, x| {
            let xn = g.leaf(Tensor::from_slice(&[2, 3, 3], &x[..18])?, true);
            let w = g.leaf(Tensor::from_slice(&[3, 2], &x[18..24])?, true);
            let b = g.leaf(Tensor::from_slice(&[2], &x[24..])?, true);
            let y = g.linear(xn, w, b)?;
            let sq = g.mul(y, y)?;
            Ok((g.sum_all(sq)?, vec![xn, w, b]))
        })?);
    }

    // batched matmul
    {
        let x0 = uniform(&mut rng, 2 * 3 * 2 + 2 * 2 * 4, -1.0, 1.0);
        checks.push(run_check("bmm", &x0, 1e-4, &|g, x| {
            let a = g.leaf(Tensor::from_slice(&[2, 3, 2], &x[..12])?, true);
            let b = g.leaf(Tensor::from_slice(&[2, 2, 4], &x[12..])?, true);
            let y = g.bmm(a, b)?;
            let sq = g.mul(y, y)?;
            Ok((g.sum_all(sq)?, vec![a, b]))
        })?);
    }

    // transpose of the last two axes
    {
        let x0 = uniform(&mut rng, 2 * 3 * 4, -1.0, 1.0);
        checks.push(run_check("transpose_last2", &x0, 1e-4, &|g, x| {
            let a = g.leaf(Tensor::from_slice(&[2, 3, 4], x)?, true);
            let t = g.transpose_last2(a)?;
            let sq = g.mul(t, t)?;
            let w = g.scale(sq, 0.5);
            Ok((g.sum_all(w)?, vec![a]))
        })?);
    }

    // batch norm in training mode (batch statistics differentiated)
    {
        let x0 = uniform(&mut rng, 6 * 3 + 3 + 3, -1.0, 1.0);
        checks.push(run_check("batch_norm", &x0, 1e-3, &|g, x| {
            let xn = g.leaf(Tensor::from_slice(&[6, 3], &x[..18])?, true);
            let gamma = g.leaf(Tensor::from_slice(&[3], &x[18..21])?, true);
            let beta = g.leaf(Tensor::from_slice(&[3], &x[21..])?, true);
            let mut state = BnState::new(3, 0.1);
            let y = g.batch_norm(xn, gamma, beta, &mut state, true)?;
            let sq = g.mul(y, y)?;
            Ok((g.sum_all(sq)?, vec![xn, gamma, beta]))
        })?);
    }

    // cross entropy against fixed labels
    {
        let x0 = uniform(&mut rng, 4 * 3, -2.0, 2.0);
        checks.push(run_check("cross_entropy", &x0, 1e-4, &|g, x| {
            let logits = g.leaf(Tensor::from_slice(&[4, 3], x)?, true);
            let loss = g.cross_entropy(logits, &[0, 2, 1, 1])?;
            Ok((loss, vec![logits]))
        })?);
    }

    // kernel application (kernel, per-support block, bias)
    {
        let (fout, fin, m, s) = (3usize, 2usize, 4usize, 2usize);
        let x0 = uniform(&mut rng, fout * fin * m + s * m * fin + fout, -1.0, 1.0);
        checks.push(run_check("kernel_apply", &x0, 1e-4, &move |g, x| {
            let k = g.leaf(
                Tensor::from_slice(&[fout, fin, m], &x[..fout * fin * m])?,
                true,
            );
            let gm = g.leaf(
                Tensor::from_slice(
                    &[s, m, fin],
                    &x[fout * fin * m..fout * fin * m + s * m * fin],
                )?,
                true,
            );
            let b = g.leaf(
                Tensor::from_slice(&[fout], &x[fout * fin * m + s * m * fin..])?,
                true,
            );
            let y = g.kernel_apply(k, gm, b)?;
            let sq = g.mul(y, y)?;
            Ok((g.sum_all(sq)?, vec![k, gm, b]))
        })?);
    }

    Ok(checks)
}
