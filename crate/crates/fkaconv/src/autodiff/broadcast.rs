//! Elementwise broadcasting over right-aligned shapes.
//!
//! A smaller operand broadcasts where its extent is 1 or the axis is
//! absent; extents must match otherwise. This covers the two patterns the
//! layer needs (a scalar against anything, and a trailing singleton such
//! as gate weights `S x k x 1` against features `S x k x C`) while keeping
//! the backward rule a plain sum over broadcast axes.

use crate::error::{Error, Result};

/// Precomputed strides for walking two operands over a broadcast output.
#[derive(Debug)]
pub struct BroadcastMap {
    out_dims: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BroadcastMap {
    pub fn new(a: &[usize], b: &[usize]) -> Result<BroadcastMap> {
        let rank = a.len().max(b.len());
        let mut out_dims = vec![0usize; rank];
        for i in 0..rank {
            let da = aligned_dim(a, rank, i);
            let db = aligned_dim(b, rank, i);
            out_dims[i] = if da == db {
                da
            } else if da == 1 {
                db
            } else if db == 1 {
                da
            } else {
                return Err(Error::dims("broadcast", a, b));
            };
        }
        Ok(BroadcastMap {
            a_strides: broadcast_strides(a, rank, &out_dims),
            b_strides: broadcast_strides(b, rank, &out_dims),
            out_dims,
        })
    }

    pub fn out_dims(&self) -> &[usize] {
        &self.out_dims
    }

    pub fn out_numel(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Invoke `f(out_index, a_index, b_index)` for every output position.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_dims.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let n = self.out_numel();
        let mut idx = vec![0usize; rank];
        let mut ia = 0usize;
        let mut ib = 0usize;
        for o in 0..n {
            f(o, ia, ib);
            // odometer increment
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                ia += self.a_strides[ax];
                ib += self.b_strides[ax];
                if idx[ax] < self.out_dims[ax] {
                    break;
                }
                ia -= self.a_strides[ax] * self.out_dims[ax];
                ib -= self.b_strides[ax] * self.out_dims[ax];
                idx[ax] = 0;
            }
        }
    }
}

fn aligned_dim(dims: &[usize], out_rank: usize, out_axis: usize) -> usize {
    let offset = out_rank - dims.len();
    if out_axis < offset {
        1
    } else {
        dims[out_axis - offset]
    }
}

fn broadcast_strides(dims: &[usize], out_rank: usize, out_dims: &[usize]) -> Vec<usize> {
    // Row-major strides of the operand, with 0 on broadcast axes.
    let mut own = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        own[i] = own[i + 1] * dims[i + 1];
    }
    let offset = out_rank - dims.len();
    (0..out_rank)
        .map(|ax| {
            if ax < offset {
                0
            } else if dims[ax - offset] == 1 && out_dims[ax] != 1 {
                0
            } else {
                own[ax - offset]
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_broadcasts_everywhere() {
        let m = BroadcastMap::new(&[], &[2, 3]).unwrap();
        assert_eq!(m.out_dims(), &[2, 3]);
        let mut a_hits = Vec::new();
        m.for_each(|_, ia, _| a_hits.push(ia));
        assert!(a_hits.iter().all(|&i| i == 0));
    }

    #[test]
    fn trailing_singleton() {
        let m = BroadcastMap::new(&[2, 2, 3], &[2, 2, 1]).unwrap();
        assert_eq!(m.out_dims(), &[2, 2, 3]);
        let mut pairs = Vec::new();
        m.for_each(|o, ia, ib| pairs.push((o, ia, ib)));
        assert_eq!(pairs[0], (0, 0, 0));
        assert_eq!(pairs[1], (1, 1, 0));
        assert_eq!(pairs[3], (3, 3, 1));
    }

    #[test]
    fn mismatch_rejected() {
        assert!(BroadcastMap::new(&[2, 3], &[2, 2]).is_err());
    }

    #[test]
    fn missing_leading_axis() {
        // bias [3] against [2, 3]
        let m = BroadcastMap::new(&[3], &[2, 3]).unwrap();
        let mut pairs = Vec::new();
        m.for_each(|o, ia, ib| pairs.push((o, ia, ib)));
        assert_eq!(pairs[4], (4, 1, 4));
    }
}
