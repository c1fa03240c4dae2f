//! Hadamard and group-wise (block-diagonal) Hadamard transforms.
//!
//! The group-wise transform multiplies a `T x C` activation by
//! `H_B = BlockDiag(H_b, ..., H_b)` where every block is the same
//! `group_size x group_size` Sylvester matrix. With orthonormal blocks `H_B`
//! is symmetric and its own inverse, so a linear layer keeps its output when
//! the activation is rotated online and the weight is rotated offline:
//! `(X H_B)(W H_B)^T = X W^T`.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use num_traits::Float;
use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_GROUP_SIZE: usize = 128;

/// Unnormalized Sylvester Hadamard matrix: entries are ±1 and `H H^T = n I`.
pub fn hadamard_matrix(n: usize) -> Result<Array2<f64>> {
    if !n.is_power_of_two() {
        return Err(Error::input(format!("Hadamard order {n} is not a power of two")));
    }
    // H[i][j] = (-1)^popcount(i & j)
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        if (i & j).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }))
}

/// In-place fast Walsh-Hadamard transform in Sylvester (natural) order.
/// Computes `H v`; with `normalized` the result is scaled by `1/sqrt(n)`.
pub fn fwht_inplace<T: Float>(v: &mut [T], normalized: bool) -> Result<()> {
    let n = v.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::input(format!("FWHT length {n} is not a power of two")));
    }
    let mut h = 1;
    while h < n {
        for block in v.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
    if normalized {
        let k = T::from(n).expect("length fits").sqrt().recip();
        v.iter_mut().for_each(|x| *x = *x * k);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct HadamardConfig {
    pub dim: usize,
    pub group_size: usize,
    pub normalized: bool,
}

impl HadamardConfig {
    /// Orthonormal blocks of `group_size` over a `dim`-wide channel axis.
    pub fn new(dim: usize, group_size: usize) -> Result<Self> {
        let cfg = HadamardConfig {
            dim,
            group_size,
            normalized: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || !self.group_size.is_power_of_two() {
            return Err(Error::input(format!(
                "Hadamard group size {} is not a power of two",
                self.group_size
            )));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(self.group_size) {
            return Err(Error::input(format!(
                "channel dimension {} is not a multiple of group size {}",
                self.dim, self.group_size
            )));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.dim / self.group_size
    }

    /// Dense `H_B`, for oracles and small problems.
    pub fn block_diagonal(&self) -> Array2<f64> {
        let mut hb = hadamard_matrix(self.group_size).expect("validated");
        if self.normalized {
            hb.mapv_inplace(|v| v / (self.group_size as f64).sqrt());
        }
        let mut out = Array2::zeros((self.dim, self.dim));
        for b in 0..self.blocks() {
            let r = b * self.group_size..(b + 1) * self.group_size;
            out.slice_mut(ndarray::s![r.clone(), r]).assign(&hb);
        }
        out
    }
}

fn check_width<T>(x: &ArrayView2<'_, T>, cfg: &HadamardConfig) -> Result<()> {
    cfg.validate()?;
    if x.ncols() != cfg.dim {
        return Err(Error::input(format!(
            "tensor has {} columns, Hadamard config expects {}",
            x.ncols(),
            cfg.dim
        )));
    }
    Ok(())
}

/// `X H_B`: every `group_size`-wide slice of every row goes through the FWHT.
pub fn apply_ght<T>(x: ArrayView2<'_, T>, cfg: &HadamardConfig) -> Result<Array2<T>>
where
    T: Float + Send + Sync,
{
    check_width(&x, cfg)?;
    let mut out = x.as_standard_layout().into_owned();
    ght_rows_inplace(&mut out, cfg);
    Ok(out)
}

pub(crate) fn ght_rows_inplace<T>(x: &mut Array2<T>, cfg: &HadamardConfig)
where
    T: Float + Send + Sync,
{
    Zip::from(x.axis_iter_mut(Axis(0))).par_for_each(|mut row| {
        let row = row
            .as_slice_mut()
            .expect("rows of a standard-layout array are contiguous");
        for group in row.chunks_exact_mut(cfg.group_size) {
            fwht_inplace(group, cfg.normalized).expect("validated length");
        }
    });
}

/// `W H_B` for an `O x C` weight, so that `apply_ght(X) * fused^T == X W^T`.
/// `H_B` is symmetric, so this is the same per-row transform as [`apply_ght`].
pub fn fuse_weight_rotation<T>(w: ArrayView2<'_, T>, cfg: &HadamardConfig) -> Result<Array2<T>>
where
    T: Float + Send + Sync,
{
    apply_ght(w, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GhtFlops {
    /// Dense `C x C` rotation, per token.
    pub ht_flops: u64,
    /// Block-diagonal rotation, per token.
    pub ght_flops: u64,
    pub ratio: f64,
}

/// Multiply-add cost per token of a dense rotation (`2 C^2`) against the
/// block-diagonal one (`2 C g`).
pub fn ght_flops(dim: usize, group_size: usize) -> Result<GhtFlops> {
    HadamardConfig::new(dim, group_size)?;
    let c = dim as u64;
    let g = group_size as u64;
    let ht = 2 * c * c;
    let ght = 2 * c * g;
    Ok(GhtFlops {
        ht_flops: ht,
        ght_flops: ght,
        ratio: ht as f64 / ght as f64,
    })
}
