//! Dual Format Quantization: non-positive and positive elements are scaled and
//! rounded on two different grids.
//!
//! Element `x` goes to the negative branch when `x <= 0` and to the positive
//! branch otherwise. Each branch has its own per-unit scale
//! (`max|branch| / MAX_grid`) and the dequantized tensor is
//! `Xq⁻ * s⁻ + Xq⁺ * s⁺`. AFPQ is the special case where both branches share
//! one grid.

use ndarray::{Array2, ArrayView2, Zip};
use serde::Serialize;

use super::{check_finite, scale_from_absmax, Granularity, UnitLayout};
use crate::error::{Error, Result};
use crate::fpcodec::{FpFormat, Grid};

#[derive(Clone, Debug, PartialEq)]
pub struct DfqResult {
    pub neg_codes: Array2<u8>,
    pub pos_codes: Array2<u8>,
    pub s_neg: Array2<f64>,
    pub s_pos: Array2<f64>,
    pub neg_format: FpFormat,
    pub pos_format: FpFormat,
    pub granularity: Granularity,
}

impl DfqResult {
    pub fn shape(&self) -> (usize, usize) {
        self.neg_codes.dim()
    }

    pub fn layout(&self) -> UnitLayout {
        let (r, c) = self.shape();
        self.granularity
            .layout(r, c)
            .expect("layout validated at construction")
    }

    /// Single 4-bit code plane `Xq⁻ + Xq⁺`. The sign bit selects the grid:
    /// set means the negative grid, clear means the positive grid (or zero).
    pub fn combined_codes(&self) -> Array2<u8> {
        Zip::from(&self.neg_codes)
            .and(&self.pos_codes)
            .map_collect(|&n, &p| n | p)
    }

    pub fn dequantize(&self) -> Array2<f64> {
        let layout = self.layout();
        let neg = Grid::new(self.neg_format);
        let pos = Grid::new(self.pos_format);
        let mut out = Array2::zeros(self.shape());
        Zip::indexed(out.rows_mut())
            .and(self.neg_codes.rows())
            .and(self.pos_codes.rows())
            .par_for_each(|r, mut dst, nrow, prow| {
                let sr = layout.scale_row(r);
                for c in 0..dst.len() {
                    let g = c / layout.span;
                    dst[c] = neg.decode(nrow[c]) * self.s_neg[[sr, g]]
                        + pos.decode(prow[c]) * self.s_pos[[sr, g]];
                }
            });
        out
    }
}

pub(crate) fn branch_absmax(
    x: ArrayView2<'_, f64>,
    layout: &UnitLayout,
) -> (Array2<f64>, Array2<f64>) {
    let neg = layout.reduce(x, 0.0, |acc, v| if v <= 0.0 { acc.max(-v) } else { acc });
    let pos = layout.reduce(x, 0.0, |acc, v| if v > 0.0 { acc.max(v) } else { acc });
    (neg, pos)
}

pub fn dfq_quantize(
    x: ArrayView2<'_, f64>,
    neg_format: FpFormat,
    pos_format: FpFormat,
    granularity: Granularity,
) -> Result<DfqResult> {
    let (rows, cols) = x.dim();
    let layout = granularity.layout(rows, cols)?;
    check_finite(x)?;
    let (neg_max, pos_max) = branch_absmax(x, &layout);
    let s_neg = neg_max.mapv(|m| scale_from_absmax(m, neg_format.max_value()));
    let s_pos = pos_max.mapv(|m| scale_from_absmax(m, pos_format.max_value()));
    let neg = Grid::new(neg_format);
    let pos = Grid::new(pos_format);

    let mut neg_codes = Array2::zeros((rows, cols));
    let mut pos_codes = Array2::zeros((rows, cols));
    Zip::indexed(neg_codes.rows_mut())
        .and(pos_codes.rows_mut())
        .and(x.rows())
        .par_for_each(|r, mut nrow, mut prow, xrow| {
            let sr = layout.scale_row(r);
            for (c, &v) in xrow.iter().enumerate() {
                let g = c / layout.span;
                if v <= 0.0 {
                    nrow[c] = neg.quantize_code(v / s_neg[[sr, g]]);
                } else {
                    prow[c] = pos.quantize_code(v / s_pos[[sr, g]]);
                }
            }
        });
    Ok(DfqResult {
        neg_codes,
        pos_codes,
        s_neg,
        s_pos,
        neg_format,
        pos_format,
        granularity,
    })
}

/// One grid, separate negative and positive scales.
pub fn afpq_quantize(
    x: ArrayView2<'_, f64>,
    format: FpFormat,
    granularity: Granularity,
) -> Result<DfqResult> {
    dfq_quantize(x, format, format, granularity)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DfqSearch {
    pub neg_format: FpFormat,
    pub pos_format: FpFormat,
    /// Summed MSE, indexed `[neg][pos]` in candidate order.
    pub mse: [[f64; 3]; 3],
}

impl DfqSearch {
    pub fn best_mse(&self) -> f64 {
        let i = candidate_index(self.neg_format);
        let j = candidate_index(self.pos_format);
        self.mse[i][j]
    }
}

fn candidate_index(f: FpFormat) -> usize {
    FpFormat::FP4_CANDIDATES
        .iter()
        .position(|&c| c == f)
        .expect("search result is a candidate")
}

/// Exhaustive search over the 3 x 3 FP4 candidate pairs for the lowest MSE,
/// summed over the calibration tensors. Ties keep the first pair in
/// E1M2 < E2M1 < E3M0 order.
pub fn dfq_search_format(calib: &[Array2<f64>], granularity: Granularity) -> Result<DfqSearch> {
    if calib.is_empty() {
        return Err(Error::input("empty calibration set"));
    }
    let cands = FpFormat::FP4_CANDIDATES;
    let mut mse = [[0.0; 3]; 3];
    let mut best = (f64::INFINITY, 0, 0);
    for (i, &neg) in cands.iter().enumerate() {
        for (j, &pos) in cands.iter().enumerate() {
            let mut total = 0.0;
            for x in calib {
                let deq = dfq_quantize(x.view(), neg, pos, granularity)?.dequantize();
                total += super::quant_mse(x.view(), deq.view())?;
            }
            mse[i][j] = total;
            if total < best.0 {
                best = (total, i, j);
            }
        }
    }
    Ok(DfqSearch {
        neg_format: cands[best.1],
        pos_format: cands[best.2],
        mse,
    })
}
