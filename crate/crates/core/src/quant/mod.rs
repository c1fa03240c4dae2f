//! Scaled quantization `X_q = Q(X / s)` with `s = max|X| / MAX_fp`, computed
//! per quantization unit.
//!
//! Tensors are 2-D, row-major. A unit is the set of elements sharing one
//! scale:
//!
//! * `PerTensor`: the whole tensor.
//! * `PerChannel`: one row of an `O x C` weight (one output channel).
//! * `PerToken`: one row of a `T x C` activation.
//! * `PerGroup`: a contiguous run of `size` columns inside a row, i.e. a
//!   slice along the reduction dimension.
//!
//! Scales are stored as a `[row_units, col_units]` array: `[1, 1]` for
//! per-tensor, `[rows, 1]` for per-channel/per-token and `[rows, cols / size]`
//! for per-group.

pub(crate) mod dfq;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpcodec::{FpFormat, Grid};

pub use dfq::{afpq_quantize, dfq_quantize, dfq_search_format, DfqResult, DfqSearch};

pub const DEFAULT_GROUP_SIZE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
    PerToken,
    /// `pad` admits a shorter final group; otherwise the row length must be
    /// a multiple of `size`.
    PerGroup { size: usize, pad: bool },
}

impl Granularity {
    pub fn per_group(size: usize) -> Self {
        Granularity::PerGroup { size, pad: false }
    }

    /// Parses `per_tensor`, `per_channel`, `per_token` or `per_group`.
    pub fn parse(kind: &str, group_size: usize, pad: bool) -> Result<Self> {
        match kind {
            "per_tensor" => Ok(Granularity::PerTensor),
            "per_channel" => Ok(Granularity::PerChannel),
            "per_token" => Ok(Granularity::PerToken),
            "per_group" => Ok(Granularity::PerGroup {
                size: group_size,
                pad,
            }),
            other => Err(Error::config(format!(
                "unknown granularity {other:?}; expected per_tensor, per_channel, per_token or per_group"
            ))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Granularity::PerTensor => "per_tensor",
            Granularity::PerChannel => "per_channel",
            Granularity::PerToken => "per_token",
            Granularity::PerGroup { .. } => "per_group",
        }
    }

    pub fn layout(&self, rows: usize, cols: usize) -> Result<UnitLayout> {
        if rows == 0 || cols == 0 {
            return Err(Error::input(format!("empty tensor [{rows}, {cols}]")));
        }
        let (row_units, span) = match *self {
            Granularity::PerTensor => (1, cols),
            Granularity::PerChannel | Granularity::PerToken => (rows, cols),
            Granularity::PerGroup { size, pad } => {
                if size == 0 {
                    return Err(Error::input("group size must be positive"));
                }
                if !cols.is_multiple_of(size) && !pad {
                    return Err(Error::input(format!(
                        "row length {cols} is not a multiple of group size {size}"
                    )));
                }
                (rows, size)
            }
        };
        Ok(UnitLayout {
            rows,
            cols,
            row_units,
            span,
        })
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::PerGroup { size, .. } => write!(f, "per_group({size})"),
            other => f.write_str(other.kind()),
        }
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Granularity::parse(s, DEFAULT_GROUP_SIZE, false)
    }
}

/// Mapping from tensor elements to scale slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitLayout {
    pub rows: usize,
    pub cols: usize,
    pub row_units: usize,
    /// Columns covered by one unit (the last one may be shorter).
    pub span: usize,
}

impl UnitLayout {
    pub fn col_units(&self) -> usize {
        self.cols.div_ceil(self.span)
    }

    pub fn scale_shape(&self) -> (usize, usize) {
        (self.row_units, self.col_units())
    }

    #[inline]
    pub fn scale_row(&self, r: usize) -> usize {
        if self.row_units == 1 {
            0
        } else {
            r
        }
    }

    /// Per-unit reduction `f` folded over every element, starting from `init`.
    fn reduce<F>(&self, x: ArrayView2<'_, f64>, init: f64, f: F) -> Array2<f64>
    where
        F: Fn(f64, f64) -> f64 + Sync,
    {
        let mut out = Array2::from_elem(self.scale_shape(), init);
        if self.row_units == 1 {
            for row in x.rows() {
                for (c, &v) in row.iter().enumerate() {
                    let slot = &mut out[[0, c / self.span]];
                    *slot = f(*slot, v);
                }
            }
        } else {
            Zip::from(out.rows_mut())
                .and(x.rows())
                .par_for_each(|mut dst, row| {
                    for (c, &v) in row.iter().enumerate() {
                        let slot = &mut dst[c / self.span];
                        *slot = f(*slot, v);
                    }
                });
        }
        out
    }
}

pub(crate) fn check_finite(x: ArrayView2<'_, f64>) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::input(format!(
            "non-finite value {} at flat index {i}",
            x.iter().nth(i).unwrap()
        ))),
    }
}

/// `max|X| / max_value`, or 1 for an all-zero unit.
pub(crate) fn scale_from_absmax(absmax: f64, max_value: f64) -> f64 {
    if absmax > 0.0 {
        absmax / max_value
    } else {
        1.0
    }
}

pub fn compute_scale(unit_values: &[f64], format: FpFormat) -> Result<f64> {
    let mut absmax = 0.0f64;
    for &v in unit_values {
        if !v.is_finite() {
            return Err(Error::input(format!("non-finite value {v}")));
        }
        absmax = absmax.max(v.abs());
    }
    Ok(scale_from_absmax(absmax, format.max_value()))
}

/// Value set the codes of a [`QuantizedTensor`] index into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Codebook {
    Fp { format: FpFormat },
    /// Symmetric two's-complement integers; codes hold the `i8` bit pattern.
    Int { bits: u8 },
}

impl Codebook {
    pub fn name(&self) -> String {
        match self {
            Codebook::Fp { format } => format.name(),
            Codebook::Int { bits } => format!("INT{bits}"),
        }
    }

    pub fn width(&self) -> u32 {
        match self {
            Codebook::Fp { format } => format.width(),
            Codebook::Int { bits } => *bits as u32,
        }
    }

    /// Decoded value for each of the 256 byte patterns.
    pub fn decode_table(&self) -> [f64; 256] {
        let mut t = [0.0; 256];
        for (c, slot) in t.iter_mut().enumerate() {
            *slot = match self {
                Codebook::Fp { format } => format.decode(c as u8),
                Codebook::Int { .. } => (c as u8 as i8) as f64,
            };
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Array2<u8>,
    pub scales: Array2<f64>,
    pub codebook: Codebook,
    pub granularity: Granularity,
}

impl QuantizedTensor {
    pub fn shape(&self) -> (usize, usize) {
        self.codes.dim()
    }

    pub fn layout(&self) -> UnitLayout {
        let (r, c) = self.shape();
        self.granularity
            .layout(r, c)
            .expect("layout validated at construction")
    }

    /// Scale of the unit holding element `(r, c)`.
    #[inline]
    pub fn scale_at(&self, r: usize, c: usize) -> f64 {
        let l = self.layout();
        self.scales[[l.scale_row(r), c / l.span]]
    }

    pub fn dequantize(&self) -> Array2<f64> {
        let table = self.codebook.decode_table();
        let layout = self.layout();
        let mut out = Array2::zeros(self.codes.dim());
        Zip::indexed(out.rows_mut())
            .and(self.codes.rows())
            .par_for_each(|r, mut dst, codes| {
                let srow = self.scales.row(layout.scale_row(r));
                for (c, (d, &code)) in dst.iter_mut().zip(codes.iter()).enumerate() {
                    *d = table[code as usize] * srow[c / layout.span];
                }
            });
        out
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Array2<f64> {
    q.dequantize()
}

/// Per-unit absolute maximum of `x`.
pub(crate) fn unit_absmax(x: ArrayView2<'_, f64>, layout: &UnitLayout) -> Array2<f64> {
    layout.reduce(x, 0.0, |acc, v| acc.max(v.abs()))
}

/// Applies `code_of(x / s)` element-wise with the unit scale `s`.
fn encode_with_scales<F>(
    x: ArrayView2<'_, f64>,
    scales: &Array2<f64>,
    layout: &UnitLayout,
    code_of: F,
) -> Array2<u8>
where
    F: Fn(f64) -> u8 + Sync,
{
    let mut codes = Array2::zeros(x.dim());
    Zip::indexed(codes.rows_mut())
        .and(x.rows())
        .par_for_each(|r, mut dst, row| {
            let srow = scales.row(layout.scale_row(r));
            for (c, (d, &v)) in dst.iter_mut().zip(row.iter()).enumerate() {
                *d = code_of(v / srow[c / layout.span]);
            }
        });
    codes
}

pub fn quantize(
    x: ArrayView2<'_, f64>,
    format: FpFormat,
    granularity: Granularity,
) -> Result<QuantizedTensor> {
    let (rows, cols) = x.dim();
    let layout = granularity.layout(rows, cols)?;
    check_finite(x)?;
    let max_value = format.max_value();
    let scales = unit_absmax(x, &layout).mapv(|m| scale_from_absmax(m, max_value));
    let grid = Grid::new(format);
    let codes = encode_with_scales(x, &scales, &layout, |v| grid.quantize_code(v));
    Ok(QuantizedTensor {
        codes,
        scales,
        codebook: Codebook::Fp { format },
        granularity,
    })
}

/// Number of levels of the two's-complement `bits`-wide integer grid.
pub fn int_grid_levels(bits: u8) -> usize {
    1 << bits
}

/// Round-to-nearest integer quantization. Scales map `max|X|` to
/// `2^(bits-1) - 1`; codes are clamped to `[-2^(bits-1), 2^(bits-1) - 1]`.
pub fn rtn_int_quantize(
    x: ArrayView2<'_, f64>,
    bits: u8,
    granularity: Granularity,
) -> Result<QuantizedTensor> {
    if !matches!(bits, 4 | 6 | 8) {
        return Err(Error::config(format!(
            "INT{bits} unsupported; expected 4, 6 or 8 bits"
        )));
    }
    let (rows, cols) = x.dim();
    let layout = granularity.layout(rows, cols)?;
    check_finite(x)?;
    let qmax = ((1i32 << (bits - 1)) - 1) as f64;
    let qmin = -(1i32 << (bits - 1)) as f64;
    let scales = unit_absmax(x, &layout).mapv(|m| scale_from_absmax(m, qmax));
    let codes = encode_with_scales(x, &scales, &layout, |v| {
        v.round_ties_even().clamp(qmin, qmax) as i8 as u8
    });
    Ok(QuantizedTensor {
        codes,
        scales,
        codebook: Codebook::Int { bits },
        granularity,
    })
}

/// Mean squared error over all elements.
pub fn quant_mse(x: ArrayView2<'_, f64>, x_dequant: ArrayView2<'_, f64>) -> Result<f64> {
    if x.dim() != x_dequant.dim() {
        return Err(Error::input(format!(
            "shape mismatch: {:?} vs {:?}",
            x.dim(),
            x_dequant.dim()
        )));
    }
    if x.is_empty() {
        return Err(Error::input("mse of an empty tensor"));
    }
    let sse: f64 = Zip::from(x.rows())
        .and(x_dequant.rows())
        .par_map_collect(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
        })
        .sum();
    Ok(sse / x.len() as f64)
}

/// Views a flat slice as a single row.
pub fn as_row(values: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, values.len()), values).expect("1 x n view")
}
