//! Sub-8-bit floating-point formats (OCP MX style `EjMk` encodings).
//!
//! A code is laid out as `[sign | exponent (j bits) | mantissa (k bits)]`. With
//! exponent field `E`, mantissa field `M` and exponent bias `b` it decodes to
//!
//! ```text
//! E > 0:  (-1)^S * 2^(E - b) * (1 + M / 2^k)
//! E = 0:  (-1)^S * 2^(1 - b) * (M / 2^k)
//! ```
//!
//! FP4 and FP6 formats reserve no Inf/NaN patterns. E4M3 follows OCP and
//! reserves `S.1111.111` as NaN; that pattern is excluded from its grid.
//!
//! Because decoding is strictly increasing in the magnitude bits, the magnitude
//! code of a value is its index in the ascending list of non-negative grid
//! values. [`Grid`] precomputes that list and is the fast path used by the
//! quantizers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FpFormat {
    exp_bits: u8,
    man_bits: u8,
    bias: i32,
    nan_top: bool,
}

impl FpFormat {
    /// FP4, uniform step 0.5 up to 3.5.
    pub const E1M2: FpFormat = FpFormat::raw(1, 2, 0, false);
    pub const E2M1: FpFormat = FpFormat::raw(2, 1, 1, false);
    pub const E3M0: FpFormat = FpFormat::raw(3, 0, 3, false);
    pub const E2M3: FpFormat = FpFormat::raw(2, 3, 1, false);
    pub const E3M2: FpFormat = FpFormat::raw(3, 2, 3, false);
    pub const E4M3: FpFormat = FpFormat::raw(4, 3, 7, true);
    /// 8-bit product format for the E1M2 x E2M1 multiplier table.
    pub const E3M4: FpFormat = FpFormat::raw(3, 4, 3, false);

    /// Candidate grids for dual-format search, in tie-break order.
    pub const FP4_CANDIDATES: [FpFormat; 3] = [Self::E1M2, Self::E2M1, Self::E3M0];

    /// Every format addressable by name.
    pub const REGISTRY: [FpFormat; 7] = [
        Self::E1M2,
        Self::E2M1,
        Self::E3M0,
        Self::E2M3,
        Self::E3M2,
        Self::E4M3,
        Self::E3M4,
    ];

    const fn raw(exp_bits: u8, man_bits: u8, bias: i32, nan_top: bool) -> Self {
        FpFormat {
            exp_bits,
            man_bits,
            bias,
            nan_top,
        }
    }

    /// A custom format without reserved encodings. Total width must be 4, 6 or 8 bits.
    pub fn new(exp_bits: u8, man_bits: u8, bias: i32) -> Result<Self> {
        let width = 1 + exp_bits as u32 + man_bits as u32;
        if !matches!(width, 4 | 6 | 8) {
            return Err(Error::config(format!(
                "E{exp_bits}M{man_bits} has width {width}; supported widths are 4, 6 and 8"
            )));
        }
        if !(-64..=64).contains(&bias) {
            return Err(Error::config(format!("exponent bias {bias} out of range")));
        }
        Ok(Self::raw(exp_bits, man_bits, bias, false))
    }

    /// Looks a format up by name. Accepts `E2M1`, `e2m1` and `FP4-E2M1` spellings.
    pub fn from_name(name: &str) -> Result<Self> {
        let upper = name.trim().to_ascii_uppercase();
        let bare = upper
            .strip_prefix("FP4-")
            .or_else(|| upper.strip_prefix("FP6-"))
            .or_else(|| upper.strip_prefix("FP8-"))
            .unwrap_or(&upper);
        Self::REGISTRY
            .iter()
            .copied()
            .find(|f| f.name() == bare)
            .ok_or_else(|| {
                let known: Vec<String> = Self::REGISTRY.iter().map(|f| f.name()).collect();
                Error::config(format!(
                    "unknown format {name:?}; expected one of {}",
                    known.join(", ")
                ))
            })
    }

    pub fn name(&self) -> String {
        format!("E{}M{}", self.exp_bits, self.man_bits)
    }

    pub fn exp_bits(&self) -> u8 {
        self.exp_bits
    }

    pub fn man_bits(&self) -> u8 {
        self.man_bits
    }

    pub fn bias(&self) -> i32 {
        self.bias
    }

    /// Total code width in bits, sign included.
    pub fn width(&self) -> u32 {
        1 + self.exp_bits as u32 + self.man_bits as u32
    }

    fn sign_bit(&self) -> u8 {
        1 << (self.exp_bits + self.man_bits)
    }

    fn magnitude_mask(&self) -> u8 {
        self.sign_bit() - 1
    }

    /// Number of finite magnitude codes (zero included).
    fn magnitude_count(&self) -> usize {
        let all = 1usize << (self.exp_bits + self.man_bits);
        if self.nan_top {
            all - 1
        } else {
            all
        }
    }

    /// Decodes a raw bit pattern. Bits above the format width are ignored.
    pub fn decode(&self, bits: u8) -> f64 {
        let k = self.man_bits as i32;
        let mag = bits & self.magnitude_mask();
        if self.nan_top && mag == self.magnitude_mask() {
            return f64::NAN;
        }
        let e = (mag >> self.man_bits) as i32;
        let m = (mag & ((1u8 << self.man_bits) - 1)) as f64;
        let frac = m * 2f64.powi(-k);
        let v = if e > 0 {
            2f64.powi(e - self.bias) * (1.0 + frac)
        } else {
            2f64.powi(1 - self.bias) * frac
        };
        if bits & self.sign_bit() != 0 {
            -v
        } else {
            v
        }
    }

    /// Encodes a value that lies exactly on the grid. Zero always maps to the
    /// all-zeros pattern.
    pub fn encode(&self, v: f64) -> Result<u8> {
        self.grid().encode(v)
    }

    pub fn max_value(&self) -> f64 {
        self.decode((self.magnitude_count() - 1) as u8)
    }

    /// All distinct finite values, ascending. Both zero patterns collapse to one entry.
    pub fn grid_values(&self) -> Vec<f64> {
        let mags = self.grid().mags;
        let mut out: Vec<f64> = mags[1..].iter().rev().map(|m| -m).collect();
        out.extend_from_slice(&mags);
        out
    }

    /// Nearest grid value with saturation at `±max_value`. Exact ties go to the
    /// neighbour whose magnitude code is even.
    pub fn round_to_grid(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::input(format!("cannot round non-finite value {x}")));
        }
        Ok(self.grid().round(x))
    }

    pub fn grid(&self) -> Grid {
        Grid::new(*self)
    }
}

impl fmt::Display for FpFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}M{}", self.exp_bits, self.man_bits)
    }
}

impl FromStr for FpFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s)
    }
}

impl Serialize for FpFormat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for FpFormat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        FpFormat::from_name(&name).map_err(serde::de::Error::custom)
    }
}

/// A code tied to its format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FpCode {
    bits: u8,
    format: FpFormat,
}

impl FpCode {
    pub fn new(format: FpFormat, bits: u8) -> Result<Self> {
        if format.width() < 8 && bits >> format.width() != 0 {
            return Err(Error::input(format!(
                "code {bits:#010b} is wider than {format} ({} bits)",
                format.width()
            )));
        }
        Ok(FpCode { bits, format })
    }

    pub fn encode(format: FpFormat, v: f64) -> Result<Self> {
        Ok(FpCode {
            bits: format.encode(v)?,
            format,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn format(&self) -> FpFormat {
        self.format
    }

    pub fn decode(&self) -> f64 {
        self.format.decode(self.bits)
    }
}

/// Precomputed non-negative grid of a format, indexed by magnitude code.
#[derive(Clone, Debug)]
pub struct Grid {
    format: FpFormat,
    mags: Vec<f64>,
}

impl Grid {
    pub fn new(format: FpFormat) -> Self {
        let mags = (0..format.magnitude_count())
            .map(|c| format.decode(c as u8))
            .collect();
        Grid { format, mags }
    }

    pub fn format(&self) -> FpFormat {
        self.format
    }

    /// Non-negative grid values; `magnitudes()[c]` decodes magnitude code `c`.
    pub fn magnitudes(&self) -> &[f64] {
        &self.mags
    }

    pub fn max_value(&self) -> f64 {
        self.mags[self.mags.len() - 1]
    }

    /// Largest gap between adjacent grid values.
    pub fn max_gap(&self) -> f64 {
        self.mags
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Magnitude code of the grid value nearest to `a >= 0`.
    pub fn nearest_magnitude_code(&self, a: f64) -> u8 {
        let idx = self.mags.partition_point(|&m| m < a);
        if idx == 0 {
            return 0;
        }
        if idx == self.mags.len() {
            return (idx - 1) as u8;
        }
        let (lo, hi) = (idx - 1, idx);
        // Both sides are exact in binary floating point, so ties are detected exactly.
        let twice = 2.0 * a;
        let mid = self.mags[lo] + self.mags[hi];
        let pick = if twice < mid {
            lo
        } else if twice > mid {
            hi
        } else if lo % 2 == 0 {
            lo
        } else {
            hi
        };
        pick as u8
    }

    /// Code of the nearest grid value to a finite `x`, canonical zero.
    pub fn quantize_code(&self, x: f64) -> u8 {
        let mag = self.nearest_magnitude_code(x.abs());
        if mag != 0 && x.is_sign_negative() {
            mag | self.format.sign_bit()
        } else {
            mag
        }
    }

    /// Nearest grid value to a finite `x`.
    pub fn round(&self, x: f64) -> f64 {
        let v = self.mags[self.nearest_magnitude_code(x.abs()) as usize];
        if x < 0.0 && v != 0.0 {
            -v
        } else {
            v
        }
    }

    pub fn decode(&self, code: u8) -> f64 {
        self.format.decode(code)
    }

    pub fn encode(&self, v: f64) -> Result<u8> {
        let mag = v.abs();
        let idx = self.mags.partition_point(|&m| m < mag);
        if idx == self.mags.len() || self.mags[idx] != mag {
            return Err(Error::Precision {
                format: self.format.name(),
                value: v,
            });
        }
        if idx != 0 && v < 0.0 {
            Ok(idx as u8 | self.format.sign_bit())
        } else {
            Ok(idx as u8)
        }
    }
}
