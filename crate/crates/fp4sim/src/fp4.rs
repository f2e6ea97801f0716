//! 4-bit floating-point formats, the look-up-table quantizer, and absmax
//! scaling at tensor/vector granularity.
//!
//! A 4-bit code is sign-magnitude: bit 3 is the sign, bits 0..2 index the
//! seven nonzero magnitudes of the format. Codes `0b0000` and `0b1000` both
//! decode to 0. None of the formats define Inf or NaN code points; out of
//! range values saturate to the largest representable magnitude.

use crate::linalg::DenseMatrix;
use crate::{Error, Result};

/// The three 4-bit layouts: exponent/mantissa splits of the three
/// non-sign bits. More exponent bits widen the dynamic range, more
/// mantissa bits tighten the spacing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fp4Format {
    E1M2,
    E2M1,
    E3M0,
}

/// Positive magnitudes for codes 1..=7, ascending.
const E1M2_MAGNITUDES: [f64; 7] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5];
const E2M1_MAGNITUDES: [f64; 7] = [0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];
const E3M0_MAGNITUDES: [f64; 7] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

/// Decision boundaries between adjacent representable values, ascending.
/// The E2M1 list is exactly the branch-constant chain of the reference
/// look-up-table kernel; the others follow the same midpoint rule.
const E1M2_THRESHOLDS: [f64; 14] = [
    -3.25, -2.75, -2.25, -1.75, -1.25, -0.75, -0.25, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.25,
];
const E2M1_THRESHOLDS: [f64; 14] = [
    -5.0, -3.5, -2.5, -1.75, -1.25, -0.75, -0.25, 0.25, 0.75, 1.25, 1.75, 2.5, 3.5, 5.0,
];
const E3M0_THRESHOLDS: [f64; 14] = [
    -12.0, -6.0, -3.0, -1.5, -0.75, -0.375, -0.125, 0.125, 0.375, 0.75, 1.5, 3.0, 6.0, 12.0,
];

/// Codes parallel to `sorted_values`: negative magnitudes descending own
/// codes 15..=9, zero is 0, positive magnitudes ascending are 1..=7.
const SORTED_CODES: [u8; 15] = [15, 14, 13, 12, 11, 10, 9, 0, 1, 2, 3, 4, 5, 6, 7];

impl Fp4Format {
    pub const ALL: [Fp4Format; 3] = [Fp4Format::E1M2, Fp4Format::E2M1, Fp4Format::E3M0];

    pub fn name(self) -> &'static str {
        match self {
            Fp4Format::E1M2 => "e1m2",
            Fp4Format::E2M1 => "e2m1",
            Fp4Format::E3M0 => "e3m0",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "e1m2" => Ok(Fp4Format::E1M2),
            "e2m1" => Ok(Fp4Format::E2M1),
            "e3m0" => Ok(Fp4Format::E3M0),
            other => Err(Error::InvalidConfig(format!("unknown FP4 format {other:?}"))),
        }
    }

    fn magnitudes(self) -> &'static [f64; 7] {
        match self {
            Fp4Format::E1M2 => &E1M2_MAGNITUDES,
            Fp4Format::E2M1 => &E2M1_MAGNITUDES,
            Fp4Format::E3M0 => &E3M0_MAGNITUDES,
        }
    }

    /// The 16-entry decode table, indexed by code.
    pub fn codebook(self) -> [f64; 16] {
        let mags = self.magnitudes();
        let mut table = [0.0; 16];
        for (i, &m) in mags.iter().enumerate() {
            table[i + 1] = m;
            table[i + 9] = -m;
        }
        table
    }

    /// The 15 distinct representable values, ascending.
    pub fn sorted_values(self) -> [f64; 15] {
        let mags = self.magnitudes();
        let mut vals = [0.0; 15];
        for (i, &m) in mags.iter().enumerate() {
            vals[6 - i] = -m;
            vals[8 + i] = m;
        }
        vals
    }

    /// The 14 decision boundaries, ascending: midpoints of adjacent
    /// representable values.
    pub fn thresholds(self) -> &'static [f64; 14] {
        match self {
            Fp4Format::E1M2 => &E1M2_THRESHOLDS,
            Fp4Format::E2M1 => &E2M1_THRESHOLDS,
            Fp4Format::E3M0 => &E3M0_THRESHOLDS,
        }
    }

    /// Largest representable magnitude (6.0 for E2M1).
    pub fn max_abs(self) -> f64 {
        self.magnitudes()[6]
    }
}

/// Decode a 4-bit code to its representable value. Total on 0..=15.
pub fn decode(code: u8, format: Fp4Format) -> f64 {
    debug_assert!(code <= 0xf);
    format.codebook()[(code & 0xf) as usize]
}

/// Snap to the representable value selected by the threshold chain.
///
/// Boundary semantics are strict less-than as in the reference kernel:
/// a value exactly on a threshold takes the upper representable value.
/// NaN is an error; infinities saturate to the signed maximum.
pub fn quantize_nearest(x: f64, format: Fp4Format) -> Result<f64> {
    Ok(format.sorted_values()[quantize_index(x, format)?])
}

/// Same selection as `quantize_nearest` but returns the 4-bit code.
pub fn quantize_to_code(x: f64, format: Fp4Format) -> Result<u8> {
    Ok(SORTED_CODES[quantize_index(x, format)?])
}

fn quantize_index(x: f64, format: Fp4Format) -> Result<usize> {
    if x.is_nan() {
        return Err(Error::NanInput);
    }
    if x == f64::INFINITY {
        return Ok(14);
    }
    if x == f64::NEG_INFINITY {
        return Ok(0);
    }
    // Count of thresholds <= x; strict `<` in the kernel chain means a value
    // sitting exactly on a threshold falls through to the upper bucket.
    Ok(format.thresholds().partition_point(|&t| t <= x))
}

/// Which dimension shares one scale factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleAxis {
    PerTensor,
    PerRow,
    PerColumn,
}

impl ScaleAxis {
    pub fn name(self) -> &'static str {
        match self {
            ScaleAxis::PerTensor => "tensor",
            ScaleAxis::PerRow => "row",
            ScaleAxis::PerColumn => "column",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "tensor" => Ok(ScaleAxis::PerTensor),
            "row" | "token" => Ok(ScaleAxis::PerRow),
            "column" | "channel" => Ok(ScaleAxis::PerColumn),
            other => Err(Error::InvalidConfig(format!("unknown scale axis {other:?}"))),
        }
    }

    fn group_count(self, rows: usize, cols: usize) -> usize {
        match self {
            ScaleAxis::PerTensor => 1,
            ScaleAxis::PerRow => rows,
            ScaleAxis::PerColumn => cols,
        }
    }

    #[inline]
    fn group_of(self, row: usize, col: usize) -> usize {
        match self {
            ScaleAxis::PerTensor => 0,
            ScaleAxis::PerRow => row,
            ScaleAxis::PerColumn => col,
        }
    }
}

/// Absmax scale factors: one per group, `max_abs(format) / absmax(group)`.
///
/// A group whose absmax is zero gets scale 1 (its codes are all zero
/// anyway); the same rule applies if the quotient would overflow.
pub fn compute_scales(x: &DenseMatrix, axis: ScaleAxis, format: Fp4Format) -> Vec<f64> {
    let groups = axis.group_count(x.rows(), x.cols());
    let mut maxima = vec![0.0f64; groups];
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let g = axis.group_of(i, j);
            maxima[g] = maxima[g].max(x.get(i, j).abs());
        }
    }
    maxima
        .into_iter()
        .map(|m| {
            let gamma = format.max_abs() / m;
            if gamma.is_finite() && gamma > 0.0 {
                gamma
            } else {
                1.0
            }
        })
        .collect()
}

/// Packed 4-bit codes plus per-group scale factors: the on-wire result of
/// absmax quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    /// Two codes per byte, low nibble first, row-major.
    codes: Vec<u8>,
    scales: Vec<f64>,
    axis: ScaleAxis,
    format: Fp4Format,
}

impl QuantizedTensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn axis(&self) -> ScaleAxis {
        self.axis
    }

    pub fn format(&self) -> Fp4Format {
        self.format
    }

    #[inline]
    pub fn code_at(&self, i: usize, j: usize) -> u8 {
        let n = i * self.cols + j;
        let byte = self.codes[n / 2];
        if n % 2 == 0 {
            byte & 0xf
        } else {
            byte >> 4
        }
    }

    /// Assemble from parts; validates scale count and positivity. Used by
    /// the file reader.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        codes: Vec<u8>,
        scales: Vec<f64>,
        axis: ScaleAxis,
        format: Fp4Format,
    ) -> Result<Self> {
        let expected = axis.group_count(rows, cols);
        if scales.len() != expected {
            return Err(Error::DimMismatch(format!(
                "expected {} scales for {}x{} {:?}, got {}",
                expected,
                rows,
                cols,
                axis,
                scales.len()
            )));
        }
        if codes.len() != (rows * cols).div_ceil(2) {
            return Err(Error::DimMismatch(format!(
                "expected {} code bytes, got {}",
                (rows * cols).div_ceil(2),
                codes.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidConfig(format!("invalid scale {s}")));
        }
        Ok(Self {
            rows,
            cols,
            codes,
            scales,
            axis,
            format,
        })
    }

    /// Element-wise codebook lookup divided by the group scale.
    pub fn dequantize(&self) -> DenseMatrix {
        let codebook = self.format.codebook();
        DenseMatrix::from_fn(self.rows, self.cols, |i, j| {
            let g = self.axis.group_of(i, j);
            codebook[self.code_at(i, j) as usize] / self.scales[g]
        })
    }
}

/// Absmax-quantize a matrix: scale each group to the format's range, then
/// snap every element through the look-up table.
pub fn quantize_tensor(
    x: &DenseMatrix,
    axis: ScaleAxis,
    format: Fp4Format,
) -> Result<QuantizedTensor> {
    if let Some((row, col)) = x.find_non_finite() {
        return Err(Error::NonFinite { row, col });
    }
    let scales = compute_scales(x, axis, format);
    let total = x.rows() * x.cols();
    let mut codes = vec![0u8; total.div_ceil(2)];
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let g = axis.group_of(i, j);
            let code = quantize_to_code(x.get(i, j) * scales[g], format)?;
            let n = i * x.cols() + j;
            if n % 2 == 0 {
                codes[n / 2] |= code;
            } else {
                codes[n / 2] |= code << 4;
            }
        }
    }
    Ok(QuantizedTensor {
        rows: x.rows(),
        cols: x.cols(),
        codes,
        scales,
        axis,
        format,
    })
}

/// Quantize then immediately dequantize: the value-level view of FP4.
pub fn fake_quantize(x: &DenseMatrix, axis: ScaleAxis, format: Fp4Format) -> Result<DenseMatrix> {
    Ok(quantize_tensor(x, axis, format)?.dequantize())
}
