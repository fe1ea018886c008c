//! Fixed-point matrices, quantization, softmax, binarization and the dense
//! attention reference.
//!
//! A [`FixedPointMatrix`] stores 32-bit signed fractions that share one
//! matrix-wide exponent: entry `(i, j)` reconstructs to
//! `data[i * cols + j] * 2^(exponent - 31)`. The exponent is normalized so the
//! largest-magnitude fraction lies in `[2^30, 2^31)`.
//!
//! Products are accumulated exactly in `i128` and re-normalized once per
//! output matrix.

use serde::{Deserialize, Serialize};

use crate::error::{dims, Result, SimError};
use crate::mask::MaskMatrix;

/// Number of fraction bits below the binary point of a normalized fraction.
pub const FRACTION_BITS: i32 = 31;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointMatrix {
    rows: usize,
    cols: usize,
    exponent: i32,
    data: Vec<i32>,
}

/// Integer matrix produced by the quantizer and by low-precision products.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl IntMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Exact integer product.
    pub fn matmul(&self, other: &IntMatrix) -> Result<IntMatrix> {
        if self.cols != other.rows {
            return Err(dims(
                "int matmul",
                format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let lhs = &self.data[i * self.cols..(i + 1) * self.cols];
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in lhs.iter().enumerate() {
                if a == 0 {
                    continue;
                }
                let rhs = &other.data[k * other.cols..(k + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(rhs) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }
}

impl FixedPointMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            exponent: 0,
            data: vec![0; rows * cols],
        }
    }

    /// Builds a matrix from raw parts. Fails if the data length is wrong.
    pub fn from_parts(rows: usize, cols: usize, exponent: i32, data: Vec<i32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dims(
                "fixed-point matrix",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self {
            rows,
            cols,
            exponent,
            data,
        })
    }

    /// Chooses the shared exponent for `values` and converts them to 32-bit
    /// fractions. Non-finite inputs are rejected.
    pub fn extract_exponent(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(dims(
                "extract_exponent",
                format!("{} values for {rows}x{cols}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidQuant("non-finite value".into()));
        }
        let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max == 0.0 {
            return Ok(Self::zeros(rows, cols));
        }
        // max < 2^exponent
        let mut exponent = max.log2().floor() as i32 + 1;
        if 2f64.powi(exponent) <= max {
            exponent += 1;
        }
        loop {
            let scale = 2f64.powi(FRACTION_BITS - exponent);
            let mut overflow = false;
            let data: Vec<i32> = values
                .iter()
                .map(|v| {
                    let f = (v * scale).round();
                    if f.abs() > i32::MAX as f64 {
                        overflow = true;
                        0
                    } else {
                        f as i32
                    }
                })
                .collect();
            if !overflow {
                return Ok(Self {
                    rows,
                    cols,
                    exponent,
                    data,
                });
            }
            exponent += 1;
        }
    }

    /// Normalizes an exact accumulator matrix whose entries are
    /// `acc * 2^scale_exp`.
    pub fn from_accumulator(rows: usize, cols: usize, acc: &[i128], scale_exp: i32) -> Self {
        debug_assert_eq!(acc.len(), rows * cols);
        let max = acc.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
        if max == 0 {
            return Self::zeros(rows, cols);
        }
        let bits = 128 - max.leading_zeros() as i32;
        let mut shift = bits - FRACTION_BITS;
        loop {
            let mut overflow = false;
            let data: Vec<i32> = acc
                .iter()
                .map(|&v| {
                    let f = shift_round(v, shift);
                    if f.unsigned_abs() > i32::MAX as u128 {
                        overflow = true;
                        0
                    } else {
                        f as i32
                    }
                })
                .collect();
            if !overflow {
                return Self {
                    rows,
                    cols,
                    exponent: scale_exp + shift + FRACTION_BITS,
                    data,
                };
            }
            shift += 1;
        }
    }

    pub fn from_f64_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(dims("from_f64_rows", "ragged rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::extract_exponent(r, c, &flat)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    pub fn fractions(&self) -> &[i32] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    /// Weight of one fraction unit.
    pub fn ulp(&self) -> f64 {
        2f64.powi(self.exponent - FRACTION_BITS)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c] as f64 * self.ulp()
    }

    pub fn fraction(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        let ulp = self.ulp();
        self.data.iter().map(|&f| f as f64 * ulp).collect()
    }

    pub fn row_f64(&self, r: usize) -> Vec<f64> {
        let ulp = self.ulp();
        self.data[r * self.cols..(r + 1) * self.cols]
            .iter()
            .map(|&f| f as f64 * ulp)
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            exponent: self.exponent,
            data,
        }
    }

    /// Count of nonzero fractions.
    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|&&f| f != 0).count()
    }

    /// Exact product, re-normalized to a single shared exponent.
    pub fn matmul(&self, other: &FixedPointMatrix) -> Result<FixedPointMatrix> {
        if self.cols != other.rows {
            return Err(dims(
                "matmul",
                format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut acc = vec![0i128; n * m];
        for i in 0..n {
            let lhs = &self.data[i * k..(i + 1) * k];
            let dst = &mut acc[i * m..(i + 1) * m];
            for (kk, &a) in lhs.iter().enumerate() {
                if a == 0 {
                    continue;
                }
                let a = a as i64;
                let rhs = &other.data[kk * m..(kk + 1) * m];
                for (d, &b) in dst.iter_mut().zip(rhs) {
                    *d += (a * b as i64) as i128;
                }
            }
        }
        Ok(Self::from_accumulator(
            n,
            m,
            &acc,
            self.exponent + other.exponent - 2 * FRACTION_BITS,
        ))
    }

    /// Multiplies every entry by a real factor and re-normalizes.
    pub fn scale(&self, factor: f64) -> Result<FixedPointMatrix> {
        let vals: Vec<f64> = self.to_f64().into_iter().map(|v| v * factor).collect();
        Self::extract_exponent(self.rows, self.cols, &vals)
    }
}

/// Arithmetic right shift with round-half-away-from-zero; negative shifts are
/// left shifts.
fn shift_round(v: i128, shift: i32) -> i128 {
    if shift <= 0 {
        return v << (-shift);
    }
    let mag = v.unsigned_abs();
    let half = 1u128 << (shift - 1);
    let r = ((mag + half) >> shift) as i128;
    if v < 0 {
        -r
    } else {
        r
    }
}

/// Parameters of the low-precision pruning path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Quantizer scale; `Q(x) = round(gamma * x)`.
    pub gamma: f64,
    /// Signed width of quantized values.
    pub bits: u32,
    /// Binarization threshold.
    pub theta: f64,
    /// Head dimension used for the `1/sqrt(d)` score scaling.
    pub d: usize,
}

pub const DEFAULT_QUANT_BITS: u32 = 4;

impl QuantConfig {
    pub fn new(gamma: f64, bits: u32, theta: f64, d: usize) -> Result<Self> {
        let q = Self {
            gamma,
            bits,
            theta,
            d,
        };
        q.validate()?;
        Ok(q)
    }

    /// Picks `gamma = 2^(bits-2) / max|m|` so the input spans half the signed
    /// range.
    pub fn for_matrix(m: &FixedPointMatrix, bits: u32, theta: f64, d: usize) -> Result<Self> {
        let max = m.to_f64().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let gamma = if max > 0.0 {
            2f64.powi(bits as i32 - 2) / max
        } else {
            1.0
        };
        Self::new(gamma, bits, theta, d)
    }

    /// Default threshold: half of the uniform-attention weight.
    pub fn default_theta(seq_len: usize) -> f64 {
        1.0 / (2.0 * seq_len.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 2 || self.bits > 32 {
            return Err(SimError::InvalidQuant(format!("bits = {}", self.bits)));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(SimError::InvalidQuant(format!("gamma = {}", self.gamma)));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(SimError::InvalidQuant(format!("theta = {}", self.theta)));
        }
        if self.d == 0 {
            return Err(SimError::InvalidQuant("d = 0".into()));
        }
        Ok(())
    }

    pub fn qmax(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    pub fn qmin(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }
}

/// Scalar quantizer with saturation.
pub fn quantize_value(x: f64, q: &QuantConfig) -> i64 {
    let v = (q.gamma * x).round();
    if v >= q.qmax() as f64 {
        q.qmax()
    } else if v <= q.qmin() as f64 {
        q.qmin()
    } else {
        v as i64
    }
}

pub fn quantize(m: &FixedPointMatrix, q: &QuantConfig) -> IntMatrix {
    IntMatrix {
        rows: m.rows,
        cols: m.cols,
        data: m.to_f64().into_iter().map(|x| quantize_value(x, q)).collect(),
    }
}

/// Maps quantized values back to real scale by dividing by `gamma^power`.
/// `power` counts how many quantized operands were multiplied (1 to 3).
pub fn dequantize(m: &IntMatrix, q: &QuantConfig, power: u32) -> Result<FixedPointMatrix> {
    if !(1..=3).contains(&power) {
        return Err(SimError::InvalidQuant(format!("gamma power {power}")));
    }
    q.validate()?;
    dequantize_scaled(m, q.gamma.powi(power as i32))
}

/// Divides by an explicit combined scale, for products of operands that were
/// quantized with different gammas.
pub fn dequantize_scaled(m: &IntMatrix, scale: f64) -> Result<FixedPointMatrix> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(SimError::InvalidQuant(format!("scale {scale}")));
    }
    let vals: Vec<f64> = m.data.iter().map(|&v| v as f64 / scale).collect();
    FixedPointMatrix::extract_exponent(m.rows, m.cols, &vals)
}

/// Row-wise softmax with max subtraction, evaluated in real arithmetic and
/// re-quantized to fixed point.
pub fn softmax_rows(m: &FixedPointMatrix) -> Result<FixedPointMatrix> {
    softmax_rows_masked(m, None)
}

/// Row-wise softmax restricted to the mask's set bits; off-mask entries are
/// treated as negative infinity. Rows with no set bit become all zero.
pub fn softmax_rows_masked(
    m: &FixedPointMatrix,
    mask: Option<&MaskMatrix>,
) -> Result<FixedPointMatrix> {
    if m.is_empty() {
        return Err(SimError::Empty("softmax_rows"));
    }
    if let Some(mask) = mask {
        if mask.rows() != m.rows || mask.cols() != m.cols {
            return Err(dims(
                "softmax_rows",
                format!(
                    "mask {}x{} vs matrix {}x{}",
                    mask.rows(),
                    mask.cols(),
                    m.rows,
                    m.cols
                ),
            ));
        }
    }
    let mut out = vec![0.0; m.rows * m.cols];
    for r in 0..m.rows {
        let row = m.row_f64(r);
        let keep = |c: usize| mask.is_none_or(|mk| mk.get(r, c));
        let max = (0..m.cols)
            .filter(|&c| keep(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for c in 0..m.cols {
            if keep(c) {
                let e = (row[c] - max).exp();
                out[r * m.cols + c] = e;
                sum += e;
            }
        }
        for v in &mut out[r * m.cols..(r + 1) * m.cols] {
            *v /= sum;
        }
    }
    FixedPointMatrix::extract_exponent(m.rows, m.cols, &out)
}

/// Threshold comparison `entry >= theta`.
pub fn binarize(m: &FixedPointMatrix, theta: f64) -> MaskMatrix {
    let mut mask = MaskMatrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        for c in 0..m.cols {
            if m.get(r, c) >= theta {
                mask.set(r, c, true);
            }
        }
    }
    mask
}

/// Dense attention `softmax(Q K^T / sqrt(d)) V` computed with plain matrix
/// products. With a mask, off-mask scores are excluded from the softmax.
pub fn dense_attention_oracle(
    x: &FixedPointMatrix,
    w_q: &FixedPointMatrix,
    w_k: &FixedPointMatrix,
    w_v: &FixedPointMatrix,
    mask: Option<&MaskMatrix>,
) -> Result<FixedPointMatrix> {
    if w_q.cols() != w_k.cols() {
        return Err(dims(
            "dense_attention_oracle",
            format!("W_Q has {} cols, W_K has {}", w_q.cols(), w_k.cols()),
        ));
    }
    let d = w_q.cols();
    if d == 0 {
        return Err(SimError::Empty("dense_attention_oracle"));
    }
    let q = x.matmul(w_q)?;
    let k = x.matmul(w_k)?;
    let v = x.matmul(w_v)?;
    let s = q.matmul(&k.transpose())?.scale(1.0 / (d as f64).sqrt())?;
    let p = softmax_rows_masked(&s, mask)?;
    p.matmul(&v)
}
