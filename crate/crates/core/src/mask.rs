//! Mask matrices, the low-precision pruning pipeline and the ReCAM row search
//! that drives the sparse kernels.

use std::io::{BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dims, Result, SimError};
use crate::tensor::{
    binarize, dequantize_scaled, quantize, softmax_rows, FixedPointMatrix, IntMatrix, QuantConfig,
};

/// Magic prefix of the bit-packed binary mask format.
pub const MASK_MAGIC: &[u8; 8] = b"XBMASK01";

/// Rows and columns of one ReCAM array.
pub const RECAM_DIM: usize = 512;

/// Dense bit matrix of retained score entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
    ones: usize,
}

impl MaskMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        Self {
            rows,
            cols,
            words_per_row,
            words: vec![0; rows * words_per_row],
            ones: 0,
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, true);
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    /// Causal mask: entry `(i, j)` set iff `j <= i`.
    pub fn lower_triangular(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j, true);
            }
        }
        m
    }

    /// Band of `width` diagonals starting at the main diagonal and wrapping
    /// around, so every row holds exactly `min(width, n)` bits and no two rows
    /// share a pattern unless `width >= n`.
    pub fn banded(n: usize, width: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            for k in 0..width.min(n) {
                m.set(i, (i + k) % n, true);
            }
        }
        m
    }

    /// I.i.d. Bernoulli(`density`) bits from a seeded generator.
    pub fn random(rows: usize, cols: usize, density: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                if rng.gen::<f64>() < density {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    pub fn from_rows(rows: &[&[u8]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            for (j, &b) in row.iter().enumerate() {
                m.set(i, j, b != 0);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        (self.words[r * self.words_per_row + c / 64] >> (c % 64)) & 1 == 1
    }

    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        assert!(r < self.rows && c < self.cols, "mask index out of range");
        let w = &mut self.words[r * self.words_per_row + c / 64];
        let bit = 1u64 << (c % 64);
        let was = *w & bit != 0;
        if value && !was {
            *w |= bit;
            self.ones += 1;
        } else if !value && was {
            *w &= !bit;
            self.ones -= 1;
        }
    }

    pub fn nnz(&self) -> usize {
        self.ones
    }

    pub fn density(&self) -> f64 {
        let total = self.rows * self.cols;
        if total == 0 {
            0.0
        } else {
            self.ones as f64 / total as f64
        }
    }

    pub fn is_all_ones(&self) -> bool {
        self.ones == self.rows * self.cols
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    /// Ascending column indices of the set bits of row `r`.
    pub fn row_indices(&self, r: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.row_nnz(r));
        for (wi, &w) in self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
            .iter()
            .enumerate()
        {
            let mut w = w;
            while w != 0 {
                let b = w.trailing_zeros() as usize;
                out.push(wi * 64 + b);
                w &= w - 1;
            }
        }
        out
    }

    /// Text format: `rows cols` then one line of `0`/`1` characters per row.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.rows, self.cols)?;
        let mut line = String::with_capacity(self.cols);
        for r in 0..self.rows {
            line.clear();
            for c in 0..self.cols {
                line.push(if self.get(r, c) { '1' } else { '0' });
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| SimError::MaskFormat("missing header".into()))??;
        let mut it = header.split_whitespace();
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| SimError::MaskFormat(format!("bad header `{header}`")))
        };
        let rows = parse(it.next())?;
        let cols = parse(it.next())?;
        if it.next().is_some() {
            return Err(SimError::MaskFormat(format!("bad header `{header}`")));
        }
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| SimError::MaskFormat(format!("missing row {i}")))??;
            let line = line.trim_end();
            if line.len() != cols {
                return Err(SimError::MaskFormat(format!(
                    "row {i} has {} characters, expected {cols}",
                    line.len()
                )));
            }
            for (j, ch) in line.chars().enumerate() {
                match ch {
                    '0' => {}
                    '1' => m.set(i, j, true),
                    other => {
                        return Err(SimError::MaskFormat(format!(
                            "row {i}: unexpected character {other:?}"
                        )))
                    }
                }
            }
        }
        if let Some(extra) = lines.next() {
            if !extra?.trim().is_empty() {
                return Err(SimError::MaskFormat("trailing rows".into()));
            }
        }
        Ok(m)
    }

    /// Binary format: magic, `rows` and `cols` as little-endian u32, then the
    /// row-major bitstream packed MSB-first.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MASK_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        let total = self.rows * self.cols;
        let mut bytes = vec![0u8; total.div_ceil(8)];
        for k in 0..total {
            if self.get(k / self.cols, k % self.cols) {
                bytes[k / 8] |= 0x80 >> (k % 8);
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| SimError::MaskFormat("truncated header".into()))?;
        if &magic != MASK_MAGIC {
            return Err(SimError::MaskFormat("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|_| SimError::MaskFormat("truncated header".into()))?;
        let rows = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)
            .map_err(|_| SimError::MaskFormat("truncated header".into()))?;
        let cols = u32::from_le_bytes(word) as usize;
        let total = rows * cols;
        let mut bytes = vec![0u8; total.div_ceil(8)];
        r.read_exact(&mut bytes)
            .map_err(|_| SimError::MaskFormat("truncated bitstream".into()))?;
        let mut m = Self::zeros(rows, cols);
        for k in 0..total {
            if bytes[k / 8] & (0x80 >> (k % 8)) != 0 {
                m.set(k / cols, k % cols, true);
            }
        }
        Ok(m)
    }

    /// Loads either format, detected by the magic prefix.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SimError::MaskFormat(format!("{}: {e}", path.display())))?;
        if bytes.starts_with(MASK_MAGIC) {
            Self::read_binary(&bytes[..])
        } else {
            Self::read_text(&bytes[..])
        }
    }
}

/// Matched cells of one searched row: `<alpha, beta_i>` coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMatch {
    pub alpha: usize,
    pub betas: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SearchResult {
    pub matches: Vec<RowMatch>,
    /// Rows searched that matched no cell.
    pub skipped_rows: usize,
    /// ReCAM arrays occupied by the mask.
    pub recam_arrays: usize,
}

impl SearchResult {
    pub fn searched_rows(&self) -> usize {
        self.matches.len() + self.skipped_rows
    }
}

/// ReCAM arrays needed to hold a mask; tiling is row-contiguous.
pub fn recam_arrays_for(rows: usize, cols: usize) -> usize {
    rows.div_ceil(RECAM_DIM) * cols.div_ceil(RECAM_DIM)
}

/// Row-by-row search of the mask for `1` cells.
pub fn recam_search(mask: &MaskMatrix) -> SearchResult {
    let mut res = SearchResult {
        recam_arrays: recam_arrays_for(mask.rows(), mask.cols()),
        ..Default::default()
    };
    for alpha in 0..mask.rows() {
        let betas = mask.row_indices(alpha);
        if betas.is_empty() {
            res.skipped_rows += 1;
        } else {
            res.matches.push(RowMatch { alpha, betas });
        }
    }
    res
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub density: f64,
    pub per_row_nnz: Vec<usize>,
    pub per_col_nnz: Vec<usize>,
}

pub fn mask_stats(mask: &MaskMatrix) -> MaskStats {
    let mut per_col = vec![0; mask.cols()];
    let per_row = (0..mask.rows())
        .map(|r| {
            for c in mask.row_indices(r) {
                per_col[c] += 1;
            }
            mask.row_nnz(r)
        })
        .collect();
    MaskStats {
        density: mask.density(),
        per_row_nnz: per_row,
        per_col_nnz: per_col,
    }
}

/// A weight matrix pre-quantized with its own scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedWeight {
    pub values: IntMatrix,
    pub gamma: f64,
    pub bits: u32,
}

impl QuantizedWeight {
    pub fn from_matrix(w: &FixedPointMatrix, bits: u32) -> Result<Self> {
        let q = QuantConfig::for_matrix(w, bits, 1.0, 1)?;
        Ok(Self {
            values: quantize(w, &q),
            gamma: q.gamma,
            bits,
        })
    }
}

/// Approximate score computed entirely from quantized `X` and `W_S`, then
/// softmax and thresholding. Only the input embedding and the preloaded
/// weight are consulted.
pub fn generate_mask(
    x: &FixedPointMatrix,
    w_s: &QuantizedWeight,
    q: &QuantConfig,
) -> Result<MaskMatrix> {
    q.validate()?;
    if x.is_empty() {
        return Err(SimError::Empty("generate_mask"));
    }
    if w_s.values.rows != x.cols() || w_s.values.cols != x.cols() {
        return Err(dims(
            "generate_mask",
            format!(
                "X is {}x{}, W_S is {}x{}",
                x.rows(),
                x.cols(),
                w_s.values.rows,
                w_s.values.cols
            ),
        ));
    }
    let qx = quantize(x, q);
    let qm = qx.matmul(&w_s.values)?;
    let qs = qm.matmul(&qx.transpose())?;
    let approx = dequantize_scaled(&qs, q.gamma * q.gamma * w_s.gamma)?;
    let scaled = approx.scale(1.0 / (q.d as f64).sqrt())?;
    let soft = softmax_rows(&scaled)?;
    Ok(binarize(&soft, q.theta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_tracks_mutation() {
        let mut m = MaskMatrix::zeros(4, 4);
        assert_eq!(m.density(), 0.0);
        m.set(1, 2, true);
        m.set(1, 2, true);
        assert_eq!(m.nnz(), 1);
        m.set(1, 2, false);
        assert_eq!(m.nnz(), 0);
        assert_eq!(MaskMatrix::ones(4, 4).density(), 1.0);
        assert_eq!(MaskMatrix::identity(4).density(), 0.25);
    }

    #[test]
    fn lower_triangular_density() {
        assert_eq!(MaskMatrix::lower_triangular(4).nnz(), 10);
    }

    #[test]
    fn search_examples() {
        assert!(recam_search(&MaskMatrix::zeros(4, 4)).matches.is_empty());
        assert_eq!(recam_search(&MaskMatrix::zeros(4, 4)).skipped_rows, 4);
        let res = recam_search(&MaskMatrix::identity(4));
        let expect: Vec<RowMatch> = (0..4)
            .map(|i| RowMatch {
                alpha: i,
                betas: vec![i],
            })
            .collect();
        assert_eq!(res.matches, expect);
    }

    #[test]
    fn search_counts_recam_tiles() {
        assert_eq!(recam_arrays_for(320, 320), 1);
        assert_eq!(recam_arrays_for(1024, 1024), 4);
        assert_eq!(recam_arrays_for(513, 10), 2);
    }

    #[test]
    fn stats_examples() {
        let s = mask_stats(&MaskMatrix::ones(4, 4));
        assert_eq!(s.density, 1.0);
        assert_eq!(s.per_row_nnz, vec![4; 4]);
        assert_eq!(s.per_col_nnz, vec![4; 4]);
        let s = mask_stats(&MaskMatrix::identity(4));
        assert_eq!(s.density, 0.25);
    }

    #[test]
    fn random_mask_density_matches_popcount() {
        let m = MaskMatrix::random(200, 200, 0.1, 7);
        let s = mask_stats(&m);
        let pop: usize = s.per_row_nnz.iter().sum();
        assert_eq!(s.density, pop as f64 / 40_000.0);
        assert!((s.density - 0.1).abs() < 0.01);
    }

    #[test]
    fn text_format_rejects_garbage() {
        assert!(MaskMatrix::read_text(&b"2 2\n01\n1x\n"[..]).is_err());
        assert!(MaskMatrix::read_text(&b"2 2\n01\n"[..]).is_err());
        assert!(MaskMatrix::read_text(&b"2 2\n011\n10\n"[..]).is_err());
        assert!(MaskMatrix::read_text(&b"two 2\n"[..]).is_err());
        let m = MaskMatrix::read_text(&b"2 3\n010\n111\n"[..]).unwrap();
        assert_eq!(m.nnz(), 4);
        assert!(m.get(0, 1) && !m.get(0, 0));
    }

    #[test]
    fn binary_format_rejects_bad_magic_and_truncation() {
        assert!(MaskMatrix::read_binary(&b"NOTAMASK\0\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        MaskMatrix::identity(9).write_binary(&mut buf).unwrap();
        assert!(MaskMatrix::read_binary(&buf[..buf.len() - 1]).is_err());
        assert_eq!(
            MaskMatrix::read_binary(&buf[..]).unwrap(),
            MaskMatrix::identity(9)
        );
    }
}
