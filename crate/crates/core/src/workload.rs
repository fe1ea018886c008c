//! Synthetic workloads: input embeddings, projection weights and masks.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::mask::{generate_mask, MaskMatrix, QuantizedWeight};
use crate::tensor::{FixedPointMatrix, QuantConfig, DEFAULT_QUANT_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Uniform i.i.d. bits at the target density.
    Random,
    /// Cyclic band; the width follows the target density.
    Banded,
    LowerTriangular,
    File,
    /// Produced by the low-precision pruning path from the workload itself.
    Generated,
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskKind::Random => "random",
            MaskKind::Banded => "banded",
            MaskKind::LowerTriangular => "lower_triangular",
            MaskKind::File => "file",
            MaskKind::Generated => "generated",
        })
    }
}

impl std::str::FromStr for MaskKind {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => MaskKind::Random,
            "banded" => MaskKind::Banded,
            "lower_triangular" | "lower-triangular" | "causal" => MaskKind::LowerTriangular,
            "file" => MaskKind::File,
            "generated" => MaskKind::Generated,
            other => return Err(SimError::Config(format!("unknown mask kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub seq_len: usize,
    pub d_model: usize,
    /// Query/key head width.
    pub d: usize,
    pub d_v: usize,
    pub density: f64,
    pub mask_kind: MaskKind,
    pub mask_file: Option<PathBuf>,
    pub batch_count: usize,
    pub seed: u64,
    pub quant_bits: u32,
    /// Binarization threshold for generated masks; `None` uses `1/(2n)`.
    pub theta: Option<f64>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            seq_len: 320,
            d_model: 512,
            d: 64,
            d_v: 64,
            density: 0.1,
            mask_kind: MaskKind::Random,
            mask_file: None,
            batch_count: 1,
            seed: 42,
            quant_bits: DEFAULT_QUANT_BITS,
            theta: None,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("d", self.d),
            ("d_v", self.d_v),
            ("batch_count", self.batch_count),
        ] {
            if v == 0 {
                return Err(SimError::Config(format!("{k} must be positive")));
            }
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(SimError::Config(format!("density {} outside (0, 1]", self.density)));
        }
        if self.mask_kind == MaskKind::File && self.mask_file.is_none() {
            return Err(SimError::Config("mask kind `file` needs a mask path".into()));
        }
        Ok(())
    }
}

/// Projection weights of one attention head plus the fused score weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: FixedPointMatrix,
    pub w_k: FixedPointMatrix,
    pub w_v: FixedPointMatrix,
    /// `W_Q · W_K^T`.
    pub w_s: FixedPointMatrix,
}

impl LayerWeights {
    pub fn new(w_q: FixedPointMatrix, w_k: FixedPointMatrix, w_v: FixedPointMatrix) -> Result<Self> {
        let w_s = w_q.matmul(&w_k.transpose())?;
        Ok(LayerWeights { w_q, w_k, w_v, w_s })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub x: FixedPointMatrix,
    pub weights: LayerWeights,
    pub mask: MaskMatrix,
    pub mask_kind: MaskKind,
    pub seed: u64,
}

impl Workload {
    pub fn seq_len(&self) -> usize {
        self.x.rows()
    }

    pub fn d_model(&self) -> usize {
        self.x.cols()
    }

    pub fn d(&self) -> usize {
        self.weights.w_q.cols()
    }

    pub fn d_v(&self) -> usize {
        self.weights.w_v.cols()
    }
}

/// Uniform values in `[-1, 1)`.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Result<FixedPointMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FixedPointMatrix::extract_exponent(rows, cols, &v)
}

// Independent streams derived from the workload seed.
const X_STREAM: u64 = 0x5851_f42d_4c95_7f2d;
const MASK_STREAM: u64 = 0x1405_7b7e_f767_814f;

pub fn synth_weights(spec: &WorkloadSpec) -> Result<LayerWeights> {
    spec.validate()?;
    let s = spec.seed;
    LayerWeights::new(
        random_matrix(spec.d_model, spec.d, s.wrapping_mul(3).wrapping_add(1))?,
        random_matrix(spec.d_model, spec.d, s.wrapping_mul(3).wrapping_add(2))?,
        random_matrix(spec.d_model, spec.d_v, s.wrapping_mul(3).wrapping_add(3))?,
    )
}

/// Batch `batch` of the workload, reusing already synthesized weights.
pub fn synth_batch(spec: &WorkloadSpec, weights: &LayerWeights, batch: usize) -> Result<Workload> {
    spec.validate()?;
    let n = spec.seq_len;
    let seed = spec.seed.wrapping_add(batch as u64);
    let x = random_matrix(n, spec.d_model, seed ^ X_STREAM)?;
    let mask = match spec.mask_kind {
        MaskKind::Random => MaskMatrix::random(n, n, spec.density, seed ^ MASK_STREAM),
        MaskKind::Banded => MaskMatrix::banded(n, ((spec.density * n as f64).round() as usize).clamp(1, n)),
        MaskKind::LowerTriangular => MaskMatrix::lower_triangular(n),
        MaskKind::File => {
            let path = spec.mask_file.as_ref().expect("validated");
            let m = MaskMatrix::load(path)?;
            if m.rows() != n || m.cols() != n {
                return Err(SimError::MaskFormat(format!(
                    "{} holds a {}x{} mask, workload needs {n}x{n}",
                    path.display(),
                    m.rows(),
                    m.cols()
                )));
            }
            m
        }
        MaskKind::Generated => {
            let qw = QuantizedWeight::from_matrix(&weights.w_s, spec.quant_bits)?;
            let theta = spec.theta.unwrap_or_else(|| QuantConfig::default_theta(n));
            let q = QuantConfig::for_matrix(&x, spec.quant_bits, theta, spec.d)?;
            generate_mask(&x, &qw, &q)?
        }
    };
    Ok(Workload {
        x,
        weights: weights.clone(),
        mask,
        mask_kind: spec.mask_kind,
        seed,
    })
}

/// First batch of the workload.
pub fn synth_workload(spec: &WorkloadSpec) -> Result<Workload> {
    synth_batch(spec, &synth_weights(spec)?, 0)
}
