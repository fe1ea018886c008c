//! Dense and sparse matrix kernels mapped onto the crossbar fabric.
//!
//! Every kernel returns its numeric result together with a [`ScheduleResult`]
//! describing which arrays received which input vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::HardwareConfig;
use crate::crossbar::{
    arrays_for_matrix, vmm_cycles, vmm_energy, ArrayId, Fabric, Placement, VmmEnergy, WriteCost,
};
use crate::error::{dims, Result, SimError};
use crate::mask::{recam_search, MaskMatrix};
use crate::tensor::{FixedPointMatrix, FRACTION_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Sddmm,
    Spmm,
    Ddmm,
    SpmmBaseline,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelKind::Sddmm => "sddmm",
            KernelKind::Spmm => "spmm",
            KernelKind::Ddmm => "ddmm",
            KernelKind::SpmmBaseline => "spmm_baseline",
        })
    }
}

/// Input vectors (row indices of the streamed operand) queued on one array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Queue {
    /// Rows `0..n` in order.
    All(u32),
    List(Vec<u32>),
}

impl Queue {
    pub fn len(&self) -> u64 {
        match self {
            Queue::All(n) => *n as u64,
            Queue::List(v) => v.len() as u64,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<u32> {
        match self {
            Queue::All(n) => (0..*n).collect(),
            Queue::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayQueue {
    pub array: ArrayId,
    pub ag: usize,
    /// Execution wave the queue belongs to.
    pub wave: usize,
    pub vectors: Queue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleResult {
    pub kernel: KernelKind,
    pub array_queues: Vec<ArrayQueue>,
    pub replication_rows: u64,
    pub cycles: u64,
    pub effective_macs: u64,
    pub arrays_used: u64,
    /// Array-vector conversions; drives VMM energy.
    pub activations: u64,
    pub waves: usize,
    /// Replica writes, one per wave.
    pub wave_writes: Vec<WriteCost>,
    /// Rows the ReCAM searched and rows it dispatched.
    pub searched_rows: usize,
    pub row_matches: usize,
    pub max_queue_depth: u64,
    /// Active crossbar rows over occupied crossbar rows while executing.
    pub utilization: f64,
    pub warnings: Vec<String>,
}

impl ScheduleResult {
    fn new(kernel: KernelKind) -> Self {
        ScheduleResult {
            kernel,
            array_queues: Vec::new(),
            replication_rows: 0,
            cycles: 0,
            effective_macs: 0,
            arrays_used: 0,
            activations: 0,
            waves: 0,
            wave_writes: Vec::new(),
            searched_rows: 0,
            row_matches: 0,
            max_queue_depth: 0,
            utilization: 0.0,
            warnings: Vec::new(),
        }
    }

    pub fn energy(&self, hw: &HardwareConfig) -> VmmEnergy {
        vmm_energy(hw, self.activations)
    }

    pub fn latency_ns(&self, hw: &HardwareConfig) -> f64 {
        self.cycles as f64 * hw.cycle_ns
    }

    /// Cycles of each wave, recomputed from the queues.
    pub fn wave_cycles(&self, hw: &HardwareConfig) -> Vec<u64> {
        (0..self.waves)
            .map(|w| {
                vmm_cycles(
                    hw,
                    self.array_queues.iter().filter(|q| q.wave == w).map(|q| (q.ag, q.vectors.len())),
                    false,
                )
            })
            .collect()
    }

    fn finish(&mut self, hw: &HardwareConfig) {
        self.cycles = self.wave_cycles(hw).iter().sum();
        self.activations = self.array_queues.iter().map(|q| q.vectors.len()).sum();
        self.max_queue_depth = self.array_queues.iter().map(|q| q.vectors.len()).max().unwrap_or(0);
    }
}

fn queue_on(hw: &HardwareConfig, arrays: &[ArrayId], wave: usize, vectors: Queue) -> Vec<ArrayQueue> {
    arrays
        .iter()
        .map(|a| ArrayQueue {
            array: *a,
            ag: a.global_ag(hw),
            wave,
            vectors: vectors.clone(),
        })
        .collect()
}

/// Every array of `b` receives all `m` input rows.
pub fn ddmm_schedule(hw: &HardwareConfig, m: usize, b: &Placement) -> ScheduleResult {
    let mut s = ScheduleResult::new(KernelKind::Ddmm);
    s.waves = 1;
    if m > 0 && b.array_count() > 0 {
        s.array_queues = queue_on(hw, &b.arrays, 0, Queue::All(m as u32));
    }
    s.effective_macs = (m * b.rows * b.cols) as u64;
    s.arrays_used = b.array_count() as u64;
    s.utilization = if m > 0 && b.array_count() > 0 { 1.0 } else { 0.0 };
    s.finish(hw);
    s
}

/// `C = A·B` with `B` resident at `b_place`.
pub fn ddmm(
    hw: &HardwareConfig,
    a: &FixedPointMatrix,
    b: &FixedPointMatrix,
    b_place: &Placement,
) -> Result<(FixedPointMatrix, ScheduleResult)> {
    if a.cols() != b.rows() {
        return Err(dims("ddmm", format!("{}x{} * {}x{}", a.rows(), a.cols(), b.rows(), b.cols())));
    }
    check_placement("ddmm", b, b_place)?;
    Ok((a.matmul(b)?, ddmm_schedule(hw, a.rows(), b_place)))
}

fn check_placement(op: &'static str, m: &FixedPointMatrix, p: &Placement) -> Result<()> {
    if p.rows != m.rows() || p.cols != m.cols() {
        return Err(dims(
            op,
            format!("placement {}x{} does not hold a {}x{} matrix", p.rows, p.cols, m.rows(), m.cols()),
        ));
    }
    Ok(())
}

/// For every matched row, the streamed row is queued on each array of every
/// column group the row touches.
pub fn sddmm_schedule(hw: &HardwareConfig, mask: &MaskMatrix, xt: &Placement) -> Result<ScheduleResult> {
    if mask.cols() != xt.cols {
        return Err(dims("sddmm", format!("mask has {} columns, operand {}", mask.cols(), xt.cols)));
    }
    let mut s = ScheduleResult::new(KernelKind::Sddmm);
    s.waves = 1;
    let search = recam_search(mask);
    s.searched_rows = search.searched_rows();
    s.row_matches = search.matches.len();
    let mut per_group: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for m in &search.matches {
        let mut last = usize::MAX;
        for &b in &m.betas {
            let g = xt.column_group(b);
            if g != last {
                per_group.entry(g).or_default().push(m.alpha as u32);
                last = g;
            }
        }
    }
    for (g, rows) in per_group {
        s.array_queues.extend(queue_on(hw, xt.group_arrays(g), 0, Queue::List(rows)));
    }
    s.effective_macs = mask.nnz() as u64 * xt.rows as u64;
    s.arrays_used = xt.array_count() as u64;
    s.utilization = if xt.array_count() > 0 { 1.0 } else { 0.0 };
    s.finish(hw);
    let vector_bits = (hw.xb_rows * xt.value_bits.max(1) as usize) as u64;
    if s.max_queue_depth * vector_bits > hw.ir_bytes as u64 * 8 {
        s.warnings.push(format!(
            "sddmm queue depth {} exceeds input register capacity of {} vectors",
            s.max_queue_depth,
            hw.ir_bytes as u64 * 8 / vector_bits
        ));
    }
    Ok(s)
}

/// `S[i,j] = M[i,:]·Xt[:,j]` where the mask is set, exact zero elsewhere.
pub fn sddmm(
    hw: &HardwareConfig,
    m: &FixedPointMatrix,
    xt: &FixedPointMatrix,
    mask: &MaskMatrix,
    xt_place: &Placement,
) -> Result<(FixedPointMatrix, ScheduleResult)> {
    if m.cols() != xt.rows() {
        return Err(dims("sddmm", format!("{}x{} * {}x{}", m.rows(), m.cols(), xt.rows(), xt.cols())));
    }
    if mask.rows() != m.rows() || mask.cols() != xt.cols() {
        return Err(dims(
            "sddmm",
            format!("mask {}x{} vs output {}x{}", mask.rows(), mask.cols(), m.rows(), xt.cols()),
        ));
    }
    check_placement("sddmm", xt, xt_place)?;
    let (n, k, c) = (m.rows(), m.cols(), xt.cols());
    let mut acc = vec![0i128; n * c];
    let mf = m.fractions();
    let xf = xt.fractions();
    for i in 0..n {
        for j in mask.row_indices(i) {
            let mut sum = 0i128;
            for kk in 0..k {
                sum += (mf[i * k + kk] as i64 * xf[kk * c + j] as i64) as i128;
            }
            acc[i * c + j] = sum;
        }
    }
    let s = FixedPointMatrix::from_accumulator(n, c, &acc, m.exponent() + xt.exponent() - 2 * FRACTION_BITS);
    Ok((s, sddmm_schedule(hw, mask, xt_place)?))
}

fn check_off_mask(s: &FixedPointMatrix, mask: &MaskMatrix) -> Result<()> {
    if s.rows() != mask.rows() || s.cols() != mask.cols() {
        return Err(dims(
            "spmm",
            format!("scores {}x{} vs mask {}x{}", s.rows(), s.cols(), mask.rows(), mask.cols()),
        ));
    }
    for r in 0..s.rows() {
        for c in 0..s.cols() {
            if s.fraction(r, c) != 0 && !mask.get(r, c) {
                return Err(SimError::OffMaskValue { row: r, col: c });
            }
        }
    }
    Ok(())
}

/// Replicated SpMM schedule. Each output row gets an array set holding the
/// value rows it needs; rows with the same match set share one set when
/// `spmm_row_sharing` is on. Sets that do not fit run in waves.
pub fn spmm_schedule(fabric: &mut Fabric, mask: &MaskMatrix, d_v: usize) -> Result<ScheduleResult> {
    let hw = fabric.hw().clone();
    let mut s = ScheduleResult::new(KernelKind::Spmm);
    let search = recam_search(mask);
    s.searched_rows = search.searched_rows();
    s.row_matches = search.matches.len();
    s.effective_macs = mask.nnz() as u64 * d_v as u64;
    if d_v == 0 {
        return Ok(s);
    }

    // (match set, output rows), in first-appearance order.
    let mut sets: Vec<(Vec<usize>, Vec<u32>)> = Vec::new();
    if hw.spmm_row_sharing {
        let mut index: BTreeMap<&[usize], usize> = BTreeMap::new();
        for m in &search.matches {
            match index.get(m.betas.as_slice()) {
                Some(&i) => sets[i].1.push(m.alpha as u32),
                None => {
                    index.insert(&m.betas, sets.len());
                    sets.push((m.betas.clone(), vec![m.alpha as u32]));
                }
            }
        }
    } else {
        sets = search.matches.iter().map(|m| (m.betas.clone(), vec![m.alpha as u32])).collect();
    }

    let capacity = fabric.free_wea_arrays();
    let need: Vec<usize> = sets.iter().map(|(b, _)| arrays_for_matrix(&hw, b.len(), d_v, hw.value_bits)).collect();
    if let Some((i, &worst)) = need.iter().enumerate().max_by_key(|(_, &a)| a) {
        if worst > capacity {
            return Err(SimError::Capacity {
                what: format!("spmm replica set for output row {}", sets[i].1[0]),
                required: worst as u64,
                available: capacity as u64,
                unit: "arrays",
            });
        }
    }

    let mark = fabric.mark();
    let mut wave = 0usize;
    let mut used = 0usize;
    let mut wave_places: Vec<Placement> = Vec::new();
    let mut peak = 0usize;
    for (i, (betas, alphas)) in sets.iter().enumerate() {
        if used + need[i] > capacity {
            s.wave_writes.push(write_wave(fabric, &wave_places)?);
            wave_places.clear();
            fabric.release_to(mark);
            wave += 1;
            used = 0;
        }
        let p = fabric.allocate(&format!("v_replica_{}", alphas[0]), betas.len(), d_v, hw.value_bits)?;
        used += need[i];
        peak = peak.max(used);
        s.replication_rows += betas.len() as u64;
        s.array_queues.extend(queue_on(&hw, &p.arrays, wave, Queue::List(alphas.clone())));
        wave_places.push(p);
    }
    if !wave_places.is_empty() {
        s.wave_writes.push(write_wave(fabric, &wave_places)?);
        wave += 1;
    }
    fabric.release_to(mark);
    s.waves = wave;
    s.arrays_used = peak as u64;
    s.utilization = if s.replication_rows > 0 { 1.0 } else { 0.0 };
    s.finish(&hw);
    Ok(s)
}

fn write_wave(fabric: &mut Fabric, places: &[Placement]) -> Result<WriteCost> {
    let arrays: Vec<ArrayId> = places.iter().flat_map(|p| p.arrays.iter().copied()).collect();
    let rows: Vec<usize> = places.iter().flat_map(|p| p.rows_per_array.iter().copied()).collect();
    fabric.write_rows(&arrays, &rows)
}

fn gather_product(s: &FixedPointMatrix, v: &FixedPointMatrix, mask: &MaskMatrix) -> FixedPointMatrix {
    let (n, dv) = (s.rows(), v.cols());
    let mut acc = vec![0i128; n * dv];
    let vf = v.fractions();
    for a in 0..n {
        let dst = &mut acc[a * dv..(a + 1) * dv];
        for b in mask.row_indices(a) {
            let w = s.fraction(a, b) as i64;
            for (d, &x) in dst.iter_mut().zip(&vf[b * dv..(b + 1) * dv]) {
                *d += (w * x as i64) as i128;
            }
        }
    }
    FixedPointMatrix::from_accumulator(n, dv, &acc, s.exponent() + v.exponent() - 2 * FRACTION_BITS)
}

/// `Z = S·V` through value-row replication.
pub fn spmm(
    fabric: &mut Fabric,
    s: &FixedPointMatrix,
    v: &FixedPointMatrix,
    mask: &MaskMatrix,
) -> Result<(FixedPointMatrix, ScheduleResult)> {
    if s.cols() != v.rows() {
        return Err(dims("spmm", format!("{}x{} * {}x{}", s.rows(), s.cols(), v.rows(), v.cols())));
    }
    check_off_mask(s, mask)?;
    let sched = spmm_schedule(fabric, mask, v.cols())?;
    Ok((gather_product(s, v, mask), sched))
}

/// Value matrix stored once; every score row streams through with zero
/// inputs in place of masked entries.
pub fn spmm_baseline_schedule(hw: &HardwareConfig, mask: &MaskMatrix, v: &Placement) -> Result<ScheduleResult> {
    if mask.cols() != v.rows {
        return Err(dims("spmm_baseline", format!("mask has {} columns, values {} rows", mask.cols(), v.rows)));
    }
    let mut s = ScheduleResult::new(KernelKind::SpmmBaseline);
    s.waves = 1;
    let n = mask.rows();
    let search = recam_search(mask);
    s.searched_rows = search.searched_rows();
    s.row_matches = search.matches.len();
    s.effective_macs = mask.nnz() as u64 * v.cols as u64;
    s.arrays_used = v.array_count() as u64;
    if n > 0 && v.array_count() > 0 {
        s.array_queues = queue_on(hw, &v.arrays, 0, Queue::All(n as u32));
    }
    s.finish(hw);
    // Only array blocks that see a nonzero input draw current.
    let mut live = 0u64;
    for r in 0..n {
        let mut blocks: Vec<usize> = mask.row_indices(r).iter().map(|&b| b / hw.xb_rows).collect();
        blocks.dedup();
        live += blocks.len() as u64 * v.groups as u64;
    }
    s.activations = live;
    let occupied = n as u64 * v.rows as u64;
    s.utilization = if occupied > 0 { mask.nnz() as f64 / occupied as f64 } else { 0.0 };
    Ok(s)
}

pub fn spmm_baseline(
    hw: &HardwareConfig,
    s: &FixedPointMatrix,
    v: &FixedPointMatrix,
    mask: &MaskMatrix,
    v_place: &Placement,
) -> Result<(FixedPointMatrix, ScheduleResult)> {
    if s.cols() != v.rows() {
        return Err(dims("spmm_baseline", format!("{}x{} * {}x{}", s.rows(), s.cols(), v.rows(), v.cols())));
    }
    check_off_mask(s, mask)?;
    check_placement("spmm_baseline", v, v_place)?;
    Ok((s.matmul(v)?, spmm_baseline_schedule(hw, mask, v_place)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupPoint {
    pub xb_size: usize,
    pub density: f64,
    pub mask_nnz: usize,
    pub ddmm_cycles: u64,
    pub sddmm_cycles: u64,
    pub speedup: f64,
    pub ddmm_energy_pj: f64,
    pub sddmm_energy_pj: f64,
}

/// Dense over sampled cycle ratio of `S = M·Xt` (`M` is `n×k`) for random
/// masks, for every square crossbar size. Mask `i` uses seed `seed + i` at
/// every size.
pub fn kernel_speedup_vs_density(
    hw: &HardwareConfig,
    n: usize,
    k: usize,
    densities: &[f64],
    xb_sizes: &[usize],
    seed: u64,
) -> Result<Vec<SpeedupPoint>> {
    let masks: Vec<MaskMatrix> = densities
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if !(d > 0.0 && d <= 1.0) {
                return Err(SimError::Config(format!("density {d} outside (0, 1]")));
            }
            Ok(MaskMatrix::random(n, n, d, seed.wrapping_add(i as u64)))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for &size in xb_sizes {
        let mut h = hw.clone();
        h.xb_rows = size;
        h.xb_cols = size;
        let mut fabric = Fabric::new(&h)?;
        let xt = fabric.allocate("xt", k, n, h.value_bits)?;
        let dense = ddmm_schedule(&h, n, &xt);
        let dense_e = dense.energy(&h);
        for (mask, &density) in masks.iter().zip(densities) {
            let sparse = sddmm_schedule(&h, mask, &xt)?;
            let e = sparse.energy(&h);
            out.push(SpeedupPoint {
                xb_size: size,
                density,
                mask_nnz: mask.nnz(),
                ddmm_cycles: dense.cycles,
                sddmm_cycles: sparse.cycles,
                speedup: if sparse.cycles == 0 { f64::INFINITY } else { dense.cycles as f64 / sparse.cycles as f64 },
                ddmm_energy_pj: dense_e.xb + dense_e.adc + dense_e.dac,
                sddmm_energy_pj: e.xb + e.adc + e.dac,
            });
        }
    }
    Ok(out)
}
