//! Crossbar fabric: array placement, write timing, VMM cycle timing and energy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{ColumnPlacement, HardwareConfig};
use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArrayId {
    pub tile: usize,
    /// Array group index within the tile; read-only groups come first.
    pub ag: usize,
    pub array: usize,
}

impl ArrayId {
    /// Chip-wide array group index.
    pub fn global_ag(&self, hw: &HardwareConfig) -> usize {
        self.tile * hw.ags_per_tile() + self.ag
    }
}

impl std::fmt::Display for ArrayId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "t{}/ag{}/a{}", self.tile, self.ag, self.array)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Roa,
    Wea,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayState {
    pub id: ArrayId,
    pub region: Region,
    pub stored_rows: usize,
    pub tag: String,
    /// Set for read-only regions and for write-enable arrays holding spilled weights.
    pub read_only: bool,
}

/// Where a stored matrix lives. Each logical column group is a chain of arrays
/// holding consecutive blocks of `xb_rows` matrix rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub tag: String,
    pub rows: usize,
    pub cols: usize,
    pub value_bits: u32,
    pub numbers_per_row: usize,
    pub chain: usize,
    pub groups: usize,
    /// Group-major: `arrays[g * chain + k]` holds rows `k*xb_rows..` of group `g`.
    pub arrays: Vec<ArrayId>,
    /// Rows stored in each array, parallel to `arrays`.
    pub rows_per_array: Vec<usize>,
}

impl Placement {
    pub fn empty(tag: &str) -> Self {
        Placement {
            tag: tag.to_string(),
            rows: 0,
            cols: 0,
            value_bits: 0,
            numbers_per_row: 1,
            chain: 0,
            groups: 0,
            arrays: Vec::new(),
            rows_per_array: Vec::new(),
        }
    }

    pub fn array_count(&self) -> usize {
        self.arrays.len()
    }

    pub fn column_group(&self, col: usize) -> usize {
        col / self.numbers_per_row
    }

    pub fn group_arrays(&self, g: usize) -> &[ArrayId] {
        &self.arrays[g * self.chain..(g + 1) * self.chain]
    }

    pub fn group_rows(&self, g: usize) -> &[usize] {
        &self.rows_per_array[g * self.chain..(g + 1) * self.chain]
    }

    /// Total array rows occupied.
    pub fn stored_rows(&self) -> u64 {
        self.rows_per_array.iter().map(|&r| r as u64).sum()
    }

    pub fn stored_bits(&self) -> u64 {
        self.rows as u64 * self.cols as u64 * self.value_bits as u64
    }
}

/// Array geometry of a `rows × cols` matrix of `value_bits` numbers, one
/// number per array row position: `(numbers_per_row, chain, groups)`.
pub fn matrix_geometry(hw: &HardwareConfig, rows: usize, cols: usize, value_bits: u32) -> (usize, usize, usize) {
    if rows == 0 || cols == 0 {
        return (hw.numbers_per_row(value_bits), 0, 0);
    }
    let npr = hw.numbers_per_row(value_bits);
    (npr, rows.div_ceil(hw.xb_rows), cols.div_ceil(npr))
}

pub fn arrays_for_matrix(hw: &HardwareConfig, rows: usize, cols: usize, value_bits: u32) -> usize {
    let (_, chain, groups) = matrix_geometry(hw, rows, cols, value_bits);
    chain * groups
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WriteCost {
    pub latency_ns: f64,
    pub energy_pj: f64,
    pub rows: u64,
}

/// Rows within one array group are written one at a time; distinct groups
/// write concurrently.
pub fn write_cost(hw: &HardwareConfig, rows_per_ag: impl IntoIterator<Item = u64>) -> WriteCost {
    let mut worst = 0u64;
    let mut total = 0u64;
    for r in rows_per_ag {
        worst = worst.max(r);
        total += r;
    }
    WriteCost {
        latency_ns: worst as f64 * hw.per_row_write_ns(),
        energy_pj: total as f64 * hw.xb_cols as f64 * per_cell_write_pj(hw),
        rows: total,
    }
}

/// One cell's share of an array's power over one row-write period.
pub fn per_cell_write_pj(hw: &HardwareConfig) -> f64 {
    hw.xb_mw * hw.per_row_write_ns() / hw.xb_cols as f64
}

/// Cycles to drain per-array vector queues. Each entry is `(global_ag, queue_len)`.
///
/// Inside an array group the shared ADCs convert one array-vector each per
/// cycle, and an array processes one vector per cycle.
pub fn vmm_cycles(hw: &HardwareConfig, queues: impl IntoIterator<Item = (usize, u64)>, infinite_adc: bool) -> u64 {
    let mut per_ag: BTreeMap<usize, (u64, u64, u64)> = BTreeMap::new();
    for (ag, q) in queues {
        if q == 0 {
            continue;
        }
        let e = per_ag.entry(ag).or_default();
        e.0 += q;
        e.1 = e.1.max(q);
        e.2 += 1;
    }
    per_ag
        .values()
        .map(|&(sum, max, active)| {
            let adc = if infinite_adc { active } else { hw.adc_per_ag as u64 };
            sum.div_ceil(adc).max(max)
        })
        .max()
        .unwrap_or(0)
        * hw.bit_serial_factor as u64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VmmEnergy {
    pub xb: f64,
    pub adc: f64,
    pub dac: f64,
    pub peripheral: f64,
}

/// Energy of `activations` array-vector conversions; mW × ns = pJ.
pub fn vmm_energy(hw: &HardwareConfig, activations: u64) -> VmmEnergy {
    let t = activations as f64 * hw.cycle_ns * hw.bit_serial_factor as f64;
    let share = hw.arrays_per_ag as f64;
    VmmEnergy {
        xb: hw.xb_mw * t,
        adc: hw.adc_mw * t,
        dac: hw.dac_mw / share * t,
        peripheral: (hw.sh_mw + hw.ir_mw + hw.or_mw + hw.sa_mw) / share * t,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferCost {
    pub latency_ns: f64,
    pub energy_pj: f64,
}

pub fn transfer_cost(hw: &HardwareConfig, bits: u64) -> TransferCost {
    TransferCost {
        latency_ns: bits as f64 / (hw.oci_gbps * 8.0),
        energy_pj: bits as f64 * hw.transfer_pj_per_bit,
    }
}

/// Accumulated energy per category, in pJ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub vmm: f64,
    pub write: f64,
    pub adc: f64,
    pub dac: f64,
    pub transfer: f64,
    pub scheduler: f64,
    pub peripheral: f64,
}

impl EnergyLedger {
    pub fn total(&self) -> f64 {
        self.vmm + self.write + self.adc + self.dac + self.transfer + self.scheduler + self.peripheral
    }

    pub fn add(&mut self, o: &EnergyLedger) {
        self.vmm += o.vmm;
        self.write += o.write;
        self.adc += o.adc;
        self.dac += o.dac;
        self.transfer += o.transfer;
        self.scheduler += o.scheduler;
        self.peripheral += o.peripheral;
    }

    pub fn scaled(&self, k: f64) -> EnergyLedger {
        EnergyLedger {
            vmm: self.vmm * k,
            write: self.write * k,
            adc: self.adc * k,
            dac: self.dac * k,
            transfer: self.transfer * k,
            scheduler: self.scheduler * k,
            peripheral: self.peripheral * k,
        }
    }

    pub fn add_vmm(&mut self, e: &VmmEnergy) {
        self.vmm += e.xb;
        self.adc += e.adc;
        self.dac += e.dac;
        self.peripheral += e.peripheral;
    }

    pub fn is_valid(&self) -> bool {
        [self.vmm, self.write, self.adc, self.dac, self.transfer, self.scheduler, self.peripheral]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// The array fabric of the whole chip. Allocation is a bump allocator per
/// region; `mark`/`release_to` rewind the write-enable region.
#[derive(Debug, Clone)]
pub struct Fabric {
    hw: HardwareConfig,
    states: Vec<Option<ArrayState>>,
    roa_next: usize,
    wea_next: usize,
    /// Preloaded weights keyed by tag.
    placements: BTreeMap<String, Placement>,
}

/// Position of the write-enable allocator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FabricMark(usize);

impl Fabric {
    pub fn new(hw: &HardwareConfig) -> Result<Self> {
        hw.validate()?;
        let n = hw.tiles * hw.ags_per_tile() * hw.arrays_per_ag;
        Ok(Fabric {
            hw: hw.clone(),
            states: vec![None; n],
            roa_next: 0,
            wea_next: 0,
            placements: BTreeMap::new(),
        })
    }

    pub fn hw(&self) -> &HardwareConfig {
        &self.hw
    }

    pub fn roa_arrays(&self) -> usize {
        self.hw.roa_ags() * self.hw.arrays_per_ag
    }

    pub fn wea_arrays(&self) -> usize {
        self.hw.wea_ags() * self.hw.arrays_per_ag
    }

    pub fn free_wea_arrays(&self) -> usize {
        self.wea_arrays() - self.wea_next
    }

    pub fn state(&self, id: ArrayId) -> Option<&ArrayState> {
        self.states[self.flat(id)].as_ref()
    }

    pub fn placement(&self, tag: &str) -> Option<&Placement> {
        self.placements.get(tag)
    }

    pub fn mark(&self) -> FabricMark {
        FabricMark(self.wea_next)
    }

    /// Frees every write-enable array allocated after `m`.
    pub fn release_to(&mut self, m: FabricMark) {
        for slot in m.0..self.wea_next {
            let id = self.wea_id(slot);
            let f = self.flat(id);
            self.states[f] = None;
        }
        self.wea_next = m.0;
    }

    fn flat(&self, id: ArrayId) -> usize {
        id.global_ag(&self.hw) * self.hw.arrays_per_ag + id.array
    }

    fn roa_id(&self, slot: usize) -> ArrayId {
        let apg = self.hw.arrays_per_ag;
        let ag = slot / apg;
        ArrayId {
            tile: ag / self.hw.roa_ags_per_tile,
            ag: ag % self.hw.roa_ags_per_tile,
            array: slot % apg,
        }
    }

    fn wea_id(&self, slot: usize) -> ArrayId {
        let apg = self.hw.arrays_per_ag;
        let ag = slot / apg;
        ArrayId {
            tile: ag / self.hw.wea_ags_per_tile,
            ag: self.hw.roa_ags_per_tile + ag % self.hw.wea_ags_per_tile,
            array: slot % apg,
        }
    }

    /// Reserves write-enable arrays for a runtime matrix.
    pub fn allocate(&mut self, tag: &str, rows: usize, cols: usize, value_bits: u32) -> Result<Placement> {
        self.allocate_with(tag, rows, cols, value_bits, self.hw.column_placement)
    }

    pub fn allocate_with(
        &mut self,
        tag: &str,
        rows: usize,
        cols: usize,
        value_bits: u32,
        policy: ColumnPlacement,
    ) -> Result<Placement> {
        let (npr, chain, groups) = matrix_geometry(&self.hw, rows, cols, value_bits);
        let apg = self.hw.arrays_per_ag;
        let mut slots = Vec::with_capacity(chain * groups);
        let mut cursor = self.wea_next;
        match policy {
            ColumnPlacement::Interleaved => {
                for g in 0..groups {
                    for k in 0..chain {
                        slots.push(cursor + k * groups + g);
                    }
                }
                cursor += chain * groups;
            }
            ColumnPlacement::Packed | ColumnPlacement::Spread => {
                for _ in 0..groups {
                    if policy == ColumnPlacement::Spread {
                        cursor = cursor.div_ceil(apg) * apg;
                    }
                    for k in 0..chain {
                        slots.push(cursor + k);
                    }
                    cursor += chain;
                }
            }
        }
        if cursor > self.wea_arrays() {
            let bits = self.hw.array_bits();
            return Err(SimError::Capacity {
                what: format!("write-enable arrays for {tag}"),
                required: (cursor - self.wea_next) as u64 * bits,
                available: self.free_wea_arrays() as u64 * bits,
                unit: "bits",
            });
        }
        self.wea_next = cursor;
        let ids: Vec<ArrayId> = slots.iter().map(|&s| self.wea_id(s)).collect();
        let p = self.build(tag, rows, cols, value_bits, npr, chain, groups, ids);
        for (id, &r) in p.arrays.iter().zip(&p.rows_per_array) {
            let f = self.flat(*id);
            self.states[f] = Some(ArrayState {
                id: *id,
                region: Region::Wea,
                stored_rows: r,
                tag: tag.to_string(),
                read_only: false,
            });
        }
        Ok(p)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        &self,
        tag: &str,
        rows: usize,
        cols: usize,
        value_bits: u32,
        npr: usize,
        chain: usize,
        groups: usize,
        arrays: Vec<ArrayId>,
    ) -> Placement {
        let xr = self.hw.xb_rows;
        let mut rows_per_array = Vec::with_capacity(arrays.len());
        for _ in 0..groups {
            for k in 0..chain {
                rows_per_array.push((rows - k * xr).min(xr));
            }
        }
        Placement {
            tag: tag.to_string(),
            rows,
            cols,
            value_bits,
            numbers_per_row: npr,
            chain,
            groups,
            arrays,
            rows_per_array,
        }
    }

    /// Places weights before execution. Read-only arrays fill first; the
    /// remainder spills into write-enable arrays that are locked read-only.
    pub fn preload_roa(&mut self, weights: &[(&str, usize, usize, u32)]) -> Result<Vec<Placement>> {
        let need: usize = weights
            .iter()
            .map(|&(_, r, c, b)| arrays_for_matrix(&self.hw, r, c, b))
            .sum();
        let avail = self.roa_arrays() - self.roa_next + self.free_wea_arrays();
        if need > avail {
            let bits = self.hw.array_bits();
            return Err(SimError::Capacity {
                what: "preloaded weights".into(),
                required: need as u64 * bits,
                available: avail as u64 * bits,
                unit: "bits",
            });
        }
        let mut out = Vec::new();
        for &(tag, rows, cols, bits) in weights {
            let (npr, chain, groups) = matrix_geometry(&self.hw, rows, cols, bits);
            let mut ids = Vec::with_capacity(chain * groups);
            for _ in 0..chain * groups {
                let (id, region) = if self.roa_next < self.roa_arrays() {
                    self.roa_next += 1;
                    (self.roa_id(self.roa_next - 1), Region::Roa)
                } else {
                    self.wea_next += 1;
                    (self.wea_id(self.wea_next - 1), Region::Wea)
                };
                let f = self.flat(id);
                self.states[f] = Some(ArrayState {
                    id,
                    region,
                    stored_rows: 0,
                    tag: tag.to_string(),
                    read_only: true,
                });
                ids.push(id);
            }
            let p = self.build(tag, rows, cols, bits, npr, chain, groups, ids);
            for (id, &r) in p.arrays.iter().zip(&p.rows_per_array) {
                let f = self.flat(*id);
                if let Some(s) = self.states[f].as_mut() {
                    s.stored_rows = r;
                }
            }
            self.placements.insert(tag.to_string(), p.clone());
            out.push(p);
        }
        Ok(out)
    }

    /// Arrays of a preloaded weight that spilled out of the read-only region.
    pub fn spilled_arrays(&self) -> usize {
        self.states
            .iter()
            .flatten()
            .filter(|s| s.read_only && s.region == Region::Wea)
            .count()
    }

    /// Writes every row of a placement.
    pub fn write_matrix(&mut self, p: &Placement) -> Result<WriteCost> {
        let rows: Vec<usize> = p.rows_per_array.clone();
        self.write_rows(&p.arrays, &rows)
    }

    /// Writes `rows[i]` rows into `arrays[i]`.
    pub fn write_rows(&mut self, arrays: &[ArrayId], rows: &[usize]) -> Result<WriteCost> {
        let mut per_ag: BTreeMap<usize, u64> = BTreeMap::new();
        for (id, &r) in arrays.iter().zip(rows) {
            if r > self.hw.xb_rows {
                return Err(SimError::Capacity {
                    what: format!("rows of array {id}"),
                    required: r as u64,
                    available: self.hw.xb_rows as u64,
                    unit: "rows",
                });
            }
            let in_roa = id.ag < self.hw.roa_ags_per_tile;
            let f = self.flat(*id);
            if in_roa || self.states[f].as_ref().is_some_and(|s| s.read_only) {
                return Err(SimError::ReadOnlyWrite(id.to_string()));
            }
            *per_ag.entry(id.global_ag(&self.hw)).or_default() += r as u64;
        }
        Ok(write_cost(&self.hw, per_ag.into_values()))
    }
}
