//! End-to-end attention-layer timeline under the four calculation modes.
//!
//! A layer is a dependency graph of VMM, write, unit, transfer events. Events
//! are list-scheduled as early as possible in insertion order. A streamed
//! dependency lets a consumer start once the producer has emitted its first
//! row, and finish no earlier than one row-time after the producer.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::HardwareConfig;
use crate::crossbar::{transfer_cost, vmm_energy, EnergyLedger, Fabric, Placement, WriteCost};
use crate::error::{Result, SimError};
use crate::kernels::{
    ddmm, ddmm_schedule, sddmm, sddmm_schedule, spmm, spmm_baseline, spmm_schedule, ScheduleResult,
};
use crate::mask::MaskMatrix;
use crate::tensor::{softmax_rows_masked, FixedPointMatrix};
use crate::workload::{synth_batch, synth_weights, Workload, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CalculationMode {
    #[serde(rename = "CPSAA")]
    Cpsaa,
    #[serde(rename = "CPDAA")]
    Cpdaa,
    #[serde(rename = "ReBERT_like")]
    ReBertLike,
    #[serde(rename = "ReTransformer_like")]
    ReTransformerLike,
}

impl CalculationMode {
    pub const ALL: [CalculationMode; 4] = [
        CalculationMode::Cpsaa,
        CalculationMode::Cpdaa,
        CalculationMode::ReBertLike,
        CalculationMode::ReTransformerLike,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CalculationMode::Cpsaa => "CPSAA",
            CalculationMode::Cpdaa => "CPDAA",
            CalculationMode::ReBertLike => "ReBERT_like",
            CalculationMode::ReTransformerLike => "ReTransformer_like",
        }
    }

    pub fn is_sparse(&self) -> bool {
        *self == CalculationMode::Cpsaa
    }
}

impl std::fmt::Display for CalculationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CalculationMode {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cpsaa" => CalculationMode::Cpsaa,
            "cpdaa" => CalculationMode::Cpdaa,
            "rebert" | "rebert_like" => CalculationMode::ReBertLike,
            "retransformer" | "retransformer_like" => CalculationMode::ReTransformerLike,
            other => return Err(SimError::Config(format!("unknown mode `{other}`"))),
        })
    }
}

/// Idealizations that remove one cost term each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdealKnobs {
    pub zero_write: bool,
    pub zero_transfer: bool,
    pub infinite_adc: bool,
    pub zero_ctrl: bool,
}

impl IdealKnobs {
    pub const NAMES: [&'static str; 4] = ["zero_write", "zero_transfer", "infinite_adc", "zero_ctrl"];

    pub fn single(name: &str) -> Result<Self> {
        let mut k = IdealKnobs::default();
        match name {
            "zero_write" => k.zero_write = true,
            "zero_transfer" => k.zero_transfer = true,
            "infinite_adc" => k.infinite_adc = true,
            "zero_ctrl" => k.zero_ctrl = true,
            other => return Err(SimError::Config(format!("unknown knob `{other}`"))),
        }
        Ok(k)
    }

    fn apply(&self, hw: &HardwareConfig) -> HardwareConfig {
        let mut h = hw.clone();
        if self.infinite_adc {
            // With one converter per array the per-group divisor equals the active count.
            h.adc_per_ag = h.arrays_per_ag;
        }
        if self.zero_ctrl {
            h.ctrl_ns_per_match = 0.0;
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Vmm,
    Write,
    Unit,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dep {
    Full,
    Stream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub label: String,
    pub kind: EventKind,
    pub start_ns: f64,
    pub end_ns: f64,
    pub resources: Vec<String>,
    pub deps: Vec<(usize, Dep)>,
    /// Time-to-first-row of this event when consumed as a stream.
    pub first_row_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub label: String,
    pub start_ns: f64,
    pub end_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelStat {
    pub kernel: String,
    pub cycles: u64,
    pub arrays_used: u64,
    pub effective_macs: u64,
    pub replication_rows: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub vmm: f64,
    pub write: f64,
    pub adc: f64,
    pub dac: f64,
    pub transfer: f64,
    pub scheduler: f64,
    pub peripheral: f64,
    pub total_pj: f64,
}

impl From<&EnergyLedger> for EnergyReport {
    fn from(e: &EnergyLedger) -> Self {
        EnergyReport {
            vmm: e.vmm,
            write: e.write,
            adc: e.adc,
            dac: e.dac,
            transfer: e.transfer,
            scheduler: e.scheduler,
            peripheral: e.peripheral,
            total_pj: e.total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadInfo {
    pub seq_len: usize,
    pub d_model: usize,
    pub d: usize,
    pub d_v: usize,
    pub density: f64,
    pub mask_kind: String,
    pub batches: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: CalculationMode,
    pub config: HardwareConfig,
    pub workload: WorkloadInfo,
    pub seed: u64,
    pub total_ns: f64,
    pub w4w_ns: f64,
    /// Peak count of concurrently running VMM kernels with no data
    /// dependency between any two of them.
    pub peak_parallel_arrays: u64,
    pub gops: f64,
    pub gops_per_watt: f64,
    pub energy: EnergyReport,
    pub steps: Vec<StepRecord>,
    pub kernel_stats: Vec<KernelStat>,
    pub warnings: Vec<String>,
}

/// A report plus the data needed to compose and validate it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub report: SimReport,
    pub timeline: Vec<TimelineEvent>,
    pub ledger: EnergyLedger,
    /// `2 ×` the multiply-accumulates of the attention kernels.
    pub total_ops: u64,
}

struct Node {
    label: String,
    kind: EventKind,
    duration: f64,
    rows: usize,
    deps: Vec<(usize, Dep)>,
    resources: Vec<String>,
    energy: EnergyLedger,
    ops: u64,
    stat: Option<KernelStat>,
    /// Blocking on writes inside the event (later replica waves).
    inner_w4w: f64,
}

struct Graph<'a> {
    hw: &'a HardwareConfig,
    knobs: IdealKnobs,
    nodes: Vec<Node>,
    warnings: BTreeSet<String>,
}

impl<'a> Graph<'a> {
    fn push(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn transfer(&mut self, label: &str, bits: u64, deps: Vec<(usize, Dep)>) -> usize {
        let t = transfer_cost(self.hw, bits);
        let energy = EnergyLedger {
            transfer: t.energy_pj,
            ..Default::default()
        };
        self.push(Node {
            label: label.into(),
            kind: EventKind::Transfer,
            duration: if self.knobs.zero_transfer { 0.0 } else { t.latency_ns },
            rows: 1,
            deps,
            resources: vec![],
            energy,
            ops: 0,
            stat: None,
            inner_w4w: 0.0,
        })
    }

    fn write(&mut self, label: &str, cost: WriteCost, deps: Vec<(usize, Dep)>, resource: &str) -> usize {
        let energy = EnergyLedger {
            write: cost.energy_pj,
            ..Default::default()
        };
        self.push(Node {
            label: label.into(),
            kind: EventKind::Write,
            duration: if self.knobs.zero_write { 0.0 } else { cost.latency_ns },
            rows: cost.rows.max(1) as usize,
            deps,
            resources: vec![resource.to_string()],
            energy,
            ops: 0,
            stat: None,
            inner_w4w: 0.0,
        })
    }

    /// Softmax, quantizer or binarizer pass over `values` entries on every tile.
    fn unit(&mut self, label: &str, values: u64, rows: usize, power_mw: f64, deps: Vec<(usize, Dep)>, resource: &str) -> usize {
        let per_cycle = (self.hw.unit_values_per_cycle * self.hw.tiles) as u64;
        let dur = values.div_ceil(per_cycle) as f64 * self.hw.cycle_ns;
        let energy = EnergyLedger {
            peripheral: power_mw * self.hw.tiles as f64 * dur,
            ..Default::default()
        };
        self.push(Node {
            label: label.into(),
            kind: EventKind::Unit,
            duration: dur,
            rows: rows.max(1),
            deps,
            resources: vec![resource.to_string()],
            energy,
            ops: 0,
            stat: None,
            inner_w4w: 0.0,
        })
    }

    /// A VMM event; `out_bits` is merged between tiles when the kernel spans several.
    #[allow(clippy::too_many_arguments)]
    fn vmm(
        &mut self,
        label: &str,
        sched: &ScheduleResult,
        out_bits: u64,
        tiles_spanned: usize,
        rows: usize,
        deps: Vec<(usize, Dep)>,
        attention: bool,
    ) -> usize {
        let hw = self.hw;
        let mut energy = EnergyLedger::default();
        energy.add_vmm(&vmm_energy(hw, sched.activations));
        let mut dur = sched.cycles as f64 * hw.cycle_ns;
        if tiles_spanned > 1 && sched.cycles > 0 {
            let t = transfer_cost(hw, out_bits);
            energy.transfer += t.energy_pj;
            if !self.knobs.zero_transfer {
                dur += t.latency_ns;
            }
        }
        for w in &sched.warnings {
            self.warnings.insert(format!("{label}: {w}"));
        }
        self.push(Node {
            label: label.into(),
            kind: EventKind::Vmm,
            duration: dur,
            rows: rows.max(1),
            deps,
            resources: vec![],
            energy,
            ops: if attention { 2 * sched.effective_macs } else { 0 },
            stat: Some(KernelStat {
                kernel: format!("{}:{}", sched.kernel, label),
                cycles: sched.cycles,
                arrays_used: sched.arrays_used,
                effective_macs: sched.effective_macs,
                replication_rows: sched.replication_rows,
            }),
            inner_w4w: 0.0,
        })
    }
}

fn tiles_of(p: &Placement) -> usize {
    p.arrays.iter().map(|a| a.tile).collect::<BTreeSet<_>>().len()
}

fn tiles_of_sched(s: &ScheduleResult) -> usize {
    s.array_queues.iter().map(|q| q.array.tile).collect::<BTreeSet<_>>().len()
}

/// Dimensions of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub n: usize,
    pub d_model: usize,
    pub d: usize,
    pub d_v: usize,
}

impl LayerShape {
    pub fn of(w: &Workload) -> Self {
        LayerShape {
            n: w.seq_len(),
            d_model: w.d_model(),
            d: w.d(),
            d_v: w.d_v(),
        }
    }
}

/// Simulates one attention layer of a synthesized workload.
pub fn simulate_layer(w: &Workload, mode: CalculationMode, hw: &HardwareConfig, knobs: IdealKnobs) -> Result<SimOutcome> {
    let mut out = simulate_shape(LayerShape::of(w), &w.mask, mode, hw, knobs)?;
    out.report.seed = w.seed;
    out.report.workload.mask_kind = w.mask_kind.to_string();
    Ok(out)
}

/// Timing and energy depend only on the layer shape and the mask.
pub fn simulate_shape(
    shape: LayerShape,
    mask: &MaskMatrix,
    mode: CalculationMode,
    hw: &HardwareConfig,
    knobs: IdealKnobs,
) -> Result<SimOutcome> {
    hw.validate()?;
    let LayerShape { n, d_model: dm, d, d_v } = shape;
    let info = WorkloadInfo {
        seq_len: n,
        d_model: dm,
        d,
        d_v,
        density: if mask.is_empty() { 0.0 } else { mask.density() },
        mask_kind: String::new(),
        batches: 1,
        layers: 1,
    };
    if n == 0 || dm == 0 || d == 0 || d_v == 0 {
        return Ok(finish(mode, hw, info, Vec::new(), EnergyLedger::default(), 0, 0.0, 0, BTreeSet::new()));
    }
    if mask.rows() != n || mask.cols() != n {
        return Err(crate::error::dims(
            "simulate_layer",
            format!("mask {}x{} for sequence length {n}", mask.rows(), mask.cols()),
        ));
    }
    let h = knobs.apply(hw);
    let mut g = Graph {
        hw: &h,
        knobs,
        nodes: Vec::new(),
        warnings: BTreeSet::new(),
    };
    let mut fabric = Fabric::new(&h)?;
    let dense = match mode {
        CalculationMode::Cpdaa => MaskMatrix::ones(n, n),
        _ => mask.clone(),
    };
    match mode {
        CalculationMode::Cpsaa | CalculationMode::Cpdaa => build_cpsaa(&mut g, &mut fabric, shape, &dense)?,
        CalculationMode::ReBertLike => build_rebert(&mut g, &mut fabric, shape)?,
        CalculationMode::ReTransformerLike => build_retransformer(&mut g, &mut fabric, shape)?,
    }
    let (timeline, w4w) = schedule(&g.nodes)?;
    validate_timeline(&timeline)?;
    let peak = peak_independent_vmms(&timeline);
    let mut ledger = EnergyLedger::default();
    let mut ops = 0;
    let mut stats = Vec::new();
    for node in &g.nodes {
        ledger.add(&node.energy);
        ops += node.ops;
        if let Some(s) = &node.stat {
            stats.push(s.clone());
        }
    }
    let total = timeline.iter().map(|e| e.end_ns).fold(0.0, f64::max);
    if h.include_static_power {
        ledger.peripheral += chip_static_mw(&h) * total;
    }
    let mut out = finish(mode, hw, info, timeline, ledger, ops, w4w, peak, g.warnings);
    out.report.kernel_stats = stats;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    mode: CalculationMode,
    hw: &HardwareConfig,
    workload: WorkloadInfo,
    timeline: Vec<TimelineEvent>,
    ledger: EnergyLedger,
    total_ops: u64,
    w4w: f64,
    peak: u64,
    warnings: BTreeSet<String>,
) -> SimOutcome {
    let total_ns = timeline.iter().map(|e| e.end_ns).fold(0.0, f64::max);
    let (gops, gpw) = throughput(total_ops, total_ns, ledger.total());
    SimOutcome {
        report: SimReport {
            mode,
            config: hw.clone(),
            workload,
            seed: 0,
            total_ns,
            w4w_ns: w4w.min(total_ns),
            peak_parallel_arrays: peak,
            gops,
            gops_per_watt: gpw,
            energy: EnergyReport::from(&ledger),
            steps: timeline
                .iter()
                .map(|e| StepRecord {
                    label: e.label.clone(),
                    start_ns: e.start_ns,
                    end_ns: e.end_ns,
                })
                .collect(),
            kernel_stats: Vec::new(),
            warnings: warnings.into_iter().collect(),
        },
        timeline,
        ledger,
        total_ops,
    }
}

/// GOPS and GOPS per watt; pJ per ns is mW.
pub fn throughput(ops: u64, total_ns: f64, energy_pj: f64) -> (f64, f64) {
    if total_ns <= 0.0 {
        return (0.0, 0.0);
    }
    let gops = ops as f64 / total_ns;
    let watts = energy_pj / total_ns * 1e-3;
    (gops, if watts > 0.0 { gops / watts } else { 0.0 })
}

/// Whole-chip power when every component is on.
pub fn chip_static_mw(h: &HardwareConfig) -> f64 {
    let ag = h.arrays_per_ag as f64 * h.xb_mw
        + h.adc_per_ag as f64 * h.adc_mw
        + h.dac_mw
        + h.sh_mw
        + h.ir_mw
        + h.or_mw
        + h.sa_mw;
    let tile = h.ags_per_tile() as f64 * ag
        + h.recam_count as f64 * h.recam_mw
        + h.ait_mw
        + h.ib_mw
        + h.cb_mw
        + h.ctrl_mw
        + h.su_mw
        + h.qu_mw;
    h.tiles as f64 * tile + h.dtc_mw
}

fn x_bits(h: &HardwareConfig, s: LayerShape) -> u64 {
    (s.n * s.d_model) as u64 * h.value_bits as u64
}

fn ddmm_vmm(g: &mut Graph, label: &str, m: usize, b: &Placement, deps: Vec<(usize, Dep)>, attention: bool) -> usize {
    let sched = ddmm_schedule(g.hw, m, b);
    let bits = (m * b.cols) as u64 * g.hw.value_bits as u64;
    g.vmm(label, &sched, bits, tiles_of(b), m, deps, attention)
}

/// Dispatch-limited duration of a ReCAM-driven kernel.
fn dispatch_ns(h: &HardwareConfig, searched: usize, matches: usize, search: bool) -> (f64, f64) {
    let per_search = if search { h.recam_search_ns } else { 0.0 };
    let total = searched as f64 * per_search + matches as f64 * h.ctrl_ns_per_match;
    let first = if matches > 0 { per_search + h.ctrl_ns_per_match } else { 0.0 };
    (first, total)
}

fn build_cpsaa(g: &mut Graph, fabric: &mut Fabric, s: LayerShape, mask: &MaskMatrix) -> Result<()> {
    let h = g.hw.clone();
    let LayerShape { n, d_model: dm, d: _, d_v } = s;
    let vb = h.value_bits;
    let weights = fabric.preload_roa(&[("w_s", dm, dm, vb), ("w_v", dm, d_v, vb), ("w_s_q", dm, dm, h.quant_bits)])?;
    let (w_s, w_v, w_s_q) = (&weights[0], &weights[1], &weights[2]);
    let sparse = !mask.is_all_ones();

    let load = g.transfer("load_x", x_bits(&h, s), vec![]);
    let xt_place = fabric.allocate("xt", dm, n, vb)?;
    let xt_cost = fabric.write_matrix(&xt_place)?;
    let write_xt = g.write("write_xt", xt_cost, vec![(load, Dep::Full)], "arrays:xt");
    let vmm_m = ddmm_vmm(g, "vmm_M", n, w_s, vec![(load, Dep::Full)], true);
    let vmm_v = ddmm_vmm(g, "vmm_V", n, w_v, vec![(load, Dep::Full)], true);

    let mut mask_ready = None;
    if sparse {
        let quant_x = g.unit("quant_x", (n * dm) as u64, n, h.qu_mw, vec![(load, Dep::Full)], "qu");
        let qxt_place = fabric.allocate("xt_q", dm, n, h.quant_bits)?;
        let qxt_cost = fabric.write_matrix(&qxt_place)?;
        let write_qxt = g.write("write_xt_q", qxt_cost, vec![(quant_x, Dep::Full)], "arrays:xt_q");
        let mask_m = ddmm_vmm(g, "mask_vmm_M", n, w_s_q, vec![(quant_x, Dep::Stream)], false);
        let quant_m = g.unit("mask_quant_M", (n * dm) as u64, n, h.qu_mw, vec![(mask_m, Dep::Stream)], "qu");
        let mask_s = ddmm_vmm(
            g,
            "mask_vmm_S",
            n,
            &qxt_place,
            vec![(quant_m, Dep::Stream), (write_qxt, Dep::Full)],
            false,
        );
        let soft_bin = g.unit("mask_softmax_bin", (n * n) as u64, n, h.su_mw, vec![(mask_s, Dep::Stream)], "su");
        let recam_write = WriteCost {
            latency_ns: n as f64 * h.per_row_write_ns(),
            energy_pj: h.recam_mw * n as f64 * h.per_row_write_ns(),
            rows: n as u64,
        };
        let w = g.write("write_mask_recam", recam_write, vec![(soft_bin, Dep::Stream)], "recam");
        // ReCAM writes are scheduler energy, not crossbar write energy.
        let node = &mut g.nodes[w];
        node.energy.scheduler = node.energy.write;
        node.energy.write = 0.0;
        mask_ready = Some(w);
    }

    // SDDMM: rows of M stream in; the ReCAM dispatches matched rows.
    let sd = sddmm_schedule(&h, mask, &xt_place)?;
    let mut deps = vec![(vmm_m, Dep::Stream), (write_xt, Dep::Full)];
    if let Some(m) = mask_ready {
        deps.push((m, Dep::Stream));
    }
    let sd_node = g.vmm("sddmm_S", &sd, (n * n) as u64 * vb as u64, tiles_of(&xt_place), n, deps, true);
    let (first, total) = dispatch_ns(&h, sd.searched_rows, sd.row_matches, true);
    {
        let node = &mut g.nodes[sd_node];
        node.duration = (node.duration + first).max(total);
        node.energy.scheduler += h.recam_mw * sd.searched_rows as f64 * h.recam_search_ns
            + h.ctrl_mw * sd.row_matches as f64 * h.ctrl_ns_per_match;
    }
    let soft = g.unit("softmax_S", mask.nnz() as u64, n, h.su_mw, vec![(sd_node, Dep::Full)], "su");

    // SpMM: value rows replicated per match set; the first wave is written
    // while the scores are still being produced.
    let sp = spmm_schedule(fabric, mask, d_v)?;
    let mut write_deps = vec![(vmm_v, Dep::Full)];
    if let Some(m) = mask_ready {
        write_deps.push((m, Dep::Full));
    }
    let first_wave = sp.wave_writes.first().copied().unwrap_or_default();
    let write_v = g.write("write_v_replicas", first_wave, write_deps, "arrays:v_replicas");
    let sp_node = g.vmm(
        "spmm_Z",
        &sp,
        (n * d_v) as u64 * vb as u64,
        tiles_of_sched(&sp),
        n,
        vec![(soft, Dep::Full), (write_v, Dep::Full)],
        true,
    );
    let later: Vec<WriteCost> = sp.wave_writes.iter().skip(1).copied().collect();
    let later_ns: f64 = if g.knobs.zero_write { 0.0 } else { later.iter().map(|w| w.latency_ns).sum() };
    let (first, total) = dispatch_ns(&h, sp.searched_rows, sp.row_matches, false);
    {
        let node = &mut g.nodes[sp_node];
        node.duration = (node.duration + first).max(total) + later_ns;
        node.inner_w4w = later_ns;
        node.resources.push("arrays:v_replicas".into());
        node.energy.write += later.iter().map(|w| w.energy_pj).sum::<f64>();
        node.energy.scheduler += h.ctrl_mw * sp.row_matches as f64 * h.ctrl_ns_per_match;
    }
    if sp.waves > 1 {
        g.warnings.insert(format!("spmm_Z: replicas run in {} waves", sp.waves));
    }
    g.transfer("store_z", (n * d_v) as u64 * vb as u64, vec![(sp_node, Dep::Full)]);
    Ok(())
}

fn build_rebert(g: &mut Graph, fabric: &mut Fabric, s: LayerShape) -> Result<()> {
    let h = g.hw.clone();
    let LayerShape { n, d_model: dm, d, d_v } = s;
    let vb = h.value_bits;
    let w = fabric.preload_roa(&[("w_q", dm, d, vb), ("w_k", dm, d, vb), ("w_v", dm, d_v, vb)])?;
    let load = g.transfer("load_x", x_bits(&h, s), vec![]);
    let q = ddmm_vmm(g, "vmm_Q", n, &w[0], vec![(load, Dep::Full)], true);
    let k = ddmm_vmm(g, "vmm_K", n, &w[1], vec![(load, Dep::Full)], true);
    let v = ddmm_vmm(g, "vmm_V", n, &w[2], vec![(load, Dep::Full)], true);
    let kt_place = fabric.allocate("kt", d, n, vb)?;
    let kt_cost = fabric.write_matrix(&kt_place)?;
    let write_kt = g.write("write_kt", kt_cost, vec![(k, Dep::Full)], "arrays:kt");
    let v_place = fabric.allocate("v", n, d_v, vb)?;
    let v_cost = fabric.write_matrix(&v_place)?;
    let write_v = g.write("write_v", v_cost, vec![(v, Dep::Full)], "arrays:v");
    let sn = ddmm_vmm(g, "vmm_S", n, &kt_place, vec![(q, Dep::Full), (write_kt, Dep::Full)], true);
    let soft = g.unit("softmax_S", (n * n) as u64, n, h.su_mw, vec![(sn, Dep::Full)], "su");
    let z = ddmm_vmm(g, "vmm_Z", n, &v_place, vec![(soft, Dep::Full), (write_v, Dep::Full)], true);
    g.transfer("store_z", (n * d_v) as u64 * vb as u64, vec![(z, Dep::Full)]);
    Ok(())
}

fn build_retransformer(g: &mut Graph, fabric: &mut Fabric, s: LayerShape) -> Result<()> {
    let h = g.hw.clone();
    let LayerShape { n, d_model: dm, d, d_v } = s;
    let vb = h.value_bits;
    let w = fabric.preload_roa(&[("w_q", dm, d, vb), ("w_kt", d, dm, vb), ("w_v", dm, d_v, vb)])?;
    let load = g.transfer("load_x", x_bits(&h, s), vec![]);
    let xt_place = fabric.allocate("xt", dm, n, vb)?;
    let xt_cost = fabric.write_matrix(&xt_place)?;
    let write_xt = g.write("write_xt", xt_cost, vec![(load, Dep::Full)], "arrays:xt");
    let x_place = fabric.allocate("x", n, dm, vb)?;
    let x_cost = fabric.write_matrix(&x_place)?;
    let write_x = g.write("write_x", x_cost, vec![(load, Dep::Full)], "arrays:x");
    let q = ddmm_vmm(g, "vmm_Q", n, &w[0], vec![(load, Dep::Full)], true);
    let r = ddmm_vmm(g, "vmm_R", n, &w[1], vec![(q, Dep::Full)], true);
    let sn = ddmm_vmm(g, "vmm_S", n, &xt_place, vec![(r, Dep::Full), (write_xt, Dep::Full)], true);
    let soft = g.unit("softmax_S", (n * n) as u64, n, h.su_mw, vec![(sn, Dep::Full)], "su");
    let p = ddmm_vmm(g, "vmm_P", n, &x_place, vec![(soft, Dep::Full), (write_x, Dep::Full)], true);
    let z = ddmm_vmm(g, "vmm_Z", n, &w[2], vec![(p, Dep::Full)], true);
    g.transfer("store_z", (n * d_v) as u64 * vb as u64, vec![(z, Dep::Full)]);
    Ok(())
}

const EPS: f64 = 1e-9;

/// As-early-as-possible list scheduling in insertion order. Returns the
/// timeline and the VMM time blocked on writes.
fn schedule(nodes: &[Node]) -> Result<(Vec<TimelineEvent>, f64)> {
    let mut events: Vec<TimelineEvent> = Vec::with_capacity(nodes.len());
    let mut res_free: BTreeMap<&str, f64> = BTreeMap::new();
    let mut w4w = 0.0;
    for (i, node) in nodes.iter().enumerate() {
        let mut ready_other = 0.0f64;
        let mut ready_write = 0.0f64;
        let mut end_floor = 0.0f64;
        let row_time = node.duration / node.rows.max(1) as f64;
        for &(d, kind) in &node.deps {
            if d >= i {
                return Err(SimError::Schedule(format!(
                    "{} depends on later event {d}; dependency cycle",
                    node.label
                )));
            }
            let p = &events[d];
            let ready = match kind {
                Dep::Full => p.end_ns,
                Dep::Stream => {
                    end_floor = end_floor.max(p.end_ns + row_time);
                    p.start_ns + p.first_row_ns
                }
            };
            if nodes[d].kind == EventKind::Write {
                ready_write = ready_write.max(ready);
            } else {
                ready_other = ready_other.max(ready);
            }
        }
        let res_ready = node
            .resources
            .iter()
            .map(|r| res_free.get(r.as_str()).copied().unwrap_or(0.0))
            .fold(0.0, f64::max);
        let start = ready_other.max(ready_write).max(res_ready);
        let end = (start + node.duration).max(end_floor);
        for r in &node.resources {
            res_free.insert(r.as_str(), end);
        }
        if node.kind == EventKind::Vmm {
            w4w += (ready_write - ready_other.max(res_ready)).max(0.0) + node.inner_w4w;
        }
        events.push(TimelineEvent {
            label: node.label.clone(),
            kind: node.kind,
            start_ns: start,
            end_ns: end,
            resources: node.resources.clone(),
            deps: node.deps.clone(),
            first_row_ns: (end - start) / node.rows.max(1) as f64,
        });
    }
    Ok((events, w4w))
}

/// Checks every dependency edge and that no resource is double-booked.
pub fn validate_timeline(events: &[TimelineEvent]) -> Result<()> {
    for (i, e) in events.iter().enumerate() {
        if e.end_ns.is_nan() || e.end_ns + EPS < e.start_ns || e.start_ns < -EPS {
            return Err(SimError::Schedule(format!("{} has a negative span", e.label)));
        }
        for &(d, kind) in &e.deps {
            let p = events
                .get(d)
                .filter(|_| d < i)
                .ok_or_else(|| SimError::Schedule(format!("{}: bad dependency {d}", e.label)))?;
            let ok = match kind {
                Dep::Full => e.start_ns + EPS >= p.end_ns,
                Dep::Stream => e.start_ns + EPS >= p.start_ns + p.first_row_ns && e.end_ns + EPS >= p.end_ns,
            };
            if !ok {
                return Err(SimError::Schedule(format!("{} starts before {} allows", e.label, p.label)));
            }
        }
    }
    let mut by_res: BTreeMap<&str, Vec<(f64, f64, &str)>> = BTreeMap::new();
    for e in events {
        for r in &e.resources {
            by_res.entry(r).or_default().push((e.start_ns, e.end_ns, &e.label));
        }
    }
    for (r, mut spans) in by_res {
        spans.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        for w in spans.windows(2) {
            if w[1].0 + EPS < w[0].1 && w[0].1 - w[0].0 > EPS && w[1].1 - w[1].0 > EPS {
                return Err(SimError::Schedule(format!("{} and {} overlap on {r}", w[0].2, w[1].2)));
            }
        }
    }
    Ok(())
}

/// Largest set of concurrently running VMM events no two of which are
/// connected by a dependency path.
pub fn peak_independent_vmms(events: &[TimelineEvent]) -> u64 {
    let n = events.len();
    let mut anc: Vec<Vec<bool>> = vec![vec![false; n]; n];
    for i in 0..n {
        for &(d, _) in &events[i].deps {
            anc[i][d] = true;
            let (lo, hi) = anc.split_at_mut(i);
            for (k, v) in lo[d].iter().enumerate() {
                if *v {
                    hi[0][k] = true;
                }
            }
        }
    }
    let vmms: Vec<usize> = (0..n)
        .filter(|&i| events[i].kind == EventKind::Vmm && events[i].end_ns - events[i].start_ns > EPS)
        .collect();
    let mut best = 0u64;
    for &i in &vmms {
        let t = events[i].start_ns;
        let live: Vec<usize> = vmms
            .iter()
            .copied()
            .filter(|&j| events[j].start_ns <= t + EPS && events[j].end_ns > t + EPS)
            .collect();
        best = best.max(max_antichain(&live, &anc));
    }
    best
}

fn max_antichain(live: &[usize], anc: &[Vec<bool>]) -> u64 {
    let k = live.len().min(20);
    let mut best = 0;
    for set in 1u32..(1 << k) {
        let members: Vec<usize> = (0..k).filter(|b| set >> b & 1 == 1).map(|b| live[b]).collect();
        let independent = members
            .iter()
            .all(|&a| members.iter().all(|&b| a == b || (!anc[a][b] && !anc[b][a])));
        if independent {
            best = best.max(members.len() as u64);
        }
    }
    best
}

/// Runs outcomes back to back with a transfer of `gap_bits` between
/// consecutive ones.
pub fn compose_serial(parts: &[SimOutcome], gap_bits: u64, prefix: &str, hw: &HardwareConfig, zero_transfer: bool) -> Result<SimOutcome> {
    let first = parts.first().ok_or(SimError::Empty("compose_serial"))?;
    let mut ledger = EnergyLedger::default();
    let mut timeline: Vec<TimelineEvent> = Vec::new();
    let mut stats = Vec::new();
    let mut warnings = BTreeSet::new();
    let mut offset = 0.0;
    let mut ops = 0;
    let mut w4w = 0.0;
    let mut peak = 0;
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            let t = transfer_cost(hw, gap_bits);
            let lat = if zero_transfer { 0.0 } else { t.latency_ns };
            ledger.transfer += t.energy_pj;
            timeline.push(TimelineEvent {
                label: format!("{prefix}{i}:handoff"),
                kind: EventKind::Transfer,
                start_ns: offset,
                end_ns: offset + lat,
                resources: vec![],
                deps: vec![],
                first_row_ns: lat,
            });
            offset += lat;
        }
        for e in &p.timeline {
            let mut e = e.clone();
            e.label = format!("{prefix}{i}:{}", e.label);
            e.start_ns += offset;
            e.end_ns += offset;
            e.deps.clear();
            timeline.push(e);
        }
        for s in &p.report.kernel_stats {
            let mut s = s.clone();
            s.kernel = format!("{prefix}{i}:{}", s.kernel);
            stats.push(s);
        }
        warnings.extend(p.report.warnings.iter().cloned());
        ledger.add(&p.ledger);
        ops += p.total_ops;
        w4w += p.report.w4w_ns;
        peak = peak.max(p.report.peak_parallel_arrays);
        offset += p.report.total_ns;
    }
    let mut info = first.report.workload.clone();
    info.density = parts.iter().map(|p| p.report.workload.density).sum::<f64>() / parts.len() as f64;
    let mut out = finish(first.report.mode, &first.report.config, info, timeline, ledger, ops, w4w, peak, warnings);
    out.report.total_ns = offset;
    let (gops, gpw) = throughput(ops, offset, ledger.total());
    out.report.gops = gops;
    out.report.gops_per_watt = gpw;
    out.report.w4w_ns = w4w.min(offset);
    out.report.kernel_stats = stats;
    out.report.seed = first.report.seed;
    Ok(out)
}

/// Attention layer followed by the FC layer, as one encoder on its own chip.
pub fn simulate_encoder(
    shape: LayerShape,
    mask: &MaskMatrix,
    mode: CalculationMode,
    hw: &HardwareConfig,
    knobs: IdealKnobs,
) -> Result<SimOutcome> {
    let att = simulate_shape(shape, mask, mode, hw, knobs)?;
    if shape.n == 0 {
        return Ok(att);
    }
    let h = knobs.apply(hw);
    let mut fabric = Fabric::new(&h)?;
    let fc = fabric.preload_roa(&[("w_fc", shape.d_model, shape.d_model, h.value_bits)])?;
    let sched = ddmm_schedule(&h, shape.n, &fc[0]);
    let mut g = Graph {
        hw: &h,
        knobs,
        nodes: Vec::new(),
        warnings: BTreeSet::new(),
    };
    let bits = (shape.n * shape.d_model) as u64 * h.value_bits as u64;
    g.vmm("fc", &sched, bits, tiles_of(&fc[0]), shape.n, vec![], true);
    let (timeline, _) = schedule(&g.nodes)?;
    let fc_out = finish(mode, hw, att.report.workload.clone(), timeline, g.nodes[0].energy, g.nodes[0].ops, 0.0, 1, BTreeSet::new());
    let mut fc_out = fc_out;
    fc_out.report.kernel_stats = vec![g.nodes[0].stat.clone().expect("vmm node")];
    let mut out = compose_serial(&[att, fc_out], 0, "part", hw, knobs.zero_transfer)?;
    // The encoder hands its output to the next one.
    let t = transfer_cost(hw, bits);
    let lat = if knobs.zero_transfer { 0.0 } else { t.latency_ns };
    out.timeline.push(TimelineEvent {
        label: "encoder_out".into(),
        kind: EventKind::Transfer,
        start_ns: out.report.total_ns,
        end_ns: out.report.total_ns + lat,
        resources: vec![],
        deps: vec![],
        first_row_ns: lat,
    });
    out.ledger.transfer += t.energy_pj;
    let total = out.report.total_ns + lat;
    rebuild(&mut out, total);
    Ok(out)
}

fn rebuild(out: &mut SimOutcome, total_ns: f64) {
    out.report.total_ns = total_ns;
    out.report.energy = EnergyReport::from(&out.ledger);
    let (gops, gpw) = throughput(out.total_ops, total_ns, out.ledger.total());
    out.report.gops = gops;
    out.report.gops_per_watt = gpw;
    out.report.steps = out
        .timeline
        .iter()
        .map(|e| StepRecord {
            label: e.label.clone(),
            start_ns: e.start_ns,
            end_ns: e.end_ns,
        })
        .collect();
}

/// `layers` encoders in sequence, each on its own chip.
pub fn simulate_encoder_stack(
    w: &Workload,
    layers: usize,
    mode: CalculationMode,
    hw: &HardwareConfig,
    knobs: IdealKnobs,
) -> Result<SimOutcome> {
    if layers == 0 {
        return Err(SimError::Config("layers must be at least 1".into()));
    }
    let one = simulate_encoder(LayerShape::of(w), &w.mask, mode, hw, knobs)?;
    let parts = vec![one; layers];
    let mut out = compose_serial(&parts, 0, "L", hw, knobs.zero_transfer)?;
    out.report.seed = w.seed;
    out.report.workload.mask_kind = w.mask_kind.to_string();
    out.report.workload.layers = layers;
    Ok(out)
}

/// Serial batches of one dataset. With `workers > 1` batches are simulated
/// concurrently and merged in input order.
pub fn batch_driver(
    spec: &WorkloadSpec,
    mode: CalculationMode,
    hw: &HardwareConfig,
    knobs: IdealKnobs,
    workers: usize,
) -> Result<SimOutcome> {
    spec.validate()?;
    let weights = synth_weights(spec)?;
    let run = |b: usize| -> Result<SimOutcome> {
        let w = synth_batch(spec, &weights, b)?;
        simulate_layer(&w, mode, hw, knobs)
    };
    let k = spec.batch_count;
    let parts: Vec<SimOutcome> = if workers <= 1 || k == 1 {
        (0..k).map(run).collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<SimOutcome>>> = (0..k).map(|_| None).collect();
        std::thread::scope(|sc| {
            let chunks: Vec<(usize, &mut [Option<Result<SimOutcome>>])> = {
                let per = k.div_ceil(workers);
                slots.chunks_mut(per).enumerate().map(|(i, c)| (i * per, c)).collect()
            };
            for (base, chunk) in chunks {
                let run = &run;
                sc.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run(base + j));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every batch ran")).collect::<Result<_>>()?
    };
    let bits = (spec.seq_len * spec.d_model) as u64 * hw.value_bits as u64;
    let mut out = compose_serial(&parts, bits, "b", hw, knobs.zero_transfer)?;
    out.report.seed = spec.seed;
    out.report.workload.batches = k;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnobResult {
    pub knob: String,
    pub total_ns: f64,
    pub gops: f64,
    /// Throughput gain over the baseline, in percent.
    pub gain_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnobStudy {
    pub baseline: KnobResult,
    pub knobs: Vec<KnobResult>,
    /// Knob names by decreasing gain.
    pub ranking: Vec<String>,
}

pub fn knob_study(w: &Workload, mode: CalculationMode, hw: &HardwareConfig) -> Result<KnobStudy> {
    let base = simulate_layer(w, mode, hw, IdealKnobs::default())?.report;
    let row = |name: &str, r: &SimReport| KnobResult {
        knob: name.into(),
        total_ns: r.total_ns,
        gops: r.gops,
        gain_pct: if base.gops > 0.0 { (r.gops / base.gops - 1.0) * 100.0 } else { 0.0 },
    };
    let baseline = row("baseline", &base);
    let mut knobs = Vec::new();
    for name in IdealKnobs::NAMES {
        let r = simulate_layer(w, mode, hw, IdealKnobs::single(name)?)?.report;
        knobs.push(row(name, &r));
    }
    let mut ranking: Vec<&KnobResult> = knobs.iter().collect();
    ranking.sort_by(|a, b| b.gain_pct.total_cmp(&a.gain_pct));
    let ranking = ranking.into_iter().map(|k| k.knob.clone()).collect();
    Ok(KnobStudy {
        baseline,
        knobs,
        ranking,
    })
}

/// Numeric output of a layer computed through the mode's own kernels.
pub fn run_functional(w: &Workload, mode: CalculationMode, hw: &HardwareConfig) -> Result<FixedPointMatrix> {
    let x = &w.x;
    let lw = &w.weights;
    let n = x.rows();
    let d = lw.w_q.cols();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut fabric = Fabric::new(hw)?;
    let vb = hw.value_bits;
    let mut place = |tag: &str, m: &FixedPointMatrix| fabric.allocate(tag, m.rows(), m.cols(), vb);
    match mode {
        CalculationMode::Cpsaa | CalculationMode::Cpdaa => {
            let mask = if mode == CalculationMode::Cpdaa { MaskMatrix::ones(n, n) } else { w.mask.clone() };
            let (m, _) = ddmm(hw, x, &lw.w_s, &place("w_s", &lw.w_s)?)?;
            let (v, _) = ddmm(hw, x, &lw.w_v, &place("w_v", &lw.w_v)?)?;
            let xt = x.transpose();
            let (s, _) = sddmm(hw, &m, &xt, &mask, &place("xt", &xt)?)?;
            let p = softmax_rows_masked(&s.scale(inv_sqrt_d)?, Some(&mask))?;
            let (z, _) = spmm(&mut fabric, &p, &v, &mask)?;
            Ok(z)
        }
        CalculationMode::ReBertLike => {
            let (q, _) = ddmm(hw, x, &lw.w_q, &place("w_q", &lw.w_q)?)?;
            let (k, _) = ddmm(hw, x, &lw.w_k, &place("w_k", &lw.w_k)?)?;
            let (v, _) = ddmm(hw, x, &lw.w_v, &place("w_v", &lw.w_v)?)?;
            let kt = k.transpose();
            let (s, _) = ddmm(hw, &q, &kt, &place("kt", &kt)?)?;
            let p = softmax_rows_masked(&s.scale(inv_sqrt_d)?, None)?;
            let (z, _) = ddmm(hw, &p, &v, &place("v", &v)?)?;
            Ok(z)
        }
        CalculationMode::ReTransformerLike => {
            let (q, _) = ddmm(hw, x, &lw.w_q, &place("w_q", &lw.w_q)?)?;
            let wkt = lw.w_k.transpose();
            let (r, _) = ddmm(hw, &q, &wkt, &place("w_kt", &wkt)?)?;
            let xt = x.transpose();
            let (s, _) = ddmm(hw, &r, &xt, &place("xt", &xt)?)?;
            let p = softmax_rows_masked(&s.scale(inv_sqrt_d)?, None)?;
            let (px, _) = ddmm(hw, &p, x, &place("x", x)?)?;
            let (z, _) = ddmm(hw, &px, &lw.w_v, &place("w_v", &lw.w_v)?)?;
            Ok(z)
        }
    }
}

/// The value-stationary SpMM variant on the same scores, for cross-checks.
pub fn run_functional_baseline(w: &Workload, hw: &HardwareConfig) -> Result<(FixedPointMatrix, FixedPointMatrix)> {
    let x = &w.x;
    let lw = &w.weights;
    let d = lw.w_q.cols();
    let m = x.matmul(&lw.w_s)?;
    let v = x.matmul(&lw.w_v)?;
    let mut fabric = Fabric::new(hw)?;
    let xt = x.transpose();
    let xt_place = fabric.allocate("xt", xt.rows(), xt.cols(), hw.value_bits)?;
    let (s, _) = sddmm(hw, &m, &xt, &w.mask, &xt_place)?;
    let p = softmax_rows_masked(&s.scale(1.0 / (d as f64).sqrt())?, Some(&w.mask))?;
    let v_place = fabric.allocate("v", v.rows(), v.cols(), hw.value_bits)?;
    let (zb, _) = spmm_baseline(hw, &p, &v, &w.mask, &v_place)?;
    let (zr, _) = spmm(&mut fabric, &p, &v, &w.mask)?;
    Ok((zr, zb))
}
