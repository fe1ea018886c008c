//! Command-line front end.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::HardwareConfig;
use crate::crossbar::Fabric;
use crate::error::{Result, SimError};
use crate::kernels::{
    ddmm_schedule, kernel_speedup_vs_density, sddmm_schedule, spmm_baseline_schedule, spmm_schedule, ScheduleResult,
};
use crate::pipeline::{
    batch_driver, knob_study, simulate_encoder_stack, CalculationMode, IdealKnobs, KnobStudy, SimReport,
};
use crate::report::{normalize, to_csv, to_json, write_atomic};
use crate::workload::{synth_workload, MaskKind, WorkloadSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_CAPACITY: i32 = 4;
pub const EXIT_MASK: i32 = 5;
pub const EXIT_IO: i32 = 6;

pub fn exit_code(e: &SimError) -> i32 {
    match e {
        SimError::Config(_) => EXIT_CONFIG,
        SimError::Capacity { .. } => EXIT_CAPACITY,
        SimError::MaskFormat(_) => EXIT_MASK,
        SimError::Io(_) => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "xbar-attn", version, about = "Crossbar sparse-attention accelerator simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Hardware config file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set adc_per_ag=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// JSON report path; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Plot-ready CSV summary path.
    #[arg(long, global = true)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct WorkloadArgs {
    #[arg(long, default_value_t = 320)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 512)]
    pub d_model: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub d_v: usize,
    #[arg(long, default_value_t = 0.1)]
    pub density: f64,
    #[arg(long, default_value = "random")]
    pub mask_kind: MaskKind,
    /// Mask file (text or binary); implies `--mask-kind file`.
    #[arg(long)]
    pub mask_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub batches: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub quant_bits: u32,
    #[arg(long)]
    pub theta: Option<f64>,
}

impl WorkloadArgs {
    pub fn spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            seq_len: self.seq_len,
            d_model: self.d_model,
            d: self.d,
            d_v: self.d_v,
            density: self.density,
            mask_kind: if self.mask_file.is_some() { MaskKind::File } else { self.mask_kind },
            mask_file: self.mask_file.clone(),
            batch_count: self.batches,
            seed: self.seed,
            quant_bits: self.quant_bits,
            theta: self.theta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Knob {
    ZeroWrite,
    ZeroTransfer,
    InfiniteAdc,
    ZeroCtrl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    Density,
    XbSize,
    Batches,
    Layers,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One mode on one workload.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long, default_value = "cpsaa", value_parser = parse_mode)]
        mode: CalculationMode,
        #[arg(long = "ideal", value_enum)]
        ideal: Vec<Knob>,
        /// Parallel batch workers; output is identical for any value.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// All four modes on the same workload, with an ordering table.
    CompareModes {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        workload: WorkloadArgs,
    },
    /// One parameter over a list of values.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value = "cpsaa", value_parser = parse_mode)]
        mode: CalculationMode,
    },
    /// Throughput gain of each ideal knob alone.
    KnobStudy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long, default_value = "cpsaa", value_parser = parse_mode)]
        mode: CalculationMode,
    },
    /// Cycles, arrays and energy of each kernel on the workload mask.
    KernelBench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        workload: WorkloadArgs,
    },
    /// Stacked encoder layers, each attention plus a fully connected layer.
    EncoderStack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long, default_value_t = 12)]
        layers: usize,
        #[arg(long, default_value = "cpsaa", value_parser = parse_mode)]
        mode: CalculationMode,
    },
    /// Prints the resolved hardware config.
    DumpConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_mode(s: &str) -> std::result::Result<CalculationMode, String> {
    s.parse().map_err(|e: SimError| e.to_string())
}

fn load_config(c: &Common) -> Result<HardwareConfig> {
    let mut hw = match &c.config {
        Some(p) => HardwareConfig::load(p)?,
        None => HardwareConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| SimError::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        hw.set(k.trim(), v.trim())?;
    }
    hw.validate()?;
    Ok(hw)
}

fn knobs(list: &[Knob]) -> IdealKnobs {
    let mut k = IdealKnobs::default();
    for knob in list {
        match knob {
            Knob::ZeroWrite => k.zero_write = true,
            Knob::ZeroTransfer => k.zero_transfer = true,
            Knob::InfiniteAdc => k.infinite_adc = true,
            Knob::ZeroCtrl => k.zero_ctrl = true,
        }
    }
    k
}

/// Rendered outputs of one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub json: String,
    pub csv: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeRow {
    pub mode: String,
    pub total_ns: f64,
    pub w4w_ns: f64,
    pub peak_parallel_arrays: u64,
    pub gops: f64,
    pub gops_per_watt: f64,
    pub energy_pj: f64,
    /// Latency relative to the sparse mode.
    pub latency_vs_cpsaa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ordering {
    pub total_ns_ascending: Vec<String>,
    pub w4w_ns_descending: Vec<String>,
    pub peak_parallel_arrays_descending: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub reports: Vec<SimReport>,
    pub table: Vec<ModeRow>,
    pub ordering: Ordering,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub mode: String,
    pub total_ns: f64,
    pub gops: f64,
    pub gops_per_watt: f64,
    pub energy_pj: f64,
    pub ddmm_cycles: u64,
    pub sddmm_cycles: u64,
    pub sddmm_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub mode: String,
    pub seed: u64,
    pub points: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelRow {
    pub kernel: String,
    pub cycles: u64,
    pub latency_ns: f64,
    pub arrays_used: u64,
    pub activations: u64,
    pub effective_macs: u64,
    pub replication_rows: u64,
    pub waves: u64,
    pub vmm_energy_pj: f64,
    pub write_energy_pj: f64,
    pub energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelBench {
    pub seq_len: usize,
    pub d_model: usize,
    pub d_v: usize,
    pub density: f64,
    pub mask_nnz: usize,
    pub seed: u64,
    pub kernels: Vec<KernelRow>,
}

pub fn simulate(spec: &WorkloadSpec, mode: CalculationMode, hw: &HardwareConfig, k: IdealKnobs, workers: usize) -> Result<SimReport> {
    normalize(&batch_driver(spec, mode, hw, k, workers.max(1))?.report)
}

pub fn compare_modes(spec: &WorkloadSpec, hw: &HardwareConfig) -> Result<Comparison> {
    let reports: Vec<SimReport> = CalculationMode::ALL
        .iter()
        .map(|&m| simulate(spec, m, hw, IdealKnobs::default(), 1))
        .collect::<Result<_>>()?;
    let base = reports[0].total_ns;
    let table: Vec<ModeRow> = reports
        .iter()
        .map(|r| ModeRow {
            mode: r.mode.to_string(),
            total_ns: r.total_ns,
            w4w_ns: r.w4w_ns,
            peak_parallel_arrays: r.peak_parallel_arrays,
            gops: r.gops,
            gops_per_watt: r.gops_per_watt,
            energy_pj: r.energy.total_pj,
            latency_vs_cpsaa: if base > 0.0 { r.total_ns / base } else { 0.0 },
        })
        .collect();
    let order = |key: &dyn Fn(&ModeRow) -> f64, ascending: bool| {
        let mut rows: Vec<&ModeRow> = table.iter().collect();
        rows.sort_by(|a, b| {
            let o = key(a).total_cmp(&key(b));
            if ascending {
                o
            } else {
                o.reverse()
            }
        });
        rows.into_iter().map(|r| r.mode.clone()).collect()
    };
    let ordering = Ordering {
        total_ns_ascending: order(&|r| r.total_ns, true),
        w4w_ns_descending: order(&|r| r.w4w_ns, false),
        peak_parallel_arrays_descending: order(&|r| r.peak_parallel_arrays as f64, false),
    };
    Ok(Comparison {
        reports,
        table,
        ordering,
    })
}

pub fn sweep(spec: &WorkloadSpec, hw: &HardwareConfig, param: SweepParam, values: &[f64], mode: CalculationMode) -> Result<Sweep> {
    let mut points = Vec::new();
    for &value in values {
        let mut s = spec.clone();
        let mut h = hw.clone();
        let as_count = |what: &str| -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(SimError::Config(format!("{what} must be a positive integer, got {value}")))
            }
        };
        let mut layers = None;
        match param {
            SweepParam::Density => s.density = value,
            SweepParam::XbSize => {
                let size = as_count("crossbar size")?;
                h.xb_rows = size;
                h.xb_cols = size;
            }
            SweepParam::Batches => s.batch_count = as_count("batch count")?,
            SweepParam::Layers => layers = Some(as_count("layer count")?),
        }
        s.validate()?;
        h.validate()?;
        let kp = kernel_speedup_vs_density(&h, s.seq_len, s.d_model, &[s.density], &[h.xb_rows], s.seed)?;
        let report = match layers {
            Some(l) => normalize(&simulate_encoder_stack(&synth_workload(&s)?, l, mode, &h, IdealKnobs::default())?.report)?,
            None => simulate(&s, mode, &h, IdealKnobs::default(), 1)?,
        };
        points.push(SweepRow {
            param,
            value,
            mode: mode.to_string(),
            total_ns: report.total_ns,
            gops: report.gops,
            gops_per_watt: report.gops_per_watt,
            energy_pj: report.energy.total_pj,
            ddmm_cycles: kp[0].ddmm_cycles,
            sddmm_cycles: kp[0].sddmm_cycles,
            sddmm_speedup: kp[0].speedup,
        });
    }
    Ok(Sweep {
        param,
        mode: mode.to_string(),
        seed: spec.seed,
        points,
    })
}

fn kernel_row(hw: &HardwareConfig, name: &str, s: &ScheduleResult) -> KernelRow {
    let e = s.energy(hw);
    let vmm = e.xb + e.adc + e.dac + e.peripheral;
    let write: f64 = s.wave_writes.iter().map(|w| w.energy_pj).sum();
    KernelRow {
        kernel: name.into(),
        cycles: s.cycles,
        latency_ns: s.latency_ns(hw),
        arrays_used: s.arrays_used,
        activations: s.activations,
        effective_macs: s.effective_macs,
        replication_rows: s.replication_rows,
        waves: s.waves as u64,
        vmm_energy_pj: vmm,
        write_energy_pj: write,
        energy_pj: vmm + write,
    }
}

/// Score and output kernels on the first batch's mask. Dense rows use the
/// same operand placements as their sparse counterparts.
pub fn kernel_bench(spec: &WorkloadSpec, hw: &HardwareConfig) -> Result<KernelBench> {
    let w = synth_workload(spec)?;
    let n = spec.seq_len;
    let mut fabric = Fabric::new(hw)?;
    let xt = fabric.allocate("xt", spec.d_model, n, hw.value_bits)?;
    let v = fabric.allocate("v", n, spec.d_v, hw.value_bits)?;
    let mut rows = vec![
        kernel_row(hw, "ddmm_scores", &ddmm_schedule(hw, n, &xt)),
        kernel_row(hw, "sddmm_scores", &sddmm_schedule(hw, &w.mask, &xt)?),
        kernel_row(hw, "ddmm_output", &ddmm_schedule(hw, n, &v)),
    ];
    let mut replicated = spmm_schedule(&mut fabric, &w.mask, spec.d_v)?;
    let dense_v_write = fabric.write_matrix(&v)?;
    // The dense output kernel writes its value operand once.
    rows[2].write_energy_pj = dense_v_write.energy_pj;
    rows[2].energy_pj += dense_v_write.energy_pj;
    replicated.kernel = crate::kernels::KernelKind::Spmm;
    rows.push(kernel_row(hw, "spmm_output", &replicated));
    let mut baseline = kernel_row(hw, "spmm_baseline_output", &spmm_baseline_schedule(hw, &w.mask, &v)?);
    baseline.write_energy_pj = dense_v_write.energy_pj;
    baseline.energy_pj += dense_v_write.energy_pj;
    rows.push(baseline);
    Ok(KernelBench {
        seq_len: n,
        d_model: spec.d_model,
        d_v: spec.d_v,
        density: w.mask.density(),
        mask_nnz: w.mask.nnz(),
        seed: spec.seed,
        kernels: rows,
    })
}

/// Runs one parsed command and renders its outputs without touching disk.
pub fn execute(cmd: &Command) -> Result<Output> {
    match cmd {
        Command::Simulate {
            common,
            workload,
            mode,
            ideal,
            workers,
        } => {
            let hw = load_config(common)?;
            let r = simulate(&workload.spec(), *mode, &hw, knobs(ideal), *workers)?;
            let row = ModeRow {
                mode: r.mode.to_string(),
                total_ns: r.total_ns,
                w4w_ns: r.w4w_ns,
                peak_parallel_arrays: r.peak_parallel_arrays,
                gops: r.gops,
                gops_per_watt: r.gops_per_watt,
                energy_pj: r.energy.total_pj,
                latency_vs_cpsaa: 1.0,
            };
            Ok(Output {
                json: crate::report::emit_report(&r)?,
                csv: Some(to_csv(&[row])?),
            })
        }
        Command::CompareModes { common, workload } => {
            let hw = load_config(common)?;
            let c = compare_modes(&workload.spec(), &hw)?;
            Ok(Output {
                json: to_json(&c)?,
                csv: Some(to_csv(&c.table)?),
            })
        }
        Command::Sweep {
            common,
            workload,
            param,
            values,
            mode,
        } => {
            let hw = load_config(common)?;
            let s = sweep(&workload.spec(), &hw, *param, values, *mode)?;
            Ok(Output {
                json: to_json(&s)?,
                csv: Some(to_csv(&s.points)?),
            })
        }
        Command::KnobStudy { common, workload, mode } => {
            let hw = load_config(common)?;
            let ks: KnobStudy = knob_study(&synth_workload(&workload.spec())?, *mode, &hw)?;
            let mut rows = vec![ks.baseline.clone()];
            rows.extend(ks.knobs.iter().cloned());
            Ok(Output {
                json: to_json(&ks)?,
                csv: Some(to_csv(&rows)?),
            })
        }
        Command::KernelBench { common, workload } => {
            let hw = load_config(common)?;
            let kb = kernel_bench(&workload.spec(), &hw)?;
            Ok(Output {
                json: to_json(&kb)?,
                csv: Some(to_csv(&kb.kernels)?),
            })
        }
        Command::EncoderStack {
            common,
            workload,
            layers,
            mode,
        } => {
            let hw = load_config(common)?;
            let out = simulate_encoder_stack(&synth_workload(&workload.spec())?, *layers, *mode, &hw, IdealKnobs::default())?;
            let r = normalize(&out.report)?;
            #[derive(Serialize)]
            struct LayerRow {
                layers: usize,
                total_ns: f64,
                gops: f64,
                gops_per_watt: f64,
                energy_pj: f64,
            }
            let row = LayerRow {
                layers: *layers,
                total_ns: r.total_ns,
                gops: r.gops,
                gops_per_watt: r.gops_per_watt,
                energy_pj: r.energy.total_pj,
            };
            Ok(Output {
                json: crate::report::emit_report(&r)?,
                csv: Some(to_csv(&[row])?),
            })
        }
        Command::DumpConfig { common } => Ok(Output {
            json: load_config(common)?.dump(),
            csv: None,
        }),
    }
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Simulate { common, .. }
        | Command::CompareModes { common, .. }
        | Command::Sweep { common, .. }
        | Command::KnobStudy { common, .. }
        | Command::KernelBench { common, .. }
        | Command::EncoderStack { common, .. }
        | Command::DumpConfig { common } => common,
    }
}

/// Executes and writes outputs; nothing is written unless the run succeeds.
pub fn run(cli: &Cli) -> Result<()> {
    let out = execute(&cli.command)?;
    let c = common(&cli.command);
    match &c.out {
        Some(p) => write_atomic(p, &out.json)?,
        None => print!("{}", out.json),
    }
    if let (Some(p), Some(csv)) = (&c.csv, &out.csv) {
        write_atomic(p, csv)?;
    }
    Ok(())
}

/// Process entry point; returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
