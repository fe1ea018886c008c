//! Reference models shared by the integration tests. Nothing here calls the
//! simulator's own timing or numeric helpers.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbar_attn::config::{ColumnPlacement, HardwareConfig};
use xbar_attn::crossbar::{Fabric, Placement};
use xbar_attn::kernels::{ddmm_schedule, sddmm_schedule, spmm_baseline_schedule};
use xbar_attn::mask::MaskMatrix;
use xbar_attn::tensor::FixedPointMatrix;

/// Small fabric: one tile, `ags` write-enable groups of `apg` arrays.
pub fn small_hw(apg: usize, adc: usize, ags: usize) -> HardwareConfig {
    let mut h = HardwareConfig::default();
    h.tiles = 1;
    h.roa_ags_per_tile = 1;
    h.wea_ags_per_tile = ags;
    h.arrays_per_ag = apg;
    h.adc_per_ag = adc;
    h
}

/// Cycle-by-cycle replay of array queues. Each cycle an array runs at most
/// one vector and an array group converts at most `adc` outputs; the group
/// serves the arrays with the most work left first.
pub fn replay(hw: &HardwareConfig, queues: &BTreeMap<(usize, usize), u64>) -> u64 {
    let mut by_ag: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (&(ag, _), &q) in queues {
        by_ag.entry(ag).or_default().push(q);
    }
    let mut worst = 0;
    for (_, mut left) in by_ag {
        let mut cycles = 0u64;
        while left.iter().any(|&q| q > 0) {
            left.sort_unstable_by(|a, b| b.cmp(a));
            for q in left.iter_mut().take(hw.adc_per_ag) {
                if *q > 0 {
                    *q -= 1;
                }
            }
            cycles += 1;
        }
        worst = worst.max(cycles);
    }
    worst * hw.bit_serial_factor as u64
}

/// Vectors each array of `xt` receives when only masked scores are computed:
/// one per row that has a nonzero in the array's column group.
pub fn sddmm_queues(hw: &HardwareConfig, mask: &MaskMatrix, xt: &Placement) -> BTreeMap<(usize, usize), u64> {
    let mut q = BTreeMap::new();
    for r in 0..mask.rows() {
        let mut groups: Vec<usize> = (0..mask.cols()).filter(|&c| mask.get(r, c)).map(|c| c / xt.numbers_per_row).collect();
        groups.dedup();
        for g in groups {
            for k in 0..xt.chain {
                let a = xt.arrays[g * xt.chain + k];
                *q.entry((a.global_ag(hw), a.tile * 100_000 + a.ag * 1000 + a.array)).or_insert(0) += 1;
            }
        }
    }
    q
}

pub fn dense_queues(hw: &HardwareConfig, m: u64, p: &Placement) -> BTreeMap<(usize, usize), u64> {
    p.arrays
        .iter()
        .map(|a| ((a.global_ag(hw), a.tile * 100_000 + a.ag * 1000 + a.array), m))
        .collect()
}

/// Mask with bit `i` of `bits` at row-major position `i`.
pub fn mask_from_bits(rows: usize, cols: usize, bits: u64) -> MaskMatrix {
    let mut m = MaskMatrix::zeros(rows, cols);
    for i in 0..rows * cols {
        if bits >> i & 1 == 1 {
            m.set(i / cols, i % cols, true);
        }
    }
    m
}

pub struct ReplayTally {
    pub cases: u64,
    pub mismatches: Vec<String>,
}

/// Fabrics of at most three array groups used for the replay comparison:
/// `(label, config, xt rows)`.
pub fn replay_setups(cols: usize) -> Vec<(String, HardwareConfig, usize)> {
    let mut out = Vec::new();
    for (apg, adc, k) in [(2, 1, 8usize), (3, 1, 8), (2, 2, 8), (4, 2, 40), (6, 4, 40)] {
        for policy in [ColumnPlacement::Packed, ColumnPlacement::Interleaved] {
            let chain = k.div_ceil(32);
            let arrays = chain * cols;
            let ags = arrays.div_ceil(apg);
            if ags > 3 {
                continue;
            }
            let mut h = small_hw(apg, adc, ags);
            h.column_placement = policy;
            out.push((format!("apg{apg}/adc{adc}/k{k}/{policy}"), h, k));
        }
    }
    out
}

/// Compares schedule cycle counts against the replay for one mask.
pub fn check_mask(mask: &MaskMatrix, tally: &mut ReplayTally) {
    let n = mask.rows();
    for (label, hw, k) in replay_setups(mask.cols()) {
        let mut fabric = Fabric::new(&hw).expect("fabric");
        let xt = fabric.allocate("xt", k, mask.cols(), hw.value_bits).expect("fits");
        let got = sddmm_schedule(&hw, mask, &xt).expect("schedule").cycles;
        let want = replay(&hw, &sddmm_queues(&hw, mask, &xt));
        tally.cases += 1;
        if got != want && tally.mismatches.len() < 10 {
            tally.mismatches.push(format!("sddmm {label} {n}x{} mask {:?}: {got} vs {want}", mask.cols(), mask));
        }
        let got = ddmm_schedule(&hw, n, &xt).cycles;
        let want = replay(&hw, &dense_queues(&hw, n as u64, &xt));
        tally.cases += 1;
        if got != want && tally.mismatches.len() < 10 {
            tally.mismatches.push(format!("ddmm {label} {n}x{}: {got} vs {want}", mask.cols()));
        }
    }
    // Value-stationary output kernel: the value matrix is `n × 1`.
    let hw = small_hw(2, 1, 3);
    let mut fabric = Fabric::new(&hw).expect("fabric");
    if let Ok(v) = fabric.allocate("v", n, 1, hw.value_bits) {
        if mask.cols() == n {
            let got = spmm_baseline_schedule(&hw, mask, &v).expect("schedule").cycles;
            let want = replay(&hw, &dense_queues(&hw, n as u64, &v));
            tally.cases += 1;
            if got != want && tally.mismatches.len() < 10 {
                tally.mismatches.push(format!("spmm_baseline {n}x{n}: {got} vs {want}"));
            }
        }
    }
}

/// Every mask with at most four rows and columns, plus `samples` random masks
/// of each of 5×5 and 6×6.
pub fn replay_sweep(samples: usize) -> ReplayTally {
    let mut tally = ReplayTally {
        cases: 0,
        mismatches: Vec::new(),
    };
    for rows in 1..=4 {
        for cols in 1..=4 {
            for bits in 0..(1u64 << (rows * cols)) {
                check_mask(&mask_from_bits(rows, cols, bits), &mut tally);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e57);
    for size in [5usize, 6] {
        for _ in 0..samples {
            let bits = rng.gen::<u64>() & ((1u64 << (size * size)) - 1);
            check_mask(&mask_from_bits(size, size, bits), &mut tally);
        }
    }
    tally
}

/// Plain `f64` attention with hard masking: masked-out scores are dropped
/// from the softmax, fully masked rows yield zeros.
pub fn attention_f64(
    x: &FixedPointMatrix,
    w_q: &FixedPointMatrix,
    w_k: &FixedPointMatrix,
    w_v: &FixedPointMatrix,
    mask: Option<&MaskMatrix>,
) -> Vec<f64> {
    let mm = |a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize| -> Vec<f64> {
        let mut o = vec![0.0; ar * bc];
        for i in 0..ar {
            for k in 0..ac {
                let v = a[i * ac + k];
                for j in 0..bc {
                    o[i * bc + j] += v * b[k * bc + j];
                }
            }
        }
        o
    };
    let (n, dm, d, dv) = (x.rows(), x.cols(), w_q.cols(), w_v.cols());
    let xf = x.to_f64();
    let q = mm(&xf, n, dm, &w_q.to_f64(), d);
    let k = mm(&xf, n, dm, &w_k.to_f64(), d);
    let v = mm(&xf, n, dm, &w_v.to_f64(), dv);
    let scale = 1.0 / (d as f64).sqrt();
    let mut z = vec![0.0; n * dv];
    for i in 0..n {
        let keep = |j: usize| mask.is_none_or(|m| m.get(i, j));
        let s: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>() * scale)
            .collect();
        let max = (0..n).filter(|&j| keep(j)).map(|j| s[j]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let e: Vec<f64> = (0..n).map(|j| if keep(j) { (s[j] - max).exp() } else { 0.0 }).collect();
        let sum: f64 = e.iter().sum();
        for j in 0..n {
            for t in 0..dv {
                z[i * dv + t] += e[j] / sum * v[j * dv + t];
            }
        }
    }
    z
}

/// Largest elementwise error relative to the largest reference magnitude.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

/// Random workload with every dimension at most 16.
pub fn random_small_workload(seed: u64) -> xbar_attn::workload::Workload {
    use xbar_attn::workload::{random_matrix, LayerWeights, MaskKind, Workload};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=16);
    let dm = rng.gen_range(1..=16);
    let d = rng.gen_range(1..=8);
    let dv = rng.gen_range(1..=8);
    let density = rng.gen_range(0.05..=1.0);
    let s = seed.wrapping_mul(7);
    let weights = LayerWeights::new(
        random_matrix(dm, d, s + 1).unwrap(),
        random_matrix(dm, d, s + 2).unwrap(),
        random_matrix(dm, dv, s + 3).unwrap(),
    )
    .unwrap();
    Workload {
        x: random_matrix(n, dm, s + 4).unwrap(),
        weights,
        mask: MaskMatrix::random(n, n, density, s + 5),
        mask_kind: MaskKind::Random,
        seed,
    }
}

const SMALL: &[&str] = &["--seq-len", "64", "--d-model", "128", "--d", "32", "--d-v", "32", "--density", "0.2", "--seed", "7"];

/// Golden file name and arguments for every subcommand.
pub fn golden_cases() -> Vec<(&'static str, Vec<&'static str>)> {
    let with = |cmd: &'static str, extra: &[&'static str]| {
        let mut v = vec![cmd];
        v.extend_from_slice(SMALL);
        v.extend_from_slice(extra);
        v
    };
    vec![
        ("simulate_default.json", vec!["simulate"]),
        ("simulate_small.json", with("simulate", &["--mode", "cpsaa", "--batches", "3"])),
        ("simulate_ideal.json", with("simulate", &["--mode", "rebert", "--ideal", "infinite-adc", "--ideal", "zero-write"])),
        ("compare_modes.json", with("compare-modes", &[])),
        ("sweep_density.json", with("sweep", &["--param", "density", "--values", "0.05,0.1,0.2,0.5,1.0"])),
        ("sweep_xb_size.json", with("sweep", &["--param", "xb-size", "--values", "32,64,128"])),
        ("sweep_layers.json", with("sweep", &["--param", "layers", "--values", "2,4"])),
        ("knob_study.json", with("knob-study", &[])),
        ("kernel_bench.json", with("kernel-bench", &[])),
        ("encoder_stack.json", with("encoder-stack", &["--layers", "3"])),
        ("dump_config.txt", vec!["dump-config", "--set", "adc_per_ag=2"]),
    ]
}

pub fn golden_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Runs the CLI in-process and returns its JSON output.
pub fn run_cli(args: &[&str]) -> String {
    use clap::Parser;
    let mut full = vec!["xbar-attn"];
    full.extend_from_slice(args);
    let cli = xbar_attn::cli::Cli::try_parse_from(full).expect("valid arguments");
    xbar_attn::cli::execute(&cli.command).expect("command runs").json
}

/// Golden names whose output differs from the stored file.
pub fn golden_mismatches() -> Vec<String> {
    let mut bad = Vec::new();
    for (name, args) in golden_cases() {
        let path = golden_dir().join(name);
        let got = run_cli(&args);
        match std::fs::read_to_string(&path) {
            Ok(want) if want == got => {}
            Ok(_) => bad.push(format!("{name}: output differs")),
            Err(e) => bad.push(format!("{name}: {e}")),
        }
    }
    bad
}

/// Largest elementwise relative error; exact zeros must match exactly.
pub fn max_elementwise_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(a, b)| {
            if *b == 0.0 {
                if *a == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (a - b).abs() / b.abs()
            }
        })
        .fold(0.0, f64::max)
}
