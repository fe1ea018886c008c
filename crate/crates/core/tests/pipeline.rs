mod common;

use proptest::prelude::*;
use xbar_attn::config::HardwareConfig;
use xbar_attn::crossbar::transfer_cost;
use xbar_attn::mask::MaskMatrix;
use xbar_attn::pipeline::{
    batch_driver, simulate_encoder_stack, simulate_layer, simulate_shape, validate_timeline, CalculationMode,
    IdealKnobs, LayerShape,
};
use xbar_attn::report::{emit_report, parse_report};
use xbar_attn::workload::{synth_workload, WorkloadSpec};

fn hw() -> HardwareConfig {
    let mut h = HardwareConfig::default();
    h.tiles = 8;
    h
}

fn spec(n: usize, density: f64, seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        seq_len: n,
        d_model: 64,
        d: 16,
        d_v: 16,
        density,
        seed,
        ..Default::default()
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn timelines_are_legal(n in 1usize..48, density in 0.02f64..1.0, seed in 0u64..1000, m in 0usize..4, k in 0u8..16) {
        let knobs = IdealKnobs {
            zero_write: k & 1 != 0,
            zero_transfer: k & 2 != 0,
            infinite_adc: k & 4 != 0,
            zero_ctrl: k & 8 != 0,
        };
        let w = synth_workload(&spec(n, density, seed)).unwrap();
        let out = simulate_layer(&w, CalculationMode::ALL[m], &hw(), knobs).unwrap();
        validate_timeline(&out.timeline).unwrap();
        let r = &out.report;
        prop_assert!(r.w4w_ns >= 0.0 && r.w4w_ns <= r.total_ns);
        prop_assert!(out.ledger.is_valid());
        prop_assert!(r.total_ns > 0.0);
        prop_assert!(r.gops > 0.0 && r.gops_per_watt > 0.0);
    }

    #[test]
    fn reports_round_trip(n in 1usize..32, seed in 0u64..1000) {
        let w = synth_workload(&spec(n, 0.3, seed)).unwrap();
        let out = simulate_layer(&w, CalculationMode::Cpsaa, &hw(), IdealKnobs::default()).unwrap();
        let text = emit_report(&out.report).unwrap();
        let parsed = parse_report(&text).unwrap();
        prop_assert_eq!(&emit_report(&parsed).unwrap(), &text);
        let e = parsed.energy;
        let sum = e.vmm + e.write + e.adc + e.dac + e.transfer + e.scheduler + e.peripheral;
        prop_assert!(rel(e.total_pj, sum) < 1e-5);
    }

    #[test]
    fn ideal_knobs_never_slow_down(n in 4usize..40, seed in 0u64..100, m in 0usize..4, knob in 0usize..4) {
        let w = synth_workload(&spec(n, 0.2, seed)).unwrap();
        let mode = CalculationMode::ALL[m];
        let base = simulate_layer(&w, mode, &hw(), IdealKnobs::default()).unwrap().report;
        let k = IdealKnobs::single(IdealKnobs::NAMES[knob]).unwrap();
        let r = simulate_layer(&w, mode, &hw(), k).unwrap().report;
        prop_assert!(r.total_ns <= base.total_ns + 1e-9);
    }
}

#[test]
fn dense_mask_reduces_sparse_mode_to_dense_dataflow() {
    let w = synth_workload(&spec(40, 1.0, 3)).unwrap();
    assert!(w.mask.is_all_ones());
    let a = simulate_layer(&w, CalculationMode::Cpsaa, &hw(), IdealKnobs::default()).unwrap().report;
    let b = simulate_layer(&w, CalculationMode::Cpdaa, &hw(), IdealKnobs::default()).unwrap().report;
    assert_eq!(a.total_ns, b.total_ns);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.energy, b.energy);
    assert_eq!(a.kernel_stats, b.kernel_stats);
}

#[test]
fn batches_add_up() {
    let h = hw();
    let mut s = spec(32, 0.2, 9);
    let one = batch_driver(&s, CalculationMode::Cpsaa, &h, IdealKnobs::default(), 1).unwrap();
    s.batch_count = 4;
    let four = batch_driver(&s, CalculationMode::Cpsaa, &h, IdealKnobs::default(), 1).unwrap();
    let gap = transfer_cost(&h, 32 * 64 * 32);
    // Every batch draws its own mask, so compare against the per-batch sum.
    let mut total = 0.0;
    let mut energy = 0.0;
    for b in 0..4 {
        let w = xbar_attn::workload::synth_batch(&s, &xbar_attn::workload::synth_weights(&s).unwrap(), b).unwrap();
        let r = simulate_layer(&w, CalculationMode::Cpsaa, &h, IdealKnobs::default()).unwrap();
        total += r.report.total_ns;
        energy += r.ledger.total();
    }
    assert!(rel(four.report.total_ns, total + 3.0 * gap.latency_ns) < 1e-12);
    assert!(rel(four.ledger.total(), energy + 3.0 * gap.energy_pj) < 1e-12);
    assert!(four.report.total_ns > 3.0 * one.report.total_ns);
}

#[test]
fn workers_do_not_change_results() {
    let mut s = spec(24, 0.3, 5);
    s.batch_count = 7;
    let base = batch_driver(&s, CalculationMode::Cpsaa, &hw(), IdealKnobs::default(), 1).unwrap();
    for workers in [2, 3, 8] {
        let par = batch_driver(&s, CalculationMode::Cpsaa, &hw(), IdealKnobs::default(), workers).unwrap();
        assert_eq!(par, base);
    }
}

#[test]
fn encoder_energy_is_linear_in_layers() {
    let w = synth_workload(&spec(32, 0.2, 1)).unwrap();
    let one = simulate_encoder_stack(&w, 1, CalculationMode::Cpsaa, &hw(), IdealKnobs::default()).unwrap();
    for layers in [2usize, 5, 12] {
        let r = simulate_encoder_stack(&w, layers, CalculationMode::Cpsaa, &hw(), IdealKnobs::default()).unwrap();
        assert!(rel(r.ledger.total(), layers as f64 * one.ledger.total()) < 0.01);
        assert!(rel(r.report.total_ns, layers as f64 * one.report.total_ns) < 1e-9);
    }
}

#[test]
fn empty_workload_reports_zeros() {
    let out = simulate_shape(
        LayerShape { n: 0, d_model: 64, d: 16, d_v: 16 },
        &MaskMatrix::zeros(0, 0),
        CalculationMode::Cpsaa,
        &hw(),
        IdealKnobs::default(),
    )
    .unwrap();
    let text = emit_report(&out.report).unwrap();
    let r = parse_report(&text).unwrap();
    assert_eq!(r.total_ns, 0.0);
    assert_eq!(r.energy.total_pj, 0.0);
    assert!(r.steps.is_empty());
}

#[test]
fn capacity_errors_surface() {
    let mut h = hw();
    h.tiles = 1;
    let w = synth_workload(&WorkloadSpec::default()).unwrap();
    let err = simulate_layer(&w, CalculationMode::Cpsaa, &h, IdealKnobs::default()).unwrap_err();
    assert!(matches!(err, xbar_attn::error::SimError::Capacity { .. }), "{err}");
}

#[test]
fn mismatched_mask_is_rejected() {
    let r = simulate_shape(
        LayerShape { n: 8, d_model: 16, d: 4, d_v: 4 },
        &MaskMatrix::ones(7, 7),
        CalculationMode::Cpsaa,
        &hw(),
        IdealKnobs::default(),
    );
    assert!(r.is_err());
}
