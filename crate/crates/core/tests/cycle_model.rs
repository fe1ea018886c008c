mod common;

use common::{replay, replay_sweep, small_hw};
use proptest::prelude::*;
use std::collections::BTreeMap;
use xbar_attn::crossbar::vmm_cycles;

#[test]
fn schedules_match_cycle_replay() {
    let t = replay_sweep(500);
    assert!(t.mismatches.is_empty(), "{:#?}", t.mismatches);
    assert!(t.cases > 100_000);
}

proptest! {
    #[test]
    fn closed_form_matches_replay(
        qs in prop::collection::vec((0usize..4, 0u64..40), 0..24),
        adc in 1usize..5,
        bsf in 1usize..4,
    ) {
        let mut hw = small_hw(6, adc, 4);
        hw.bit_serial_factor = bsf;
        let map: BTreeMap<(usize, usize), u64> =
            qs.iter().enumerate().map(|(i, &(ag, q))| ((ag, i), q)).collect();
        prop_assert_eq!(vmm_cycles(&hw, qs.iter().copied(), false), replay(&hw, &map));
    }
}
