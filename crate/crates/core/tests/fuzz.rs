// SPDX-License-Identifier: Apache-2.0

use cove::scenario::{fuzz, FuzzOptions};

#[test]
fn same_seed_same_report() {
    let a = fuzz(&FuzzOptions::new(11, 3_000));
    let b = fuzz(&FuzzOptions::new(11, 3_000));
    assert_eq!(a.to_text(), b.to_text());
    assert!(a.passed(), "{}", a.to_text());
    let c = fuzz(&FuzzOptions::new(12, 3_000));
    assert_ne!(a.to_text(), c.to_text());
}

#[test]
fn reaches_deep_states() {
    let r = fuzz(&FuzzOptions::new(5, 10_000));
    assert!(r.passed(), "{}", r.to_text());
    assert!(r.tvms_finalized > 10, "{}", r.to_text());
    assert!(r.demand_faults > 10, "{}", r.to_text());
    for op in [
        "convert",
        "tvm_create",
        "add_measured_pages",
        "create_vcpu",
        "finalize",
        "run",
        "destroy",
        "reclaim",
    ] {
        let (ok, _) = r.op_stats.get(op).copied().unwrap_or_default();
        assert!(ok > 0, "{op} never succeeded:\n{}", r.to_text());
    }
}

#[test]
fn bias_extremes() {
    for bias in [0, 100] {
        let mut opts = FuzzOptions::new(3, 4_000);
        opts.illegal_bias = bias;
        let r = fuzz(&opts);
        assert!(r.passed(), "bias {bias}:\n{}", r.to_text());
        if bias == 0 {
            assert_eq!(r.illegal_calls, 0);
        } else {
            assert_eq!(r.illegal_calls, r.ops_run);
        }
    }
}

#[test]
fn injected_divergence_is_detected_where_it_happens() {
    for at in [0, 17, 500] {
        let mut opts = FuzzOptions::new(8, 2_000);
        opts.diverge_at = Some(at);
        let r = fuzz(&opts);
        assert_eq!(r.first_violation(), Some(at), "{}", r.to_text());
        assert_eq!(r.ops_run, at + 1);
    }
}
