use std::f64::consts::PI;

use loopmem::counting::{run_scan, sample_counts, Acquisition, Sampling, ScanPlan};
use loopmem::engine::{efficiency, MemoryConfig, TransmissionParams};
use loopmem::polar::PureState;
use proptest::prelude::*;

fn acq(rate: f64, sampling: Sampling) -> Acquisition {
    Acquisition {
        pair_rate_hz: rate,
        detection_eff: 1.0,
        acquisition_s: 60.0,
        background_rate_hz: 0.0,
        sampling,
    }
}

fn short_line() -> MemoryConfig {
    let mut cfg = MemoryConfig::ideal(36.5);
    cfg.calibrate_couplers(&TransmissionParams::PAPER_SHORT).unwrap();
    cfg
}

fn angles() -> Vec<f64> {
    (0..13).map(|i| i as f64 * PI / 12.0).collect()
}

#[test]
fn malus_scan_follows_cos_squared() {
    let cfg = MemoryConfig::ideal(36.5);
    let plan = ScanPlan::Malus { angles: angles() };
    let exact = run_scan(&cfg, &PureState::H, 3, &plan, &acq(1000.0, Sampling::Noiseless)).unwrap();
    for r in &exact.records {
        assert!((r.counts - 60_000.0 * r.setting_value.cos().powi(2)).abs() < 1e-6);
    }
    let sampled = run_scan(
        &cfg,
        &PureState::H,
        3,
        &plan,
        &acq(1000.0, Sampling::Poisson { seed: 4 }),
    )
    .unwrap();
    for (s, e) in sampled.records.iter().zip(&exact.records) {
        assert_eq!(s.counts.fract(), 0.0);
        assert!((s.counts - e.counts).abs() <= 5.0 * e.counts.sqrt().max(1.0));
    }
    assert_eq!(sampled.seed, Some(4));
}

#[test]
fn decay_scan_is_log_linear_with_the_loop_transmission() {
    let cfg = short_line();
    let plan = ScanPlan::Decay {
        n_values: (1..=8).collect(),
        projector: ("H".into(), PureState::H),
    };
    let d = run_scan(&cfg, &PureState::H, 0, &plan, &acq(1000.0, Sampling::Noiseless)).unwrap();
    assert_eq!(d.records.len(), 8);
    for pair in d.records.windows(2) {
        let slope = (pair[1].counts / pair[0].counts).ln();
        assert!((slope - 0.5f64.ln()).abs() < 1e-9);
    }
    for r in &d.records {
        assert_eq!(r.setting_value, r.n_cycles as f64);
        let expected = 60_000.0 * efficiency(&TransmissionParams::PAPER_SHORT, r.n_cycles);
        assert!((r.counts - expected).abs() < 1e-6 * expected);
    }
}

#[test]
fn noiseless_tomography_of_r() {
    let cfg = MemoryConfig::ideal(36.5);
    let projectors = vec![
        ("H".into(), PureState::H),
        ("V".into(), PureState::V),
        ("D".into(), PureState::D),
        ("R".into(), PureState::R),
    ];
    let d = run_scan(
        &cfg,
        &PureState::R,
        2,
        &ScanPlan::Tomography { projectors },
        &acq(100.0, Sampling::Noiseless),
    )
    .unwrap();
    let n = 6000.0;
    let counts: Vec<f64> = d.counts();
    for (c, e) in counts.iter().zip([n / 2.0, n / 2.0, n / 2.0, n]) {
        assert!((c - e).abs() < 1e-6, "{counts:?}");
    }
}

#[test]
fn datasets_are_bit_identical_per_seed() {
    let cfg = short_line();
    let plan = ScanPlan::Malus { angles: angles() };
    let a = run_scan(
        &cfg,
        &PureState::D,
        2,
        &plan,
        &acq(500.0, Sampling::Poisson { seed: 8 }),
    )
    .unwrap();
    let b = run_scan(
        &cfg,
        &PureState::D,
        2,
        &plan,
        &acq(500.0, Sampling::Poisson { seed: 8 }),
    )
    .unwrap();
    let c = run_scan(
        &cfg,
        &PureState::D,
        2,
        &plan,
        &acq(500.0, Sampling::Poisson { seed: 9 }),
    )
    .unwrap();
    let csv = |d: &loopmem::counting::ScanDataset| {
        let mut out = Vec::new();
        d.write_csv(&mut out).unwrap();
        out
    };
    assert_eq!(csv(&a), csv(&b));
    assert_ne!(csv(&a), csv(&c));
}

#[test]
fn flat_table_has_the_documented_columns() {
    let d = run_scan(
        &MemoryConfig::ideal(36.5),
        &PureState::H,
        1,
        &ScanPlan::Malus { angles: angles() },
        &acq(10.0, Sampling::Poisson { seed: 1 }),
    )
    .unwrap();
    let mut out = Vec::new();
    d.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "setting_label,setting_value,counts,acquisition_s,N,seed"
    );
    assert_eq!(text.lines().count(), 14);
    let json = d.to_json();
    assert_eq!(json.as_array().unwrap().len(), 13);
    assert_eq!(json[0]["seed"], 1);
}

#[test]
fn background_adds_a_flat_floor() {
    let mut a = acq(1000.0, Sampling::Noiseless);
    a.background_rate_hz = 2.0;
    let d = run_scan(
        &MemoryConfig::ideal(36.5),
        &PureState::H,
        1,
        &ScanPlan::Malus { angles: angles() },
        &a,
    )
    .unwrap();
    let min = d.counts().into_iter().fold(f64::INFINITY, f64::min);
    assert!((min - 120.0).abs() < 1e-6);
}

#[test]
fn empty_plans_and_bad_acquisitions_are_rejected() {
    let cfg = MemoryConfig::ideal(36.5);
    assert!(run_scan(
        &cfg,
        &PureState::H,
        1,
        &ScanPlan::Malus { angles: vec![] },
        &acq(1.0, Sampling::Noiseless)
    )
    .is_err());
    let mut bad = acq(1.0, Sampling::Noiseless);
    bad.acquisition_s = -1.0;
    assert!(run_scan(&cfg, &PureState::H, 1, &ScanPlan::Malus { angles: angles() }, &bad).is_err());
}

#[test]
fn unschedulable_configs_propagate() {
    let mut cfg = MemoryConfig::ideal(36.5);
    cfg.rise_time_ns = 40.0;
    let plan = ScanPlan::Decay {
        n_values: vec![1, 2, 3],
        projector: ("H".into(), PureState::H),
    };
    assert!(run_scan(&cfg, &PureState::H, 0, &plan, &acq(1.0, Sampling::Noiseless)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn large_means_converge(mean in 1e5f64..1e7, seed in any::<u64>()) {
        let k = sample_counts(mean, 1.0, seed) as f64;
        prop_assert!((k - mean).abs() / mean < 0.01);
    }

    #[test]
    fn sampling_is_deterministic(rate in 0.0f64..1e4, t in 0.1f64..100.0, seed in any::<u64>()) {
        prop_assert_eq!(sample_counts(rate, t, seed), sample_counts(rate, t, seed));
    }
}
