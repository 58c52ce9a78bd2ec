use loopmem::engine::{
    derive_transmission_params, efficiency, simulate_storage, MemoryConfig, PhaseDrift, StorageOutcome,
};
use loopmem::optics::{ComponentKind, ComponentSpec, CouplerPath, Transmission, Zone};
use loopmem::polar::{fidelity, PureState};
use proptest::prelude::*;

const STATES: [PureState; 3] = [PureState::H, PureState::D, PureState::R];

/// Hand-written Eq. 1 oracle: segment products straight from the inventory.
fn oracle_eta(cfg: &MemoryConfig, n: usize) -> f64 {
    let t = |c: &ComponentSpec| {
        let base = (c.transmission.h + c.transmission.v) / 2.0;
        if c.kind == ComponentKind::FiberSegment {
            base * 10f64.powf(-c.atten_db_per_km * 2.0 * c.length_m / 1000.0 / 10.0)
        } else {
            base
        }
    };
    let mut circ = 1.0;
    let mut switch = 1.0;
    let mut delay = 1.0;
    let mut kappa = std::collections::HashMap::new();
    for c in &cfg.components {
        match (c.kind, c.zone) {
            (ComponentKind::CirculatorArm, _) | (_, Some(Zone::Circulator)) => circ *= t(c),
            (ComponentKind::PockelsCell, _) | (_, Some(Zone::Switch)) => switch *= t(c),
            (ComponentKind::FiberSegment | ComponentKind::Retroreflector | ComponentKind::Fpc, _) => delay *= t(c),
            (ComponentKind::Coupler, _) => {
                kappa.insert(c.path.unwrap(), t(c));
            }
            _ => unreachable!(),
        }
    }
    if n == 0 {
        kappa[&CouplerPath::C1C3] * circ * circ * switch
    } else {
        let g12 = kappa[&CouplerPath::C1C2] * circ * switch * delay;
        let g22 = kappa[&CouplerPath::C2C2] * switch * delay;
        let g23 = kappa[&CouplerPath::C2C3] * switch * circ;
        g12 * g22.powi(n as i32 - 1) * g23
    }
}

fn with_extra_optics(mut cfg: MemoryConfig) -> MemoryConfig {
    cfg.components.extend([
        ComponentSpec::new("circ-pbs", ComponentKind::Pbs).with_zone(Zone::Circulator),
        ComponentSpec::new("sw-pbs", ComponentKind::Pbs).with_zone(Zone::Switch),
        ComponentSpec::new("sw-mirror", ComponentKind::Mirror).with_zone(Zone::Switch),
        ComponentSpec::fiber("connectors", 0.0, 0.0),
    ]);
    cfg
}

fn lossy_config() -> impl Strategy<Value = MemoryConfig> {
    (
        prop::collection::vec(0.3f64..=1.0, 13),
        0.0f64..200.0,
        prop_oneof![Just(36.5), Just(526.0), 30.0f64..600.0],
    )
        .prop_map(|(t, fiber_m, delta_tau)| {
            let mut cfg = with_extra_optics(MemoryConfig::ideal(delta_tau));
            for (c, ti) in cfg.components.iter_mut().zip(&t) {
                c.transmission = Transmission::uniform(*ti);
                if c.kind == ComponentKind::FiberSegment && c.label == "spool" {
                    c.length_m = fiber_m;
                    c.atten_db_per_km = 4.0;
                }
            }
            cfg
        })
}

fn accounted(o: &StorageOutcome) -> f64 {
    o.exits.iter().map(|e| e.state.trace()).sum::<f64>()
        + o.ejections.iter().map(|e| e.weight).sum::<f64>()
        + o.absorbed
        + o.residual
}

fn set(cfg: &mut MemoryConfig, kind: ComponentKind, f: impl Fn(&mut ComponentSpec)) {
    cfg.components.iter_mut().filter(|c| c.kind == kind).for_each(f);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn loss_only_configs_follow_the_closed_form(cfg in lossy_config(), state in 0usize..3) {
        let params = derive_transmission_params(&cfg).unwrap();
        for n in 0..=8 {
            let w = simulate_storage(&cfg, &STATES[state], n).unwrap().retrieved_weight();
            prop_assert!((w - efficiency(&params, n)).abs() < 1e-9, "N={} {} vs {}", n, w, efficiency(&params, n));
            prop_assert!((w - oracle_eta(&cfg, n)).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_is_conserved(
        cfg in lossy_config(),
        pc_eps in -0.4f64..0.4,
        fpc_eps in -0.4f64..0.4,
        phi in 0.0f64..std::f64::consts::TAU,
        psi in 0.0f64..std::f64::consts::TAU,
        t_v in 0.3f64..=1.0,
        n in 0usize..=6,
        x_dl in any::<bool>(),
    ) {
        let mut cfg = cfg;
        cfg.x_dl_enabled = x_dl;
        set(&mut cfg, ComponentKind::PockelsCell, |c| c.rotation_error = pc_eps);
        set(&mut cfg, ComponentKind::Fpc, |c| c.rotation_error = fpc_eps);
        set(&mut cfg, ComponentKind::FiberSegment, |c| c.static_phase = phi);
        set(&mut cfg, ComponentKind::CirculatorArm, |c| {
            c.static_phase = psi;
            c.transmission.v = t_v;
        });
        for s in STATES {
            let o = simulate_storage(&cfg, &s, n).unwrap();
            prop_assert!((accounted(&o) - 1.0).abs() < 1e-9, "accounted {}", accounted(&o));
            for e in &o.exits {
                let k = ((e.time_ns - cfg.exit_time_ns(0)) / cfg.delta_tau_ns).round();
                prop_assert!(k >= 0.0);
                prop_assert!((e.time_ns - cfg.exit_time_ns(k as usize)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn delay_line_phase_cancels(phi in 0.0f64..std::f64::consts::TAU, n in 1usize..=8, state in 0usize..3) {
        let mut cfg = MemoryConfig::ideal(36.5);
        set(&mut cfg, ComponentKind::FiberSegment, |c| c.static_phase = phi);
        let o = simulate_storage(&cfg, &STATES[state], n).unwrap();
        let f = fidelity(&o.retrieved_conditional().unwrap(), &STATES[state]).unwrap();
        prop_assert!(f > 1.0 - 1e-9);
        prop_assert!((o.retrieved_weight() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn circulator_arm_drift_is_a_global_phase(psi in 0.0f64..std::f64::consts::TAU, n in 0usize..=6, state in 0usize..3) {
        let reference = simulate_storage(&MemoryConfig::ideal(36.5), &STATES[state], n).unwrap();
        let mut cfg = MemoryConfig::ideal(36.5);
        set(&mut cfg, ComponentKind::CirculatorArm, |c| c.static_phase = psi);
        let drifted = simulate_storage(&cfg, &STATES[state], n).unwrap();
        let a = reference.retrieved.unwrap().state;
        let b = drifted.retrieved.unwrap().state;
        prop_assert!(a.approx_eq(&b, 1e-9));
    }

    #[test]
    fn bit_flip_errors_become_loss(e1 in 0.001f64..0.6, e2 in 0.001f64..0.6, n in 2usize..=5, state in 0usize..3) {
        prop_assume!((e1 - e2).abs() > 1e-3);
        let run = |eps: f64| {
            let mut cfg = MemoryConfig::ideal(36.5);
            set(&mut cfg, ComponentKind::PockelsCell, |c| c.rotation_error = eps);
            simulate_storage(&cfg, &STATES[state], n).unwrap()
        };
        let (small, large) = if e1 < e2 { (run(e1), run(e2)) } else { (run(e2), run(e1)) };
        for o in [&small, &large] {
            let f = fidelity(&o.retrieved_conditional().unwrap(), &STATES[state]).unwrap();
            prop_assert!(f >= 1.0 - 1e-9);
        }
        prop_assert!(small.retrieved_weight() > large.retrieved_weight());
    }

    #[test]
    fn polarization_independent_losses_decay_equally(
        cfg in lossy_config(),
        pc_eps in -0.3f64..0.3,
        phi in 0.0f64..std::f64::consts::TAU,
        n in 0usize..=8,
    ) {
        let mut cfg = cfg;
        set(&mut cfg, ComponentKind::PockelsCell, |c| c.rotation_error = pc_eps);
        set(&mut cfg, ComponentKind::FiberSegment, |c| c.static_phase = phi);
        let h = simulate_storage(&cfg, &PureState::H, n).unwrap().retrieved_weight();
        let d = simulate_storage(&cfg, &PureState::D, n).unwrap().retrieved_weight();
        prop_assert!((h - d).abs() < 1e-12);
    }
}

#[test]
fn slow_delay_drift_cancels_too() {
    let mut cfg = MemoryConfig::ideal(36.5);
    cfg.delay_phase_drift = PhaseDrift::Sinusoid {
        amplitude_rad: 1.3,
        period_ns: 1e6,
    };
    for s in STATES {
        for n in 1..=8 {
            let o = simulate_storage(&cfg, &s, n).unwrap();
            assert!(fidelity(&o.retrieved_conditional().unwrap(), &s).unwrap() > 1.0 - 1e-6);
        }
    }
}

#[test]
fn without_the_delay_flip_odd_cycle_counts_keep_a_phase_error() {
    // with the PC on, each intermediate reflection is itself a flip, so only
    // one unpaired delay round trip remains for odd N
    let mut cfg = MemoryConfig::ideal(36.5);
    cfg.x_dl_enabled = false;
    set(&mut cfg, ComponentKind::FiberSegment, |c| c.static_phase = 0.7);
    for n in 1..=5 {
        let o = simulate_storage(&cfg, &PureState::D, n).unwrap();
        let f = fidelity(&o.retrieved_conditional().unwrap(), &PureState::D).unwrap();
        // one round trip accumulates 2φ between H and V: F = cos²(φ)
        let expected = if n % 2 == 1 { 0.7f64.cos().powi(2) } else { 1.0 };
        assert!((f - expected).abs() < 1e-9, "N={n}: {f} vs {expected}");
    }
}

#[test]
fn measured_short_inventory_lands_near_the_fitted_decay() {
    let mut cfg = with_extra_optics(MemoryConfig::ideal(36.5));
    for c in cfg.components.iter_mut() {
        let t = match (c.kind, c.label.as_str()) {
            (ComponentKind::PockelsCell, _) => 0.90,
            (ComponentKind::CirculatorArm, _) => 0.85,
            (ComponentKind::Retroreflector, _) => 0.81,
            (ComponentKind::Coupler, _) => 0.87,
            (_, "connectors") => 0.85,
            (_, "sw-pbs") => 0.965,
            _ => 1.0,
        };
        c.transmission = Transmission::uniform(t);
    }
    let g22 = derive_transmission_params(&cfg).unwrap().g22;
    assert!((0.46..=0.53).contains(&g22), "g22 = {g22}");
}
