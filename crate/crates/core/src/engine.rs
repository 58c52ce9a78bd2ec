//! Timed figure-eight storage engine.
//!
//! A photon launched from coupler C1 crosses the circulator (forward bit
//! flip), then meets the Sagnac switch at passage instants
//! `t₀ + k·Δτ`, `k = 0, 1, ...`. At each passage the Pockels-cell drive level
//! decides how the amplitude splits between *pass* (to the other switch
//! port, no flip) and *reflect* (back out the same port, flipped). From the
//! circulator side, pass leads into the out-and-back delay line and reflect
//! leads straight to the output. From the delay side, pass leads to the
//! output and reflect sends the photon round the delay line again.
//!
//! Every exit time therefore corresponds to exactly one route, and the
//! engine is plain amplitude bookkeeping over an agenda of passage events:
//! each pending branch carries the accumulated Jones operator acting on the
//! input state. Lost weight is tallied as absorbed (component and coupling
//! loss), ejected (circulator rejection, stamped with a time) or residual
//! (still circulating at the horizon).

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{
    circulator_operator, fpc_operator, pockels_level, pockels_operator_at_level, sagnac_split, ComponentKind,
    ComponentSpec, CouplerPath, Direction, DriveSchedule, Level, OpticsError, Transition, Zone,
};
use crate::polar::{apply, DensityMatrix, JonesOperator, PolarError, PureState};

/// Branches lighter than this are dropped into the residual tally.
const NEGLIGIBLE_WEIGHT: f64 = 1e-24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("unschedulable: {0}")]
    Unschedulable(String),
    #[error("invalid memory configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Polar(#[from] PolarError),
}

/// Slow drift of the delay-line birefringent phase, evaluated at each
/// return to the switch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhaseDrift {
    #[default]
    None,
    Linear {
        rad_per_ns: f64,
    },
    Sinusoid {
        amplitude_rad: f64,
        period_ns: f64,
    },
}

impl PhaseDrift {
    pub fn at(&self, t_ns: f64) -> f64 {
        match *self {
            PhaseDrift::None => 0.0,
            PhaseDrift::Linear { rad_per_ns } => rad_per_ns * t_ns,
            PhaseDrift::Sinusoid {
                amplitude_rad,
                period_ns,
            } => amplitude_rad * (std::f64::consts::TAU * t_ns / period_ns).sin(),
        }
    }
}

fn default_guard() -> f64 {
    1.0
}
fn default_window() -> f64 {
    4.0
}
fn default_true() -> bool {
    true
}
fn default_extra_passages() -> usize {
    256
}

/// Timing and component inventory of one memory. Times in ns, measured from
/// the herald detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    /// Round-trip loop time Δτ.
    pub delta_tau_ns: f64,
    /// C1 → C3 optical path with the switch reflecting (no storage).
    pub pass_through_ns: f64,
    /// Herald-to-Pockels-cell electronic latency.
    pub herald_latency_ns: f64,
    /// Signal delay line in front of C1; the photon reaches C1 at this time.
    pub delay_line_compensation_ns: f64,
    /// Pockels-cell 0 → 1 rise time.
    pub rise_time_ns: f64,
    /// Minimum clearance between a ramp and a passage instant.
    #[serde(default = "default_guard")]
    pub ramp_guard_ns: f64,
    #[serde(default = "default_window")]
    pub coincidence_window_ns: f64,
    /// Bit flip applied by the FPC once per delay-line round trip.
    #[serde(default = "default_true")]
    pub x_dl_enabled: bool,
    #[serde(default)]
    pub delay_phase_drift: PhaseDrift,
    /// Passages simulated beyond the nominal release before giving up on
    /// trapped amplitude.
    #[serde(default = "default_extra_passages")]
    pub max_extra_passages: usize,
    pub components: Vec<ComponentSpec>,
}

impl MemoryConfig {
    /// Checks parameters, the component inventory and that the drive
    /// electronics can react before the photon reaches the switch.
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidConfig(m));
        if !(self.delta_tau_ns > 0.0) || !self.delta_tau_ns.is_finite() {
            return bad(format!("delta_tau_ns must be positive, got {}", self.delta_tau_ns));
        }
        for (name, v) in [
            ("pass_through_ns", self.pass_through_ns),
            ("herald_latency_ns", self.herald_latency_ns),
            ("delay_line_compensation_ns", self.delay_line_compensation_ns),
            ("rise_time_ns", self.rise_time_ns),
            ("ramp_guard_ns", self.ramp_guard_ns),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.coincidence_window_ns > 0.0) || self.coincidence_window_ns >= self.delta_tau_ns {
            return bad(format!(
                "coincidence window {} ns must be positive and shorter than delta_tau",
                self.coincidence_window_ns
            ));
        }
        for c in &self.components {
            c.validate()?;
        }
        let count = |k: ComponentKind| self.components.iter().filter(|c| c.kind == k).count();
        if count(ComponentKind::PockelsCell) != 1 {
            return bad("exactly one POCKELS_CELL required".into());
        }
        if count(ComponentKind::CirculatorArm) != 1 {
            return bad("exactly one CIRCULATOR_ARM required".into());
        }
        if count(ComponentKind::Fpc) > 1 {
            return bad("at most one FPC allowed".into());
        }
        for path in CouplerPath::ALL {
            let n = self
                .components
                .iter()
                .filter(|c| c.kind == ComponentKind::Coupler && c.path == Some(path))
                .count();
            if n != 1 {
                return bad(format!("exactly one COUPLER with path {path:?} required, found {n}"));
            }
        }
        let margin = 2.0 * self.ramp_guard_ns;
        if self.rise_time_ns >= self.delta_tau_ns - margin {
            return Err(EngineError::Unschedulable(format!(
                "rise time {} ns does not fit inside the {} ns loop time with {margin} ns of guard",
                self.rise_time_ns, self.delta_tau_ns
            )));
        }
        let ready = self.herald_latency_ns + self.rise_time_ns;
        if ready > self.first_passage_ns() {
            return Err(EngineError::Unschedulable(format!(
                "herald latency + rise time = {ready} ns exceeds photon arrival at the switch ({} ns)",
                self.first_passage_ns()
            )));
        }
        Ok(())
    }

    /// Lossless, error-free memory with the short-line timing figures and
    /// loop time `delta_tau`.
    pub fn ideal(delta_tau: f64) -> MemoryConfig {
        MemoryConfig {
            delta_tau_ns: delta_tau,
            pass_through_ns: 10.7,
            herald_latency_ns: 240.0,
            delay_line_compensation_ns: 505.0,
            rise_time_ns: 10.0,
            ramp_guard_ns: 1.0,
            coincidence_window_ns: 4.0,
            x_dl_enabled: true,
            delay_phase_drift: PhaseDrift::None,
            max_extra_passages: 64,
            components: vec![
                ComponentSpec::new("circulator", ComponentKind::CirculatorArm),
                ComponentSpec::new("pc", ComponentKind::PockelsCell),
                ComponentSpec::fiber("spool", 0.5, 0.0),
                ComponentSpec::new("rr", ComponentKind::Retroreflector),
                ComponentSpec::new("fpc", ComponentKind::Fpc),
                ComponentSpec::coupler("k13", CouplerPath::C1C3, 1.0),
                ComponentSpec::coupler("k12", CouplerPath::C1C2, 1.0),
                ComponentSpec::coupler("k22", CouplerPath::C2C2, 1.0),
                ComponentSpec::coupler("k23", CouplerPath::C2C3, 1.0),
            ],
        }
    }

    /// Photon arrival at C1.
    pub fn input_time_ns(&self) -> f64 {
        self.delay_line_compensation_ns
    }

    /// First passage through the switch.
    pub fn first_passage_ns(&self) -> f64 {
        self.input_time_ns() + 0.5 * self.pass_through_ns
    }

    pub fn passage_time_ns(&self, k: usize) -> f64 {
        self.first_passage_ns() + k as f64 * self.delta_tau_ns
    }

    /// Arrival at C3 after `k` delay-line round trips.
    pub fn exit_time_ns(&self, k: usize) -> f64 {
        self.input_time_ns() + self.pass_through_ns + k as f64 * self.delta_tau_ns
    }

    fn find(&self, kind: ComponentKind) -> Option<&ComponentSpec> {
        self.components.iter().find(|c| c.kind == kind)
    }

    pub fn pockels_cell(&self) -> Option<&ComponentSpec> {
        self.find(ComponentKind::PockelsCell)
    }

    pub fn pockels_cell_mut(&mut self) -> Option<&mut ComponentSpec> {
        self.components
            .iter_mut()
            .find(|c| c.kind == ComponentKind::PockelsCell)
    }

    pub fn fpc_mut(&mut self) -> Option<&mut ComponentSpec> {
        self.components.iter_mut().find(|c| c.kind == ComponentKind::Fpc)
    }

    pub fn circulator_mut(&mut self) -> Option<&mut ComponentSpec> {
        self.components
            .iter_mut()
            .find(|c| c.kind == ComponentKind::CirculatorArm)
    }

    /// Delay-line fiber segments (those with a length).
    pub fn fibers_mut(&mut self) -> impl Iterator<Item = &mut ComponentSpec> {
        self.components
            .iter_mut()
            .filter(|c| c.kind == ComponentKind::FiberSegment && c.length_m > 0.0)
    }

    pub fn coupler_efficiency(&self, path: CouplerPath) -> Option<f64> {
        self.components
            .iter()
            .find(|c| c.kind == ComponentKind::Coupler && c.path == Some(path))
            .map(|c| c.transmission.mean())
    }

    /// Replaces the coupler efficiencies so that the segment transmissions
    /// equal `target`; this is how measured γ values pin down the otherwise
    /// unknown mode-matching losses.
    pub fn calibrate_couplers(&mut self, target: &TransmissionParams) -> Result<(), EngineError> {
        target.validate()?;
        let z = ZoneTransmissions::of(self);
        let needed = [
            (CouplerPath::C1C3, target.g13, z.circulator * z.circulator * z.switch),
            (CouplerPath::C1C2, target.g12, z.circulator * z.switch * z.delay),
            (CouplerPath::C2C2, target.g22, z.switch * z.delay),
            (CouplerPath::C2C3, target.g23, z.switch * z.circulator),
        ];
        for (path, gamma, components) in needed {
            let kappa = if components > 0.0 {
                gamma / components
            } else {
                f64::INFINITY
            };
            if !(kappa <= 1.0) {
                return Err(EngineError::InvalidConfig(format!(
                    "cannot calibrate {path:?}: components transmit {components:.4} but target is {gamma}"
                )));
            }
            let spec = self
                .components
                .iter_mut()
                .find(|c| c.kind == ComponentKind::Coupler && c.path == Some(path))
                .ok_or_else(|| EngineError::InvalidConfig(format!("missing coupler {path:?}")))?;
            spec.transmission = crate::optics::Transmission::uniform(kappa);
        }
        Ok(())
    }
}

/// Segment transmissions between couplers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransmissionParams {
    pub g13: f64,
    pub g12: f64,
    pub g22: f64,
    pub g23: f64,
}

impl TransmissionParams {
    pub const PAPER_SHORT: TransmissionParams = TransmissionParams {
        g13: 0.541,
        g12: 0.419,
        g22: 0.50,
        g23: 0.662,
    };
    pub const PAPER_LONG: TransmissionParams = TransmissionParams {
        g13: 0.541,
        g12: 0.398,
        g22: 0.44,
        g23: 0.662,
    };
    pub const LOSSLESS: TransmissionParams = TransmissionParams {
        g13: 1.0,
        g12: 1.0,
        g22: 1.0,
        g23: 1.0,
    };

    pub fn validate(&self) -> Result<(), EngineError> {
        for (name, g) in [
            ("g13", self.g13),
            ("g12", self.g12),
            ("g22", self.g22),
            ("g23", self.g23),
        ] {
            if !(0.0..=1.0).contains(&g) {
                return Err(EngineError::InvalidConfig(format!("{name} = {g} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Closed-form end-to-end efficiency η_N.
pub fn efficiency(p: &TransmissionParams, n_cycles: usize) -> f64 {
    match n_cycles {
        0 => p.g13,
        n => p.g12 * p.g22.powi(n as i32 - 1) * p.g23,
    }
}

/// Polarization-averaged per-traversal transmission of each zone.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ZoneTransmissions {
    circulator: f64,
    switch: f64,
    delay: f64,
}

impl ZoneTransmissions {
    fn of(cfg: &MemoryConfig) -> Self {
        let product = |zone: Zone| {
            cfg.components
                .iter()
                .filter(|c| c.resolved_zone() == Some(zone))
                .map(ComponentSpec::scalar_transmission)
                .product::<f64>()
        };
        ZoneTransmissions {
            circulator: product(Zone::Circulator),
            switch: product(Zone::Switch),
            delay: product(Zone::Delay),
        }
    }
}

/// Segment transmissions implied by the component inventory:
///
/// * γ₁:₃ = κ₁₃ · T_circ² · T_switch (forward and reverse circulator, one reflection),
/// * γ₁:₂ = κ₁₂ · T_circ · T_switch · T_delay,
/// * γ₂:₂ = κ₂₂ · T_switch · T_delay,
/// * γ₂:₃ = κ₂₃ · T_switch · T_circ.
///
/// Polarization-dependent transmissions enter through their H/V mean.
pub fn derive_transmission_params(cfg: &MemoryConfig) -> Result<TransmissionParams, EngineError> {
    cfg.validate()?;
    let z = ZoneTransmissions::of(cfg);
    let k = |p| cfg.coupler_efficiency(p).unwrap_or(0.0);
    Ok(TransmissionParams {
        g13: k(CouplerPath::C1C3) * z.circulator * z.circulator * z.switch,
        g12: k(CouplerPath::C1C2) * z.circulator * z.switch * z.delay,
        g22: k(CouplerPath::C2C2) * z.switch * z.delay,
        g23: k(CouplerPath::C2C3) * z.switch * z.circulator,
    })
}

/// Pockels-cell drive for `n_cycles` of storage.
///
/// `N = 0` holds the cell on (immediate reflection to the output) and
/// `N = 1` holds it off (one round trip). For `N ≥ 2` the cell switches on in
/// the gap after passage 0 and off in the gap before passage `N`, with each
/// ramp centred between the neighbouring passages.
pub fn switch_schedule(n_cycles: usize, cfg: &MemoryConfig) -> Result<DriveSchedule, EngineError> {
    let rise = cfg.rise_time_ns;
    match n_cycles {
        0 => Ok(DriveSchedule::constant(Level::On, rise)),
        1 => Ok(DriveSchedule::constant(Level::Off, rise)),
        n => {
            let margin = 2.0 * cfg.ramp_guard_ns;
            if rise >= cfg.delta_tau_ns - margin {
                return Err(EngineError::Unschedulable(format!(
                    "rise time {rise} ns does not fit between passages {} ns apart with {margin} ns of guard",
                    cfg.delta_tau_ns
                )));
            }
            let ramp_start = |gap: usize| cfg.passage_time_ns(gap) + 0.5 * (cfg.delta_tau_ns - rise);
            let on = ramp_start(0);
            if on < cfg.herald_latency_ns {
                return Err(EngineError::Unschedulable(format!(
                    "switch-on ramp at {on} ns precedes the herald latency {} ns",
                    cfg.herald_latency_ns
                )));
            }
            Ok(DriveSchedule::new(
                Level::Off,
                vec![
                    Transition {
                        time_ns: on,
                        target: Level::On,
                    },
                    Transition {
                        time_ns: ramp_start(n - 1),
                        target: Level::Off,
                    },
                ],
                rise,
            )?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitEvent {
    pub time_ns: f64,
    /// Delay-line round trips completed before exiting.
    pub round_trips: usize,
    pub state: DensityMatrix,
}

impl ExitEvent {
    pub fn weight(&self) -> f64 {
        self.state.trace()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ejection {
    pub time_ns: f64,
    pub weight: f64,
    pub site: String,
}

/// Time-resolved result of one storage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageOutcome {
    pub n_cycles: usize,
    pub nominal_exit_ns: f64,
    pub exits: Vec<ExitEvent>,
    pub ejections: Vec<Ejection>,
    /// Weight absorbed by lossy components and imperfect coupling.
    pub absorbed: f64,
    /// Weight still in the loop when the simulation horizon was reached.
    pub residual: f64,
    /// The exit inside the coincidence gate around the nominal exit time.
    pub retrieved: Option<ExitEvent>,
    pub input_weight: f64,
}

impl StorageOutcome {
    pub fn retrieved_weight(&self) -> f64 {
        self.retrieved.as_ref().map_or(0.0, ExitEvent::weight)
    }

    /// Retrieved state conditioned on retrieval.
    pub fn retrieved_conditional(&self) -> Result<DensityMatrix, PolarError> {
        match &self.retrieved {
            Some(e) => e.state.conditional(),
            None => Err(PolarError::UndefinedState),
        }
    }

    /// Exits + ejections + absorbed + residual; equals the input weight.
    pub fn accounted_weight(&self) -> f64 {
        self.exits.iter().map(ExitEvent::weight).sum::<f64>()
            + self.ejections.iter().map(|e| e.weight).sum::<f64>()
            + self.absorbed
            + self.residual
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Port {
    /// Entering the switch from the circulator (only at passage 0).
    Circulator,
    /// Returning from the delay line.
    Delay,
}

struct Branch {
    op: JonesOperator,
}

/// Prebuilt per-configuration operators.
struct Optics<'a> {
    cfg: &'a MemoryConfig,
    pc: &'a ComponentSpec,
    circ_fwd: JonesOperator,
    circ_rev: JonesOperator,
    circ_extra: JonesOperator,
    switch_extra: JonesOperator,
    delay_loss: JonesOperator,
    fpc: JonesOperator,
    fiber_phase: f64,
    coupling: [(CouplerPath, JonesOperator); 4],
}

fn attenuation_product<'a>(specs: impl Iterator<Item = &'a ComponentSpec>) -> Result<JonesOperator, EngineError> {
    let mut op = JonesOperator::identity();
    for s in specs {
        let (mut h, mut v) = (s.transmission.h, s.transmission.v);
        if s.kind == ComponentKind::FiberSegment {
            let f = crate::optics::fiber_transmission(s.length_m, s.atten_db_per_km, true);
            h *= f;
            v *= f;
        }
        op = JonesOperator::attenuator(h, v)?.after(&op);
    }
    Ok(op)
}

impl<'a> Optics<'a> {
    fn new(cfg: &'a MemoryConfig) -> Result<Self, EngineError> {
        let pc = cfg.pockels_cell().expect("validated");
        let circ = cfg.find(ComponentKind::CirculatorArm).expect("validated");
        let in_zone = |zone: Zone| {
            cfg.components.iter().filter(move |c| {
                c.resolved_zone() == Some(zone)
                    && !matches!(
                        c.kind,
                        ComponentKind::CirculatorArm | ComponentKind::PockelsCell | ComponentKind::Fpc
                    )
            })
        };
        let fpc = match cfg.find(ComponentKind::Fpc) {
            Some(spec) => fpc_operator(spec, cfg.x_dl_enabled)?,
            None if cfg.x_dl_enabled => JonesOperator::diagonal_axis_rotation(FRAC_PI_2),
            None => JonesOperator::identity(),
        };
        let fiber_phase = cfg
            .components
            .iter()
            .filter(|c| c.kind == ComponentKind::FiberSegment)
            .map(|c| c.static_phase)
            .sum();
        let coupler = |path| -> Result<(CouplerPath, JonesOperator), EngineError> {
            let k = cfg.coupler_efficiency(path).expect("validated");
            Ok((path, JonesOperator::attenuator(k, k)?))
        };
        Ok(Optics {
            cfg,
            pc,
            circ_fwd: circulator_operator(Direction::Forward, circ)?,
            circ_rev: circulator_operator(Direction::Reverse, circ)?,
            circ_extra: attenuation_product(in_zone(Zone::Circulator))?,
            switch_extra: attenuation_product(in_zone(Zone::Switch))?,
            delay_loss: attenuation_product(in_zone(Zone::Delay))?,
            fpc,
            fiber_phase,
            coupling: [
                coupler(CouplerPath::C1C3)?,
                coupler(CouplerPath::C1C2)?,
                coupler(CouplerPath::C2C2)?,
                coupler(CouplerPath::C2C3)?,
            ],
        })
    }

    fn coupler(&self, path: CouplerPath) -> &JonesOperator {
        &self
            .coupling
            .iter()
            .find(|(p, _)| *p == path)
            .expect("all paths built")
            .1
    }

    /// Out-and-back delay line at time `t`: fiber birefringence both ways
    /// around the FPC, then the lumped losses.
    fn delay_round_trip(&self, t_ns: f64) -> JonesOperator {
        let phase = JonesOperator::birefringent_phase(self.fiber_phase + self.cfg.delay_phase_drift.at(t_ns));
        self.delay_loss.after(&phase).after(&self.fpc).after(&phase)
    }
}

struct Ledger<'a> {
    rho_in: &'a DensityMatrix,
    absorbed: f64,
    residual: f64,
    ejections: Vec<Ejection>,
}

impl Ledger<'_> {
    fn weight(&self, op: &JonesOperator) -> f64 {
        apply(self.rho_in, op).trace()
    }

    /// Applies `stage` and books the lost weight as absorbed.
    fn absorb(&mut self, op: JonesOperator, stage: &JonesOperator) -> JonesOperator {
        let next = stage.after(&op);
        self.absorbed += (self.weight(&op) - self.weight(&next)).max(0.0);
        next
    }

    /// Applies `stage` and books the lost weight as an ejection event.
    fn eject(&mut self, op: JonesOperator, stage: &JonesOperator, time_ns: f64, site: &str) -> JonesOperator {
        let next = stage.after(&op);
        let lost = (self.weight(&op) - self.weight(&next)).max(0.0);
        if lost > 0.0 {
            self.ejections.push(Ejection {
                time_ns,
                weight: lost,
                site: site.to_string(),
            });
        }
        next
    }
}

/// Simulates storage with the default drive from [`switch_schedule`].
pub fn simulate_storage(cfg: &MemoryConfig, input: &PureState, n_cycles: usize) -> Result<StorageOutcome, EngineError> {
    simulate_density(cfg, &input.to_density(), n_cycles)
}

pub fn simulate_density(
    cfg: &MemoryConfig,
    input: &DensityMatrix,
    n_cycles: usize,
) -> Result<StorageOutcome, EngineError> {
    cfg.validate()?;
    let schedule = switch_schedule(n_cycles, cfg)?;
    simulate_with_schedule(cfg, input, n_cycles, &schedule)
}

/// Runs the engine with an explicit drive; `n_cycles` only sets the
/// nominal exit time used for the retrieval gate.
pub fn simulate_with_schedule(
    cfg: &MemoryConfig,
    input: &DensityMatrix,
    n_cycles: usize,
    schedule: &DriveSchedule,
) -> Result<StorageOutcome, EngineError> {
    cfg.validate()?;
    let optics = Optics::new(cfg)?;
    let mut ledger = Ledger {
        rho_in: input,
        absorbed: 0.0,
        residual: 0.0,
        ejections: Vec::new(),
    };
    let horizon = n_cycles + cfg.max_extra_passages;
    let quarter = 0.25 * cfg.pass_through_ns;
    let mut exits = Vec::new();

    // C1 → circulator (forward flip) → switch
    let op = ledger.absorb(JonesOperator::identity(), &optics.circ_extra);
    let op = ledger.eject(op, &optics.circ_fwd, cfg.input_time_ns() + quarter, "circulator");
    let mut agenda: BTreeMap<(usize, Port), Branch> = BTreeMap::new();
    agenda.insert((0, Port::Circulator), Branch { op });

    while let Some(((k, port), branch)) = agenda.pop_first() {
        let t = cfg.passage_time_ns(k);
        let pc = pockels_operator_at_level(pockels_level(schedule, t), optics.pc)?;
        let (pass, reflect) = sagnac_split(&pc);
        let before = ledger.weight(&branch.op);
        let op = optics.switch_extra.after(&branch.op);
        let passed = pass.after(&op);
        let reflected = reflect.after(&op);
        ledger.absorbed += (before - ledger.weight(&passed) - ledger.weight(&reflected)).max(0.0);

        let (to_output, to_delay, out_path, in_path) = match port {
            Port::Circulator => (reflected, passed, CouplerPath::C1C3, CouplerPath::C1C2),
            Port::Delay => (passed, reflected, CouplerPath::C2C3, CouplerPath::C2C2),
        };

        // towards C3 through the circulator in reverse
        if ledger.weight(&to_output) < NEGLIGIBLE_WEIGHT {
            ledger.residual += ledger.weight(&to_output);
        } else {
            let exit_t = cfg.exit_time_ns(k);
            let op = ledger.absorb(to_output, &optics.circ_extra);
            let op = ledger.eject(op, &optics.circ_rev, exit_t - quarter, "circulator");
            let op = ledger.absorb(op, optics.coupler(out_path));
            exits.push(ExitEvent {
                time_ns: exit_t,
                round_trips: k,
                state: apply(input, &op),
            });
        }

        // into the fiber at C2 for another round trip
        let w = ledger.weight(&to_delay);
        if w < NEGLIGIBLE_WEIGHT || k + 1 > horizon {
            ledger.residual += w;
            continue;
        }
        let op = ledger.absorb(to_delay, optics.coupler(in_path));
        let op = ledger.absorb(op, &optics.delay_round_trip(cfg.passage_time_ns(k + 1)));
        agenda
            .entry((k + 1, Port::Delay))
            .and_modify(|b| b.op = JonesOperator::from_matrix_unchecked(b.op.matrix() + op.matrix()))
            .or_insert(Branch { op });
    }

    let nominal = cfg.exit_time_ns(n_cycles);
    let half_gate = 0.5 * cfg.coincidence_window_ns;
    let retrieved = exits.iter().find(|e| (e.time_ns - nominal).abs() <= half_gate).cloned();
    Ok(StorageOutcome {
        n_cycles,
        nominal_exit_ns: nominal,
        exits,
        ejections: ledger.ejections,
        absorbed: ledger.absorbed,
        residual: ledger.residual,
        retrieved,
        input_weight: input.trace(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathLabel {
    M1,
    M2,
    M3,
    M4,
    #[serde(rename = "storage")]
    Storage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathTrace {
    pub h_path: Vec<PathLabel>,
    pub v_path: Vec<PathLabel>,
}

/// Mirror sequence of the H and V input components in the ideal F8 route.
///
/// Forward through the circulator H takes arm A (M4) and V arm B (M1), and
/// both are flipped. Inside the Sagnac the traversal direction is set by the
/// PBS face the light launches from: V entering from the circulator side or
/// H entering from the delay side runs M2 → M3, the other two cases M3 → M2.
/// Each delay round trip flips the polarization; the switch reflects
/// (flipping) at intermediate passages and passes (no flip) at the first
/// and last. Reverse through the circulator H takes arm B (M1) and V arm A (M4).
/// `N = 0` yields the pass-through route.
pub fn f8_path_trace(n_cycles: usize) -> PathTrace {
    #[derive(Clone, Copy, PartialEq)]
    enum Pol {
        H,
        V,
    }
    fn flip(p: Pol) -> Pol {
        if p == Pol::H {
            Pol::V
        } else {
            Pol::H
        }
    }
    let walk = |input: Pol| {
        let mut labels = vec![if input == Pol::H { PathLabel::M4 } else { PathLabel::M1 }];
        let mut pol = flip(input);
        let mut from_circulator = true;
        for passage in 0..=n_cycles {
            let clockwise = (pol == Pol::V) == from_circulator;
            labels.extend(if clockwise {
                [PathLabel::M2, PathLabel::M3]
            } else {
                [PathLabel::M3, PathLabel::M2]
            });
            let leaving = if n_cycles == 0 { true } else { passage == n_cycles };
            let reflect = if n_cycles == 0 {
                true
            } else {
                passage != 0 && passage != n_cycles
            };
            if reflect {
                pol = flip(pol);
            }
            if leaving {
                break;
            }
            labels.push(PathLabel::Storage);
            pol = flip(pol);
            from_circulator = false;
        }
        labels.push(if pol == Pol::H { PathLabel::M1 } else { PathLabel::M4 });
        labels
    };
    PathTrace {
        h_path: walk(Pol::H),
        v_path: walk(Pol::V),
    }
}
