//! Parametric models of the bulk and fiber components of the memory.
//!
//! Every component yields a [`JonesOperator`]. Transmissions are intensity
//! transmissions per traversal, except for delay-zone parts (fiber,
//! connectors, retroreflector, FPC) whose figures are per out-and-back round
//! trip.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polar::{DensityMatrix, JonesOperator, PolarError, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("component `{label}` has kind {found:?}, expected {expected:?}")]
    WrongKind {
        label: String,
        expected: ComponentKind,
        found: ComponentKind,
    },
    #[error("component `{label}`: {reason}")]
    InvalidSpec { label: String, reason: String },
    #[error("invalid drive schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Polar(#[from] PolarError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ComponentKind {
    Pbs,
    PockelsCell,
    CirculatorArm,
    FiberSegment,
    Retroreflector,
    Coupler,
    Mirror,
    Fpc,
}

/// The three physical zones plus the free-space/fiber coupling interfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    Circulator,
    Switch,
    Delay,
    Coupling,
}

/// Mode-matching path of a fiber coupler: launched from the first coupler,
/// collected by the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CouplerPath {
    #[serde(rename = "C1-C3")]
    C1C3,
    #[serde(rename = "C1-C2")]
    C1C2,
    #[serde(rename = "C2-C2")]
    C2C2,
    #[serde(rename = "C2-C3")]
    C2C3,
}

impl CouplerPath {
    pub const ALL: [CouplerPath; 4] = [
        CouplerPath::C1C3,
        CouplerPath::C1C2,
        CouplerPath::C2C2,
        CouplerPath::C2C3,
    ];
}

/// Intensity transmission per polarization axis. Deserializes from either a
/// bare number or `{ h = .., v = .. }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "TransmissionRepr", into = "TransmissionRepr")]
pub struct Transmission {
    pub h: f64,
    pub v: f64,
}

impl Transmission {
    pub const UNITY: Transmission = Transmission { h: 1.0, v: 1.0 };

    pub fn uniform(t: f64) -> Self {
        Transmission { h: t, v: t }
    }

    pub fn is_polarization_independent(&self) -> bool {
        self.h == self.v
    }

    /// Polarization-averaged transmission.
    pub fn mean(&self) -> f64 {
        0.5 * (self.h + self.v)
    }
}

impl Default for Transmission {
    fn default() -> Self {
        Transmission::UNITY
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TransmissionRepr {
    Uniform(f64),
    Split { h: f64, v: f64 },
}

impl From<TransmissionRepr> for Transmission {
    fn from(r: TransmissionRepr) -> Self {
        match r {
            TransmissionRepr::Uniform(t) => Transmission::uniform(t),
            TransmissionRepr::Split { h, v } => Transmission { h, v },
        }
    }
}

impl From<Transmission> for TransmissionRepr {
    fn from(t: Transmission) -> Self {
        if t.is_polarization_independent() {
            TransmissionRepr::Uniform(t.h)
        } else {
            TransmissionRepr::Split { h: t.h, v: t.v }
        }
    }
}

/// One physical component of the memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    #[serde(default)]
    pub label: String,
    pub kind: ComponentKind,
    /// Required for PBS and MIRROR, which appear in more than one zone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zone: Option<Zone>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<CouplerPath>,
    #[serde(default)]
    pub transmission: Transmission,
    /// Deviation from a nominal 90° flip, radians.
    #[serde(default)]
    pub rotation_error: f64,
    /// Birefringent phase (fiber) or arm phase (circulator), radians.
    #[serde(default)]
    pub static_phase: f64,
    #[serde(default)]
    pub length_m: f64,
    #[serde(default)]
    pub atten_db_per_km: f64,
}

impl ComponentSpec {
    pub fn new(label: impl Into<String>, kind: ComponentKind) -> Self {
        ComponentSpec {
            label: label.into(),
            kind,
            zone: None,
            path: None,
            transmission: Transmission::UNITY,
            rotation_error: 0.0,
            static_phase: 0.0,
            length_m: 0.0,
            atten_db_per_km: 0.0,
        }
    }

    pub fn coupler(label: impl Into<String>, path: CouplerPath, efficiency: f64) -> Self {
        ComponentSpec {
            path: Some(path),
            ..ComponentSpec::new(label, ComponentKind::Coupler).with_transmission(efficiency)
        }
    }

    pub fn fiber(label: impl Into<String>, length_m: f64, atten_db_per_km: f64) -> Self {
        ComponentSpec {
            length_m,
            atten_db_per_km,
            ..ComponentSpec::new(label, ComponentKind::FiberSegment)
        }
    }

    pub fn with_transmission(mut self, t: f64) -> Self {
        self.transmission = Transmission::uniform(t);
        self
    }

    pub fn with_zone(mut self, zone: Zone) -> Self {
        self.zone = Some(zone);
        self
    }

    pub fn with_rotation_error(mut self, eps: f64) -> Self {
        self.rotation_error = eps;
        self
    }

    pub fn with_static_phase(mut self, phi: f64) -> Self {
        self.static_phase = phi;
        self
    }

    /// Zone this component belongs to; explicit for PBS/MIRROR, implied otherwise.
    pub fn resolved_zone(&self) -> Option<Zone> {
        match self.kind {
            ComponentKind::PockelsCell => Some(Zone::Switch),
            ComponentKind::CirculatorArm => Some(Zone::Circulator),
            ComponentKind::FiberSegment | ComponentKind::Retroreflector | ComponentKind::Fpc => Some(Zone::Delay),
            ComponentKind::Coupler => Some(Zone::Coupling),
            ComponentKind::Pbs | ComponentKind::Mirror => self.zone,
        }
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        let bad = |reason: String| {
            Err(OpticsError::InvalidSpec {
                label: self.label.clone(),
                reason,
            })
        };
        for t in [self.transmission.h, self.transmission.v] {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("transmission {t} outside [0, 1]"));
            }
        }
        if !(self.length_m >= 0.0) {
            return bad(format!("negative length {}", self.length_m));
        }
        if !(self.atten_db_per_km >= 0.0) {
            return bad(format!("negative attenuation {}", self.atten_db_per_km));
        }
        if !self.rotation_error.is_finite() || !self.static_phase.is_finite() {
            return bad("non-finite angle".into());
        }
        match self.resolved_zone() {
            None => return bad(format!("{:?} needs an explicit zone", self.kind)),
            Some(z) => {
                if let Some(explicit) = self.zone {
                    if explicit != z {
                        return bad(format!("{:?} cannot sit in zone {explicit:?}", self.kind));
                    }
                }
                if matches!(self.kind, ComponentKind::Pbs | ComponentKind::Mirror)
                    && !matches!(z, Zone::Circulator | Zone::Switch)
                {
                    return bad(format!("{:?} must be in a free-space zone", self.kind));
                }
            }
        }
        if self.kind == ComponentKind::Coupler && self.path.is_none() {
            return bad("coupler needs a path".into());
        }
        Ok(())
    }

    fn expect_kind(&self, kind: ComponentKind) -> Result<(), OpticsError> {
        if self.kind != kind {
            return Err(OpticsError::WrongKind {
                label: self.label.clone(),
                expected: kind,
                found: self.kind,
            });
        }
        Ok(())
    }

    /// Diagonal attenuator built from this component's transmission.
    pub fn attenuator(&self) -> Result<JonesOperator, OpticsError> {
        Ok(JonesOperator::attenuator(self.transmission.h, self.transmission.v)?)
    }

    /// Total intensity transmission of this component (polarization mean),
    /// including fiber attenuation over the out-and-back length.
    pub fn scalar_transmission(&self) -> f64 {
        let base = self.transmission.mean();
        match self.kind {
            ComponentKind::FiberSegment => base * fiber_transmission(self.length_m, self.atten_db_per_km, true),
            _ => base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Level {
    Off,
    On,
}

impl Level {
    pub fn value(self) -> f64 {
        match self {
            Level::Off => 0.0,
            Level::On => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Start of the ramp, ns.
    pub time_ns: f64,
    pub target: Level,
}

/// Pockels-cell drive: an initial level and timed linear ramps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveSchedule {
    initial: Level,
    transitions: Vec<Transition>,
    rise_time_ns: f64,
}

impl DriveSchedule {
    /// Ramps must start in strictly increasing order and must not overlap.
    pub fn new(initial: Level, transitions: Vec<Transition>, rise_time_ns: f64) -> Result<Self, OpticsError> {
        if !(rise_time_ns >= 0.0) || !rise_time_ns.is_finite() {
            return Err(OpticsError::InvalidSchedule(format!("rise time {rise_time_ns} ns")));
        }
        for pair in transitions.windows(2) {
            if !(pair[1].time_ns > pair[0].time_ns) {
                return Err(OpticsError::InvalidSchedule(
                    "transition times not strictly increasing".into(),
                ));
            }
            if pair[1].time_ns < pair[0].time_ns + rise_time_ns {
                return Err(OpticsError::InvalidSchedule("overlapping ramps".into()));
            }
        }
        if transitions.iter().any(|t| !t.time_ns.is_finite()) {
            return Err(OpticsError::InvalidSchedule("non-finite transition time".into()));
        }
        Ok(DriveSchedule {
            initial,
            transitions,
            rise_time_ns,
        })
    }

    pub fn constant(level: Level, rise_time_ns: f64) -> Self {
        DriveSchedule {
            initial: level,
            transitions: Vec::new(),
            rise_time_ns,
        }
    }

    pub fn initial(&self) -> Level {
        self.initial
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn rise_time_ns(&self) -> f64 {
        self.rise_time_ns
    }

    /// `[start, end]` of every ramp.
    pub fn ramp_windows(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.transitions
            .iter()
            .map(|t| (t.time_ns, t.time_ns + self.rise_time_ns))
    }
}

/// Drive level in `[0, 1]` at time `t_ns`, linear across each ramp.
pub fn pockels_level(s: &DriveSchedule, t_ns: f64) -> f64 {
    let mut level = s.initial.value();
    for tr in &s.transitions {
        if t_ns < tr.time_ns {
            break;
        }
        let target = tr.target.value();
        let elapsed = t_ns - tr.time_ns;
        if s.rise_time_ns > 0.0 && elapsed < s.rise_time_ns {
            return level + (target - level) * elapsed / s.rise_time_ns;
        }
        level = target;
    }
    level
}

/// Pockels cell at drive level `L`: `√T · exp(−i L (π/2 + ε) X)`. The cell's
/// axes sit at 45°, so full drive is a bit flip.
pub fn pockels_operator_at_level(level: f64, spec: &ComponentSpec) -> Result<JonesOperator, OpticsError> {
    spec.expect_kind(ComponentKind::PockelsCell)?;
    let angle = level * (FRAC_PI_2 + spec.rotation_error);
    Ok(JonesOperator::diagonal_axis_rotation(angle).after(&spec.attenuator()?))
}

pub fn pockels_operator(s: &DriveSchedule, t_ns: f64, spec: &ComponentSpec) -> Result<JonesOperator, OpticsError> {
    pockels_operator_at_level(pockels_level(s, t_ns), spec)
}

/// Splits a state into the PBS transmitted (H) and reflected (V) ports.
pub fn pbs_route(state: &DensityMatrix) -> (DensityMatrix, DensityMatrix) {
    let m = state.matrix();
    let mut t = nalgebra::Matrix2::zeros();
    t[(0, 0)] = m[(0, 0)];
    let mut r = nalgebra::Matrix2::zeros();
    r[(1, 1)] = m[(1, 1)];
    (
        DensityMatrix::from_matrix_unchecked(t),
        DensityMatrix::from_matrix_unchecked(r),
    )
}

/// Sagnac switch routing for an intra-loop operator `U`.
///
/// A PBS sends H clockwise and V counter-clockwise around the loop. On
/// return, light still in its launch polarization leaves by the opposite
/// port (pass), while flipped light is sent back out the port it came in
/// by (reflect). So the pass operator is the diagonal of `U` and the
/// reflect operator its off-diagonal part.
pub fn sagnac_split(intra_loop: &JonesOperator) -> (JonesOperator, JonesOperator) {
    (intra_loop.diagonal_part(), intra_loop.off_diagonal_part())
}

/// `10^(−α·L/10)`, with `L` doubled for an out-and-back line.
pub fn fiber_transmission(length_m: f64, atten_db_per_km: f64, round_trip: bool) -> f64 {
    let km = length_m / 1000.0 * if round_trip { 2.0 } else { 1.0 };
    10f64.powf(-atten_db_per_km * km / 10.0)
}

/// Typical single-mode fiber attenuation at the two wavelengths of interest.
pub fn nominal_attenuation_db_per_km(wavelength_nm: f64) -> Option<f64> {
    if (wavelength_nm - 780.0).abs() < 20.0 {
        Some(4.0)
    } else if (wavelength_nm - 1550.0).abs() < 50.0 {
        Some(0.2)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    Forward,
    Reverse,
}

/// PBS Mach-Zehnder circulator.
///
/// Forward light is bit-flipped (`X · diag(e^{iψ}, 1)`); reverse light is
/// passed unflipped (`diag(1, e^{iψ})`). `ψ = static_phase` is the phase of
/// arm A, which carries forward-H and reverse-V, so the two polarization
/// components of a stored qubit each cross arm A exactly once. Loss is lumped
/// into the transmission.
pub fn circulator_operator(direction: Direction, spec: &ComponentSpec) -> Result<JonesOperator, OpticsError> {
    spec.expect_kind(ComponentKind::CirculatorArm)?;
    let att = spec.attenuator()?;
    let arm = spec.static_phase;
    let op = match direction {
        Direction::Forward => {
            let arm_a_on_h = JonesOperator::new(nalgebra::Matrix2::new(
                C64::from_polar(1.0, arm),
                C64::new(0.0, 0.0),
                C64::new(0.0, 0.0),
                C64::new(1.0, 0.0),
            ))?;
            JonesOperator::pauli_x().after(&arm_a_on_h).after(&att)
        }
        Direction::Reverse => JonesOperator::birefringent_phase(arm).after(&att),
    };
    Ok(op)
}

/// Fiber polarization controller: a bit flip with `rotation_error` when
/// enabled, identity otherwise. Modeled with the same rotation as the PC.
pub fn fpc_operator(spec: &ComponentSpec, enabled: bool) -> Result<JonesOperator, OpticsError> {
    spec.expect_kind(ComponentKind::Fpc)?;
    let att = spec.attenuator()?;
    if enabled {
        Ok(JonesOperator::diagonal_axis_rotation(FRAC_PI_2 + spec.rotation_error).after(&att))
    } else {
        Ok(att)
    }
}
