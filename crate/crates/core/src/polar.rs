//! Exact 2×2 polarization algebra.
//!
//! Polarization qubits live in the {|H⟩, |V⟩} basis. A [`DensityMatrix`] is
//! not required to have unit trace: its trace is the probability that the
//! photon is still present, so polarization-dependent loss is representable
//! as a plain [`JonesOperator`] with singular values below one.
//!
//! Waveplate conventions used by [`JonesOperator`] constructors:
//!
//! * angles are measured from the H axis toward V, in radians;
//! * `half_waveplate(θ) = R(θ)·diag(1, −1)·R(−θ)` so that a fast axis at π/8
//!   maps |H⟩ onto |D⟩;
//! * `quarter_waveplate(θ) = R(θ)·diag(1, i)·R(−θ)` so that a fast axis at
//!   π/4 maps |H⟩ onto |R⟩ = (|H⟩ − i|V⟩)/√2;
//! * `rotator(θ)` is the real rotation `R(θ)` of the field vector.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;

use nalgebra::Matrix2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;
pub type CMat2 = Matrix2<Complex64>;

/// Tolerance for algebraic identities on 2×2 matrices.
pub const ALG_TOL: f64 = 1e-12;
/// Tolerance for the unitarity flag of a [`JonesOperator`].
pub const UNITARY_TOL: f64 = 1e-10;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolarError {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("undefined state: density matrix has zero trace")]
    UndefinedState,
    #[error("element would amplify light: transmission {0} > 1")]
    Gain(f64),
    #[error("invalid operator: {0}")]
    InvalidOperator(String),
}

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Largest absolute entry-wise difference between two matrices.
pub fn max_abs_diff(a: &CMat2, b: &CMat2) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Eigenvalues (ascending) of a Hermitian 2×2 matrix.
pub fn hermitian_eigenvalues(m: &CMat2) -> [f64; 2] {
    let a = m[(0, 0)].re;
    let d = m[(1, 1)].re;
    let b = m[(0, 1)];
    let mean = 0.5 * (a + d);
    let half_gap = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
    [mean - half_gap, mean + half_gap]
}

/// Singular values (ascending) of a general 2×2 matrix.
pub fn singular_values(m: &CMat2) -> [f64; 2] {
    let gram = m.adjoint() * m;
    let [lo, hi] = hermitian_eigenvalues(&gram);
    [lo.max(0.0).sqrt(), hi.max(0.0).sqrt()]
}

/// A normalized polarization state `alpha|H⟩ + beta|V⟩` in canonical
/// global phase (first nonzero amplitude real and non-negative).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PureState {
    alpha: C64,
    beta: C64,
}

impl PureState {
    pub const H: PureState = PureState { alpha: ONE, beta: ZERO };
    pub const V: PureState = PureState { alpha: ZERO, beta: ONE };
    pub const D: PureState = PureState {
        alpha: C64::new(FRAC_1_SQRT_2, 0.0),
        beta: C64::new(FRAC_1_SQRT_2, 0.0),
    };
    pub const A: PureState = PureState {
        alpha: C64::new(FRAC_1_SQRT_2, 0.0),
        beta: C64::new(-FRAC_1_SQRT_2, 0.0),
    };
    pub const R: PureState = PureState {
        alpha: C64::new(FRAC_1_SQRT_2, 0.0),
        beta: C64::new(0.0, -FRAC_1_SQRT_2),
    };
    pub const L: PureState = PureState {
        alpha: C64::new(FRAC_1_SQRT_2, 0.0),
        beta: C64::new(0.0, FRAC_1_SQRT_2),
    };

    /// Normalizes `(alpha, beta)` and fixes the global phase.
    pub fn new(alpha: C64, beta: C64) -> Result<Self, PolarError> {
        let norm = (alpha.norm_sqr() + beta.norm_sqr()).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(PolarError::InvalidState(format!(
                "amplitudes ({alpha}, {beta}) cannot be normalized"
            )));
        }
        let (mut a, mut b) = (alpha / norm, beta / norm);
        // canonical phase: first amplitude that is not negligible made real ≥ 0
        let pivot = if a.norm() > 1e-15 { a } else { b };
        let phase = pivot.conj() / pivot.norm();
        a *= phase;
        b *= phase;
        if a.norm() > 1e-15 {
            a = C64::new(a.re, 0.0);
        } else {
            a = ZERO;
            b = C64::new(b.re, 0.0);
        }
        Ok(PureState { alpha: a, beta: b })
    }

    /// Linear polarization at angle `theta` from H.
    pub fn linear(theta: f64) -> Self {
        PureState::new(c(theta.cos(), 0.0), c(theta.sin(), 0.0)).expect("unit vector")
    }

    /// Maps a Bloch vector direction to a pure state.
    pub fn from_bloch(x: f64, y: f64, z: f64) -> Result<Self, PolarError> {
        let r = (x * x + y * y + z * z).sqrt();
        if r == 0.0 || !r.is_finite() {
            return Err(PolarError::InvalidState("zero Bloch vector".into()));
        }
        let (x, y, z) = (x / r, y / r, z / r);
        let theta = z.clamp(-1.0, 1.0).acos();
        let phi = y.atan2(x);
        PureState::new(c((0.5 * theta).cos(), 0.0), C64::from_polar((0.5 * theta).sin(), phi))
    }

    pub fn alpha(&self) -> C64 {
        self.alpha
    }

    pub fn beta(&self) -> C64 {
        self.beta
    }

    /// `⟨self|other⟩`
    pub fn inner(&self, other: &PureState) -> C64 {
        self.alpha.conj() * other.alpha + self.beta.conj() * other.beta
    }

    /// Bloch vector `(⟨X⟩, ⟨Y⟩, ⟨Z⟩)`.
    pub fn bloch(&self) -> [f64; 3] {
        let cross = self.alpha.conj() * self.beta;
        [
            2.0 * cross.re,
            2.0 * cross.im,
            self.alpha.norm_sqr() - self.beta.norm_sqr(),
        ]
    }

    pub fn projector(&self) -> CMat2 {
        let v = nalgebra::Vector2::new(self.alpha, self.beta);
        v * v.adjoint()
    }

    pub fn to_density(&self) -> DensityMatrix {
        DensityMatrix { m: self.projector() }
    }

    /// Applies an operator and renormalizes; `None` if the result vanishes.
    pub fn evolve(&self, op: &JonesOperator) -> Option<PureState> {
        let v = op.matrix() * nalgebra::Vector2::new(self.alpha, self.beta);
        PureState::new(v[0], v[1]).ok()
    }

    /// Equality up to global phase.
    pub fn approx_eq(&self, other: &PureState, tol: f64) -> bool {
        (1.0 - self.inner(other).norm_sqr()).abs() <= tol
    }
}

impl PartialEq for PureState {
    fn eq(&self, other: &Self) -> bool {
        (self.alpha - other.alpha).norm() <= ALG_TOL && (self.beta - other.beta).norm() <= ALG_TOL
    }
}

impl fmt::Display for PureState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})|H> + ({})|V>", self.alpha, self.beta)
    }
}

/// Alias for the constructor used throughout the crate.
pub fn make_pure(alpha: C64, beta: C64) -> Result<PureState, PolarError> {
    PureState::new(alpha, beta)
}

/// A possibly sub-normalized polarization density operator. Serializes as
/// eight reals, row-major `(re, im)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 8]", try_from = "[f64; 8]")]
pub struct DensityMatrix {
    m: CMat2,
}

impl DensityMatrix {
    /// Validates hermiticity, positivity and `trace ≤ 1`.
    pub fn new(m: CMat2) -> Result<Self, PolarError> {
        if max_abs_diff(&m, &m.adjoint()) > ALG_TOL {
            return Err(PolarError::InvalidState("matrix is not Hermitian".into()));
        }
        let rho = DensityMatrix { m };
        let [lo, _] = rho.eigenvalues();
        if lo < -ALG_TOL {
            return Err(PolarError::InvalidState(format!("negative eigenvalue {lo}")));
        }
        if rho.trace() > 1.0 + ALG_TOL {
            return Err(PolarError::InvalidState(format!("trace {} exceeds 1", rho.trace())));
        }
        Ok(rho)
    }

    /// Skips validation; for internal use on matrices that are PSD by construction.
    pub(crate) fn from_matrix_unchecked(m: CMat2) -> Self {
        DensityMatrix { m }
    }

    pub fn zero() -> Self {
        DensityMatrix { m: CMat2::zeros() }
    }

    pub fn maximally_mixed() -> Self {
        DensityMatrix {
            m: CMat2::identity() * c(0.5, 0.0),
        }
    }

    /// Builds `(I + x X + y Y + z Z)/2` scaled by `weight`.
    pub fn from_bloch(weight: f64, r: [f64; 3]) -> Result<Self, PolarError> {
        let [x, y, z] = r;
        let m = CMat2::new(c(1.0 + z, 0.0), c(x, -y), c(x, y), c(1.0 - z, 0.0)) * c(0.5 * weight, 0.0);
        DensityMatrix::new(m)
    }

    pub fn matrix(&self) -> &CMat2 {
        &self.m
    }

    pub fn trace(&self) -> f64 {
        (self.m[(0, 0)] + self.m[(1, 1)]).re
    }

    pub fn eigenvalues(&self) -> [f64; 2] {
        hermitian_eigenvalues(&self.m)
    }

    /// `tr(ρ²)` of the trace-normalized state.
    pub fn purity(&self) -> Result<f64, PolarError> {
        let cond = self.conditional()?;
        Ok((cond.m * cond.m).trace().re)
    }

    /// The state conditioned on survival, `ρ / tr ρ`.
    pub fn conditional(&self) -> Result<DensityMatrix, PolarError> {
        let t = self.trace();
        if t <= 0.0 {
            return Err(PolarError::UndefinedState);
        }
        Ok(DensityMatrix { m: self.m / c(t, 0.0) })
    }

    pub fn scaled(&self, factor: f64) -> DensityMatrix {
        DensityMatrix {
            m: self.m * c(factor, 0.0),
        }
    }

    /// `⟨ψ|ρ|ψ⟩` for the unnormalized matrix.
    pub fn expectation(&self, psi: &PureState) -> f64 {
        let v = nalgebra::Vector2::new(psi.alpha, psi.beta);
        (v.adjoint() * self.m * v)[(0, 0)].re
    }

    /// Bloch vector of the conditional state.
    pub fn bloch(&self) -> Result<[f64; 3], PolarError> {
        let cond = self.conditional()?;
        let m = cond.m;
        Ok([2.0 * m[(1, 0)].re, 2.0 * m[(1, 0)].im, (m[(0, 0)] - m[(1, 1)]).re])
    }

    pub fn approx_eq(&self, other: &DensityMatrix, tol: f64) -> bool {
        max_abs_diff(&self.m, &other.m) <= tol
    }

    /// Half the trace norm of the difference of the two conditional states.
    pub fn trace_distance(&self, other: &DensityMatrix) -> Result<f64, PolarError> {
        let diff = self.conditional()?.m - other.conditional()?.m;
        let [lo, hi] = hermitian_eigenvalues(&diff);
        Ok(0.5 * (lo.abs() + hi.abs()))
    }

    /// Row-major `[re00, im00, re01, im01, re10, im10, re11, im11]`.
    pub fn to_real_array(&self) -> [f64; 8] {
        matrix_to_reals(&self.m)
    }
}

fn matrix_to_reals(m: &CMat2) -> [f64; 8] {
    [
        m[(0, 0)].re,
        m[(0, 0)].im,
        m[(0, 1)].re,
        m[(0, 1)].im,
        m[(1, 0)].re,
        m[(1, 0)].im,
        m[(1, 1)].re,
        m[(1, 1)].im,
    ]
}

fn reals_to_matrix(r: [f64; 8]) -> CMat2 {
    CMat2::new(c(r[0], r[1]), c(r[2], r[3]), c(r[4], r[5]), c(r[6], r[7]))
}

impl From<DensityMatrix> for [f64; 8] {
    fn from(d: DensityMatrix) -> Self {
        matrix_to_reals(&d.m)
    }
}

impl TryFrom<[f64; 8]> for DensityMatrix {
    type Error = PolarError;
    fn try_from(r: [f64; 8]) -> Result<Self, Self::Error> {
        DensityMatrix::new(reals_to_matrix(r))
    }
}

impl From<JonesOperator> for [f64; 8] {
    fn from(j: JonesOperator) -> Self {
        matrix_to_reals(&j.j)
    }
}

impl TryFrom<[f64; 8]> for JonesOperator {
    type Error = PolarError;
    fn try_from(r: [f64; 8]) -> Result<Self, Self::Error> {
        JonesOperator::new(reals_to_matrix(r))
    }
}

/// Conditional-state fidelity `⟨ψ|ρ/tr ρ|ψ⟩`.
pub fn fidelity(rho: &DensityMatrix, target: &PureState) -> Result<f64, PolarError> {
    let t = rho.trace();
    if t <= 0.0 {
        return Err(PolarError::UndefinedState);
    }
    Ok((rho.expectation(target) / t).clamp(0.0, 1.0))
}

/// `K ρ K†`
pub fn apply(rho: &DensityMatrix, op: &JonesOperator) -> DensityMatrix {
    let m = op.j * rho.m * op.j.adjoint();
    // restore exact hermiticity lost to rounding
    let m = (m + m.adjoint()) * c(0.5, 0.0);
    DensityMatrix { m }
}

/// A passive 2×2 polarization transformation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 8]", try_from = "[f64; 8]")]
pub struct JonesOperator {
    j: CMat2,
    unitary: bool,
}

impl JonesOperator {
    /// Rejects matrices with a singular value above one.
    pub fn new(j: CMat2) -> Result<Self, PolarError> {
        if j.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(PolarError::InvalidOperator("non-finite entry".into()));
        }
        let [_, smax] = singular_values(&j);
        if smax > 1.0 + ALG_TOL {
            return Err(PolarError::Gain(smax * smax));
        }
        Ok(Self::from_matrix_unchecked(j))
    }

    pub(crate) fn from_matrix_unchecked(j: CMat2) -> Self {
        let unitary = max_abs_diff(&(j.adjoint() * j), &CMat2::identity()) <= UNITARY_TOL;
        JonesOperator { j, unitary }
    }

    pub fn matrix(&self) -> &CMat2 {
        &self.j
    }

    pub fn is_unitary(&self) -> bool {
        self.unitary
    }

    pub fn singular_values(&self) -> [f64; 2] {
        singular_values(&self.j)
    }

    /// `self · first`: apply `first`, then `self`.
    pub fn after(&self, first: &JonesOperator) -> JonesOperator {
        JonesOperator::from_matrix_unchecked(self.j * first.j)
    }

    pub fn scaled(&self, amplitude: f64) -> Result<JonesOperator, PolarError> {
        JonesOperator::new(self.j * c(amplitude, 0.0))
    }

    /// Equality up to a global phase factor.
    pub fn eq_up_to_phase(&self, other: &JonesOperator, tol: f64) -> bool {
        // pick the largest entry of `other` to fix the relative phase
        let (idx, pivot) = other
            .j
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .map(|(i, z)| (i, *z))
            .unwrap();
        if pivot.norm() <= tol {
            return max_abs_diff(&self.j, &other.j) <= tol;
        }
        let mine = self.j.iter().nth(idx).copied().unwrap();
        if mine.norm() <= tol {
            return false;
        }
        let phase = (mine / pivot) / (mine / pivot).norm();
        max_abs_diff(&self.j, &(other.j * phase)) <= tol
    }

    pub fn identity() -> Self {
        JonesOperator {
            j: CMat2::identity(),
            unitary: true,
        }
    }

    pub fn pauli_x() -> Self {
        JonesOperator {
            j: CMat2::new(ZERO, ONE, ONE, ZERO),
            unitary: true,
        }
    }

    pub fn pauli_y() -> Self {
        JonesOperator {
            j: CMat2::new(ZERO, -I, I, ZERO),
            unitary: true,
        }
    }

    pub fn pauli_z() -> Self {
        JonesOperator {
            j: CMat2::new(ONE, ZERO, ZERO, -ONE),
            unitary: true,
        }
    }

    /// Real field rotation by `theta` (H toward V).
    pub fn rotator(theta: f64) -> Self {
        let (s, co) = theta.sin_cos();
        JonesOperator::from_matrix_unchecked(CMat2::new(c(co, 0.0), c(-s, 0.0), c(s, 0.0), c(co, 0.0)))
    }

    /// `diag(1, e^{iφ})`
    pub fn birefringent_phase(phi: f64) -> Self {
        JonesOperator::from_matrix_unchecked(CMat2::new(ONE, ZERO, ZERO, C64::from_polar(1.0, phi)))
    }

    /// `exp(−iθX)`: rotation on the Poincaré sphere about the D axis by
    /// `2θ`. At `θ = π/2` it is a bit flip (`−iX`).
    pub fn diagonal_axis_rotation(theta: f64) -> Self {
        let (s, co) = theta.sin_cos();
        JonesOperator::from_matrix_unchecked(CMat2::new(c(co, 0.0), c(0.0, -s), c(0.0, -s), c(co, 0.0)))
    }

    pub fn half_waveplate(theta: f64) -> Self {
        let (s, co) = (2.0 * theta).sin_cos();
        JonesOperator::from_matrix_unchecked(CMat2::new(c(co, 0.0), c(s, 0.0), c(s, 0.0), c(-co, 0.0)))
    }

    pub fn quarter_waveplate(theta: f64) -> Self {
        let r = Self::rotator(theta);
        let core = CMat2::new(ONE, ZERO, ZERO, I);
        let back = Self::rotator(-theta);
        JonesOperator::from_matrix_unchecked(r.j * core * back.j)
    }

    /// Intensity transmissions per axis.
    pub fn attenuator(t_h: f64, t_v: f64) -> Result<Self, PolarError> {
        for t in [t_h, t_v] {
            if t > 1.0 {
                return Err(PolarError::Gain(t));
            }
            if !(t >= 0.0) {
                return Err(PolarError::InvalidOperator(format!("transmission {t} is negative")));
            }
        }
        Ok(JonesOperator::from_matrix_unchecked(CMat2::new(
            c(t_h.sqrt(), 0.0),
            ZERO,
            ZERO,
            c(t_v.sqrt(), 0.0),
        )))
    }

    /// Diagonal part in the H/V basis.
    pub fn diagonal_part(&self) -> JonesOperator {
        JonesOperator::from_matrix_unchecked(CMat2::new(self.j[(0, 0)], ZERO, ZERO, self.j[(1, 1)]))
    }

    /// Off-diagonal part in the H/V basis.
    pub fn off_diagonal_part(&self) -> JonesOperator {
        JonesOperator::from_matrix_unchecked(CMat2::new(ZERO, self.j[(0, 1)], self.j[(1, 0)], ZERO))
    }
}

/// Catalog element selector for [`jones_element`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Element {
    Identity,
    PauliX,
    HalfWaveplate { theta: f64 },
    QuarterWaveplate { theta: f64 },
    Rotator { theta: f64 },
    BirefringentPhase { phi: f64 },
    Attenuator { t_h: f64, t_v: f64 },
}

pub fn jones_element(element: Element) -> Result<JonesOperator, PolarError> {
    Ok(match element {
        Element::Identity => JonesOperator::identity(),
        Element::PauliX => JonesOperator::pauli_x(),
        Element::HalfWaveplate { theta } => JonesOperator::half_waveplate(theta),
        Element::QuarterWaveplate { theta } => JonesOperator::quarter_waveplate(theta),
        Element::Rotator { theta } => JonesOperator::rotator(theta),
        Element::BirefringentPhase { phi } => JonesOperator::birefringent_phase(phi),
        Element::Attenuator { t_h, t_v } => JonesOperator::attenuator(t_h, t_v)?,
    })
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use proptest::prelude::*;

    pub fn arb_pure() -> impl Strategy<Value = PureState> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("nonzero", |(a, b, c_, d)| a * a + b * b + c_ * c_ + d * d > 1e-3)
            .prop_map(|(a, b, c_, d)| PureState::new(c(a, b), c(c_, d)).unwrap())
    }

    pub fn arb_density() -> impl Strategy<Value = DensityMatrix> {
        (0.0f64..=1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(w, x, y, z)| {
            let r = (x * x + y * y + z * z).sqrt();
            let s = if r > 1.0 { 1.0 / r } else { 1.0 };
            DensityMatrix::from_bloch(w, [x * s, y * s, z * s]).unwrap()
        })
    }

    /// Random operator with spectral norm ≤ 1.
    pub fn arb_operator() -> impl Strategy<Value = JonesOperator> {
        (proptest::array::uniform8(-1.0f64..1.0), 0.0f64..=1.0).prop_map(|(e, scale)| {
            let m = CMat2::new(c(e[0], e[1]), c(e[2], e[3]), c(e[4], e[5]), c(e[6], e[7]));
            let [_, smax] = singular_values(&m);
            let norm = if smax > 0.0 { scale / smax } else { 0.0 };
            JonesOperator::new(m * c(norm, 0.0)).unwrap()
        })
    }

    pub fn arb_unitary() -> impl Strategy<Value = JonesOperator> {
        (0.0f64..6.3, 0.0f64..6.3, 0.0f64..6.3, 0.0f64..6.3).prop_map(|(a, b, g, d)| {
            let rz = |t: f64| JonesOperator::birefringent_phase(t);
            let ry = JonesOperator::rotator(b);
            let m = rz(a).after(&ry).after(&rz(g));
            JonesOperator::new(m.matrix() * C64::from_polar(1.0, d)).unwrap()
        })
    }
}
