//! Visibility and decay fits, and loss-budget projection.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counting::CountRecord;
use crate::engine::{derive_transmission_params, efficiency, EngineError, MemoryConfig, TransmissionParams};
use crate::optics::{fiber_transmission, nominal_attenuation_db_per_km, ComponentKind, ComponentSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("degenerate design: {0}")]
    Rank(String),
    #[error("no signal: {0}")]
    NoSignal(String),
    #[error("length mismatch: {0} settings, {1} counts")]
    LengthMismatch(usize, usize),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("no nominal fiber attenuation for {0} nm")]
    UnknownWavelength(f64),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// `C(θ) = A (1 + V cos 2(θ − θ₀)) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MalusFit {
    pub visibility: f64,
    pub theta0: f64,
    pub amplitude: f64,
    pub sigma_visibility: f64,
    /// The unconstrained optimum had V > 1.
    pub clamped: bool,
    pub chi2: f64,
    pub dof: usize,
}

impl MalusFit {
    pub fn predict(&self, theta: f64) -> f64 {
        self.amplitude * (1.0 + self.visibility * (2.0 * (theta - self.theta0)).cos()) / 2.0
    }
}

fn check_finite_counts(counts: &[f64]) -> Result<(), FitError> {
    if counts.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
        return Err(FitError::InvalidData("counts must be finite and non-negative".into()));
    }
    Ok(())
}

/// Weighted least-squares Malus fit with `σᵢ² = max(kᵢ, 1)`.
///
/// Writing the model as `a + b cos 2θ + c sin 2θ` makes it linear, so the
/// weighted optimum is found in closed form; `A = 2a`, `V = √(b² + c²)/a`,
/// `θ₀ = atan2(c, b)/2`. `σ_V` propagates the parameter covariance through
/// that map to first order.
pub fn fit_malus(angles: &[f64], counts: &[f64]) -> Result<MalusFit, FitError> {
    if angles.len() != counts.len() {
        return Err(FitError::LengthMismatch(angles.len(), counts.len()));
    }
    check_finite_counts(counts)?;
    let mut distinct: Vec<f64> = angles.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    if distinct.len() < 5 {
        return Err(FitError::Rank(format!("{} distinct angles, need 5", distinct.len())));
    }
    let span = distinct[distinct.len() - 1] - distinct[0];
    if span < std::f64::consts::PI - 1e-9 {
        return Err(FitError::Rank(format!("angles span {span:.4} rad, need π")));
    }

    let mut xtwx = Matrix3::<f64>::zeros();
    let mut xtwy = Vector3::<f64>::zeros();
    for (&theta, &k) in angles.iter().zip(counts) {
        let x = Vector3::new(1.0, (2.0 * theta).cos(), (2.0 * theta).sin());
        let w = 1.0 / k.max(1.0);
        xtwx += x * x.transpose() * w;
        xtwy += x * (w * k);
    }
    let cov = xtwx
        .try_inverse()
        .ok_or_else(|| FitError::Rank("singular normal equations".into()))?;
    let p = cov * xtwy;
    let (a, b, c) = (p[0], p[1], p[2]);
    if !(a > 0.0) {
        return Err(FitError::NoSignal("fitted mean count is not positive".into()));
    }
    let r = b.hypot(c);
    let v_raw = r / a;

    // dV/d(a, b, c); at r = 0 the direction is undefined and the radial
    // variance is used instead
    let var_v = if r > 1e-12 * a {
        let g = Vector3::new(-v_raw / a, b / (a * r), c / (a * r));
        (g.transpose() * cov * g)[(0, 0)]
    } else {
        0.5 * (cov[(1, 1)] + cov[(2, 2)]) / (a * a)
    };

    let mut chi2 = 0.0;
    for (&theta, &k) in angles.iter().zip(counts) {
        let mu = a + b * (2.0 * theta).cos() + c * (2.0 * theta).sin();
        chi2 += (k - mu).powi(2) / k.max(1.0);
    }
    Ok(MalusFit {
        visibility: v_raw.min(1.0),
        theta0: 0.5 * c.atan2(b),
        amplitude: 2.0 * a,
        sigma_visibility: var_v.max(0.0).sqrt(),
        clamped: v_raw > 1.0,
        chi2,
        dof: angles.len() - 3,
    })
}

/// Malus fit over records whose setting value is the polarizer angle.
pub fn fit_malus_records(records: &[CountRecord]) -> Result<MalusFit, FitError> {
    let angles: Vec<f64> = records.iter().map(|r| r.setting_value).collect();
    let counts: Vec<f64> = records.iter().map(|r| r.counts).collect();
    fit_malus(&angles, &counts)
}

/// `C(N) = C₁ γ^{N−1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub gamma_per_cycle: f64,
    pub sigma_gamma: f64,
    /// Fitted count at N = 1.
    pub prefactor: f64,
    /// The unconstrained optimum had γ > 1.
    pub clamped: bool,
    /// Points dropped because their count was zero.
    pub excluded_zero: usize,
}

impl DecayFit {
    pub fn predict(&self, n: usize) -> f64 {
        self.prefactor * self.gamma_per_cycle.powi(n as i32 - 1)
    }
}

/// Straight-line fit of `ln kᵢ` against `N − 1` with weights `kᵢ` (the inverse
/// variance of a log Poisson count).
pub fn fit_decay(n_values: &[usize], counts: &[f64]) -> Result<DecayFit, FitError> {
    if n_values.len() != counts.len() {
        return Err(FitError::LengthMismatch(n_values.len(), counts.len()));
    }
    check_finite_counts(counts)?;
    if n_values.len() < 3 {
        return Err(FitError::Rank(format!("{} points, need 3", n_values.len())));
    }
    if n_values.contains(&0) {
        return Err(FitError::InvalidData("decay fits start at N = 1".into()));
    }
    if counts.iter().all(|&k| k == 0.0) {
        return Err(FitError::NoSignal("all counts are zero".into()));
    }
    let mut xtwx = Matrix2::<f64>::zeros();
    let mut xtwy = Vector2::<f64>::zeros();
    let mut used = Vec::new();
    for (&n, &k) in n_values.iter().zip(counts) {
        if k > 0.0 {
            let x = Vector2::new(1.0, n as f64 - 1.0);
            xtwx += x * x.transpose() * k;
            xtwy += x * (k * k.ln());
            used.push(n);
        }
    }
    used.sort_unstable();
    used.dedup();
    if used.len() < 2 {
        return Err(FitError::Rank("fewer than two distinct N with counts".into()));
    }
    let cov = xtwx
        .try_inverse()
        .ok_or_else(|| FitError::Rank("singular normal equations".into()))?;
    let p = cov * xtwy;
    let gamma = p[1].exp();
    Ok(DecayFit {
        gamma_per_cycle: gamma.min(1.0),
        sigma_gamma: gamma * cov[(1, 1)].max(0.0).sqrt(),
        prefactor: p[0].exp(),
        clamped: gamma > 1.0,
        excluded_zero: counts.iter().filter(|&&k| k == 0.0).count(),
    })
}

pub fn fit_decay_records(records: &[CountRecord]) -> Result<DecayFit, FitError> {
    let n: Vec<usize> = records.iter().map(|r| r.n_cycles).collect();
    let counts: Vec<f64> = records.iter().map(|r| r.counts).collect();
    fit_decay(&n, &counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub params: TransmissionParams,
    /// `(N, η_N)` for `N = 0..=n_max`.
    pub eta_table: Vec<(usize, f64)>,
    pub per_cycle: f64,
    /// Round-trip transmission of the fiber segments alone, per cycle.
    pub fiber_factor: f64,
    /// `None` for a lossless loop.
    pub lifetime_cycles_1e: Option<f64>,
    pub lifetime_time_1e_ns: Option<f64>,
    pub delta_tau_ns: f64,
    pub wavelength_nm: f64,
}

/// Replaces every fiber segment's attenuation by the nominal value at
/// `wavelength_nm`.
pub fn fibers_at_wavelength(inventory: &[ComponentSpec], wavelength_nm: f64) -> Result<Vec<ComponentSpec>, FitError> {
    let atten = nominal_attenuation_db_per_km(wavelength_nm).ok_or(FitError::UnknownWavelength(wavelength_nm))?;
    Ok(inventory
        .iter()
        .cloned()
        .map(|mut c| {
            if c.kind == ComponentKind::FiberSegment {
                c.atten_db_per_km = atten;
            }
            c
        })
        .collect())
}

/// Efficiency scaling implied by a component inventory. Fiber attenuations
/// are taken from the inventory as given; `wavelength_nm` is recorded in the
/// report (see [`fibers_at_wavelength`]).
pub fn project_budget(
    inventory: &[ComponentSpec],
    delta_tau_ns: f64,
    wavelength_nm: f64,
    n_max: usize,
) -> Result<BudgetReport, FitError> {
    let mut cfg = MemoryConfig::ideal(delta_tau_ns);
    cfg.components = inventory.to_vec();
    let params = derive_transmission_params(&cfg)?;
    let fiber_factor = inventory
        .iter()
        .filter(|c| c.kind == ComponentKind::FiberSegment)
        .map(|c| fiber_transmission(c.length_m, c.atten_db_per_km, true))
        .product();
    let per_cycle = params.g22;
    let lifetime = (per_cycle < 1.0 && per_cycle > 0.0).then(|| -1.0 / per_cycle.ln());
    Ok(BudgetReport {
        params,
        eta_table: (0..=n_max).map(|n| (n, efficiency(&params, n))).collect(),
        per_cycle,
        fiber_factor,
        lifetime_cycles_1e: lifetime,
        lifetime_time_1e_ns: lifetime.map(|l| l * delta_tau_ns),
        delta_tau_ns,
        wavelength_nm,
    })
}

/// 1/e lifetime in cycles for a per-cycle transmission.
pub fn lifetime_cycles(per_cycle: f64) -> Option<f64> {
    (per_cycle > 0.0 && per_cycle < 1.0).then(|| -1.0 / per_cycle.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::CouplerPath;
    use std::f64::consts::PI;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 * PI / (n - 1) as f64).collect()
    }

    #[test]
    fn malus_exact_cos2() {
        let a = grid(13);
        let k: Vec<f64> = a.iter().map(|t| 1e4 * t.cos().powi(2)).collect();
        let f = fit_malus(&a, &k).unwrap();
        assert!((f.visibility - 1.0).abs() < 1e-9);
        assert!(f.theta0.abs() < 1e-9);
        assert!((f.amplitude - 1e4).abs() < 1e-6);
    }

    #[test]
    fn malus_constant_counts() {
        let a = grid(9);
        let f = fit_malus(&a, &[500.0; 9]).unwrap();
        assert!(f.visibility < 1e-12);
        assert!(f.sigma_visibility > 0.0);
    }

    #[test]
    fn malus_recovers_phase_and_clamps() {
        let a = grid(13);
        let k: Vec<f64> = a
            .iter()
            .map(|t| 400.0 * (1.0 + 0.7 * (2.0 * (t - 0.3)).cos()))
            .collect();
        let f = fit_malus(&a, &k).unwrap();
        assert!((f.visibility - 0.7).abs() < 1e-9);
        assert!((f.theta0 - 0.3).abs() < 1e-9);
        assert!(!f.clamped);

        let over: Vec<f64> = a
            .iter()
            .map(|t| (1000.0 * (1.0 + 1.1 * (2.0 * t).cos())).max(0.0))
            .collect();
        let f = fit_malus(&a, &over).unwrap();
        assert_eq!(f.visibility, 1.0);
        assert!(f.clamped);
    }

    #[test]
    fn malus_rejects_degenerate_grids() {
        let few = [0.0, 0.5, 1.0, 2.0];
        assert!(matches!(fit_malus(&few, &[1.0; 4]), Err(FitError::Rank(_))));
        let narrow = grid(13).iter().map(|t| t / 2.0).collect::<Vec<_>>();
        assert!(matches!(fit_malus(&narrow, &[1.0; 13]), Err(FitError::Rank(_))));
        let repeated = [0.0, 0.0, 0.0, 0.0, PI, PI];
        assert!(matches!(fit_malus(&repeated, &[1.0; 6]), Err(FitError::Rank(_))));
        assert!(matches!(
            fit_malus(&grid(6), &[1.0; 5]),
            Err(FitError::LengthMismatch(6, 5))
        ));
    }

    #[test]
    fn decay_examples() {
        let n: Vec<usize> = (1..=8).collect();
        let k: Vec<f64> = n.iter().map(|&n| 1e4 * 0.49f64.powi(n as i32 - 1)).collect();
        let f = fit_decay(&n, &k).unwrap();
        assert!((f.gamma_per_cycle - 0.49).abs() < 1e-12);
        assert!((f.prefactor - 1e4).abs() < 1e-6);

        let flat = fit_decay(&n, &[300.0; 8]).unwrap();
        assert!((flat.gamma_per_cycle - 1.0).abs() < 1e-12);

        let p = TransmissionParams::PAPER_SHORT;
        let eta: Vec<f64> = n.iter().map(|&n| efficiency(&p, n)).collect();
        assert!((fit_decay(&n, &eta).unwrap().gamma_per_cycle - p.g22).abs() < 1e-12);
    }

    #[test]
    fn decay_zero_handling() {
        let n: Vec<usize> = (1..=5).collect();
        assert!(matches!(fit_decay(&n, &[0.0; 5]), Err(FitError::NoSignal(_))));
        let f = fit_decay(&n, &[100.0, 50.0, 25.0, 0.0, 6.25]).unwrap();
        assert_eq!(f.excluded_zero, 1);
        assert!((f.gamma_per_cycle - 0.5).abs() < 1e-12);
        let rising = fit_decay(&n, &[10.0, 20.0, 40.0, 80.0, 160.0]).unwrap();
        assert!(rising.clamped);
        assert_eq!(rising.gamma_per_cycle, 1.0);
        assert!(fit_decay(&[1, 2], &[1.0, 1.0]).is_err());
        assert!(fit_decay(&[0, 1, 2], &[1.0, 1.0, 1.0]).is_err());
    }

    fn inventory(fiber_m: f64, atten: f64) -> Vec<ComponentSpec> {
        let mut inv = MemoryConfig::ideal(36.5).components;
        for c in inv.iter_mut() {
            if c.kind == ComponentKind::FiberSegment {
                c.length_m = fiber_m;
                c.atten_db_per_km = atten;
            }
            if c.kind == ComponentKind::Coupler && c.path == Some(CouplerPath::C2C2) {
                c.transmission = crate::optics::Transmission::uniform(0.99);
            }
        }
        inv
    }

    #[test]
    fn budget_fiber_factor_and_lifetime() {
        let inv = fibers_at_wavelength(&inventory(5000.0, 0.0), 780.0).unwrap();
        let r = project_budget(&inv, 50_000.0, 780.0, 8).unwrap();
        assert!((r.fiber_factor - 1e-4).abs() < 1e-16);
        assert!((r.per_cycle - 0.99e-4).abs() < 1e-15);

        let lossless = project_budget(&inventory(0.5, 0.0), 36.5, 780.0, 4).unwrap();
        assert!((lossless.lifetime_cycles_1e.unwrap() - 99.4992).abs() < 1e-3);
        assert!((lossless.lifetime_time_1e_ns.unwrap() - 36.5 * 99.4992).abs() < 0.05);
        for (n, eta) in &lossless.eta_table {
            assert!((eta - efficiency(&lossless.params, *n)).abs() < 1e-12);
        }
        assert_eq!(lossless.eta_table.len(), 5);
        assert_eq!(lifetime_cycles(1.0), None);
        assert!(fibers_at_wavelength(&inv, 1064.0).is_err());
    }
}
