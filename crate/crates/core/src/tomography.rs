//! Single-qubit state reconstruction from projective coincidence counts.
//!
//! The estimator is a Poisson maximum-likelihood fit over the Cholesky
//! factorization `ρ = T†T / tr(T†T)`, `T = [[t1, 0], [t3 + i t4, t2]]`. The
//! unknown total flux enters every predicted count linearly, so it is
//! eliminated analytically (`N = Σk / Σq`) and the optimizer only sees the
//! four shape parameters. The objective is divided by the total count so that
//! the convergence thresholds do not depend on the exposure.

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counting::{poisson_draw, record_rng, CountRecord};
use crate::polar::{c, fidelity, hermitian_eigenvalues, CMat2, DensityMatrix, PolarError, PureState};

/// Smallest predicted count entering a logarithm.
pub const MU_FLOOR: f64 = 1e-12;
/// Eigenvalue floor used when projecting the linear estimate onto the PSD cone.
pub const EIGEN_CLIP: f64 = 1e-6;
pub const DEFAULT_MC_SAMPLES: usize = 10_000;
pub const MAX_ITERATIONS: usize = 20_000;
const GRAD_TOL: f64 = 1e-8;
const OBJECTIVE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TomographyError {
    #[error("measurement set is not tomographically complete")]
    IncompleteSet,
    #[error("expected {expected} counts, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("need at least 2 Monte Carlo samples, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Polar(#[from] PolarError),
}

/// Four analyzer states whose projectors, together with the identity, span
/// the Hermitian 2×2 matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<(String, PureState)>", try_from = "Vec<(String, PureState)>")]
pub struct MeasurementSet {
    projectors: Vec<(String, PureState)>,
    design_inv: Matrix4<f64>,
}

impl From<MeasurementSet> for Vec<(String, PureState)> {
    fn from(m: MeasurementSet) -> Self {
        m.projectors
    }
}

impl TryFrom<Vec<(String, PureState)>> for MeasurementSet {
    type Error = TomographyError;

    fn try_from(v: Vec<(String, PureState)>) -> Result<Self, Self::Error> {
        MeasurementSet::new(v)
    }
}

impl MeasurementSet {
    pub fn new(projectors: Vec<(String, PureState)>) -> Result<Self, TomographyError> {
        if projectors.len() != 4 {
            return Err(TomographyError::CountMismatch {
                expected: 4,
                got: projectors.len(),
            });
        }
        let design = design_matrix(&projectors);
        // full rank with a comfortable margin; nearly coplanar Bloch vectors
        // give a numerically useless inverse
        let sv = design.singular_values();
        if sv.min() < 1e-6 * sv.max() {
            return Err(TomographyError::IncompleteSet);
        }
        let design_inv = design.try_inverse().ok_or(TomographyError::IncompleteSet)?;
        Ok(MeasurementSet { projectors, design_inv })
    }

    /// `{H, V, D, R}`.
    pub fn standard() -> Self {
        MeasurementSet::new(vec![
            ("H".into(), PureState::H),
            ("V".into(), PureState::V),
            ("D".into(), PureState::D),
            ("R".into(), PureState::R),
        ])
        .expect("standard set is complete")
    }

    pub fn projectors(&self) -> &[(String, PureState)] {
        &self.projectors
    }

    fn inverse(&self) -> &Matrix4<f64> {
        &self.design_inv
    }

    /// Born-rule probabilities `⟨p|ρ|p⟩` for each projector.
    pub fn probabilities(&self, rho: &DensityMatrix) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, (_, p)) in out.iter_mut().zip(&self.projectors) {
            *o = rho.expectation(p);
        }
        out
    }
}

impl Default for MeasurementSet {
    fn default() -> Self {
        MeasurementSet::standard()
    }
}

/// Row `i` maps `(s0, sx, sy, sz)` to `tr(P_i ρ)` with `ρ = (s0 I + s·σ)/2`.
fn design_matrix(projectors: &[(String, PureState)]) -> Matrix4<f64> {
    let mut a = Matrix4::zeros();
    for (i, (_, p)) in projectors.iter().enumerate() {
        let [x, y, z] = p.bloch();
        a[(i, 0)] = 0.5;
        a[(i, 1)] = 0.5 * x;
        a[(i, 2)] = 0.5 * y;
        a[(i, 3)] = 0.5 * z;
    }
    a
}

fn check_counts(counts: &[f64]) -> Result<[f64; 4], TomographyError> {
    if counts.len() != 4 {
        return Err(TomographyError::CountMismatch {
            expected: 4,
            got: counts.len(),
        });
    }
    if counts.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
        return Err(TomographyError::InvalidCounts(format!("{counts:?}")));
    }
    if counts.iter().sum::<f64>() <= 0.0 {
        return Err(TomographyError::InvalidCounts("total counts are zero".into()));
    }
    Ok([counts[0], counts[1], counts[2], counts[3]])
}

/// Counts of a tomography scan, in record order.
pub fn counts_from_records(records: &[CountRecord]) -> Vec<f64> {
    records.iter().map(|r| r.counts).collect()
}

fn bloch_matrix(s: &Vector4<f64>) -> CMat2 {
    CMat2::new(c(s[0] + s[3], 0.0), c(s[1], -s[2]), c(s[1], s[2]), c(s[0] - s[3], 0.0)) * c(0.5, 0.0)
}

/// Unit-trace Hermitian solution of the linear Born-rule system. Can have a
/// negative eigenvalue.
pub fn linear_inversion(counts: &[f64], m: &MeasurementSet) -> Result<CMat2, TomographyError> {
    let k = Vector4::from(check_counts(counts)?);
    let s = m.inverse() * k;
    if s[0] <= 0.0 {
        return Err(TomographyError::InvalidCounts(
            "counts imply non-positive total flux".into(),
        ));
    }
    Ok(bloch_matrix(&(s / s[0])))
}

/// Clips eigenvalues to `EIGEN_CLIP` and renormalizes.
pub fn project_psd(m: &CMat2) -> DensityMatrix {
    let herm = (m + m.adjoint()) * c(0.5, 0.0);
    let eig = nalgebra::SymmetricEigen::new(herm);
    let vals = eig.eigenvalues.map(|v| v.max(EIGEN_CLIP));
    let total: f64 = vals.iter().sum();
    let mut out = CMat2::zeros();
    for i in 0..2 {
        let v = eig.eigenvectors.column(i);
        out += v * v.adjoint() * c(vals[i] / total, 0.0);
    }
    DensityMatrix::from_matrix_unchecked((out + out.adjoint()) * c(0.5, 0.0))
}

fn cholesky_params(rho: &DensityMatrix) -> [f64; 4] {
    // T†T = [[t1² + |w|², conj(w) t2], [w t2, t2²]] with w = t3 + i t4
    let m = rho.matrix();
    let t2 = m[(1, 1)].re.max(EIGEN_CLIP).sqrt();
    let w = m[(1, 0)] / t2;
    let t1 = (m[(0, 0)].re - w.norm_sqr()).max(EIGEN_CLIP).sqrt();
    [t1, t2, w.re, w.im]
}

fn density_from_params(t: &[f64; 4]) -> Option<CMat2> {
    let tm = CMat2::new(c(t[0], 0.0), c(0.0, 0.0), c(t[2], t[3]), c(t[1], 0.0));
    let m = tm.adjoint() * tm;
    let tr = m.trace().re;
    if !(tr > 0.0) || !tr.is_finite() {
        return None;
    }
    Some(m / c(tr, 0.0))
}

struct Likelihood<'a> {
    counts: [f64; 4],
    total: f64,
    m: &'a MeasurementSet,
}

impl Likelihood<'_> {
    /// `−(Σ k ln μ − Σ μ) / Σk` with the flux profiled out.
    fn objective(&self, t: &[f64; 4]) -> f64 {
        let Some(rho) = density_from_params(t) else {
            return f64::INFINITY;
        };
        let rho = DensityMatrix::from_matrix_unchecked(rho);
        let q = self.m.probabilities(&rho);
        let qsum: f64 = q.iter().sum();
        if !(qsum > 0.0) {
            return f64::INFINITY;
        }
        let flux = self.total / qsum;
        let mut ll = 0.0;
        for (k, qi) in self.counts.iter().zip(q) {
            let mu = (flux * qi).max(MU_FLOOR);
            ll += k * mu.ln() - mu;
        }
        -ll / self.total
    }

    fn gradient_norm(&self, t: &[f64; 4]) -> f64 {
        let mut g2 = 0.0;
        for i in 0..4 {
            let h = 1e-6 * t[i].abs().max(1e-3);
            let mut hi = *t;
            let mut lo = *t;
            hi[i] += h;
            lo[i] -= h;
            let d = (self.objective(&hi) - self.objective(&lo)) / (2.0 * h);
            g2 += d * d;
        }
        g2.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Optimum {
    point: [f64; 4],
    value: f64,
    iterations: usize,
    converged: bool,
}

fn nelder_mead<F: Fn(&[f64; 4]) -> f64>(f: &F, start: [f64; 4], step: f64, max_iter: usize) -> Optimum {
    let mut simplex: Vec<([f64; 4], f64)> = Vec::with_capacity(5);
    simplex.push((start, f(&start)));
    for i in 0..4 {
        let mut p = start;
        p[i] += step;
        simplex.push((p, f(&p)));
    }
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[4].1 - simplex[0].1;
        let size = simplex[1..]
            .iter()
            .flat_map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread.abs() < OBJECTIVE_TOL && size < 1e-9 {
            converged = true;
            break;
        }
        let mut centroid = [0.0; 4];
        for (p, _) in &simplex[..4] {
            for j in 0..4 {
                centroid[j] += p[j] / 4.0;
            }
        }
        let worst = simplex[4];
        let along = |coef: f64| {
            let mut p = [0.0; 4];
            for j in 0..4 {
                p[j] = centroid[j] + coef * (worst.0[j] - centroid[j]);
            }
            p
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            simplex[4] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[3].1 {
            simplex[4] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let p = along(-0.5);
                (p, f(&p))
            } else {
                let p = along(0.5);
                (p, f(&p))
            };
            if fc < worst.1.min(fr) {
                simplex[4] = (xc, fc);
            } else {
                let best = simplex[0].0;
                for (p, v) in simplex[1..].iter_mut() {
                    for j in 0..4 {
                        p[j] = best[j] + 0.5 * (p[j] - best[j]);
                    }
                    *v = f(p);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    Optimum {
        point: simplex[0].0,
        value: simplex[0].1,
        iterations,
        converged,
    }
}

/// Maximum-likelihood estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleEstimate {
    pub rho: DensityMatrix,
    /// Fitted total flux: expected counts for a projector with unit probability.
    pub flux: f64,
    pub neg_log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Poisson maximum-likelihood reconstruction. Non-convergence within
/// `MAX_ITERATIONS` simplex steps returns the best iterate with
/// `converged = false`.
pub fn mle_reconstruct(counts: &[f64], m: &MeasurementSet) -> Result<MleEstimate, TomographyError> {
    let k = check_counts(counts)?;
    let total: f64 = k.iter().sum();
    let start = match linear_inversion(&k, m) {
        Ok(lin) => project_psd(&lin),
        Err(_) => DensityMatrix::maximally_mixed(),
    };
    let lik = Likelihood { counts: k, total, m };
    let f = |t: &[f64; 4]| lik.objective(t);

    let mut best = nelder_mead(&f, cholesky_params(&start), 0.05, MAX_ITERATIONS);
    let mut iterations = best.iterations;
    // restarting from the optimum guards against a collapsed simplex
    for _ in 0..3 {
        if iterations >= MAX_ITERATIONS {
            break;
        }
        let next = nelder_mead(&f, best.point, 1e-3, MAX_ITERATIONS - iterations);
        iterations += next.iterations;
        let gained = best.value - next.value;
        if next.value <= best.value {
            best = Optimum { iterations, ..next };
        }
        if gained.abs() < OBJECTIVE_TOL {
            break;
        }
    }
    let converged = (best.converged || lik.gradient_norm(&best.point) < GRAD_TOL) && iterations < MAX_ITERATIONS;

    let rho_m = density_from_params(&best.point).expect("optimum has finite trace");
    let herm = (rho_m + rho_m.adjoint()) * c(0.5, 0.0);
    let rho = DensityMatrix::from_matrix_unchecked(herm);
    let qsum: f64 = m.probabilities(&rho).iter().sum();
    Ok(MleEstimate {
        rho,
        flux: total / qsum,
        neg_log_likelihood: best.value * total,
        iterations,
        converged,
    })
}

/// Summary of a reconstruction against a target state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    /// Row-major `(re, im)` pairs.
    pub rho: DensityMatrix,
    pub fidelity: f64,
    pub mc_mean: f64,
    pub mc_std: f64,
    pub n_samples: usize,
    pub converged: bool,
    /// Monte Carlo resamples whose fit hit the iteration cap.
    pub mc_non_converged: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McStats {
    pub mean: f64,
    pub std: f64,
    pub n_samples: usize,
    pub non_converged: usize,
}

/// Fidelity spread under Poisson resampling of the observed counts.
///
/// Sample `i` draws its four counts from `record_rng(seed, i)`. Fidelities are
/// collected in sample order and reduced sequentially, so the result does not
/// depend on thread scheduling. Resamples with zero total count have no
/// estimate and are redrawn from the next stream value of the same RNG.
pub fn monte_carlo_uncertainty(
    counts: &[f64],
    m: &MeasurementSet,
    target: &PureState,
    n_samples: usize,
    seed: u64,
) -> Result<McStats, TomographyError> {
    let k = check_counts(counts)?;
    if n_samples < 2 {
        return Err(TomographyError::TooFewSamples(n_samples));
    }
    let samples: Vec<(f64, bool)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = record_rng(seed, i);
            loop {
                let draw: Vec<f64> = k.iter().map(|&mean| poisson_draw(mean, &mut rng) as f64).collect();
                if draw.iter().sum::<f64>() > 0.0 {
                    let est = mle_reconstruct(&draw, m)?;
                    return Ok((fidelity(&est.rho, target)?, est.converged));
                }
            }
        })
        .collect::<Result<_, TomographyError>>()?;
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.0 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(McStats {
        mean,
        std: var.sqrt(),
        n_samples,
        non_converged: samples.iter().filter(|s| !s.1).count(),
    })
}

/// MLE point estimate plus Monte Carlo error bar.
pub fn reconstruct(
    counts: &[f64],
    m: &MeasurementSet,
    target: &PureState,
    n_samples: usize,
    seed: u64,
) -> Result<ReconstructionResult, TomographyError> {
    let est = mle_reconstruct(counts, m)?;
    let mc = monte_carlo_uncertainty(counts, m, target, n_samples, seed)?;
    Ok(ReconstructionResult {
        rho: est.rho,
        fidelity: fidelity(&est.rho, target)?,
        mc_mean: mc.mean,
        mc_std: mc.std,
        n_samples,
        converged: est.converged,
        mc_non_converged: mc.non_converged,
    })
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(m: &CMat2) -> f64 {
    hermitian_eigenvalues(m)[0]
}
