//! Synthetic coincidence counting.
//!
//! Storage outcomes are deterministic; all randomness lives here. Each
//! record of a sampled scan draws from its own ChaCha8 stream: the RNG is
//! seeded with the scan seed and the stream number is the record index, so
//! records can be generated in any order (or in parallel) with identical
//! results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{simulate_storage, EngineError, MemoryConfig, StorageOutcome};
use crate::polar::PureState;

#[derive(Debug, Error)]
pub enum CountingError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid acquisition: {0}")]
    InvalidAcquisition(String),
    #[error("empty scan plan")]
    EmptyScan,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Analyzer setting of one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Setting {
    /// Linear polarizer at `angle` radians from H.
    Polarizer { angle: f64 },
    /// Projection onto a named pure state.
    Projector { label: String, state: PureState },
}

impl Setting {
    pub fn projector_state(&self) -> PureState {
        match self {
            Setting::Polarizer { angle } => PureState::linear(*angle),
            Setting::Projector { state, .. } => *state,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            Setting::Polarizer { .. } => "polarizer",
            Setting::Projector { label, .. } => label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub setting: Setting,
    /// Numeric coordinate of the setting (angle, projector index or N).
    pub setting_value: f64,
    /// Integral when sampled; the exact mean in noiseless mode.
    pub counts: f64,
    pub acquisition_s: f64,
    pub n_cycles: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sampling {
    /// Counts are the exact Poisson means.
    Noiseless,
    Poisson {
        seed: u64,
    },
}

impl Sampling {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Sampling::Noiseless => None,
            Sampling::Poisson { seed } => Some(*seed),
        }
    }
}

/// Source and detection settings shared by every record of a scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    /// Heralded pairs per second delivered to C1.
    pub pair_rate_hz: f64,
    /// Lumped detector, filter and analyzer efficiency.
    pub detection_eff: f64,
    pub acquisition_s: f64,
    /// Flat accidental/dark coincidence rate added to every setting.
    pub background_rate_hz: f64,
    pub sampling: Sampling,
}

impl Acquisition {
    pub fn validate(&self) -> Result<(), CountingError> {
        let bad = |m: String| Err(CountingError::InvalidAcquisition(m));
        if !(self.pair_rate_hz >= 0.0) || !self.pair_rate_hz.is_finite() {
            return bad(format!("pair rate {}", self.pair_rate_hz));
        }
        if !(0.0..=1.0).contains(&self.detection_eff) {
            return bad(format!("detection efficiency {}", self.detection_eff));
        }
        if !(self.acquisition_s > 0.0) || !self.acquisition_s.is_finite() {
            return bad(format!("acquisition time {}", self.acquisition_s));
        }
        if !(self.background_rate_hz >= 0.0) {
            return bad(format!("background rate {}", self.background_rate_hz));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScanPlan {
    Malus {
        angles: Vec<f64>,
    },
    Tomography {
        projectors: Vec<(String, PureState)>,
    },
    Decay {
        n_values: Vec<usize>,
        projector: (String, PureState),
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanDataset {
    pub records: Vec<CountRecord>,
    pub source_pair_rate: f64,
    pub seed: Option<u64>,
}

/// One row of the flat record table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub setting_label: String,
    pub setting_value: f64,
    pub counts: f64,
    pub acquisition_s: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: Option<u64>,
}

impl ScanDataset {
    pub fn rows(&self) -> Vec<CountRow> {
        self.records
            .iter()
            .map(|r| CountRow {
                setting_label: r.setting.label().to_string(),
                setting_value: r.setting_value,
                counts: r.counts,
                acquisition_s: r.acquisition_s,
                n: r.n_cycles,
                seed: self.seed,
            })
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), CountingError> {
        let mut out = csv::Writer::from_writer(w);
        for row in self.rows() {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self.rows()).expect("rows serialize")
    }

    pub fn counts(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.counts).collect()
    }
}

/// Coincidence rate behind a projector on the gated retrieved state.
pub fn expected_rate(outcome: &StorageOutcome, projector: &PureState, pair_rate_hz: f64, detection_eff: f64) -> f64 {
    match &outcome.retrieved {
        // ⟨p|ρ|p⟩ on the unnormalized state = weight · ⟨p|ρ_cond|p⟩
        Some(e) => pair_rate_hz * detection_eff * e.state.expectation(projector).max(0.0),
        None => 0.0,
    }
}

/// RNG for record `index` of a scan seeded with `seed`.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One Poisson draw with the given mean.
pub fn poisson_draw<R: rand::Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("positive finite mean");
    d.sample(rng) as u64
}

/// Poisson count for `rate · acquisition_s`, deterministic in `seed`.
pub fn sample_counts(rate_hz: f64, acquisition_s: f64, seed: u64) -> u64 {
    poisson_draw(rate_hz * acquisition_s, &mut record_rng(seed, 0))
}

fn finish_records(settings: Vec<(Setting, f64, usize, f64)>, acq: &Acquisition) -> Vec<CountRecord> {
    settings
        .into_iter()
        .enumerate()
        .map(|(i, (setting, value, n_cycles, rate))| {
            let mean = (rate + acq.background_rate_hz) * acq.acquisition_s;
            let counts = match acq.sampling {
                Sampling::Noiseless => mean,
                Sampling::Poisson { seed } => poisson_draw(mean, &mut record_rng(seed, i as u64)) as f64,
            };
            CountRecord {
                setting,
                setting_value: value,
                counts,
                acquisition_s: acq.acquisition_s,
                n_cycles,
            }
        })
        .collect()
}

/// Simulates storage and synthesizes one record per setting of `plan`.
/// Decay scans vary the cycle count and ignore `n_cycles`.
pub fn run_scan(
    cfg: &MemoryConfig,
    input: &PureState,
    n_cycles: usize,
    plan: &ScanPlan,
    acq: &Acquisition,
) -> Result<ScanDataset, CountingError> {
    acq.validate()?;
    let rate = |outcome: &StorageOutcome, p: &PureState| expected_rate(outcome, p, acq.pair_rate_hz, acq.detection_eff);
    let settings: Vec<(Setting, f64, usize, f64)> = match plan {
        ScanPlan::Malus { angles } => {
            if angles.is_empty() {
                return Err(CountingError::EmptyScan);
            }
            let outcome = simulate_storage(cfg, input, n_cycles)?;
            angles
                .iter()
                .map(|&a| {
                    let s = Setting::Polarizer { angle: a };
                    let r = rate(&outcome, &s.projector_state());
                    (s, a, n_cycles, r)
                })
                .collect()
        }
        ScanPlan::Tomography { projectors } => {
            if projectors.is_empty() {
                return Err(CountingError::EmptyScan);
            }
            let outcome = simulate_storage(cfg, input, n_cycles)?;
            projectors
                .iter()
                .enumerate()
                .map(|(i, (label, p))| {
                    let r = rate(&outcome, p);
                    (
                        Setting::Projector {
                            label: label.clone(),
                            state: *p,
                        },
                        i as f64,
                        n_cycles,
                        r,
                    )
                })
                .collect()
        }
        ScanPlan::Decay { n_values, projector } => {
            if n_values.is_empty() {
                return Err(CountingError::EmptyScan);
            }
            let outcomes = n_values
                .par_iter()
                .map(|&n| simulate_storage(cfg, input, n))
                .collect::<Result<Vec<_>, _>>()?;
            n_values
                .iter()
                .zip(&outcomes)
                .map(|(&n, o)| {
                    (
                        Setting::Projector {
                            label: projector.0.clone(),
                            state: projector.1,
                        },
                        n as f64,
                        n,
                        rate(o, &projector.1),
                    )
                })
                .collect()
        }
    };
    Ok(ScanDataset {
        records: finish_records(settings, acq),
        source_pair_rate: acq.pair_rate_hz,
        seed: acq.sampling.seed(),
    })
}
