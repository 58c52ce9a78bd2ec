//! Scenario files, presets and the experiment pipelines behind the CLI.
//!
//! A scenario is a TOML document. It may name a preset; the preset's table is
//! loaded first and the file's keys are merged over it (tables merge key by
//! key, everything else, arrays included, is replaced). Pipelines are pure:
//! they return a [`Report`] holding the bytes of every output file, and
//! [`write_report`] puts them on disk together with a `metadata.json` that
//! carries the only non-reproducible field, the wall-clock timestamp.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::counting::{run_scan, Acquisition, CountingError, Sampling, ScanDataset, ScanPlan};
use crate::engine::{
    derive_transmission_params, efficiency, simulate_storage, EngineError, MemoryConfig, StorageOutcome,
    TransmissionParams,
};
use crate::fitting::{
    fibers_at_wavelength, fit_decay_records, fit_malus_records, project_budget, BudgetReport, FitError,
};
use crate::optics::ComponentKind;
use crate::polar::{fidelity, PolarError, PureState};
use crate::tomography::{counts_from_records, reconstruct, MeasurementSet, TomographyError};

pub const PRESET_NAMES: [&str; 3] = ["paper-short", "paper-long", "paper-improved"];

fn preset_source(name: &str) -> Option<&'static str> {
    match name {
        "paper-short" => Some(include_str!("../presets/paper-short.toml")),
        "paper-long" => Some(include_str!("../presets/paper-long.toml")),
        "paper-improved" => Some(include_str!("../presets/paper-improved.toml")),
        _ => None,
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("syntax error{}: {message}", line_suffix(*.line))]
    Syntax { line: Option<usize>, message: String },
    #[error("schema error at `{path}`{}: {message}", line_suffix(*.line))]
    Schema {
        path: String,
        line: Option<usize>,
        message: String,
    },
    #[error("unknown preset `{0}` (known: paper-short, paper-long, paper-improved)")]
    UnknownPreset(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("sampled scans need a seed; set `seed` or pass --seed")]
    MissingSeed,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Counting(#[from] CountingError),
    #[error(transparent)]
    Tomography(#[from] TomographyError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Polar(#[from] PolarError),
}

fn line_suffix(line: Option<usize>) -> String {
    line.map(|l| format!(" (line {l})")).unwrap_or_default()
}

impl ScenarioError {
    pub fn kind(&self) -> &'static str {
        match self {
            ScenarioError::Io { .. } => "io",
            ScenarioError::Syntax { .. } => "syntax",
            ScenarioError::Schema { .. } => "schema",
            ScenarioError::UnknownPreset(_) => "unknown_preset",
            ScenarioError::Invalid(_) => "invalid_scenario",
            ScenarioError::MissingSeed => "missing_seed",
            ScenarioError::Engine(EngineError::Unschedulable(_))
            | ScenarioError::Counting(CountingError::Engine(EngineError::Unschedulable(_)))
            | ScenarioError::Fit(FitError::Engine(EngineError::Unschedulable(_))) => "unschedulable",
            ScenarioError::Engine(_) => "engine",
            ScenarioError::Counting(_) => "counting",
            ScenarioError::Tomography(_) => "tomography",
            ScenarioError::Fit(_) => "fit",
            ScenarioError::Polar(_) => "polar",
        }
    }

    /// Machine-readable form printed by the CLI.
    pub fn to_json(&self) -> Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            ScenarioError::Schema { path, line, .. } => {
                v["path"] = json!(path);
                v["line"] = json!(line);
            }
            ScenarioError::Syntax { line, .. } => v["line"] = json!(line),
            ScenarioError::Io { path, .. } => v["file"] = json!(path),
            _ => {}
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    /// Heralded pairs per second at C1.
    pub pair_rate_hz: f64,
    #[serde(default = "one")]
    pub detection_eff: f64,
    #[serde(default = "sixty")]
    pub acquisition_s: f64,
    #[serde(default)]
    pub background_rate_hz: f64,
    /// Report exact means instead of Poisson draws.
    #[serde(default)]
    pub noiseless: bool,
}

fn one() -> f64 {
    1.0
}
fn sixty() -> f64 {
    60.0
}
fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MalusSettings {
    #[serde(default = "three")]
    pub n_cycles: usize,
    #[serde(default = "default_angles")]
    pub angles_deg: Vec<f64>,
    /// Input states scanned; defaults to the linear members of `input_states`.
    #[serde(default)]
    pub states: Option<Vec<String>>,
}

fn default_angles() -> Vec<f64> {
    (0..=12).map(|i| 15.0 * i as f64).collect()
}

impl Default for MalusSettings {
    fn default() -> Self {
        MalusSettings {
            n_cycles: 3,
            angles_deg: default_angles(),
            states: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TomoSettings {
    #[serde(default = "three")]
    pub n_cycles: usize,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default = "default_projectors")]
    pub projectors: Vec<String>,
}

fn default_mc() -> usize {
    crate::tomography::DEFAULT_MC_SAMPLES
}

fn default_projectors() -> Vec<String> {
    ["H", "V", "D", "R"].iter().map(|s| s.to_string()).collect()
}

impl Default for TomoSettings {
    fn default() -> Self {
        TomoSettings {
            n_cycles: 3,
            mc_samples: default_mc(),
            projectors: default_projectors(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecaySettings {
    /// Analyzer state; the input state itself when absent.
    #[serde(default)]
    pub projector: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSettings {
    #[serde(default = "eight")]
    pub n_max: usize,
    #[serde(default = "default_wavelength")]
    pub wavelength_nm: f64,
    /// Reset every fiber segment to the nominal attenuation at `wavelength_nm`.
    #[serde(default)]
    pub retune_fibers: bool,
    /// Replaces the length of the fiber segment labelled `spool`.
    #[serde(default)]
    pub spool_length_m: Option<f64>,
    /// Loop time used for lifetimes; defaults to `memory.delta_tau_ns`.
    #[serde(default)]
    pub delta_tau_ns: Option<f64>,
}

fn eight() -> usize {
    8
}
fn default_wavelength() -> f64 {
    780.0
}

impl Default for BudgetSettings {
    fn default() -> Self {
        BudgetSettings {
            n_max: 8,
            wavelength_nm: 780.0,
            retune_fibers: false,
            spool_length_m: None,
            delta_tau_ns: None,
        }
    }
}

/// Polarization error injected through the delay-line FPC so that the
/// forward model reaches a target quality for one state and cycle count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectSettings {
    #[serde(default)]
    pub fidelity: Option<f64>,
    #[serde(default)]
    pub visibility: Option<f64>,
    pub state: String,
    #[serde(default = "three")]
    pub n_cycles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub preset: Option<String>,
    pub memory: MemoryConfig,
    /// Target segment transmissions; couplers are rescaled to meet them.
    #[serde(default)]
    pub calibration: Option<TransmissionParams>,
    pub source: SourceConfig,
    #[serde(default = "default_states")]
    pub input_states: Vec<String>,
    #[serde(default = "default_n_range")]
    pub n_range: [usize; 2],
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub malus: MalusSettings,
    #[serde(default)]
    pub tomo: TomoSettings,
    #[serde(default)]
    pub decay: DecaySettings,
    #[serde(default)]
    pub budget: BudgetSettings,
    #[serde(default)]
    pub inject: Option<InjectSettings>,
    /// FPC rotation error chosen by the injection step.
    #[serde(default, skip_deserializing)]
    pub injected_fpc_error: Option<f64>,
}

fn default_states() -> Vec<String> {
    vec!["H".into(), "D".into(), "R".into()]
}

fn default_n_range() -> [usize; 2] {
    [1, 8]
}

/// Parses `H`, `V`, `D`, `A`, `R`, `L` or `linear:<degrees>`.
pub fn parse_state(name: &str) -> Result<PureState, ScenarioError> {
    let s = match name {
        "H" => PureState::H,
        "V" => PureState::V,
        "D" => PureState::D,
        "A" => PureState::A,
        "R" => PureState::R,
        "L" => PureState::L,
        other => {
            let deg = other
                .strip_prefix("linear:")
                .and_then(|d| d.trim().parse::<f64>().ok())
                .ok_or_else(|| ScenarioError::Invalid(format!("unknown state `{other}`")))?;
            PureState::linear(deg.to_radians())
        }
    };
    Ok(s)
}

fn is_linear(s: &PureState) -> bool {
    s.bloch()[1].abs() < 1e-9
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(src: &str) -> Result<toml::Table, ScenarioError> {
    src.parse::<toml::Table>().map_err(|e| ScenarioError::Syntax {
        line: e.span().map(|s| line_of(src, s.start)),
        message: e.message().to_string(),
    })
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Best-effort source line for a dotted field path such as
/// `memory.components[2].kind`.
fn locate(src: &str, path: &str) -> Option<usize> {
    let segments: Vec<&str> = path
        .split('.')
        .map(|s| s.split('[').next().unwrap_or(s))
        .filter(|s| !s.is_empty())
        .collect();
    for depth in (1..=segments.len()).rev() {
        let key = segments[depth - 1];
        let header = segments[..depth].join(".");
        for (i, line) in src.lines().enumerate() {
            let t = line.trim();
            let is_header = t == format!("[{header}]") || t == format!("[[{header}]]");
            let is_key = t
                .strip_prefix(key)
                .map(|rest| rest.trim_start().starts_with('='))
                .unwrap_or(false);
            if is_header || is_key {
                return Some(i + 1);
            }
        }
    }
    None
}

impl Scenario {
    /// Loads a built-in preset by name.
    pub fn preset(name: &str) -> Result<Scenario, ScenarioError> {
        Scenario::from_toml_str("", Some(name))
    }

    pub fn load(path: &Path, preset: Option<&str>) -> Result<Scenario, ScenarioError> {
        let src = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Scenario::from_toml_str(&src, preset)
    }

    /// Parses a scenario document. `preset` overrides a `preset` key in the
    /// document.
    pub fn from_toml_str(src: &str, preset: Option<&str>) -> Result<Scenario, ScenarioError> {
        let user = parse_table(src)?;
        let preset_name = preset.map(str::to_string).or_else(|| match user.get("preset") {
            Some(toml::Value::String(s)) => Some(s.clone()),
            _ => None,
        });
        let mut table = match &preset_name {
            Some(name) => {
                let psrc = preset_source(name).ok_or_else(|| ScenarioError::UnknownPreset(name.clone()))?;
                parse_table(psrc)?
            }
            None => toml::Table::new(),
        };
        merge(&mut table, user);
        if let Some(name) = &preset_name {
            table.insert("preset".into(), toml::Value::String(name.clone()));
        }
        let mut scenario: Scenario = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            ScenarioError::Schema {
                line: locate(src, &path),
                message: e.into_inner().to_string(),
                path,
            }
        })?;
        scenario.resolve()?;
        Ok(scenario)
    }

    fn resolve(&mut self) -> Result<(), ScenarioError> {
        if let Some(target) = &self.calibration {
            target.validate()?;
            self.memory.calibrate_couplers(target)?;
        }
        self.memory.validate()?;
        for s in &self.input_states {
            parse_state(s)?;
        }
        if self.input_states.is_empty() {
            return Err(ScenarioError::Invalid("input_states is empty".into()));
        }
        let [lo, hi] = self.n_range;
        if lo > hi {
            return Err(ScenarioError::Invalid(format!("n_range [{lo}, {hi}] is empty")));
        }
        self.noiseless_acquisition().validate()?;
        MeasurementSet::new(
            self.tomo
                .projectors
                .iter()
                .map(|p| Ok((p.clone(), parse_state(p)?)))
                .collect::<Result<_, ScenarioError>>()?,
        )?;
        if let Some(inj) = self.inject.clone() {
            let target = match (inj.fidelity, inj.visibility) {
                (Some(f), None) => InjectTarget::Fidelity(f),
                (None, Some(v)) => InjectTarget::Visibility(v),
                _ => {
                    return Err(ScenarioError::Invalid(
                        "inject needs exactly one of `fidelity` or `visibility`".into(),
                    ))
                }
            };
            let state = parse_state(&inj.state)?;
            let eps = tune_fpc_error(&self.memory, &state, inj.n_cycles, target)?;
            set_fpc_error(&mut self.memory, eps)?;
            self.injected_fpc_error = Some(eps);
        }
        Ok(())
    }

    /// SHA-256 of the resolved scenario, excluding seed and output location.
    pub fn hash(&self) -> String {
        let mut s = self.clone();
        s.seed = None;
        s.output_dir = None;
        let bytes = serde_json::to_vec(&s).expect("scenario serializes");
        let digest = Sha256::digest(bytes);
        digest.iter().fold(String::with_capacity(64), |mut out, b| {
            let _ = write!(out, "{b:02x}");
            out
        })
    }

    fn sampling(&self, tag: &str) -> Result<Sampling, ScenarioError> {
        if self.source.noiseless {
            return Ok(Sampling::Noiseless);
        }
        let seed = self.seed.ok_or(ScenarioError::MissingSeed)?;
        Ok(Sampling::Poisson {
            seed: sub_seed(seed, tag),
        })
    }

    fn noiseless_acquisition(&self) -> Acquisition {
        Acquisition {
            pair_rate_hz: self.source.pair_rate_hz,
            detection_eff: self.source.detection_eff,
            acquisition_s: self.source.acquisition_s,
            background_rate_hz: self.source.background_rate_hz,
            sampling: Sampling::Noiseless,
        }
    }

    fn acquisition_for(&self, tag: &str) -> Result<Acquisition, ScenarioError> {
        Ok(Acquisition {
            sampling: self.sampling(tag)?,
            ..self.noiseless_acquisition()
        })
    }

    fn states(&self) -> Result<Vec<(String, PureState)>, ScenarioError> {
        self.input_states
            .iter()
            .map(|s| Ok((s.clone(), parse_state(s)?)))
            .collect()
    }

    fn measurement_set(&self) -> Result<MeasurementSet, ScenarioError> {
        Ok(MeasurementSet::new(
            self.tomo
                .projectors
                .iter()
                .map(|p| Ok((p.clone(), parse_state(p)?)))
                .collect::<Result<_, ScenarioError>>()?,
        )?)
    }
}

/// Seed of one scan, derived from the scenario seed and a scan tag: the first
/// eight bytes (little endian) of SHA-256 over the seed's little-endian bytes
/// followed by the tag.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InjectTarget {
    /// Fidelity of the retrieved state with the input.
    Fidelity(f64),
    /// Malus visibility of the retrieved state, `√(x² + z²)` of its Bloch vector.
    Visibility(f64),
}

/// Malus visibility behind a rotating linear polarizer.
pub fn linear_visibility(outcome: &StorageOutcome) -> Result<f64, ScenarioError> {
    let [x, _, z] = outcome.retrieved_conditional()?.bloch()?;
    Ok(x.hypot(z))
}

fn set_fpc_error(cfg: &mut MemoryConfig, eps: f64) -> Result<(), ScenarioError> {
    let fpc = cfg
        .fpc_mut()
        .ok_or_else(|| ScenarioError::Invalid("error injection needs an FPC in the delay line".into()))?;
    fpc.rotation_error = eps;
    Ok(())
}

/// Smallest non-negative FPC rotation error for which the forward model
/// reaches `target`. The quality metric is scanned on a grid over
/// `[0, π/2]` and the first crossing is refined by bisection.
pub fn tune_fpc_error(
    cfg: &MemoryConfig,
    state: &PureState,
    n_cycles: usize,
    target: InjectTarget,
) -> Result<f64, ScenarioError> {
    let value = match target {
        InjectTarget::Fidelity(v) | InjectTarget::Visibility(v) => v,
    };
    if !(0.0..=1.0).contains(&value) {
        return Err(ScenarioError::Invalid(format!(
            "injection target {value} outside [0, 1]"
        )));
    }
    let metric = |eps: f64| -> Result<f64, ScenarioError> {
        let mut c = cfg.clone();
        set_fpc_error(&mut c, eps)?;
        let out = simulate_storage(&c, state, n_cycles)?;
        match target {
            InjectTarget::Fidelity(_) => Ok(fidelity(&out.retrieved_conditional()?, state)?),
            InjectTarget::Visibility(_) => linear_visibility(&out),
        }
    };
    let start = metric(0.0)?;
    if value >= start {
        if value - start > 1e-9 {
            return Err(ScenarioError::Invalid(format!(
                "target {value} exceeds the error-free value {start}"
            )));
        }
        return Ok(0.0);
    }
    const STEPS: usize = 400;
    let mut lo = 0.0;
    let mut hi = None;
    for i in 1..=STEPS {
        let eps = PI / 2.0 * i as f64 / STEPS as f64;
        if metric(eps)? <= value {
            hi = Some(eps);
            break;
        }
        lo = eps;
    }
    let mut hi = hi.ok_or_else(|| {
        ScenarioError::Invalid(format!("no FPC error reaches {value} for this state and cycle count"))
    })?;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if metric(mid)? > value {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Fig2c,
    Fig3,
    Fig4,
}

impl std::str::FromStr for Figure {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fig2c" => Ok(Figure::Fig2c),
            "fig3" => Ok(Figure::Fig3),
            "fig4" => Ok(Figure::Fig4),
            other => Err(ScenarioError::Invalid(format!("unknown figure `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Decay,
    Malus,
    Tomo,
    Budget,
    Reproduce(Figure),
}

impl Command {
    pub fn name(&self) -> String {
        match self {
            Command::Simulate => "simulate".into(),
            Command::Decay => "decay".into(),
            Command::Malus => "malus".into(),
            Command::Tomo => "tomo".into(),
            Command::Budget => "budget".into(),
            Command::Reproduce(f) => format!(
                "reproduce {}",
                match f {
                    Figure::Fig2c => "fig2c",
                    Figure::Fig3 => "fig3",
                    Figure::Fig4 => "fig4",
                }
            ),
        }
    }
}

/// A CSV table whose every row ends with the scenario hash and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn to_csv(&self, hash: &str, seed: Option<u64>) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let seed = seed.map(|s| s.to_string()).unwrap_or_default();
        let mut header = self.header.clone();
        header.extend(["scenario_hash".to_string(), "seed".to_string()]);
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut r = row.clone();
            r.extend([hash.to_string(), seed.clone()]);
            w.write_record(&r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputFile {
    pub name: String,
    pub contents: Vec<u8>,
}

/// Everything a command produces, before it touches the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub command: String,
    pub scenario_hash: String,
    pub seed: Option<u64>,
    pub files: Vec<OutputFile>,
    pub summary: Value,
}

impl Report {
    pub fn file(&self, name: &str) -> Option<&OutputFile> {
        self.files.iter().find(|f| f.name == name)
    }
}

fn f(x: f64) -> String {
    format!("{x}")
}

struct Builder {
    hash: String,
    seed: Option<u64>,
    files: Vec<OutputFile>,
}

impl Builder {
    fn new(s: &Scenario) -> Self {
        Builder {
            hash: s.hash(),
            seed: s.seed,
            files: Vec::new(),
        }
    }

    fn table(&mut self, name: &str, t: &Table) {
        self.files.push(OutputFile {
            name: name.into(),
            contents: t.to_csv(&self.hash, self.seed),
        });
    }

    fn finish(mut self, command: Command, mut summary: Value) -> Report {
        summary["scenario_hash"] = json!(self.hash);
        summary["seed"] = json!(self.seed);
        summary["command"] = json!(command.name());
        let mut bytes = serde_json::to_vec_pretty(&summary).expect("summary serializes");
        bytes.push(b'\n');
        self.files.push(OutputFile {
            name: "summary.json".into(),
            contents: bytes,
        });
        Report {
            command: command.name(),
            scenario_hash: self.hash,
            seed: self.seed,
            files: self.files,
            summary,
        }
    }
}

fn count_table() -> Table {
    Table::new(&[
        "input",
        "setting_label",
        "setting_value",
        "counts",
        "acquisition_s",
        "N",
    ])
}

fn push_counts(t: &mut Table, input: &str, d: &ScanDataset) {
    for row in d.rows() {
        t.push(vec![
            input.into(),
            row.setting_label,
            f(row.setting_value),
            f(row.counts),
            f(row.acquisition_s),
            row.n.to_string(),
        ]);
    }
}

/// Runs one command without writing anything.
pub fn run(scenario: &Scenario, command: Command) -> Result<Report, ScenarioError> {
    match command {
        Command::Simulate => simulate(scenario),
        Command::Decay => decay(scenario),
        Command::Malus => malus(scenario, scenario.malus.n_cycles..=scenario.malus.n_cycles, command),
        Command::Tomo => tomo(scenario, scenario.tomo.n_cycles..=scenario.tomo.n_cycles, command),
        Command::Budget => budget(scenario),
        Command::Reproduce(Figure::Fig2c) => fig2c(scenario),
        Command::Reproduce(Figure::Fig3) => fig3(scenario),
        Command::Reproduce(Figure::Fig4) => fig4(scenario),
    }
}

fn simulate(s: &Scenario) -> Result<Report, ScenarioError> {
    let mut b = Builder::new(s);
    let params = derive_transmission_params(&s.memory)?;
    let mut t = Table::new(&[
        "input",
        "N",
        "exit_time_ns",
        "retrieved_weight",
        "eta_closed_form",
        "fidelity",
        "early_weight",
        "late_weight",
        "ejected_weight",
        "absorbed_weight",
        "residual_weight",
    ]);
    let [lo, hi] = s.n_range;
    let mut rows = Vec::new();
    for (name, state) in s.states()? {
        let outcomes = (lo..=hi)
            .into_par_iter()
            .map(|n| simulate_storage(&s.memory, &state, n))
            .collect::<Result<Vec<_>, _>>()?;
        for o in outcomes {
            let retrieved = o.retrieved_weight();
            let fid = match o.retrieved_conditional() {
                Ok(rho) => f(fidelity(&rho, &state)?),
                Err(_) => String::new(),
            };
            let nominal = o.nominal_exit_ns;
            let early: f64 = o
                .exits
                .iter()
                .filter(|e| e.time_ns < nominal - 1e-9)
                .map(|e| e.weight())
                .sum();
            let late: f64 = o
                .exits
                .iter()
                .filter(|e| e.time_ns > nominal + 1e-9)
                .map(|e| e.weight())
                .sum();
            let ejected: f64 = o.ejections.iter().map(|e| e.weight).sum();
            t.push(vec![
                name.clone(),
                o.n_cycles.to_string(),
                f(nominal),
                f(retrieved),
                f(efficiency(&params, o.n_cycles)),
                fid,
                f(early),
                f(late),
                f(ejected),
                f(o.absorbed),
                f(o.residual),
            ]);
            rows.push(json!({ "input": name, "N": o.n_cycles, "retrieved_weight": retrieved }));
        }
    }
    b.table("simulate.csv", &t);
    Ok(b.finish(Command::Simulate, json!({ "params": params, "outcomes": rows })))
}

struct DecayResult {
    input: String,
    dataset: ScanDataset,
    fit: crate::fitting::DecayFit,
}

fn decay_scans(s: &Scenario) -> Result<Vec<DecayResult>, ScenarioError> {
    let [lo, hi] = s.n_range;
    let n_values: Vec<usize> = (lo.max(1)..=hi).collect();
    s.states()?
        .into_iter()
        .map(|(name, state)| {
            let projector = match &s.decay.projector {
                Some(p) => (p.clone(), parse_state(p)?),
                None => (name.clone(), state),
            };
            let plan = ScanPlan::Decay {
                n_values: n_values.clone(),
                projector,
            };
            let acq = s.acquisition_for(&format!("decay/{name}"))?;
            let dataset = run_scan(&s.memory, &state, 1, &plan, &acq)?;
            let fit = fit_decay_records(&dataset.records)?;
            Ok(DecayResult {
                input: name,
                dataset,
                fit,
            })
        })
        .collect()
}

fn decay(s: &Scenario) -> Result<Report, ScenarioError> {
    let mut b = Builder::new(s);
    let results = decay_scans(s)?;
    let mut t = count_table();
    let mut fits = serde_json::Map::new();
    for r in &results {
        push_counts(&mut t, &r.input, &r.dataset);
        fits.insert(r.input.clone(), json!(r.fit));
    }
    b.table("decay_counts.csv", &t);
    b.table("decay_fit.csv", &decay_fit_table(&results));
    Ok(b.finish(Command::Decay, json!({ "fits": fits })))
}

fn decay_fit_table(results: &[DecayResult]) -> Table {
    let mut t = Table::new(&[
        "input",
        "gamma_per_cycle",
        "sigma_gamma",
        "prefactor",
        "clamped",
        "excluded_zero",
    ]);
    for r in results {
        t.push(vec![
            r.input.clone(),
            f(r.fit.gamma_per_cycle),
            f(r.fit.sigma_gamma),
            f(r.fit.prefactor),
            r.fit.clamped.to_string(),
            r.fit.excluded_zero.to_string(),
        ]);
    }
    t
}

struct MalusResult {
    input: String,
    n_cycles: usize,
    dataset: ScanDataset,
    fit: crate::fitting::MalusFit,
}

fn malus_states(s: &Scenario) -> Result<Vec<(String, PureState)>, ScenarioError> {
    match &s.malus.states {
        Some(list) => list.iter().map(|n| Ok((n.clone(), parse_state(n)?))).collect(),
        None => Ok(s.states()?.into_iter().filter(|(_, st)| is_linear(st)).collect()),
    }
}

fn malus_scans(s: &Scenario, cycles: std::ops::RangeInclusive<usize>) -> Result<Vec<MalusResult>, ScenarioError> {
    let angles: Vec<f64> = s.malus.angles_deg.iter().map(|d| d.to_radians()).collect();
    let plan = ScanPlan::Malus { angles };
    let mut out = Vec::new();
    for n in cycles {
        for (name, state) in malus_states(s)? {
            let acq = s.acquisition_for(&format!("malus/{name}/{n}"))?;
            let dataset = run_scan(&s.memory, &state, n, &plan, &acq)?;
            let fit = fit_malus_records(&dataset.records)?;
            out.push(MalusResult {
                input: name,
                n_cycles: n,
                dataset,
                fit,
            });
        }
    }
    Ok(out)
}

fn malus_fit_table(results: &[MalusResult]) -> Table {
    let mut t = Table::new(&[
        "input",
        "N",
        "visibility",
        "sigma_visibility",
        "theta0",
        "amplitude",
        "clamped",
    ]);
    for r in results {
        t.push(vec![
            r.input.clone(),
            r.n_cycles.to_string(),
            f(r.fit.visibility),
            f(r.fit.sigma_visibility),
            f(r.fit.theta0),
            f(r.fit.amplitude),
            r.fit.clamped.to_string(),
        ]);
    }
    t
}

fn malus(s: &Scenario, cycles: std::ops::RangeInclusive<usize>, command: Command) -> Result<Report, ScenarioError> {
    let mut b = Builder::new(s);
    let results = malus_scans(s, cycles)?;
    let mut t = count_table();
    for r in &results {
        push_counts(&mut t, &r.input, &r.dataset);
    }
    b.table("malus_counts.csv", &t);
    b.table("malus_fit.csv", &malus_fit_table(&results));
    let fits: Vec<Value> = results
        .iter()
        .map(|r| json!({ "input": r.input, "N": r.n_cycles, "fit": r.fit }))
        .collect();
    Ok(b.finish(
        command,
        json!({ "fits": fits, "injected_fpc_error": s.injected_fpc_error }),
    ))
}

struct TomoResult {
    input: String,
    n_cycles: usize,
    dataset: ScanDataset,
    result: crate::tomography::ReconstructionResult,
}

fn tomo_scans(
    s: &Scenario,
    states: &[(String, PureState)],
    cycles: std::ops::RangeInclusive<usize>,
) -> Result<Vec<TomoResult>, ScenarioError> {
    let m = s.measurement_set()?;
    let plan = ScanPlan::Tomography {
        projectors: m.projectors().to_vec(),
    };
    let mut out = Vec::new();
    for n in cycles {
        for (name, state) in states {
            let tag = format!("tomo/{name}/{n}");
            let acq = s.acquisition_for(&tag)?;
            let dataset = run_scan(&s.memory, state, n, &plan, &acq)?;
            let counts = counts_from_records(&dataset.records);
            let mc_seed = sub_seed(s.seed.unwrap_or(0), &format!("{tag}/mc"));
            let result = reconstruct(&counts, &m, state, s.tomo.mc_samples, mc_seed)?;
            out.push(TomoResult {
                input: name.clone(),
                n_cycles: n,
                dataset,
                result,
            });
        }
    }
    Ok(out)
}

fn tomo_table(results: &[TomoResult]) -> Table {
    let mut t = Table::new(&[
        "input",
        "N",
        "fidelity",
        "mc_mean",
        "mc_std",
        "n_samples",
        "converged",
        "rho_00_re",
        "rho_00_im",
        "rho_01_re",
        "rho_01_im",
        "rho_10_re",
        "rho_10_im",
        "rho_11_re",
        "rho_11_im",
    ]);
    for r in results {
        let mut row = vec![
            r.input.clone(),
            r.n_cycles.to_string(),
            f(r.result.fidelity),
            f(r.result.mc_mean),
            f(r.result.mc_std),
            r.result.n_samples.to_string(),
            r.result.converged.to_string(),
        ];
        row.extend(r.result.rho.to_real_array().iter().map(|x| f(*x)));
        t.push(row);
    }
    t
}

fn tomo(s: &Scenario, cycles: std::ops::RangeInclusive<usize>, command: Command) -> Result<Report, ScenarioError> {
    let mut b = Builder::new(s);
    let results = tomo_scans(s, &s.states()?, cycles)?;
    let mut t = count_table();
    for r in &results {
        push_counts(&mut t, &r.input, &r.dataset);
    }
    b.table("tomo_counts.csv", &t);
    b.table("tomo.csv", &tomo_table(&results));
    let list: Vec<Value> = results
        .iter()
        .map(|r| json!({ "input": r.input, "N": r.n_cycles, "result": r.result }))
        .collect();
    Ok(b.finish(
        command,
        json!({ "reconstructions": list, "injected_fpc_error": s.injected_fpc_error }),
    ))
}

/// Budget of the scenario's inventory after the `[budget]` adjustments.
pub fn budget_report(s: &Scenario) -> Result<BudgetReport, ScenarioError> {
    let mut inventory = s.memory.components.clone();
    if let Some(len) = s.budget.spool_length_m {
        let spool = inventory
            .iter_mut()
            .find(|c| c.kind == ComponentKind::FiberSegment && c.label == "spool")
            .ok_or_else(|| ScenarioError::Invalid("no fiber segment labelled `spool`".into()))?;
        spool.length_m = len;
    }
    if s.budget.retune_fibers {
        inventory = fibers_at_wavelength(&inventory, s.budget.wavelength_nm)?;
    }
    let delta_tau = s.budget.delta_tau_ns.unwrap_or(s.memory.delta_tau_ns);
    Ok(project_budget(
        &inventory,
        delta_tau,
        s.budget.wavelength_nm,
        s.budget.n_max,
    )?)
}

fn budget(s: &Scenario) -> Result<Report, ScenarioError> {
    let mut b = Builder::new(s);
    let r = budget_report(s)?;
    let mut t = Table::new(&["N", "eta"]);
    for (n, eta) in &r.eta_table {
        t.push(vec![n.to_string(), f(*eta)]);
    }
    b.table("budget.csv", &t);
    Ok(b.finish(Command::Budget, json!({ "budget": r })))
}

fn fig2c(s: &Scenario) -> Result<Report, ScenarioError> {
    let mut b = Builder::new(s);
    let params = derive_transmission_params(&s.memory)?;
    let results = decay_scans(s)?;
    let [lo, hi] = s.n_range;
    let mut t = Table::new(&["input", "N", "eta_simulated", "eta_closed_form", "counts", "fit"]);
    let mut fits = serde_json::Map::new();
    for r in &results {
        let state = parse_state(&r.input)?;
        for (n, rec) in (lo.max(1)..=hi).zip(&r.dataset.records) {
            let o = simulate_storage(&s.memory, &state, n)?;
            t.push(vec![
                r.input.clone(),
                n.to_string(),
                f(o.retrieved_weight()),
                f(efficiency(&params, n)),
                f(rec.counts),
                f(r.fit.predict(n)),
            ]);
        }
        fits.insert(
            r.input.clone(),
            json!({ "gamma_2_2": r.fit.gamma_per_cycle, "sigma": r.fit.sigma_gamma, "fit": r.fit }),
        );
    }
    b.table("fig2c.csv", &t);
    b.table("fig2c_fit.csv", &decay_fit_table(&results));
    let summary = json!({
        "eta_0": efficiency(&params, 0),
        "gamma_1_3": params.g13,
        "gamma_1_2": params.g12,
        "gamma_2_2": params.g22,
        "gamma_2_3": params.g23,
        "eta_prefactor": params.g12 * params.g23 / params.g22,
        "decay_fits": fits,
    });
    Ok(b.finish(Command::Reproduce(Figure::Fig2c), summary))
}

fn fig3(s: &Scenario) -> Result<Report, ScenarioError> {
    let mut b = Builder::new(s);
    let n = s.malus.n_cycles;
    let malus = malus_scans(s, n..=n)?;
    let circular: Vec<(String, PureState)> = s.states()?.into_iter().filter(|(_, st)| !is_linear(st)).collect();
    let tomo = tomo_scans(s, &circular, s.tomo.n_cycles..=s.tomo.n_cycles)?;

    let mut t = Table::new(&["input", "angle_rad", "counts", "normalized", "fit_normalized"]);
    for r in &malus {
        let peak = r.dataset.records.iter().map(|x| x.counts).fold(0.0, f64::max);
        for rec in &r.dataset.records {
            let norm = if peak > 0.0 { rec.counts / peak } else { 0.0 };
            let fit = if peak > 0.0 {
                r.fit.predict(rec.setting_value) / peak
            } else {
                0.0
            };
            t.push(vec![
                r.input.clone(),
                f(rec.setting_value),
                f(rec.counts),
                f(norm),
                f(fit),
            ]);
        }
    }
    b.table("fig3_malus.csv", &t);
    b.table("fig3_malus_fit.csv", &malus_fit_table(&malus));
    b.table("fig3_tomo.csv", &tomo_table(&tomo));

    let mut summary = serde_json::Map::new();
    for r in &malus {
        summary.insert(
            format!("V_{}", r.input),
            json!({ "value": r.fit.visibility, "sigma": r.fit.sigma_visibility }),
        );
    }
    for r in &tomo {
        summary.insert(
            format!("F_{}", r.input),
            json!({ "value": r.result.fidelity, "sigma": r.result.mc_std, "mc_mean": r.result.mc_mean }),
        );
    }
    summary.insert("N".into(), json!(n));
    summary.insert("injected_fpc_error".into(), json!(s.injected_fpc_error));
    Ok(b.finish(Command::Reproduce(Figure::Fig3), Value::Object(summary)))
}

fn fig4(s: &Scenario) -> Result<Report, ScenarioError> {
    let mut b = Builder::new(s);
    let malus = malus_scans(s, 0..=3)?;
    let tomo = tomo_scans(s, &s.states()?, 0..=3)?;
    let mut t = Table::new(&["quantity", "input", "N", "value", "sigma"]);
    for r in &malus {
        t.push(vec![
            "visibility".into(),
            r.input.clone(),
            r.n_cycles.to_string(),
            f(r.fit.visibility),
            f(r.fit.sigma_visibility),
        ]);
    }
    for r in &tomo {
        t.push(vec![
            "fidelity".into(),
            r.input.clone(),
            r.n_cycles.to_string(),
            f(r.result.fidelity),
            f(r.result.mc_std),
        ]);
    }
    b.table("fig4.csv", &t);
    let mean_fid = tomo.iter().map(|r| r.result.fidelity).sum::<f64>() / tomo.len().max(1) as f64;
    let summary = json!({
        "visibility": malus.iter().map(|r| json!({"input": r.input, "N": r.n_cycles, "value": r.fit.visibility, "sigma": r.fit.sigma_visibility})).collect::<Vec<_>>(),
        "fidelity": tomo.iter().map(|r| json!({"input": r.input, "N": r.n_cycles, "value": r.result.fidelity, "sigma": r.result.mc_std})).collect::<Vec<_>>(),
        "mean_fidelity": mean_fid,
        "injected_fpc_error": s.injected_fpc_error,
    });
    Ok(b.finish(Command::Reproduce(Figure::Fig4), summary))
}

/// Writes every report file into `dir` (each via a temporary file and a
/// rename) plus `metadata.json` with the creation time.
pub fn write_report(dir: &Path, report: &Report) -> Result<Vec<PathBuf>, ScenarioError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ScenarioError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut meta = serde_json::to_vec_pretty(&json!({
        "command": report.command,
        "scenario_hash": report.scenario_hash,
        "seed": report.seed,
        "created_unix_s": created,
        "version": env!("CARGO_PKG_VERSION"),
        "files": report.files.iter().map(|f| &f.name).collect::<Vec<_>>(),
    }))
    .expect("metadata serializes");
    meta.push(b'\n');
    let mut written = Vec::new();
    let all = report
        .files
        .iter()
        .map(|f| (f.name.as_str(), &f.contents))
        .chain([("metadata.json", &meta)]);
    for (name, contents) in all {
        let path = dir.join(name);
        let tmp = dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, contents).map_err(io(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}
