//! Campaign configuration: TOML files, built-in presets and CLI overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{GroupBy, ShiftConfig};
use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::flow::{CropType, GroupKey, LowLightPolicy, TransformSpec, DEFAULT_SPEED_WINDOW};
use crate::sim::{SimConfig, DEFAULT_FRAME_RATE, MAX_ELEVATOR_SPEED};

pub const LAB_PRESET: &str = include_str!("../presets/lab.toml");
pub const FIELD_PRESET: &str = include_str!("../presets/field.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub name: String,
    pub seed: u64,
    pub sim: SimConfig,
    pub estimator: EstimatorConfig,
    pub flow: FlowConfig,
    pub calibration: CalibrationConfig,
    pub lab: Option<LabCampaign>,
    pub field: Option<FieldCampaign>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            name: "campaign".into(),
            seed: 0,
            sim: SimConfig::default(),
            estimator: EstimatorConfig::default(),
            flow: FlowConfig::default(),
            calibration: CalibrationConfig::default(),
            lab: None,
            field: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Transform used for predicted masses and flow samples; CVs are reported for both.
    pub transform: TransformSpec,
    pub low_light: LowLightPolicy,
    /// Pulse-rate window for elevator speed, seconds.
    pub speed_window: f64,
    /// Trailing window for the mass flow written with each flow sample, seconds.
    pub mass_flow_window: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            transform: TransformSpec::Sqrt,
            low_light: LowLightPolicy::Include,
            speed_window: DEFAULT_SPEED_WINDOW,
            mass_flow_window: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub group_by: GroupBy,
    pub shift: ShiftConfig,
    /// Leave overflow-flagged loads out of the fit and the density means.
    pub overflow_filter: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { group_by: GroupBy::default(), shift: ShiftConfig::default(), overflow_filter: true }
    }
}

/// Grouping keys in config files, with a plain crop name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    #[serde(default)]
    pub year: Option<u16>,
    pub region: String,
    pub crop: CropType,
}

impl GroupSpec {
    pub fn key(&self) -> GroupKey {
        GroupKey::new(self.year, self.region.clone(), self.crop)
    }
}

/// Laboratory design of experiments. Loaded runs come first, empty runs last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabCampaign {
    /// Total number of runs, empty runs included.
    pub runs: usize,
    pub empty_runs: usize,
    /// Illuminance levels, cycled over the runs.
    pub lux_levels: Vec<f64>,
    pub speed_range: [f64; 2],
    pub duration_range: [f64; 2],
    pub mass_range: [f64; 2],
    pub empty_duration: f64,
    pub frame_rate: f64,
    pub overflow_enabled: bool,
    /// Replaces every drawn duration when set.
    pub fixed_duration: Option<f64>,
    pub group: GroupSpec,
}

impl Default for LabCampaign {
    fn default() -> Self {
        Self {
            runs: 239,
            empty_runs: 8,
            lux_levels: vec![700.0, 1900.0, 3100.0, 4300.0, 5500.0, 6700.0],
            speed_range: [1.0, 2.2],
            duration_range: [20.0, 120.0],
            mass_range: [230.0, 300.0],
            empty_duration: 20.0,
            frame_rate: DEFAULT_FRAME_RATE,
            overflow_enabled: true,
            fixed_duration: None,
            group: GroupSpec { year: None, region: "lab".into(), crop: CropType::Bamboo },
        }
    }
}

impl LabCampaign {
    pub fn loaded_runs(&self) -> usize {
        self.runs.saturating_sub(self.empty_runs)
    }
}

/// Mid-season change of density, as a multiplier on every later load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityShift {
    /// Position of the first shifted load as a fraction of the season.
    pub at: f64,
    pub factor: f64,
}

/// One season/region/crop cell of the synthetic field campaign.
///
/// A load's true mass per frame is `rho_ref · (v_c / v_ref)^(−beta) · v_c · v · Δt`,
/// so bulk density falls with volume rate when `beta > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldGroup {
    #[serde(default)]
    pub year: Option<u16>,
    pub region: String,
    pub crop: CropType,
    pub n_loads: usize,
    /// Bulk density at the reference volume rate, kg/m³.
    pub rho_ref: f64,
    pub beta: f64,
    /// Log-scale spread of the mean volume rate between loads.
    pub sigma_ln_vc: f64,
    /// Relative spread of load mass not explained by volume.
    pub noise: f64,
    pub wagon_mass: f64,
    #[serde(default)]
    pub shift: Option<DensityShift>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldCampaign {
    /// Estimate rate of the on-board log, Hz.
    pub frame_rate: f64,
    /// Pulse counter log rate, Hz.
    pub pulse_rate: f64,
    pub speed_range: [f64; 2],
    /// Reference volume rate, m³/m.
    pub v_ref: f64,
    /// Log-scale spread of frame volume rates within a load.
    pub sigma_ln_frame: f64,
    /// Wagon fill fraction range at which a load ends.
    pub fill_range: [f64; 2],
    /// Seconds between consecutive loads of a group.
    pub load_interval: f64,
    pub lux: f64,
    pub groups: Vec<FieldGroup>,
}

impl Default for FieldCampaign {
    fn default() -> Self {
        Self {
            frame_rate: 1.0,
            pulse_rate: 5.0,
            speed_range: [1.6, 2.2],
            v_ref: 0.04,
            sigma_ln_frame: 0.3,
            fill_range: [0.85, 1.0],
            load_interval: 3600.0,
            lux: 20_000.0,
            groups: Vec::new(),
        }
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub duration: Option<f64>,
    pub transform: Option<TransformSpec>,
    pub cell_size: Option<f64>,
    pub percentile: Option<f64>,
    pub lux_gate: Option<f64>,
    pub low_light: Option<LowLightPolicy>,
    pub group_by: Option<GroupBy>,
}

impl CampaignConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "lab" => Self::parse(LAB_PRESET, Path::new("<preset lab>")),
            "field" => Self::parse(FIELD_PRESET, Path::new("<preset field>")),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected lab or field)"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses and validates TOML. Errors carry the line of the offending
    /// entry whenever it can be located.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        cfg.validate().map_err(|e| locate(e, text, path))?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(runs) = o.runs {
            if let Some(lab) = &mut self.lab {
                let loaded = lab.loaded_runs().min(runs);
                lab.runs = runs;
                lab.empty_runs = runs - loaded;
            }
            if let Some(field) = &mut self.field {
                field.groups.iter_mut().for_each(|g| g.n_loads = g.n_loads.min(runs));
            }
        }
        if let Some(d) = o.duration {
            match &mut self.lab {
                Some(lab) => {
                    lab.fixed_duration = Some(d);
                    lab.empty_duration = d;
                }
                None => return Err(Error::Config("duration applies to lab campaigns only".into())),
            }
        }
        if let Some(t) = o.transform {
            self.flow.transform = t;
        }
        if let Some(c) = o.cell_size {
            self.estimator.cell_size = c;
        }
        if let Some(p) = o.percentile {
            self.estimator.statistic = crate::estimator::CellStatistic::Percentile(p);
        }
        if let Some(g) = o.lux_gate {
            self.estimator.lux_gate = g;
        }
        if let Some(l) = o.low_light {
            self.flow.low_light = l;
        }
        if let Some(by) = o.group_by {
            self.calibration.group_by = by;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.estimator.validate()?;
        if !(self.flow.speed_window > 0.0) || !(self.flow.mass_flow_window > 0.0) {
            return Err(Error::Config("speed_window and mass_flow_window must be positive".into()));
        }
        match (&self.lab, &self.field) {
            (Some(lab), None) => lab.validate(),
            (None, Some(field)) => field.validate(),
            (None, None) => Err(Error::Config("config needs a [lab] or a [field] campaign".into())),
            (Some(_), Some(_)) => Err(Error::Config("config may hold only one of [lab] and [field]".into())),
        }
    }

    pub fn kind(&self) -> &'static str {
        if self.lab.is_some() {
            "lab"
        } else {
            "field"
        }
    }

    /// Canonical JSON of the resolved config.
    pub fn canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.canonical_json())
    }

    /// Hash of the parts that shape simulated artifacts, which later stages
    /// must not change.
    pub fn simulation_hash(&self) -> String {
        let mut core = self.clone();
        core.estimator = EstimatorConfig::default();
        core.flow = FlowConfig::default();
        core.calibration = CalibrationConfig::default();
        core.hash()
    }
}

impl LabCampaign {
    fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.empty_runs > self.runs {
            return Err(Error::Config(format!("empty_runs ({}) exceeds runs ({})", self.empty_runs, self.runs)));
        }
        if self.lux_levels.is_empty() || self.lux_levels.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("lux_levels must be a non-empty list of non-negative values".into()));
        }
        range("speed_range", self.speed_range, 0.0, MAX_ELEVATOR_SPEED)?;
        range("duration_range", self.duration_range, f64::MIN_POSITIVE, f64::INFINITY)?;
        range("mass_range", self.mass_range, 0.0, f64::INFINITY)?;
        positive("frame_rate", self.frame_rate)?;
        positive("empty_duration", self.empty_duration)?;
        if let Some(d) = self.fixed_duration {
            positive("duration", d)?;
        }
        if self.loaded_runs() > 0 && !(self.speed_range[0] > 0.0) {
            return Err(Error::Config("speed_range must be positive for loaded runs".into()));
        }
        Ok(())
    }
}

impl FieldGroup {
    pub fn key(&self) -> GroupKey {
        GroupKey::new(self.year, self.region.clone(), self.crop)
    }
}

impl FieldCampaign {
    fn validate(&self) -> Result<()> {
        positive("frame_rate", self.frame_rate)?;
        positive("pulse_rate", self.pulse_rate)?;
        positive("v_ref", self.v_ref)?;
        positive("load_interval", self.load_interval)?;
        range("speed_range", self.speed_range, f64::MIN_POSITIVE, MAX_ELEVATOR_SPEED)?;
        range("fill_range", self.fill_range, f64::MIN_POSITIVE, 1.0)?;
        if !(self.sigma_ln_frame >= 0.0) || !(self.lux >= 0.0) {
            return Err(Error::Config("sigma_ln_frame and lux must be non-negative".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::Config("groups must list at least one field group".into()));
        }
        for g in &self.groups {
            if g.n_loads == 0 {
                return Err(Error::Config(format!("n_loads must be at least 1 (group {})", g.key())));
            }
            positive("rho_ref", g.rho_ref)?;
            positive("wagon_mass", g.wagon_mass)?;
            if !(g.sigma_ln_vc >= 0.0) || !(g.noise >= 0.0) || !g.beta.is_finite() {
                return Err(Error::Config(format!("beta must be finite and sigma_ln_vc, noise non-negative (group {})", g.key())));
            }
            if let Some(s) = g.shift {
                if !(0.0..=1.0).contains(&s.at) || !(s.factor > 0.0) {
                    return Err(Error::Config(format!("shift needs at in [0, 1] and a positive factor (group {})", g.key())));
                }
            }
        }
        Ok(())
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if r[0] >= lo && r[1] <= hi && r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be an ordered pair within [{lo}, {hi}], got {r:?}")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Attaches a line number to a validation error whose message starts with
/// the name of a key present in the file.
fn locate(err: Error, text: &str, path: &Path) -> Error {
    let Error::Config(message) = err else { return err };
    let key = message.split_whitespace().next().unwrap_or("");
    let key = key.rsplit('.').next().unwrap_or(key);
    let valid = !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    let line = valid
        .then(|| {
            text.lines().position(|l| {
                l.trim_start().strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
            })
        })
        .flatten();
    match line {
        Some(i) => Error::Parse { path: PathBuf::from(path), line: i + 1, message },
        None => Error::Config(message),
    }
}
