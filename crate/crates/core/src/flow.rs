//! Mass-flow integration.
//!
//! Each frame contributes an incremental volume `V_Δ = Δt × V_e × f(V_c)`
//! where `f` is the configured volume transform, and an incremental mass
//! `m_Δ = V_Δ × ρ`. The transform is applied to the per-frame `V_c` before
//! the elevator-travel scaling, never to the accumulated total.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{Quality, VolumeEstimate};
use crate::sim::{DEFAULT_FRAME_RATE, MAX_ELEVATOR_SPEED};

/// Cumulative drive-sprocket pulse count at a point in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedPulse {
    #[serde(rename = "timestamp_s")]
    pub timestamp: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SprocketSpec {
    pub pulses_per_rev: u32,
    /// Chain travel per sprocket revolution, meters.
    pub circumference: f64,
}

impl Default for SprocketSpec {
    fn default() -> Self {
        Self { pulses_per_rev: 10, circumference: 0.5 }
    }
}

impl SprocketSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pulses_per_rev == 0 || !(self.circumference > 0.0) || !self.circumference.is_finite() {
            return Err(Error::Config(format!(
                "sprocket needs positive pulses_per_rev and circumference (got {}, {})",
                self.pulses_per_rev, self.circumference
            )));
        }
        Ok(())
    }

    /// Chain travel per pulse, meters.
    pub fn pitch(&self) -> f64 {
        self.circumference / self.pulses_per_rev as f64
    }
}

pub const DEFAULT_SPEED_WINDOW: f64 = 0.5;

/// Validated pulse log that answers elevator speed queries.
#[derive(Debug, Clone)]
pub struct SpeedTrack {
    pulses: Vec<SpeedPulse>,
    spec: SprocketSpec,
    window: f64,
}

impl SpeedTrack {
    pub fn new(pulses: Vec<SpeedPulse>, spec: SprocketSpec, window: f64) -> Result<Self> {
        spec.validate()?;
        if !(window > 0.0) {
            return Err(Error::Config(format!("speed window must be positive, got {window}")));
        }
        if pulses.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "speed estimation needs at least 2 pulse records, got {}",
                pulses.len()
            )));
        }
        for w in pulses.windows(2) {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(Error::Stream(format!(
                    "pulse timestamps must strictly increase ({} then {})",
                    w[0].timestamp, w[1].timestamp
                )));
            }
            if w[1].count < w[0].count {
                return Err(Error::Stream(format!(
                    "pulse count decreased from {} to {} at t = {}",
                    w[0].count, w[1].count, w[1].timestamp
                )));
            }
        }
        Ok(Self { pulses, spec, window })
    }

    pub fn span(&self) -> (f64, f64) {
        (self.pulses[0].timestamp, self.pulses[self.pulses.len() - 1].timestamp)
    }

    pub fn pulses(&self) -> &[SpeedPulse] {
        &self.pulses
    }

    /// Count linearly interpolated between records.
    fn count_at(&self, t: f64) -> f64 {
        let idx = self.pulses.partition_point(|p| p.timestamp <= t);
        if idx == 0 {
            return self.pulses[0].count as f64;
        }
        if idx == self.pulses.len() {
            return self.pulses[idx - 1].count as f64;
        }
        let (a, b) = (self.pulses[idx - 1], self.pulses[idx]);
        let frac = (t - a.timestamp) / (b.timestamp - a.timestamp);
        a.count as f64 + (b.count as f64 - a.count as f64) * frac
    }

    /// Central-difference chain speed at `at`, m/s, clamped to [0, 3].
    pub fn speed_at(&self, at: f64) -> Result<f64> {
        let (first, last) = self.span();
        if !(at >= first && at <= last) {
            return Err(Error::InsufficientData(format!(
                "no speed coverage at t = {at} (pulses span [{first}, {last}])"
            )));
        }
        let a = (at - 0.5 * self.window).max(first);
        let b = (at + 0.5 * self.window).min(last);
        let rate = (self.count_at(b) - self.count_at(a)) / (b - a);
        Ok((rate * self.spec.pitch()).clamp(0.0, MAX_ELEVATOR_SPEED))
    }
}

/// Elevator speed at `at` from a raw pulse stream with the default 0.5 s window.
pub fn elevator_speed(pulses: &[SpeedPulse], spec: &SprocketSpec, at: f64) -> Result<f64> {
    SpeedTrack::new(pulses.to_vec(), *spec, DEFAULT_SPEED_WINDOW)?.speed_at(at)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformSpec {
    #[default]
    Identity,
    Sqrt,
}

impl TransformSpec {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformSpec::Identity => "identity",
            TransformSpec::Sqrt => "sqrt",
        }
    }
}

impl FromStr for TransformSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "sqrt" => Ok(Self::Sqrt),
            other => Err(Error::Config(format!("unknown transform {other:?} (expected identity or sqrt)"))),
        }
    }
}

/// Applies the volume transform to one `V_c` value.
pub fn apply_transform(v_c: f64, t: TransformSpec) -> Result<f64> {
    if !(v_c >= 0.0) {
        return Err(Error::domain(format!("volume rate must be non-negative, got {v_c}")));
    }
    Ok(match t {
        TransformSpec::Identity => v_c,
        TransformSpec::Sqrt => v_c.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowLightPolicy {
    #[default]
    Include,
    Exclude,
}

impl FromStr for LowLightPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "include" => Ok(Self::Include),
            "exclude" => Ok(Self::Exclude),
            other => Err(Error::Config(format!("unknown low-light policy {other:?} (expected include or exclude)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccumulateConfig {
    /// Density calibration factor, kg per (transformed) volume unit.
    pub density: f64,
    pub transform: TransformSpec,
    pub low_light: LowLightPolicy,
    /// Sets the trailing Δt of the last frame to `1 / frame_rate`.
    pub frame_rate: f64,
}

impl Default for AccumulateConfig {
    fn default() -> Self {
        Self {
            density: 1.0,
            transform: TransformSpec::Identity,
            low_light: LowLightPolicy::Include,
            frame_rate: DEFAULT_FRAME_RATE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    #[serde(rename = "timestamp_s")]
    pub timestamp: f64,
    /// Incremental (transformed) volume.
    pub v_delta: f64,
    /// Incremental mass, kg.
    #[serde(rename = "m_delta_kg")]
    pub m_delta: f64,
    /// Elevator speed at the frame, m/s.
    #[serde(rename = "v_e_m_per_s")]
    pub v_e: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowTotals {
    pub volume: f64,
    pub mass: f64,
    pub duration: f64,
    pub n_frames: usize,
    pub n_low_light: usize,
    pub n_excluded: usize,
}

impl FlowTotals {
    /// Mean mass flow over the run, kg/s.
    pub fn mass_flow(&self) -> f64 {
        if self.duration > 0.0 {
            self.mass / self.duration
        } else {
            0.0
        }
    }
}

/// Sorts estimates by timestamp, the order [`accumulate`] requires.
pub fn sort_estimates(estimates: &mut [VolumeEstimate]) {
    estimates.sort_by(|a, b| a.frame_timestamp.total_cmp(&b.frame_timestamp));
}

/// Time-ordered fold of per-frame estimates into flow samples and totals.
pub fn accumulate(
    estimates: &[VolumeEstimate],
    speeds: &SpeedTrack,
    cfg: &AccumulateConfig,
) -> Result<(Vec<FlowSample>, FlowTotals)> {
    if !(cfg.density > 0.0) || !cfg.density.is_finite() {
        return Err(Error::domain(format!("density must be positive, got {}", cfg.density)));
    }
    if !(cfg.frame_rate > 0.0) {
        return Err(Error::Config(format!("frame rate must be positive, got {}", cfg.frame_rate)));
    }
    let trailing = 1.0 / cfg.frame_rate;
    let mut samples = Vec::with_capacity(estimates.len());
    let mut totals = FlowTotals::default();

    for (i, est) in estimates.iter().enumerate() {
        let t = est.frame_timestamp;
        let dt = match estimates.get(i + 1) {
            Some(next) if next.frame_timestamp > t => next.frame_timestamp - t,
            Some(next) => {
                return Err(Error::Stream(format!(
                    "estimates out of order: t = {} follows t = {t}",
                    next.frame_timestamp
                )))
            }
            None => trailing,
        };
        totals.n_frames += 1;
        totals.duration += dt;
        let low_light = est.quality == Quality::LowLight;
        if low_light {
            totals.n_low_light += 1;
        }
        let v_e = speeds.speed_at(t)?;
        if low_light && cfg.low_light == LowLightPolicy::Exclude {
            totals.n_excluded += 1;
            continue;
        }
        let v_delta = dt * v_e * apply_transform(est.v_c, cfg.transform)?;
        let m_delta = v_delta * cfg.density;
        totals.volume += v_delta;
        totals.mass += m_delta;
        samples.push(FlowSample { timestamp: t, v_delta, m_delta, v_e });
    }
    Ok((samples, totals))
}

/// Trailing-window mass flow in kg/s at each sample.
pub fn windowed_mass_flow(samples: &[FlowSample], window: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(samples.len());
    let mut start = 0;
    let mut sum = 0.0;
    for s in samples {
        sum += s.m_delta;
        while samples[start].timestamp <= s.timestamp - window {
            sum -= samples[start].m_delta;
            start += 1;
        }
        out.push((s.timestamp, sum / window));
    }
    out
}

/// Point yield in kg/m²: mass flow over (row width × vehicle speed).
pub fn point_yield(m_dot: f64, v_m: f64, w: f64) -> Result<f64> {
    if !(v_m > 0.0) {
        return Err(Error::domain(format!("vehicle speed must be positive, got {v_m}")));
    }
    if !(w > 0.0) {
        return Err(Error::domain(format!("row width must be positive, got {w}")));
    }
    Ok(m_dot / (w * v_m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropType {
    Green,
    Burnt,
    /// Lab surrogate material.
    Bamboo,
}

impl CropType {
    pub fn as_str(self) -> &'static str {
        match self {
            CropType::Green => "green",
            CropType::Burnt => "burnt",
            CropType::Bamboo => "bamboo",
        }
    }
}

impl FromStr for CropType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "green" => Ok(Self::Green),
            "burnt" => Ok(Self::Burnt),
            "bamboo" => Ok(Self::Bamboo),
            other => Err(Error::Config(format!("unknown crop type {other:?}"))),
        }
    }
}

/// Grouping keys for a load: harvest year, region and crop type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub year: Option<u16>,
    pub region: String,
    pub crop: CropType,
}

impl GroupKey {
    pub fn new(year: Option<u16>, region: impl Into<String>, crop: CropType) -> Self {
        Self { year, region: region.into(), crop }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.year {
            Some(y) => write!(f, "{y}/{}/{}", self.crop.as_str(), self.region),
            None => write!(f, "-/{}/{}", self.crop.as_str(), self.region),
        }
    }
}

/// One wagon load (or lab run) with its ground truth weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadRecord {
    pub load_id: String,
    pub key: GroupKey,
    /// Accumulated volume in the units of `transform`.
    pub accumulated_volume: f64,
    pub predicted_mass: f64,
    /// Scale weight; `None` when no ground truth was captured.
    pub actual_mass: Option<f64>,
    pub duration: f64,
    pub n_frames: usize,
    pub n_low_light: usize,
    /// Flow exceeded slat capacity during the load.
    pub overflow: bool,
    /// Seconds since campaign start; orders loads within a season.
    pub timestamp: f64,
}

impl LoadRecord {
    pub fn calibratable(&self) -> bool {
        self.actual_mass.is_some()
    }

    /// Predicted over actual mass.
    pub fn mass_ratio(&self) -> Option<f64> {
        self.actual_mass.filter(|&m| m > 0.0).map(|m| self.predicted_mass / m)
    }

    pub fn predicted_mass_flow(&self) -> f64 {
        self.predicted_mass / self.duration
    }

    pub fn actual_mass_flow(&self) -> Option<f64> {
        self.actual_mass.map(|m| m / self.duration)
    }
}

/// Combines run totals with a scale weight into a load record.
pub fn build_load_record(
    load_id: impl Into<String>,
    totals: &FlowTotals,
    ground_truth_mass: Option<f64>,
    key: GroupKey,
) -> Result<LoadRecord> {
    if let Some(m) = ground_truth_mass {
        if !(m >= 0.0) || !m.is_finite() {
            return Err(Error::domain(format!("ground truth mass must be non-negative, got {m}")));
        }
    }
    if !(totals.duration > 0.0) {
        return Err(Error::domain(format!("load duration must be positive, got {}", totals.duration)));
    }
    Ok(LoadRecord {
        load_id: load_id.into(),
        key,
        accumulated_volume: totals.volume,
        predicted_mass: totals.mass,
        actual_mass: ground_truth_mass,
        duration: totals.duration,
        n_frames: totals.n_frames,
        n_low_light: totals.n_low_light,
        overflow: false,
        timestamp: 0.0,
    })
}
