//! Synthetic billet beds on an elevator and stereo-like point clouds of them.
//!
//! The simulator is also the geometric ground truth for the estimator: every
//! bed knows its exact solid volume, and [`PackedBed::surface_height`] is an
//! exact ray cast against the stacked cylinders.

mod geometry;
mod packing;
mod render;
mod scenario;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::SprocketSpec;
use geometry::BinIndex;

pub use packing::{pack_billets, pack_region, solid_volume};
pub use render::{render_point_cloud, render_window, RenderConfig};
pub use scenario::{run_scenario, speed_pulses, RunOutput, RunTruth};

/// Rigid placement of a billet in the elevator frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub center: [f64; 3],
    /// Unit axis direction.
    pub axis: [f64; 3],
}

impl Pose {
    pub fn new(center: [f64; 3], axis: [f64; 3]) -> Self {
        Self { center, axis }
    }
}

/// One cut stalk segment, modelled as a solid right circular cylinder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Billet {
    pub length: f64,
    pub diameter: f64,
    pub pose: Pose,
}

impl Billet {
    pub fn new(length: f64, diameter: f64, pose: Pose) -> Result<Self> {
        if !(length > 0.0) || !(diameter > 0.0) {
            return Err(Error::domain(format!(
                "billet dimensions must be positive (length {length}, diameter {diameter})"
            )));
        }
        let [ax, ay, az] = pose.axis;
        let norm = (ax * ax + ay * ay + az * az).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("billet axis must be unit-norm (|a| = {norm})")));
        }
        Ok(Self { length, diameter, pose })
    }

    pub fn radius(&self) -> f64 {
        0.5 * self.diameter
    }

    pub fn volume(&self) -> f64 {
        std::f64::consts::PI * self.radius().powi(2) * self.length
    }

    /// Axis-aligned xy bounding box of the billet footprint.
    pub(crate) fn footprint(&self) -> ([f64; 2], [f64; 2]) {
        let r = self.radius();
        let h = 0.5 * self.length;
        let [cx, cy, _] = self.pose.center;
        let [ax, ay, _] = self.pose.axis;
        // Cap discs project to ellipses bounded by r·sqrt(1 - a_i²).
        let ex = h * ax.abs() + r * (1.0 - ax * ax).max(0.0).sqrt();
        let ey = h * ay.abs() + r * (1.0 - ay * ay).max(0.0).sqrt();
        ([cx - ex, cy - ey], [cx + ex, cy + ey])
    }
}

/// Camera region of interest on the elevator floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiSpec {
    /// Extent across the elevator (x), meters.
    pub width: f64,
    /// Extent along conveyance (y), meters.
    pub length: f64,
    /// z of the empty elevator floor.
    #[serde(default)]
    pub plane_height: f64,
}

impl RoiSpec {
    pub fn new(width: f64, length: f64) -> Result<Self> {
        let roi = Self { width, length, plane_height: 0.0 };
        roi.validate()?;
        Ok(roi)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !(self.length > 0.0) || !self.plane_height.is_finite() {
            return Err(Error::Config(format!(
                "ROI extents must be positive (width {}, length {})",
                self.width, self.length
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.width * self.length
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.width).contains(&x) && (0.0..=self.length).contains(&y)
    }
}

impl Default for RoiSpec {
    fn default() -> Self {
        // Window length matches elevator travel per frame at 2 m/s and 7.5 Hz.
        Self { width: 0.5, length: 2.0 / 7.5, plane_height: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightingCondition {
    pub lux: f64,
}

impl LightingCondition {
    pub fn new(lux: f64) -> Result<Self> {
        if !(lux >= 0.0) || !lux.is_finite() {
            return Err(Error::domain(format!("illuminance must be non-negative, got {lux}")));
        }
        Ok(Self { lux })
    }
}

/// One simulated conveyance run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    /// kg/s; total conveyed mass is `mass_flow_target × duration`.
    pub mass_flow_target: f64,
    /// m/s.
    pub elevator_speed: f64,
    /// s.
    pub duration: f64,
    pub lighting: LightingCondition,
    /// Hz.
    pub frame_rate: f64,
    pub rng_seed: u64,
    pub overflow_enabled: bool,
}

pub const MAX_ELEVATOR_SPEED: f64 = 3.0;
pub const DEFAULT_FRAME_RATE: f64 = 7.5;

impl SimScenario {
    pub fn new(mass_flow_target: f64, elevator_speed: f64, duration: f64, lux: f64, rng_seed: u64) -> Self {
        Self {
            mass_flow_target,
            elevator_speed,
            duration,
            lighting: LightingCondition { lux },
            frame_rate: DEFAULT_FRAME_RATE,
            rng_seed,
            overflow_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::Config(format!("duration must be positive, got {}", self.duration)));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::Config(format!("frame_rate must be positive, got {}", self.frame_rate)));
        }
        if !(0.0..=MAX_ELEVATOR_SPEED).contains(&self.elevator_speed) {
            return Err(Error::Config(format!(
                "elevator_speed must lie in [0, {MAX_ELEVATOR_SPEED}] m/s, got {}",
                self.elevator_speed
            )));
        }
        if !(self.mass_flow_target >= 0.0) || !self.mass_flow_target.is_finite() {
            return Err(Error::Config(format!(
                "mass_flow_target must be non-negative, got {}",
                self.mass_flow_target
            )));
        }
        if self.mass_flow_target > 0.0 && self.elevator_speed == 0.0 {
            return Err(Error::Config("a stopped elevator cannot convey material".into()));
        }
        LightingCondition::new(self.lighting.lux).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.mass_flow_target * self.duration
    }

    pub fn n_frames(&self) -> usize {
        (self.duration * self.frame_rate).round() as usize
    }
}

/// Nominal billet dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilletSpec {
    pub diameter: f64,
    pub length: f64,
}

impl Default for BilletSpec {
    fn default() -> Self {
        Self { diameter: 0.04, length: 0.20 }
    }
}

/// Physical and sensor parameters shared by every simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub roi: RoiSpec,
    pub billet: BilletSpec,
    /// kg/m³ of the billet material itself.
    pub particle_density: f64,
    /// Slat height; ROI capacity is `width × length × slat_height`.
    pub slat_height: f64,
    /// Fraction of ROI capacity a window can hold; the excess spills back.
    pub overflow_cap_fraction: f64,
    /// Distance up the elevator from which spilled material returns into view.
    pub slide_back: f64,
    /// Recounted volume above this fraction of envelope marks a run as overflowing.
    pub overflow_tolerance: f64,
    /// Drop points tried per billet while looking for bare floor.
    pub settle_trials: usize,
    /// Half-width of the square searched around the first drop point.
    pub settle_radius: f64,
    /// Steepest rest tilt of a billet as rise over horizontal run; 0 keeps every billet level.
    pub max_tilt_slope: f64,
    pub render: RenderConfig,
    pub sprocket: SprocketSpec,
    /// Hz at which the cumulative pulse counter is logged.
    pub pulse_log_rate: f64,
    /// Standard deviation of pulse edge timing, seconds.
    pub pulse_jitter: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            roi: RoiSpec::default(),
            billet: BilletSpec::default(),
            particle_density: 350.0,
            slat_height: 0.25,
            overflow_cap_fraction: 0.6,
            slide_back: 0.4,
            overflow_tolerance: 0.01,
            settle_trials: 16,
            settle_radius: 0.2,
            max_tilt_slope: 0.0,
            render: RenderConfig::default(),
            sprocket: SprocketSpec::default(),
            pulse_log_rate: 20.0,
            pulse_jitter: 0.002,
        }
    }
}

impl SimConfig {
    /// Envelope volume one camera window carries before material spills.
    pub fn overflow_cap_volume(&self) -> f64 {
        self.roi.width * self.roi.length * self.slat_height * self.overflow_cap_fraction
    }

    pub fn validate(&self) -> Result<()> {
        self.roi.validate()?;
        let positive = [
            ("billet.diameter", self.billet.diameter),
            ("billet.length", self.billet.length),
            ("particle_density", self.particle_density),
            ("slat_height", self.slat_height),
            ("overflow_cap_fraction", self.overflow_cap_fraction),
            ("pulse_log_rate", self.pulse_log_rate),
            ("render.point_pitch", self.render.point_pitch),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.max_tilt_slope >= 0.0) || !(self.settle_radius >= 0.0) {
            return Err(Error::Config("max_tilt_slope and settle_radius must be non-negative".into()));
        }
        if self.settle_trials == 0 {
            return Err(Error::Config("settle_trials must be at least 1".into()));
        }
        self.sprocket.validate()?;
        Ok(())
    }
}

/// Ground-truth arrangement of billets over a rectangular floor region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackedBed {
    pub billets: Vec<Billet>,
    pub roi: RoiSpec,
    pub particle_density: f64,
    pub fill_seed: u64,
    #[serde(skip)]
    index: BinIndex,
}

impl PackedBed {
    pub fn new(billets: Vec<Billet>, roi: RoiSpec, particle_density: f64, fill_seed: u64) -> Self {
        let bin = billets
            .iter()
            .map(|b| b.length.max(b.diameter))
            .fold(0.05_f64, f64::max);
        let mut index = BinIndex::new([0.0, 0.0], [roi.width, roi.length], bin);
        for (i, b) in billets.iter().enumerate() {
            let (lo, hi) = b.footprint();
            index.insert(i as u32, lo, hi);
        }
        Self { billets, roi, particle_density, fill_seed, index }
    }

    pub fn is_empty(&self) -> bool {
        self.billets.is_empty()
    }

    pub fn solid_volume(&self) -> f64 {
        solid_volume(self)
    }

    pub fn mass(&self) -> f64 {
        self.solid_volume() * self.particle_density
    }

    /// Height of the material surface above the floor at `(x, y)`.
    pub fn surface_height(&self, x: f64, y: f64) -> Result<f64> {
        if !self.roi.contains(x, y) {
            return Err(Error::domain(format!(
                "({x}, {y}) lies outside the {} × {} m ROI",
                self.roi.width, self.roi.length
            )));
        }
        Ok(self.height_unchecked(x, y))
    }

    pub(crate) fn height_unchecked(&self, x: f64, y: f64) -> f64 {
        self.index
            .at(x, y)
            .iter()
            .filter_map(|&i| geometry::vertical_hit(&self.billets[i as usize], x, y))
            .fold(0.0, f64::max)
            .max(0.0)
    }

    /// Monte-Carlo integral of the surface height over the ROI (stratified
    /// jittered sampling, `samples` rays rounded up to a full grid).
    pub fn envelope_volume_mc(&self, samples: usize, seed: u64) -> f64 {
        use rand::Rng;
        if self.billets.is_empty() {
            return 0.0;
        }
        let mut rng = crate::rng::stream(seed, crate::rng::Stream::Oracle);
        let aspect = self.roi.width / self.roi.length;
        let nx = ((samples as f64 * aspect).sqrt().ceil() as usize).max(1);
        let ny = (samples as f64 / nx as f64).ceil() as usize;
        let dx = self.roi.width / nx as f64;
        let dy = self.roi.length / ny as f64;
        let mut sum = 0.0;
        for j in 0..ny {
            for i in 0..nx {
                let x = (i as f64 + rng.random::<f64>()) * dx;
                let y = (j as f64 + rng.random::<f64>()) * dy;
                sum += self.height_unchecked(x, y);
            }
        }
        sum * dx * dy
    }

    /// Solid volume over Monte-Carlo envelope volume, times particle density.
    pub fn bulk_density_mc(&self, samples: usize, seed: u64) -> Option<f64> {
        let env = self.envelope_volume_mc(samples, seed);
        (env > 0.0).then(|| self.mass() / env)
    }

    /// Midpoint-rule volume of the full-width band `[y0, y0 + length]` on a
    /// grid of roughly `pitch`; parts of the band past the bed count as empty.
    pub fn window_volume(&self, y0: f64, length: f64, pitch: f64) -> f64 {
        let nx = ((self.roi.width / pitch).ceil() as usize).max(1);
        let ny = ((length / pitch).ceil() as usize).max(1);
        let dx = self.roi.width / nx as f64;
        let dy = length / ny as f64;
        let mut sum = 0.0;
        for j in 0..ny {
            let y = y0 + (j as f64 + 0.5) * dy;
            if !(0.0..=self.roi.length).contains(&y) {
                continue;
            }
            for i in 0..nx {
                sum += self.height_unchecked((i as f64 + 0.5) * dx, y);
            }
        }
        sum * dx * dy
    }

    pub fn max_height(&self) -> f64 {
        self.billets
            .iter()
            .map(|b| {
                let az = b.pose.axis[2];
                b.pose.center[2] + b.radius() * (1.0 - az * az).max(0.0).sqrt() + 0.5 * b.length * az.abs()
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surface_of_empty_and_single_billet_beds() {
        let roi = RoiSpec::new(0.5, 0.3).unwrap();
        let empty = PackedBed::new(vec![], roi, 350.0, 0);
        assert_eq!(empty.surface_height(0.2, 0.1).unwrap(), 0.0);

        let b = Billet::new(0.2, 0.04, Pose::new([0.25, 0.15, 0.02], [1.0, 0.0, 0.0])).unwrap();
        let bed = PackedBed::new(vec![b], roi, 350.0, 0);
        assert!((bed.surface_height(0.25, 0.15).unwrap() - 0.04).abs() < 1e-12);
        assert_eq!(bed.surface_height(0.25, 0.25).unwrap(), 0.0);
        assert!(matches!(bed.surface_height(0.6, 0.1), Err(Error::Domain(_))));
    }

    /// Area under the top profile of a resting circle of radius 0.02: a half
    /// disc on a 0.04 × 0.02 slab.
    const PROFILE_AREA: f64 = std::f64::consts::PI * 0.02 * 0.02 / 2.0 + 0.04 * 0.02;

    #[test]
    fn monte_carlo_envelope_of_one_billet() {
        let roi = RoiSpec::new(0.5, 0.3).unwrap();
        let b = Billet::new(0.2, 0.04, Pose::new([0.25, 0.15, 0.02], [1.0, 0.0, 0.0])).unwrap();
        let exact = 0.2 * PROFILE_AREA;
        let bed = PackedBed::new(vec![b], roi, 350.0, 0);
        let mc = bed.envelope_volume_mc(200_000, 5);
        assert!((mc - exact).abs() / exact < 0.01, "{mc} vs {exact}");
    }

    #[test]
    fn invalid_inputs() {
        assert!(Billet::new(0.0, 0.04, Pose::new([0.0; 3], [1.0, 0.0, 0.0])).is_err());
        assert!(Billet::new(0.2, 0.04, Pose::new([0.0; 3], [1.0, 1.0, 0.0])).is_err());
        assert!(RoiSpec::new(0.0, 1.0).is_err());
        assert!(LightingCondition::new(-1.0).is_err());
        assert!(SimScenario::new(1.0, 3.5, 10.0, 6700.0, 0).validate().is_err());
        assert!(SimScenario::new(1.0, 2.0, 0.0, 6700.0, 0).validate().is_err());
        assert!(SimScenario::new(1.0, 0.0, 10.0, 6700.0, 0).validate().is_err());
    }
}
