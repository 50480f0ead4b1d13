//! Stereo-like point clouds rendered from the exact bed surface.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LightingCondition, PackedBed, RoiSpec};
use crate::estimator::PointCloudFrame;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Spacing of the jittered sampling grid, meters.
    pub point_pitch: f64,
    /// Additive Gaussian z noise, meters. Zero renders the exact surface.
    pub noise_sigma: f64,
    /// Below this illuminance the low-light artifact applies.
    pub low_light_threshold: f64,
    /// Point-count multiplier under low light.
    pub low_light_inflation: f64,
    /// Fractional elevation loss at zero lux; scales linearly up to the threshold.
    pub low_light_max_bias: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            point_pitch: 0.005,
            noise_sigma: 0.005,
            low_light_threshold: 2700.0,
            low_light_inflation: 1.3,
            low_light_max_bias: 0.15,
        }
    }
}

impl RenderConfig {
    pub fn noise_free(mut self) -> Self {
        self.noise_sigma = 0.0;
        self
    }

    /// Multiplicative elevation factor applied at `lux` (1 in good light).
    pub fn elevation_factor(&self, lux: f64) -> f64 {
        if lux >= self.low_light_threshold {
            1.0
        } else {
            1.0 - self.low_light_max_bias * (self.low_light_threshold - lux) / self.low_light_threshold
        }
    }
}

/// Renders the whole bed ROI as one frame at timestamp 0.
pub fn render_point_cloud(
    bed: &PackedBed,
    lighting: LightingCondition,
    noise_seed: u64,
    cfg: &RenderConfig,
) -> PointCloudFrame {
    render_window(bed, 0.0, bed.roi, lighting, noise_seed, cfg, 0.0, 0.0)
}

/// Renders the part of `bed` under a camera window whose near edge sits at
/// `y_offset` along the bed. Points are in window coordinates.
///
/// `lift` is a uniform layer drawn on top of the surface, used for spilled
/// material that is seen a second time.
#[allow(clippy::too_many_arguments)]
pub fn render_window(
    bed: &PackedBed,
    y_offset: f64,
    window: RoiSpec,
    lighting: LightingCondition,
    noise_seed: u64,
    cfg: &RenderConfig,
    lift: f64,
    timestamp: f64,
) -> PointCloudFrame {
    let mut rng = rng::stream(noise_seed, rng::Stream::Render);
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("finite sigma"));
    let factor = cfg.elevation_factor(lighting.lux);

    let height = |x: f64, y: f64| -> f64 {
        let local = y_offset + y;
        let base = if bed.roi.contains(x, local) { bed.height_unchecked(x, local) } else { 0.0 };
        base + lift
    };

    let nx = ((window.width / cfg.point_pitch).round() as usize).max(1);
    let ny = ((window.length / cfg.point_pitch).round() as usize).max(1);
    let dx = window.width / nx as f64;
    let dy = window.length / ny as f64;
    let inflated = lighting.lux < cfg.low_light_threshold;
    let extra_points = if inflated {
        ((cfg.low_light_inflation - 1.0).max(0.0) * (nx * ny) as f64).round() as usize
    } else {
        0
    };

    let mut points = Vec::with_capacity(nx * ny + extra_points);
    let mut emit = |x: f64, y: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut z = height(x, y) * factor;
        if let Some(n) = &noise {
            z += n.sample(rng);
        }
        points.push([x, y, window.plane_height + z]);
    };

    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + rng.random::<f64>()) * dx;
            let y = (j as f64 + rng.random::<f64>()) * dy;
            emit(x, y, &mut rng);
        }
    }
    for _ in 0..extra_points {
        let x = rng.random::<f64>() * window.width;
        let y = rng.random::<f64>() * window.length;
        emit(x, y, &mut rng);
    }

    PointCloudFrame { timestamp, lux: lighting.lux, points }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{pack_region, Billet, Pose, SimConfig};

    fn flat_bed(height: f64) -> PackedBed {
        // Level billets side by side form a corrugated surface; the mean
        // surface height is known from the oracle.
        let roi = RoiSpec::new(0.4, 0.2).unwrap();
        let r = 0.5 * height;
        let billets = (0..10)
            .map(|k| Billet::new(0.2, height, Pose::new([r + k as f64 * height, 0.1, r], [0.0, 1.0, 0.0])).unwrap())
            .collect();
        PackedBed::new(billets, roi, 350.0, 0)
    }

    #[test]
    fn empty_bed_renders_floor_noise() {
        let bed = PackedBed::new(vec![], RoiSpec::default(), 350.0, 0);
        let cfg = RenderConfig::default();
        let f = render_point_cloud(&bed, LightingCondition::new(6700.0).unwrap(), 1, &cfg);
        f.validate().unwrap();
        assert_eq!(f.lux, 6700.0);
        assert!(f.mean_height().abs() < 0.001);
        assert!(f.points.iter().all(|p| p[2].abs() < 6.0 * cfg.noise_sigma));
    }

    #[test]
    fn good_light_is_unbiased() {
        let bed = flat_bed(0.04);
        let truth = bed.envelope_volume_mc(200_000, 1) / bed.roi.area();
        let cfg = RenderConfig::default();
        let f = render_point_cloud(&bed, LightingCondition::new(6700.0).unwrap(), 2, &cfg);
        assert!((f.mean_height() - truth).abs() < cfg.noise_sigma, "{} vs {truth}", f.mean_height());
    }

    #[test]
    fn low_light_inflates_and_lowers() {
        let sim = SimConfig::default();
        let bed = pack_region(&sim, sim.roi, (0.0, sim.roi.length), 0.006, 4, false).unwrap();
        let cfg = RenderConfig::default();
        let bright = render_point_cloud(&bed, LightingCondition::new(6700.0).unwrap(), 7, &cfg);
        let dark = render_point_cloud(&bed, LightingCondition::new(700.0).unwrap(), 7, &cfg);
        assert!(dark.mean_height() < bright.mean_height());
        let ratio = dark.points.len() as f64 / bright.points.len() as f64;
        assert!((ratio - 1.3).abs() < 0.01, "{ratio}");
        assert_eq!(cfg.elevation_factor(2700.0), 1.0);
        assert!((cfg.elevation_factor(0.0) - 0.85).abs() < 1e-15);
    }

    #[test]
    fn rendering_is_deterministic() {
        let bed = flat_bed(0.04);
        let cfg = RenderConfig::default();
        let l = LightingCondition::new(1900.0).unwrap();
        assert_eq!(render_point_cloud(&bed, l, 3, &cfg), render_point_cloud(&bed, l, 3, &cfg));
        assert_ne!(render_point_cloud(&bed, l, 3, &cfg), render_point_cloud(&bed, l, 4, &cfg));
    }
}
