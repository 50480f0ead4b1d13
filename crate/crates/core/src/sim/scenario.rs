//! Whole conveyance runs: a long bed moving under a fixed camera window.
//!
//! The run's material is packed once onto a belt strip as wide as the ROI.
//! Frame `i` is captured at `t = i / frame_rate` and sees the belt between
//! `s = v·t` and `s + roi.length`. Material is placed between `roi.length`
//! and the last window offset, so the first frame shows a bare elevator and
//! every billet passes fully through the window.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pack_region, render_window, PackedBed, RoiSpec, SimConfig, SimScenario};
use crate::error::Result;
use crate::estimator::PointCloudFrame;
use crate::flow::SpeedPulse;
use crate::rng;

const ORACLE_SAMPLES: usize = 100_000;
/// Grid spacing used to measure how much a window holds for spill-over.
const SPILL_PITCH: f64 = 0.02;

/// Ground truth for one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTruth {
    pub total_mass_kg: f64,
    pub total_solid_volume_m3: f64,
    /// Monte-Carlo envelope volume of the conveyed bed.
    pub envelope_volume_m3: f64,
    /// Mass over envelope volume; zero for empty runs.
    pub bulk_density_kg_m3: f64,
    /// Travel-weighted volume that spilled back over the slats and was seen twice.
    pub recounted_volume_m3: f64,
    pub overflow: bool,
    pub n_frames: usize,
    pub elevator_speed_m_s: f64,
    pub duration_s: f64,
    pub lux: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub frames: Vec<PointCloudFrame>,
    pub pulses: Vec<SpeedPulse>,
    pub truth: RunTruth,
    /// Solid volume whose billets entered the window during each frame.
    pub exposed_solid_volume: Vec<f64>,
    pub bed: PackedBed,
}

pub fn run_scenario(sim: &SimConfig, scenario: &SimScenario) -> Result<RunOutput> {
    scenario.validate()?;
    sim.validate()?;
    let window = sim.roi;
    let v = scenario.elevator_speed;
    let n = scenario.n_frames().max(1);
    let dt = 1.0 / scenario.frame_rate;
    let last_offset = v * (n - 1) as f64 * dt;
    let belt = RoiSpec {
        width: window.width,
        length: last_offset + window.length + sim.slide_back,
        plane_height: 0.0,
    };

    let target = scenario.total_mass() / sim.particle_density;
    let bed = if target > 0.0 {
        let band = (window.length, last_offset.max(window.length + 1e-6));
        pack_region(sim, belt, band, target, scenario.rng_seed, scenario.overflow_enabled)?
    } else {
        PackedBed::new(Vec::new(), belt, sim.particle_density, scenario.rng_seed)
    };

    let cap = sim.overflow_cap_volume();
    let rendered: Vec<(PointCloudFrame, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let t = i as f64 * dt;
            let spilled = if scenario.overflow_enabled {
                (bed.window_volume(v * t + sim.slide_back, window.length, SPILL_PITCH) - cap).max(0.0)
            } else {
                0.0
            };
            let frame = render_window(
                &bed,
                v * t,
                window,
                scenario.lighting,
                rng::derive(scenario.rng_seed, i as u64),
                &sim.render,
                spilled / window.area(),
                t,
            );
            (frame, spilled)
        })
        .collect();

    // Each frame stands for `v·dt` of belt travel out of a window `length` long.
    let travel_weight = v * dt / window.length;
    let recounted: f64 = rendered.iter().map(|r| r.1).sum::<f64>() * travel_weight;
    let frames: Vec<PointCloudFrame> = rendered.into_iter().map(|r| r.0).collect();

    let exposed = exposed_volumes(&bed, v, dt, n);
    let solid = bed.solid_volume();
    let envelope = bed.envelope_volume_mc(ORACLE_SAMPLES, scenario.rng_seed);
    let mass = solid * sim.particle_density;
    let truth = RunTruth {
        total_mass_kg: mass,
        total_solid_volume_m3: solid,
        envelope_volume_m3: envelope,
        bulk_density_kg_m3: if envelope > 0.0 { mass / envelope } else { 0.0 },
        recounted_volume_m3: recounted,
        overflow: envelope > 0.0 && recounted > sim.overflow_tolerance * envelope,
        n_frames: n,
        elevator_speed_m_s: v,
        duration_s: scenario.duration,
        lux: scenario.lighting.lux,
    };
    let pulses = speed_pulses(sim, v, scenario.duration, scenario.rng_seed);

    Ok(RunOutput { frames, pulses, truth, exposed_solid_volume: exposed, bed })
}

/// Solid volume of billets whose center enters the window's far edge
/// during each frame interval; the last frame takes everything beyond.
fn exposed_volumes(bed: &PackedBed, v: f64, dt: f64, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for b in &bed.billets {
        let y = b.pose.center[1];
        let i = if v > 0.0 { (y / (v * dt)).floor().max(0.0) as usize } else { 0 };
        out[i.min(n - 1)] += b.volume();
    }
    out
}

/// Cumulative pulse counter logged at `sim.pulse_log_rate`, covering
/// `[0, duration]`, with Gaussian jitter on each pulse edge.
pub fn speed_pulses(sim: &SimConfig, speed: f64, duration: f64, seed: u64) -> Vec<SpeedPulse> {
    let mut rng = rng::stream(seed, rng::Stream::Pulses);
    let pitch = sim.sprocket.pitch();
    let mut edges: Vec<f64> = Vec::new();
    if speed > 0.0 {
        let jitter = (sim.pulse_jitter > 0.0).then(|| Normal::new(0.0, sim.pulse_jitter).expect("finite jitter"));
        let n_edges = (speed * (duration + 1.0) / pitch).ceil() as usize;
        edges.reserve(n_edges);
        for k in 1..=n_edges {
            let t = k as f64 * pitch / speed;
            edges.push(t + jitter.as_ref().map_or(0.0, |j| j.sample(&mut rng)));
        }
        edges.sort_by(f64::total_cmp);
    }

    let n_log = (duration * sim.pulse_log_rate).ceil() as usize;
    let mut pulses = Vec::with_capacity(n_log + 1);
    let mut seen = 0usize;
    for k in 0..=n_log {
        let t = k as f64 / sim.pulse_log_rate;
        while seen < edges.len() && edges[seen] <= t {
            seen += 1;
        }
        pulses.push(SpeedPulse { timestamp: t, count: seen as u64 });
    }
    pulses
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CampaignConfig;

    fn lab_sim() -> SimConfig {
        CampaignConfig::preset("lab").unwrap().sim
    }

    #[test]
    fn frame_count_and_travel() {
        let sim = lab_sim();
        let sc = SimScenario::new(265.0 / 60.0, 2.0, 60.0, 6700.0, 21);
        let out = run_scenario(&sim, &sc).unwrap();
        assert_eq!(out.frames.len(), 450);
        assert_eq!(out.truth.n_frames, 450);
        let dt = out.frames[1].timestamp - out.frames[0].timestamp;
        assert!((2.0 * dt - 2.0 / 7.5).abs() < 1e-12);
        assert!((out.truth.total_mass_kg - 265.0).abs() / 265.0 < 0.01, "{}", out.truth.total_mass_kg);
        let exposed: f64 = out.exposed_solid_volume.iter().sum();
        assert!((exposed - out.truth.total_solid_volume_m3).abs() <= 0.01 * out.truth.total_solid_volume_m3);
    }

    #[test]
    fn empty_run_shows_bare_elevator() {
        let sim = lab_sim();
        let out = run_scenario(&sim, &SimScenario::new(0.0, 1.6, 20.0, 700.0, 3)).unwrap();
        assert_eq!(out.frames.len(), 150);
        assert_eq!((out.truth.total_mass_kg, out.truth.total_solid_volume_m3), (0.0, 0.0));
        assert!(!out.truth.overflow);
        let noise = sim.render.noise_sigma;
        assert!(out.frames.iter().all(|f| f.points.iter().all(|p| p[2].abs() < 7.0 * noise)));
    }

    #[test]
    fn runs_are_deterministic() {
        let sim = lab_sim();
        let sc = SimScenario::new(4.0, 1.2, 20.0, 3100.0, 8);
        let a = run_scenario(&sim, &sc).unwrap();
        let b = run_scenario(&sim, &sc).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.pulses, b.pulses);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn pulses_cover_the_run() {
        let sim = SimConfig::default();
        let p = speed_pulses(&sim, 2.0, 10.0, 1);
        assert_eq!(p.first().unwrap().timestamp, 0.0);
        assert!(p.last().unwrap().timestamp >= 10.0);
        assert!(p.windows(2).all(|w| w[1].count >= w[0].count && w[1].timestamp > w[0].timestamp));
        // 0.05 m per pulse at 2 m/s.
        let c = p.last().unwrap().count as f64;
        assert!((c - 400.0).abs() <= 2.0, "{c}");
        assert!(speed_pulses(&sim, 0.0, 5.0, 1).iter().all(|q| q.count == 0));
    }
}
