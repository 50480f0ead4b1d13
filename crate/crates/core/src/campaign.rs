//! Expands a campaign config into concrete lab scenarios or field loads.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{CampaignConfig, FieldCampaign, FieldGroup, LabCampaign};
use crate::error::{Error, Result};
use crate::estimator::{lighting_gate, LightGate, Quality, VolumeEstimate};
use crate::flow::{GroupKey, SpeedPulse};
use crate::rng::{self, Stream};
use crate::sim::{speed_pulses, LightingCondition, SimConfig, SimScenario};

/// Seconds between consecutive lab runs on the campaign clock.
const LAB_RUN_INTERVAL: f64 = 600.0;
const MAX_FIELD_FRAMES: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LabRun {
    pub id: String,
    pub scenario: SimScenario,
    pub key: GroupKey,
    pub timestamp: f64,
}

impl LabRun {
    pub fn is_empty(&self) -> bool {
        self.scenario.mass_flow_target == 0.0
    }
}

/// The lab design of experiments, loaded runs first. Run `i` depends only
/// on the seed and `i`, so a smaller `runs` keeps a prefix of the design.
pub fn lab_runs(cfg: &CampaignConfig) -> Result<Vec<LabRun>> {
    let lab = cfg.lab.as_ref().ok_or_else(|| Error::Config("not a lab campaign".into()))?;
    let loaded = lab.loaded_runs();
    let key = lab.group.key();
    (0..lab.runs)
        .map(|i| {
            let lux = lab.lux_levels[i % lab.lux_levels.len()];
            let scenario = if i < loaded {
                loaded_scenario(lab, cfg.seed, i, lux)
            } else {
                empty_scenario(lab, cfg.seed, i, i - loaded, lux)
            };
            scenario.validate()?;
            Ok(LabRun { id: format!("run-{i:03}"), scenario, key: key.clone(), timestamp: i as f64 * LAB_RUN_INTERVAL })
        })
        .collect()
}

fn loaded_scenario(lab: &LabCampaign, seed: u64, i: usize, lux: f64) -> SimScenario {
    let mut rng = rng::stream(rng::derive(seed, i as u64), Stream::Campaign);
    let speed = uniform(&mut rng, lab.speed_range);
    let drawn = uniform(&mut rng, lab.duration_range);
    let mass = uniform(&mut rng, lab.mass_range);
    let duration = lab.fixed_duration.unwrap_or(drawn);
    SimScenario {
        mass_flow_target: mass / duration,
        elevator_speed: speed,
        duration,
        lighting: LightingCondition { lux },
        frame_rate: lab.frame_rate,
        rng_seed: rng::derive(seed ^ 0x005E_ED0F_5CE7_A210, i as u64),
        overflow_enabled: lab.overflow_enabled,
    }
}

/// Empty runs are spread evenly over the speed range.
fn empty_scenario(lab: &LabCampaign, seed: u64, i: usize, j: usize, lux: f64) -> SimScenario {
    let n = lab.empty_runs.max(1);
    let frac = if n > 1 { j as f64 / (n - 1) as f64 } else { 0.5 };
    let [lo, hi] = lab.speed_range;
    SimScenario {
        mass_flow_target: 0.0,
        elevator_speed: lo + (hi - lo) * frac,
        duration: lab.empty_duration,
        lighting: LightingCondition { lux },
        frame_rate: lab.frame_rate,
        rng_seed: rng::derive(seed ^ 0x005E_ED0F_5CE7_A210, i as u64),
        overflow_enabled: lab.overflow_enabled,
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// One synthetic wagon load as the on-board logger would record it.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldLoad {
    pub id: String,
    pub key: GroupKey,
    pub timestamp: f64,
    pub elevator_speed: f64,
    pub estimates: Vec<VolumeEstimate>,
    pub pulses: Vec<SpeedPulse>,
    /// Wagon scale weight, kg.
    pub actual_mass: f64,
    /// Density multiplier from an injected shift.
    pub shift_factor: f64,
}

pub fn field_loads(cfg: &CampaignConfig) -> Result<Vec<FieldLoad>> {
    let field = cfg.field.as_ref().ok_or_else(|| Error::Config("not a field campaign".into()))?;
    let mut out = Vec::new();
    for (gi, group) in field.groups.iter().enumerate() {
        let group_seed = rng::derive(cfg.seed, gi as u64);
        for k in 0..group.n_loads {
            out.push(field_load(cfg, field, group, group_seed, k)?);
        }
    }
    Ok(out)
}

fn field_load(cfg: &CampaignConfig, field: &FieldCampaign, g: &FieldGroup, group_seed: u64, k: usize) -> Result<FieldLoad> {
    let load_seed = rng::derive(group_seed, k as u64);
    let mut rng = rng::stream(load_seed, Stream::Field);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let vc_load = field.v_ref * (g.sigma_ln_vc * normal(&mut rng)).exp();
    let speed = uniform(&mut rng, field.speed_range);
    let noise = (g.noise * normal(&mut rng)).exp();
    let shift_factor = match g.shift {
        Some(s) if k as f64 >= (s.at * g.n_loads as f64).ceil() => s.factor,
        _ => 1.0,
    };
    let target = g.wagon_mass * uniform(&mut rng, field.fill_range);
    let dt = 1.0 / field.frame_rate;
    let quality = match lighting_gate(field.lux, cfg.estimator.lux_gate) {
        LightGate::Ok => Quality::Ok,
        LightGate::LowLight => Quality::LowLight,
    };

    let mut estimates = Vec::new();
    let mut mass = 0.0;
    while mass * noise * shift_factor < target {
        if estimates.len() >= MAX_FIELD_FRAMES {
            return Err(Error::Config(format!(
                "wagon_mass of group {} is not reached within {MAX_FIELD_FRAMES} frames",
                g.key()
            )));
        }
        let v_c = vc_load * (field.sigma_ln_frame * normal(&mut rng)).exp();
        mass += g.rho_ref * (v_c / field.v_ref).powf(-g.beta) * v_c * speed * dt;
        estimates.push(VolumeEstimate { frame_timestamp: estimates.len() as f64 * dt, v_c, quality });
    }

    let duration = estimates.len() as f64 * dt;
    let pulse_sim = SimConfig { pulse_log_rate: field.pulse_rate, ..cfg.sim.clone() };
    let pulses = speed_pulses(&pulse_sim, speed, duration, load_seed);
    let season_offset = g.year.map_or(0.0, |y| (y as f64 - 2000.0) * 365.0 * 86_400.0);
    Ok(FieldLoad {
        id: format!("{}-{}-{}-{k:03}", g.year.map_or("x".to_string(), |y| y.to_string()), g.region, g.crop.as_str()),
        key: g.key(),
        timestamp: season_offset + k as f64 * field.load_interval,
        elevator_speed: speed,
        estimates,
        pulses,
        actual_mass: mass * noise * shift_factor,
        shift_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Overrides;

    #[test]
    fn lab_design_matches_the_preset() {
        let cfg = CampaignConfig::preset("lab").unwrap();
        let runs = lab_runs(&cfg).unwrap();
        assert_eq!(runs.len(), 239);
        let empty: Vec<&LabRun> = runs.iter().filter(|r| r.is_empty()).collect();
        assert_eq!(empty.len(), 8);
        assert!(runs[..231].iter().all(|r| !r.is_empty()));
        assert_eq!(empty[0].scenario.elevator_speed, 1.0);
        assert!((empty[7].scenario.elevator_speed - 2.2).abs() < 1e-12);
        for r in &runs[..231] {
            let s = &r.scenario;
            assert!((1.0..2.2).contains(&s.elevator_speed));
            assert!((20.0..120.0).contains(&s.duration));
            assert!((230.0..300.0).contains(&s.total_mass()), "{}", s.total_mass());
        }
        for lux in [700.0, 6700.0] {
            let n = runs.iter().filter(|r| r.scenario.lighting.lux == lux).count();
            assert!((39..=40).contains(&n), "{lux}: {n}");
        }
    }

    #[test]
    fn smaller_designs_are_prefixes() {
        let full = lab_runs(&CampaignConfig::preset("lab").unwrap()).unwrap();
        let mut cfg = CampaignConfig::preset("lab").unwrap();
        cfg.apply(&Overrides { runs: Some(10), ..Default::default() }).unwrap();
        assert_eq!(lab_runs(&cfg).unwrap(), full[..10]);
    }

    #[test]
    fn single_short_run() {
        let mut cfg = CampaignConfig::preset("lab").unwrap();
        cfg.apply(&Overrides { runs: Some(1), duration: Some(20.0), ..Default::default() }).unwrap();
        let runs = lab_runs(&cfg).unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].scenario.n_frames(), 150);
        assert!((230.0..300.0).contains(&runs[0].scenario.total_mass()));
    }

    #[test]
    fn field_loads_fill_their_wagons() {
        let mut cfg = CampaignConfig::preset("field").unwrap();
        cfg.apply(&Overrides { runs: Some(12), ..Default::default() }).unwrap();
        let loads = field_loads(&cfg).unwrap();
        assert_eq!(loads.len(), 72);
        for l in &loads {
            let wagon = cfg.field.as_ref().unwrap().groups.iter().find(|g| g.key() == l.key).unwrap().wagon_mass;
            assert!(l.actual_mass >= 0.85 * wagon && l.actual_mass < 1.2 * wagon, "{} {}", l.id, l.actual_mass);
            assert!(l.pulses.last().unwrap().timestamp >= l.estimates.last().unwrap().frame_timestamp);
            assert!(l.estimates.windows(2).all(|w| w[1].frame_timestamp > w[0].frame_timestamp));
        }
        assert_eq!(field_loads(&cfg).unwrap(), loads);
    }

    #[test]
    fn shift_applies_from_its_fraction_of_the_season() {
        let cfg = CampaignConfig::preset("field").unwrap();
        let loads = field_loads(&cfg).unwrap();
        let la: Vec<&FieldLoad> = loads.iter().filter(|l| l.key.region == "LA").collect();
        assert_eq!(la.len(), 669);
        let first = la.iter().position(|l| l.shift_factor != 1.0).unwrap();
        assert_eq!(first, (0.45f64 * 669.0).ceil() as usize);
        assert!(la[first..].iter().all(|l| l.shift_factor == 1.25));
    }
}
