//! Random sequential deposition of billets.
//!
//! Each billet gets a random yaw and drop point and falls straight down.
//! For contact it is treated as a chain of spheres along its axis, the usual
//! multi-sphere rod model. Every sphere finds its own support height on the
//! floor or on placed billets, and the rigid rod rests on the lowest line
//! lying above all of them, tilted by at most `max_tilt_slope`.
//!
//! The floor is smooth and the billets are not: a billet whose first contact
//! is another billet looks for bare floor among a few nearby drop points and
//! slides there if it finds some, otherwise it jams where it first touched.
//! Nothing rearranges after it lands, so a thin layer lies nearly flat while
//! a thick bed keeps the voids of every jam, and bulk density falls as the
//! bed gets thicker.

use std::f64::consts::PI;

use rand::Rng;

use super::geometry::{segment_distance_2d, BinIndex};
use super::{Billet, PackedBed, Pose, RoiSpec, SimConfig, SimScenario};
use crate::error::{Error, Result};
use crate::rng;

/// Exact analytic solid volume: Σ π(d/2)²·l.
pub fn solid_volume(bed: &PackedBed) -> f64 {
    bed.billets.iter().map(Billet::volume).sum()
}

/// Packs billets over the simulator's camera ROI until their solid volume
/// reaches `target_solid_volume`.
pub fn pack_billets(sim: &SimConfig, scenario: &SimScenario, target_solid_volume: f64) -> Result<PackedBed> {
    pack_region(
        sim,
        sim.roi,
        (0.0, sim.roi.length),
        target_solid_volume,
        scenario.rng_seed,
        scenario.overflow_enabled,
    )
}

/// Packs billets whose centers fall in `y_range` of `roi`.
///
/// Billet footprints are kept inside the ROI side walls (x) and inside the
/// `y_range` band whenever the billet fits; otherwise the center is pinned
/// to the band middle.
pub fn pack_region(
    sim: &SimConfig,
    roi: RoiSpec,
    y_range: (f64, f64),
    target_solid_volume: f64,
    seed: u64,
    overflow_enabled: bool,
) -> Result<PackedBed> {
    if !(target_solid_volume >= 0.0) || !target_solid_volume.is_finite() {
        return Err(Error::domain(format!(
            "target solid volume must be non-negative, got {target_solid_volume}"
        )));
    }
    let (y0, y1) = y_range;
    if !(y0 >= 0.0 && y1 <= roi.length && y1 > y0) {
        return Err(Error::domain(format!("invalid y band [{y0}, {y1}] for ROI length {}", roi.length)));
    }
    let capacity = roi.width * (y1 - y0) * sim.slat_height;
    if target_solid_volume > 1.5 * capacity && !overflow_enabled {
        return Err(Error::Overflow { target: target_solid_volume, capacity });
    }

    let r = 0.5 * sim.billet.diameter;
    let cross = PI * r * r;
    let full = cross * sim.billet.length;
    let n_full = (target_solid_volume / full + 1e-9).floor() as usize;
    let remainder = target_solid_volume - n_full as f64 * full;
    let mut lengths = vec![sim.billet.length; n_full];
    if remainder > 1e-9 * full {
        lengths.push(remainder / cross);
    }

    let mut rng = rng::stream(seed, rng::Stream::Packing);
    let mut placed: Vec<Billet> = Vec::with_capacity(lengths.len());
    let bin = sim.billet.length.max(sim.billet.diameter).max(0.05);
    let mut index = BinIndex::new([0.0, 0.0], [roi.width, roi.length], bin);
    let mut seen: Vec<u32> = vec![0; lengths.len()];
    let mut stamp = 0u32;
    let settle_radius = sim.settle_radius;

    for &length in &lengths {
        let yaw = rng.random::<f64>() * PI;
        let dir = [yaw.cos(), yaw.sin()];
        let half = 0.5 * length;
        let hx = half * dir[0].abs() + r;
        let hy = half * dir[1].abs() + r;
        let x_range = if roi.width > 2.0 * hx { (hx, roi.width - hx) } else { (0.5 * roi.width, 0.5 * roi.width) };
        let yb = if y1 - y0 > 2.0 * hy { (y0 + hy, y1 - hy) } else { (0.5 * (y0 + y1), 0.5 * (y0 + y1)) };

        let first = [uniform(&mut rng, x_range), uniform(&mut rng, yb)];
        let mut best: Option<Rest> = None;
        for trial in 0..sim.settle_trials {
            let c = if trial == 0 {
                first
            } else {
                [
                    (first[0] + settle_radius * (2.0 * rng.random::<f64>() - 1.0)).clamp(x_range.0, x_range.1),
                    (first[1] + settle_radius * (2.0 * rng.random::<f64>() - 1.0)).clamp(yb.0, yb.1),
                ]
            };
            stamp = stamp.wrapping_add(1);
            let rest = rest_pose(&placed, &index, &mut seen, stamp, c, dir, half, r, sim.max_tilt_slope);
            let better = match &best {
                None => true,
                Some(b) => on_floor(&rest, r) && !on_floor(b, r),
            };
            if better {
                best = Some(Rest { c, ..rest });
            }
        }

        let Rest { z, slope, c } = best.expect("at least one settle trial");
        let norm = (1.0 + slope * slope).sqrt();
        let billet = Billet {
            length,
            diameter: 2.0 * r,
            pose: Pose::new([c[0], c[1], z], [dir[0] / norm, dir[1] / norm, slope / norm]),
        };
        let (lo, hi) = billet.footprint();
        index.insert(placed.len() as u32, lo, hi);
        placed.push(billet);
    }

    Ok(PackedBed::new(placed, roi, sim.particle_density, seed))
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn on_floor(rest: &Rest, r: f64) -> bool {
    rest.z <= r + 1e-12 && rest.slope == 0.0
}

struct Rest {
    /// Center height.
    z: f64,
    /// Rise per unit of horizontal travel along the yaw direction.
    slope: f64,
    c: [f64; 2],
}

/// Contact stations along a billet's axis, spaced at most one radius apart.
fn stations(length: f64, r: f64) -> usize {
    ((length / r).ceil() as usize).max(1) + 1
}

/// Rest pose of a billet dropped with its center above `c`.
///
/// Each contact sphere at horizontal offset `u` along `dir` gets a support
/// height `h(u)`; the rod rests on the line `z(u) = a + b·u` with the lowest
/// center height `a` that stays on or above every support.
#[allow(clippy::too_many_arguments)]
fn rest_pose(
    placed: &[Billet],
    index: &BinIndex,
    seen: &mut [u32],
    stamp: u32,
    c: [f64; 2],
    dir: [f64; 2],
    half: f64,
    r: f64,
    max_slope: f64,
) -> Rest {
    let n = stations(2.0 * half, r);
    let offsets: Vec<f64> = (0..n).map(|k| -half + 2.0 * half * k as f64 / (n - 1) as f64).collect();
    let mut support = vec![r; n];

    let p0 = [c[0] - half * dir[0], c[1] - half * dir[1]];
    let p1 = [c[0] + half * dir[0], c[1] + half * dir[1]];
    let reach = half + 2.0 * r + 0.01;
    let lo = [c[0] - reach, c[1] - reach];
    let hi = [c[0] + reach, c[1] + reach];
    index.for_each_in(lo, hi, seen, stamp, |id| {
        let other = &placed[id as usize];
        let ro = other.radius();
        let contact = r + ro;
        let oh = 0.5 * other.length;
        let [ox, oy, oz] = other.pose.center;
        let [ax, ay, az] = other.pose.axis;
        let q0 = [ox - oh * ax, oy - oh * ay];
        let q1 = [ox + oh * ax, oy + oh * ay];
        if segment_distance_2d(p0, p1, q0, q1) >= contact {
            return;
        }
        let m = stations(other.length, ro);
        for j in 0..m {
            let s = -oh + other.length * j as f64 / (m - 1) as f64;
            let sphere = [ox + s * ax, oy + s * ay, oz + s * az];
            for (k, &u) in offsets.iter().enumerate() {
                let dx = c[0] + u * dir[0] - sphere[0];
                let dy = c[1] + u * dir[1] - sphere[1];
                let d2 = dx * dx + dy * dy;
                if d2 < contact * contact {
                    let z = sphere[2] + (contact * contact - d2).sqrt();
                    if z > support[k] {
                        support[k] = z;
                    }
                }
            }
        }
    });

    // The lowest supporting line is the upper hull of the supports evaluated
    // at u = 0; its slope is one of the pairwise slopes, or zero.
    let center_height = |b: f64| {
        offsets.iter().zip(&support).map(|(u, h)| h - b * u).fold(f64::NEG_INFINITY, f64::max)
    };
    let mut best = (center_height(0.0), 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let b = ((support[j] - support[i]) / (offsets[j] - offsets[i])).clamp(-max_slope, max_slope);
            let a = center_height(b);
            if a < best.0 - 1e-12 {
                best = (a, b);
            }
        }
    }
    Rest { z: best.0, slope: best.1, c }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;

    const MC: usize = 100_000;

    fn scenario(seed: u64) -> SimScenario {
        SimScenario::new(0.0, 2.0, 60.0, 6700.0, seed)
    }

    #[test]
    fn zero_target_gives_an_empty_bed() {
        let bed = pack_billets(&SimConfig::default(), &scenario(1), 0.0).unwrap();
        assert!(bed.is_empty());
        assert_eq!(solid_volume(&bed), 0.0);
        assert_eq!(bed.envelope_volume_mc(1000, 1), 0.0);
    }

    #[test]
    fn analytic_solid_volume() {
        let b = Billet::new(0.20, 0.04, Pose::new([0.1, 0.1, 0.02], [1.0, 0.0, 0.0])).unwrap();
        assert!((b.volume() - 2.513_274e-4).abs() < 1e-9);
        let bed = PackedBed::new(vec![b; 100], RoiSpec::new(1.0, 1.0).unwrap(), 350.0, 0);
        assert!((solid_volume(&bed) - 100.0 * PI * 0.02f64.powi(2) * 0.20).abs() < 1e-15);
        assert!((solid_volume(&bed) - 0.025_13).abs() < 1e-5);
    }

    #[test]
    fn packed_volume_hits_target_and_stays_in_roi() {
        let sim = SimConfig::default();
        for (k, target) in [0.0011, 0.004, 0.0123].into_iter().enumerate() {
            let bed = pack_billets(&sim, &scenario(k as u64), target).unwrap();
            assert!((solid_volume(&bed) - target).abs() / target < 0.01);
            assert!(bed.billets.iter().all(|b| sim.roi.contains(b.pose.center[0], b.pose.center[1])));
            assert!(bed.billets.iter().all(|b| b.pose.center[2] >= b.radius() - 1e-12));
        }
    }

    #[test]
    fn packing_is_deterministic() {
        let sim = SimConfig::default();
        let a = pack_billets(&sim, &scenario(9), 0.006).unwrap();
        let b = pack_billets(&sim, &scenario(9), 0.006).unwrap();
        let c = pack_billets(&sim, &scenario(10), 0.006).unwrap();
        assert_eq!(a.billets, b.billets);
        assert_ne!(a.billets, c.billets);
    }

    #[test]
    fn doubling_volume_does_not_raise_bulk_density() {
        let sim = SimConfig::default();
        for seed in 0..4 {
            let v = 0.004;
            let one = pack_billets(&sim, &scenario(seed), v).unwrap().bulk_density_mc(MC, seed).unwrap();
            let two = pack_billets(&sim, &scenario(seed), 2.0 * v).unwrap().bulk_density_mc(MC, seed).unwrap();
            assert!(two <= one, "seed {seed}: {two} > {one}");
        }
    }

    #[test]
    fn bulk_density_falls_over_a_fill_sweep() {
        let sim = SimConfig::default();
        let cap = sim.roi.area() * sim.slat_height;
        let densities: Vec<f64> = (0..10)
            .map(|k| {
                let target = cap * (0.04 + 0.04 * k as f64);
                pack_billets(&sim, &scenario(3), target).unwrap().bulk_density_mc(MC, 3).unwrap()
            })
            .collect();
        for w in densities.windows(2) {
            assert!(w[1] <= w[0], "{densities:?}");
        }
    }

    #[test]
    fn overfull_targets_overflow_unless_enabled() {
        let sim = SimConfig::default();
        let cap = sim.roi.area() * sim.slat_height;
        let err = pack_billets(&sim, &scenario(1), 1.6 * cap).unwrap_err();
        assert!(matches!(err, Error::Overflow { .. }));
        assert!(pack_billets(&sim, &scenario(1), -1.0).is_err());
        let open = SimScenario { overflow_enabled: true, ..scenario(1) };
        assert!(pack_billets(&sim, &open, 1.6 * cap).is_ok());
    }
}
