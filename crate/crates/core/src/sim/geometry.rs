//! Cylinder ray casting, capsule contact and a uniform xy bin index.

use super::Billet;

const AXIS_EPS: f64 = 1e-12;

/// Highest `z` at which the vertical line through `(x, y)` meets the closed
/// capped cylinder described by `billet`, if it meets it at all.
pub(crate) fn vertical_hit(billet: &Billet, x: f64, y: f64) -> Option<f64> {
    let [cx, cy, cz] = billet.pose.center;
    let [ax, ay, az] = billet.pose.axis;
    let r = billet.radius();
    let half = 0.5 * billet.length;

    // Offset from the center to the line's point at z = 0.
    let w0 = [x - cx, y - cy, -cz];
    let t0 = w0[0] * ax + w0[1] * ay + w0[2] * az;

    // Radial condition |w - (w·a)a|² ≤ r² as a quadratic in z.
    let qa = 1.0 - az * az;
    let w0sq = w0[0] * w0[0] + w0[1] * w0[1] + w0[2] * w0[2];
    let qb = 2.0 * (w0[2] - t0 * az);
    let qc = w0sq - t0 * t0 - r * r;

    let (mut lo, mut hi) = if qa < AXIS_EPS {
        // Axis parallel to the ray: radial distance does not depend on z.
        let radial_sq = (x - cx).powi(2) + (y - cy).powi(2);
        if radial_sq > r * r {
            return None;
        }
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        ((-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa))
    };

    // Slab between the end caps: -half ≤ t0 + z·az ≤ half.
    if az.abs() < AXIS_EPS {
        if t0.abs() > half {
            return None;
        }
    } else {
        let a = (-half - t0) / az;
        let b = (half - t0) / az;
        lo = lo.max(a.min(b));
        hi = hi.min(a.max(b));
    }

    (lo <= hi && hi.is_finite()).then_some(hi)
}

/// Minimum distance between 2-D segments `p0→p1` and `q0→q1`.
pub(crate) fn segment_distance_2d(p0: [f64; 2], p1: [f64; 2], q0: [f64; 2], q1: [f64; 2]) -> f64 {
    let d1 = [p1[0] - p0[0], p1[1] - p0[1]];
    let d2 = [q1[0] - q0[0], q1[1] - q0[1]];
    let r = [p0[0] - q0[0], p0[1] - q0[1]];
    let a = dot(d1, d1);
    let e = dot(d2, d2);
    let f = dot(d2, r);

    let (s, t) = if a <= AXIS_EPS && e <= AXIS_EPS {
        (0.0, 0.0)
    } else if a <= AXIS_EPS {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = dot(d1, r);
        if e <= AXIS_EPS {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = dot(d1, d2);
            let denom = a * e - b * b;
            let mut s = if denom > AXIS_EPS {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };

    let cp = [p0[0] + d1[0] * s - q0[0] - d2[0] * t, p0[1] + d1[1] * s - q0[1] - d2[1] * t];
    dot(cp, cp).sqrt()
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Uniform grid over the xy plane; each billet is registered in every bin
/// its footprint bounding box touches.
#[derive(Debug, Clone, Default)]
pub(crate) struct BinIndex {
    origin: [f64; 2],
    bin: f64,
    nx: usize,
    ny: usize,
    bins: Vec<Vec<u32>>,
}

impl BinIndex {
    pub(crate) fn new(min: [f64; 2], max: [f64; 2], bin: f64) -> Self {
        let nx = (((max[0] - min[0]) / bin).ceil() as usize).max(1);
        let ny = (((max[1] - min[1]) / bin).ceil() as usize).max(1);
        Self {
            origin: min,
            bin,
            nx,
            ny,
            bins: vec![Vec::new(); nx * ny],
        }
    }

    fn clamp_bin(&self, v: f64, origin: f64, n: usize) -> usize {
        let i = ((v - origin) / self.bin).floor();
        if i < 0.0 {
            0
        } else {
            (i as usize).min(n - 1)
        }
    }

    fn range(&self, lo: [f64; 2], hi: [f64; 2]) -> (usize, usize, usize, usize) {
        (
            self.clamp_bin(lo[0], self.origin[0], self.nx),
            self.clamp_bin(hi[0], self.origin[0], self.nx),
            self.clamp_bin(lo[1], self.origin[1], self.ny),
            self.clamp_bin(hi[1], self.origin[1], self.ny),
        )
    }

    pub(crate) fn insert(&mut self, id: u32, lo: [f64; 2], hi: [f64; 2]) {
        let (x0, x1, y0, y1) = self.range(lo, hi);
        for j in y0..=y1 {
            for i in x0..=x1 {
                self.bins[j * self.nx + i].push(id);
            }
        }
    }

    pub(crate) fn at(&self, x: f64, y: f64) -> &[u32] {
        let i = self.clamp_bin(x, self.origin[0], self.nx);
        let j = self.clamp_bin(y, self.origin[1], self.ny);
        &self.bins[j * self.nx + i]
    }

    /// Calls `f` once per distinct id registered in bins overlapping the box.
    pub(crate) fn for_each_in(&self, lo: [f64; 2], hi: [f64; 2], seen: &mut [u32], stamp: u32, mut f: impl FnMut(u32)) {
        let (x0, x1, y0, y1) = self.range(lo, hi);
        for j in y0..=y1 {
            for i in x0..=x1 {
                for &id in &self.bins[j * self.nx + i] {
                    let slot = &mut seen[id as usize];
                    if *slot != stamp {
                        *slot = stamp;
                        f(id);
                    }
                }
            }
        }
    }
}
