//! Point cloud → height grid → `V_c`, the material volume per meter of
//! elevator length inside the camera ROI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::RoiSpec;

/// One timestamped 3-D sample of the material surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloudFrame {
    /// Seconds since the start of the run.
    pub timestamp: f64,
    /// Illuminance measured at capture, lux.
    pub lux: f64,
    /// `(x, y, z)` in meters, elevator frame.
    pub points: Vec<[f64; 3]>,
}

impl PointCloudFrame {
    pub fn validate(&self) -> Result<()> {
        if !(self.timestamp >= 0.0) || !self.timestamp.is_finite() {
            return Err(Error::Stream(format!("frame timestamp must be non-negative, got {}", self.timestamp)));
        }
        if !(self.lux >= 0.0) {
            return Err(Error::Stream(format!("frame lux must be non-negative, got {}", self.lux)));
        }
        if let Some(p) = self.points.iter().find(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Stream(format!("non-finite point {p:?} at t = {}", self.timestamp)));
        }
        Ok(())
    }

    pub fn mean_height(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().map(|p| p[2]).sum::<f64>() / self.points.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Ok,
    LowLight,
    Empty,
}

impl Quality {
    pub fn as_str(self) -> &'static str {
        match self {
            Quality::Ok => "ok",
            Quality::LowLight => "low_light",
            Quality::Empty => "empty",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightGate {
    Ok,
    LowLight,
}

pub const DEFAULT_LUX_GATE: f64 = 2700.0;

/// `Ok` iff `lux ≥ threshold` (inclusive boundary).
pub fn lighting_gate(lux: f64, threshold: f64) -> LightGate {
    if lux >= threshold {
        LightGate::Ok
    } else {
        LightGate::LowLight
    }
}

/// Per-frame volume estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    #[serde(rename = "timestamp_s")]
    pub frame_timestamp: f64,
    /// m³ per meter of elevator length.
    #[serde(rename = "v_c_m3_per_m")]
    pub v_c: f64,
    pub quality: Quality,
}

/// How the member points of a cell are reduced to one height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatistic {
    /// Mean of member heights: the cell's average surface height.
    Mean,
    /// Linear-interpolated percentile of member heights, 0–100.
    Percentile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub cell_size: f64,
    pub statistic: CellStatistic,
    pub lux_gate: f64,
    /// Raw volumes below this are reported as empty with `v_c = 0`.
    pub empty_epsilon: f64,
    /// Points lower than this above the plane are read as bare floor.
    pub floor_deadband: f64,
    /// Zero occupied cells that stand above the floor without any raised
    /// occupied neighbour; such cells are isolated noise spikes.
    pub despeckle: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            cell_size: 0.02,
            statistic: CellStatistic::Mean,
            lux_gate: DEFAULT_LUX_GATE,
            empty_epsilon: 1e-5,
            floor_deadband: 0.02,
            despeckle: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(Error::Config(format!("cell size must be positive, got {}", self.cell_size)));
        }
        if let CellStatistic::Percentile(p) = self.statistic {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::Config(format!("percentile must lie in [0, 100], got {p}")));
            }
        }
        if !(self.lux_gate >= 0.0) {
            return Err(Error::Config(format!("lux gate must be non-negative, got {}", self.lux_gate)));
        }
        if !(self.empty_epsilon >= 0.0) || !(self.floor_deadband >= 0.0) {
            return Err(Error::Config("empty_epsilon and floor_deadband must be non-negative".into()));
        }
        Ok(())
    }
}

/// Rasterized elevation map over the ROI, row-major with `nx` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightGrid {
    pub roi: RoiSpec,
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    pub heights: Vec<f64>,
    pub occupancy: Vec<u32>,
    /// Illuminance and timestamp of the source frame.
    pub lux: f64,
    pub timestamp: f64,
}

impl HeightGrid {
    pub fn height(&self, i: usize, j: usize) -> f64 {
        self.heights[j * self.nx + i]
    }

    pub fn height_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.heights[j * self.nx + i]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let x = ((i as f64 + 0.5) * self.cell_size).min(self.roi.width);
        let y = ((j as f64 + 0.5) * self.cell_size).min(self.roi.length);
        (x, y)
    }

    /// Floor area of cell `(i, j)` inside the ROI; edge cells may be partial.
    pub fn cell_area(&self, i: usize, j: usize) -> f64 {
        let w = (self.roi.width - i as f64 * self.cell_size).min(self.cell_size);
        let l = (self.roi.length - j as f64 * self.cell_size).min(self.cell_size);
        w.max(0.0) * l.max(0.0)
    }
}

/// Keeps points whose `(x, y)` fall inside the ROI and expresses `z`
/// relative to the elevator plane, clamping anything below it to zero.
pub fn clip_to_roi(frame: &PointCloudFrame, roi: &RoiSpec) -> PointCloudFrame {
    let points = frame
        .points
        .iter()
        .filter(|p| roi.contains(p[0], p[1]))
        .map(|p| [p[0], p[1], (p[2] - roi.plane_height).max(0.0)])
        .collect();
    PointCloudFrame { timestamp: frame.timestamp, lux: frame.lux, points }
}

/// Linear-interpolated percentile of an unsorted slice (sorted in place).
pub(crate) fn percentile(values: &mut [f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_unstable_by(f64::total_cmp);
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Builds the height grid of an already clipped frame.
///
/// Points below the floor deadband count as height zero. Each occupied cell
/// reduces its points with the configured statistic; with `despeckle`, a
/// raised cell whose occupied neighbours all sit on the floor is zeroed.
/// Empty cells take the
/// mean of their occupied 8-neighbours, or zero when none is occupied; the
/// fill reads only original occupancy, so it is a single pass.
pub fn rasterize(frame: &PointCloudFrame, roi: &RoiSpec, cfg: &EstimatorConfig) -> Result<HeightGrid> {
    let cell_size = cfg.cell_size;
    if !(cell_size > 0.0) {
        return Err(Error::Config(format!("cell size must be positive, got {cell_size}")));
    }
    if cell_size > roi.width || cell_size > roi.length {
        return Err(Error::Config(format!(
            "cell size {cell_size} m exceeds the {} × {} m ROI",
            roi.width, roi.length
        )));
    }
    let nx = (roi.width / cell_size - 1e-9).ceil() as usize;
    let ny = (roi.length / cell_size - 1e-9).ceil() as usize;
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); nx * ny];
    for p in &frame.points {
        let i = ((p[0] / cell_size) as usize).min(nx - 1);
        let j = ((p[1] / cell_size) as usize).min(ny - 1);
        let z = if p[2] < cfg.floor_deadband { 0.0 } else { p[2] };
        members[j * nx + i].push(z);
    }

    let occupancy: Vec<u32> = members.iter().map(|m| m.len() as u32).collect();
    let mut heights: Vec<f64> = members
        .iter_mut()
        .map(|m| match (m.is_empty(), cfg.statistic) {
            (true, _) => 0.0,
            (false, CellStatistic::Mean) => m.iter().sum::<f64>() / m.len() as f64,
            (false, CellStatistic::Percentile(p)) => percentile(m, p),
        })
        .collect();

    let neighbours = |i: usize, j: usize| {
        let (i, j) = (i as i64, j as i64);
        (-1i64..=1)
            .flat_map(move |dj| (-1i64..=1).map(move |di| (i + di, j + dj)))
            .filter(move |&(ii, jj)| (ii, jj) != (i, j) && ii >= 0 && jj >= 0 && ii < nx as i64 && jj < ny as i64)
            .map(move |(ii, jj)| jj as usize * nx + ii as usize)
    };

    if cfg.despeckle {
        let reduced = heights.clone();
        for j in 0..ny {
            for i in 0..nx {
                let k = j * nx + i;
                if reduced[k] > 0.0 && !neighbours(i, j).any(|n| occupancy[n] > 0 && reduced[n] > 0.0) {
                    heights[k] = 0.0;
                }
            }
        }
    }

    let raw = heights.clone();
    for j in 0..ny {
        for i in 0..nx {
            if occupancy[j * nx + i] > 0 {
                continue;
            }
            let (mut sum, mut n) = (0.0, 0usize);
            for k in neighbours(i, j).filter(|&k| occupancy[k] > 0) {
                sum += raw[k];
                n += 1;
            }
            if n > 0 {
                heights[j * nx + i] = sum / n as f64;
            }
        }
    }

    Ok(HeightGrid {
        roi: *roi,
        cell_size,
        nx,
        ny,
        heights,
        occupancy,
        lux: frame.lux,
        timestamp: frame.timestamp,
    })
}

/// Raw volume Σ height × cell area over the grid, and `V_c = raw / ROI length`.
pub fn integrate_volume(grid: &HeightGrid, cfg: &EstimatorConfig) -> (f64, VolumeEstimate) {
    let mut raw = 0.0;
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            raw += grid.height(i, j) * grid.cell_area(i, j);
        }
    }
    let low_light = lighting_gate(grid.lux, cfg.lux_gate) == LightGate::LowLight;
    let empty = raw < cfg.empty_epsilon;
    let quality = match (low_light, empty) {
        (true, _) => Quality::LowLight,
        (false, true) => Quality::Empty,
        (false, false) => Quality::Ok,
    };
    let raw = if empty { 0.0 } else { raw };
    let estimate = VolumeEstimate {
        frame_timestamp: grid.timestamp,
        v_c: raw / grid.roi.length,
        quality,
    };
    (raw, estimate)
}

/// Clip, rasterize and integrate one frame.
pub fn estimate_frame(frame: &PointCloudFrame, roi: &RoiSpec, cfg: &EstimatorConfig) -> Result<VolumeEstimate> {
    Ok(estimate_frame_raw(frame, roi, cfg)?.1)
}

/// Like [`estimate_frame`] but also returns the raw volume in m³.
pub fn estimate_frame_raw(frame: &PointCloudFrame, roi: &RoiSpec, cfg: &EstimatorConfig) -> Result<(f64, VolumeEstimate)> {
    frame.validate()?;
    let clipped = clip_to_roi(frame, roi);
    cfg.validate()?;
    let grid = rasterize(&clipped, roi, cfg)?;
    Ok(integrate_volume(&grid, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roi(w: f64, l: f64) -> RoiSpec {
        RoiSpec::new(w, l).unwrap()
    }

    /// One point per `pitch` square, at the square's centre, with `z(i, j)`.
    fn grid_frame(w: f64, l: f64, pitch: f64, lux: f64, z: impl Fn(usize, usize) -> f64) -> PointCloudFrame {
        let (nx, ny) = ((w / pitch).round() as usize, (l / pitch).round() as usize);
        let mut points = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                points.push([(i as f64 + 0.5) * pitch, (j as f64 + 0.5) * pitch, z(i, j)]);
            }
        }
        PointCloudFrame { timestamp: 0.0, lux, points }
    }

    #[test]
    fn clip_keeps_inside_points_and_clamps_below_plane() {
        let r = roi(0.5, 0.25);
        let frame = PointCloudFrame {
            timestamp: 1.5,
            lux: 900.0,
            points: vec![[0.1, 0.1, 0.05], [0.2, 0.2, -0.01], [0.6, 0.1, 0.05], [0.1, -0.2, 0.05]],
        };
        let c = clip_to_roi(&frame, &r);
        assert_eq!(c.points, vec![[0.1, 0.1, 0.05], [0.2, 0.2, 0.0]]);
        assert_eq!((c.timestamp, c.lux), (1.5, 900.0));

        let inside = grid_frame(0.5, 0.25, 0.01, 6700.0, |_, _| 0.1);
        assert_eq!(clip_to_roi(&inside, &r).points, inside.points);
    }

    #[test]
    fn clip_retains_exactly_the_inside_half() {
        let r = roi(0.5, 0.25);
        let mut frame = grid_frame(0.5, 0.25, 0.01, 6700.0, |_, _| 0.1);
        let outside: Vec<[f64; 3]> = frame.points.iter().map(|p| [p[0] + 1.0, p[1], p[2]]).collect();
        let inside = frame.points.clone();
        frame.points.extend(outside);
        assert_eq!(clip_to_roi(&frame, &r).points, inside);
    }

    #[test]
    fn lighting_gate_levels() {
        assert_eq!(lighting_gate(700.0, DEFAULT_LUX_GATE), LightGate::LowLight);
        assert_eq!(lighting_gate(6700.0, DEFAULT_LUX_GATE), LightGate::Ok);
        assert_eq!(lighting_gate(2700.0, DEFAULT_LUX_GATE), LightGate::Ok);
    }

    #[test]
    fn empty_frame_gives_zero_grid() {
        let r = roi(0.5, 0.25);
        let frame = PointCloudFrame { timestamp: 0.0, lux: 6700.0, points: vec![] };
        let g = rasterize(&frame, &r, &EstimatorConfig::default()).unwrap();
        assert_eq!((g.nx, g.ny), (25, 13));
        assert!(g.heights.iter().all(|&h| h == 0.0) && g.occupancy.iter().all(|&n| n == 0));
        let (raw, e) = integrate_volume(&g, &EstimatorConfig::default());
        assert_eq!((raw, e.v_c, e.quality), (0.0, 0.0, Quality::Empty));
    }

    #[test]
    fn uniform_plane_has_uniform_heights() {
        let r = roi(1.0, 0.5);
        let frame = grid_frame(1.0, 0.5, 0.005, 6700.0, |_, _| 0.10);
        let cfg = EstimatorConfig::default();
        let g = rasterize(&frame, &r, &cfg).unwrap();
        assert!(g.heights.iter().all(|&h| (h - 0.10).abs() < 1e-12));
        let (raw, e) = integrate_volume(&g, &cfg);
        assert!((raw - 0.05).abs() < 1e-12, "{raw}");
        assert!((e.v_c - 0.10).abs() < 1e-12);
        assert_eq!(e.quality, Quality::Ok);
    }

    #[test]
    fn cell_larger_than_roi_is_a_config_error() {
        let r = roi(0.5, 0.25);
        let frame = grid_frame(0.5, 0.25, 0.05, 6700.0, |_, _| 0.1);
        let cfg = EstimatorConfig { cell_size: 0.3, ..Default::default() };
        assert!(matches!(rasterize(&frame, &r, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn empty_cells_take_the_mean_of_occupied_neighbours() {
        let r = roi(0.1, 0.1);
        // 5 × 5 cells of 2 cm; leave the centre cell without points.
        let frame = PointCloudFrame {
            timestamp: 0.0,
            lux: 6700.0,
            points: (0..25)
                .filter(|&k| k != 12)
                .map(|k| [(k % 5) as f64 * 0.02 + 0.01, (k / 5) as f64 * 0.02 + 0.01, 0.05 + 0.01 * (k % 5) as f64])
                .collect(),
        };
        let g = rasterize(&frame, &r, &EstimatorConfig::default()).unwrap();
        assert_eq!(g.occupancy[12], 0);
        // Neighbour columns 1..=3 contribute heights 0.06, 0.07, 0.08 (three each, minus the centre).
        let expect = (3.0 * 0.06 + 2.0 * 0.07 + 3.0 * 0.08) / 8.0;
        assert!((g.height(2, 2) - expect).abs() < 1e-12);
    }

    #[test]
    fn isolated_noise_spike_is_removed() {
        let r = roi(0.2, 0.2);
        let mut frame = grid_frame(0.2, 0.2, 0.01, 6700.0, |_, _| 0.0);
        frame.points[0][2] = 0.03;
        let on = EstimatorConfig::default();
        assert_eq!(estimate_frame(&frame, &r, &on).unwrap().v_c, 0.0);
        let off = EstimatorConfig { despeckle: false, empty_epsilon: 0.0, ..on };
        assert!(estimate_frame(&frame, &r, &off).unwrap().v_c > 0.0);
    }

    #[test]
    fn partial_edge_cells_count_their_inside_area() {
        let r = roi(0.05, 0.05);
        let frame = grid_frame(0.05, 0.05, 0.005, 6700.0, |_, _| 0.1);
        let (raw, _) = estimate_frame_raw(&frame, &r, &EstimatorConfig::default()).unwrap();
        assert!((raw - 0.05 * 0.05 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&mut v, 0.0), 1.0);
        assert_eq!(percentile(&mut v, 100.0), 4.0);
        assert!((percentile(&mut v, 90.0) - 3.7).abs() < 1e-12);
    }

    #[test]
    fn bad_frames_are_stream_errors() {
        let r = roi(0.5, 0.25);
        let mut frame = grid_frame(0.5, 0.25, 0.05, 6700.0, |_, _| 0.1);
        frame.points[3][2] = f64::NAN;
        assert!(matches!(estimate_frame(&frame, &r, &EstimatorConfig::default()), Err(Error::Stream(_))));
    }

    const W: f64 = 0.4;
    const L: f64 = 0.2;
    const P: f64 = 0.01;

    proptest! {
        #[test]
        fn raising_points_never_lowers_v_c(
            zs in prop::collection::vec(0.0f64..0.2, 800),
            lift in prop::collection::vec(0.0f64..0.05, 800),
        ) {
            let r = roi(W, L);
            let cfg = EstimatorConfig::default();
            let base = grid_frame(W, L, P, 6700.0, |i, j| zs[j * 40 + i]);
            let raised = grid_frame(W, L, P, 6700.0, |i, j| zs[j * 40 + i] + lift[j * 40 + i]);
            let a = estimate_frame(&base, &r, &cfg).unwrap().v_c;
            let b = estimate_frame(&raised, &r, &cfg).unwrap().v_c;
            prop_assert!(b >= a, "{b} < {a}");
        }

        #[test]
        fn shifting_by_one_cell_keeps_v_c(
            zs in prop::collection::vec(0.02f64..0.2, 100),
            shift_cells in 1usize..4,
        ) {
            // A 10 × 10 point patch in a roomy ROI, moved by whole cells.
            let r = roi(W, L);
            let cfg = EstimatorConfig::default();
            let patch = |dx: f64| PointCloudFrame {
                timestamp: 0.0,
                lux: 6700.0,
                points: (0..100)
                    .map(|k| [0.06 + dx + (k % 10) as f64 * P + 0.005, 0.05 + (k / 10) as f64 * P + 0.005, zs[k]])
                    .collect(),
            };
            let a = estimate_frame(&patch(0.0), &r, &cfg).unwrap().v_c;
            let b = estimate_frame(&patch(shift_cells as f64 * cfg.cell_size), &r, &cfg).unwrap().v_c;
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0), "{a} vs {b}");
        }

        #[test]
        fn disjoint_sub_beds_add(
            left in prop::collection::vec(0.02f64..0.2, 800),
            right in prop::collection::vec(0.02f64..0.2, 800),
        ) {
            // Left bed on columns [0, 16), right bed on [24, 40): cells are 2 cm, so the
            // gap spans four empty cells and no fill or despeckle crosses it.
            let r = roi(W, L);
            let cfg = EstimatorConfig::default();
            let (left, right) = (&left, &right);
            let z = |side: u8| move |i: usize, j: usize| match side {
                0 if i < 16 => left[j * 40 + i],
                1 if i >= 24 => right[j * 40 + i],
                2 if i < 16 => left[j * 40 + i],
                2 if i >= 24 => right[j * 40 + i],
                _ => 0.0,
            };
            let a = estimate_frame(&grid_frame(W, L, P, 6700.0, z(0)), &r, &cfg).unwrap().v_c;
            let b = estimate_frame(&grid_frame(W, L, P, 6700.0, z(1)), &r, &cfg).unwrap().v_c;
            let both = estimate_frame(&grid_frame(W, L, P, 6700.0, z(2)), &r, &cfg).unwrap().v_c;
            prop_assert!((both - (a + b)).abs() <= 1e-9 * both, "{both} vs {}", a + b);
        }

        #[test]
        fn gate_flags_exactly_below_threshold(lux in 0.0f64..10_000.0, gate in 0.0f64..10_000.0) {
            let r = roi(0.1, 0.1);
            let cfg = EstimatorConfig { lux_gate: gate, ..Default::default() };
            let e = estimate_frame(&grid_frame(0.1, 0.1, 0.01, lux, |_, _| 0.1), &r, &cfg).unwrap();
            prop_assert_eq!(e.quality == Quality::LowLight, lux < gate);
        }
    }
}
