//! Density calibration analytics: per-load densities, CV comparison of the
//! identity and square-root transforms, through-origin fits of predicted
//! against actual mass, and offline detection of density shifts.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{CropType, GroupKey, LoadRecord};

/// Calibration factor implied by one load's scale weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub load_id: String,
    /// Actual mass over accumulated (transformed) volume.
    pub rho: f64,
    pub key: GroupKey,
    pub timestamp: f64,
}

pub fn estimate_density(load: &LoadRecord) -> Result<DensityEstimate> {
    let Some(actual) = load.actual_mass else {
        return Err(excluded(load, "no ground truth weight"));
    };
    if !(load.accumulated_volume > 0.0) {
        return Err(excluded(load, "zero accumulated volume"));
    }
    Ok(DensityEstimate {
        load_id: load.load_id.clone(),
        rho: actual / load.accumulated_volume,
        key: load.key.clone(),
        timestamp: load.timestamp,
    })
}

fn excluded(load: &LoadRecord, reason: &str) -> Error {
    Error::ExcludedLoad { id: load.load_id.clone(), reason: reason.into() }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Coefficient of variation in percent, using the sample standard deviation.
pub fn cv(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InsufficientData(format!("CV needs at least 2 values, got {}", values.len())));
    }
    let mu = mean(values);
    if !(mu > 0.0) {
        return Err(Error::domain(format!("CV needs a positive mean, got {mu}")));
    }
    let ss: f64 = values.iter().map(|v| (v - mu).powi(2)).sum();
    Ok((ss / (values.len() - 1) as f64).sqrt() / mu * 100.0)
}

/// Size-weighted mean CV of the segments between `changepoints`, where each
/// changepoint is the index of a segment's first element. Segments shorter
/// than 2 are ignored; `None` when no segment qualifies.
pub fn segmented_cv(values: &[f64], changepoints: &[usize]) -> Option<f64> {
    let mut bounds = vec![0];
    bounds.extend(changepoints.iter().copied().filter(|&c| c > 0 && c < values.len()));
    bounds.push(values.len());
    let (mut acc, mut n) = (0.0, 0usize);
    for w in bounds.windows(2) {
        let seg = &values[w[0]..w[1]];
        if let Ok(c) = cv(seg) {
            acc += c * seg.len() as f64;
            n += seg.len();
        }
    }
    (n > 0).then(|| acc / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub predicted: f64,
    pub actual: f64,
    pub overflow: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub slope: f64,
    pub r_squared: f64,
    pub n: usize,
    /// Points dropped by the overflow filter.
    pub excluded: usize,
}

/// Least-squares line `actual = slope × predicted` with no intercept.
///
/// R² is `1 − SSres/SStot` with `SStot` taken about the mean of `actual`,
/// clamped at 0 for fits worse than the mean.
pub fn fit_through_origin(points: &[FitPoint], overflow_filter: bool) -> Result<FitResult> {
    let kept: Vec<&FitPoint> = points.iter().filter(|p| !(overflow_filter && p.overflow)).collect();
    let excluded = points.len() - kept.len();
    if kept.len() < 2 {
        return Err(Error::InsufficientData(format!("fit needs at least 2 points, got {}", kept.len())));
    }
    let sxx: f64 = kept.iter().map(|p| p.predicted * p.predicted).sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("all predicted values are zero".into()));
    }
    let sxy: f64 = kept.iter().map(|p| p.predicted * p.actual).sum();
    let slope = sxy / sxx;
    let y_mean = kept.iter().map(|p| p.actual).sum::<f64>() / kept.len() as f64;
    let ss_res: f64 = kept.iter().map(|p| (p.actual - slope * p.predicted).powi(2)).sum();
    let ss_tot: f64 = kept.iter().map(|p| (p.actual - y_mean).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).max(0.0)
    } else if ss_res == 0.0 {
        1.0
    } else {
        return Err(Error::Fit("actual values are constant".into()));
    };
    Ok(FitResult { slope, r_squared, n: kept.len(), excluded })
}

/// Which grouping keys a report distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GroupBy {
    pub year: bool,
    pub region: bool,
    pub crop: bool,
}

impl Default for GroupBy {
    fn default() -> Self {
        Self { year: true, region: true, crop: true }
    }
}

impl FromStr for GroupBy {
    type Err = Error;
    /// Comma-separated subset of `year`, `region`, `crop`; `none` pools everything.
    fn from_str(s: &str) -> Result<Self> {
        let mut by = GroupBy { year: false, region: false, crop: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "year" => by.year = true,
                "region" | "location" => by.region = true,
                "crop" | "crop_type" | "type" => by.crop = true,
                "none" => {}
                other => return Err(Error::Config(format!("unknown group-by key {other:?}"))),
            }
        }
        Ok(by)
    }
}

impl TryFrom<String> for GroupBy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GroupBy> for String {
    fn from(by: GroupBy) -> Self {
        by.to_string()
    }
}

impl fmt::Display for GroupBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let keys: Vec<&str> = [(self.year, "year"), (self.region, "region"), (self.crop, "crop")]
            .into_iter()
            .filter_map(|(on, k)| on.then_some(k))
            .collect();
        if keys.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&keys.join(","))
        }
    }
}

/// A group key with the keys not grouped on left out.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupLabel {
    pub year: Option<u16>,
    pub region: Option<String>,
    pub crop: Option<CropType>,
}

impl GroupLabel {
    pub fn of(key: &GroupKey, by: GroupBy) -> Self {
        Self {
            year: if by.year { key.year } else { None },
            region: by.region.then(|| key.region.clone()),
            crop: by.crop.then_some(key.crop),
        }
    }
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let year = self.year.map_or("*".to_string(), |y| y.to_string());
        let crop = self.crop.map_or("*", CropType::as_str);
        let region = self.region.as_deref().unwrap_or("*");
        write!(f, "{year}/{crop}/{region}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub group: GroupLabel,
    pub n_loads: usize,
    pub cv_identity: f64,
    pub cv_sqrt: f64,
    /// Mean within-segment CVs after splitting each series at its detected
    /// density shifts; `None` when the series is too short to segment.
    pub cv_identity_segmented: Option<f64>,
    pub cv_sqrt_segmented: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Comparison {
    pub reports: Vec<CVReport>,
    /// Groups left out for having fewer than 2 usable loads.
    pub skipped: Vec<(GroupLabel, usize)>,
}

/// Per-group CVs of load densities under both transforms.
///
/// `identity` and `sqrt` must hold the same loads. Loads without ground truth
/// or volume are left out. With `shift`, each group's series is also split
/// at its detected shifts and the within-segment CVs reported.
pub fn compare_transforms(
    identity: &[LoadRecord],
    sqrt: &[LoadRecord],
    by: GroupBy,
    shift: Option<&ShiftConfig>,
) -> Result<Comparison> {
    if identity.len() != sqrt.len() {
        return Err(Error::domain(format!(
            "transform comparison needs the same loads, got {} identity vs {} sqrt",
            identity.len(),
            sqrt.len()
        )));
    }
    let sqrt_by_id: HashMap<&str, &LoadRecord> = sqrt.iter().map(|l| (l.load_id.as_str(), l)).collect();
    let mut groups: BTreeMap<GroupLabel, Vec<(DensityEstimate, DensityEstimate)>> = BTreeMap::new();
    for load in identity {
        let Some(other) = sqrt_by_id.get(load.load_id.as_str()) else {
            return Err(Error::domain(format!("load {} has no sqrt counterpart", load.load_id)));
        };
        let label = GroupLabel::of(&load.key, by);
        let entry = groups.entry(label).or_default();
        if let (Ok(a), Ok(b)) = (estimate_density(load), estimate_density(other)) {
            entry.push((a, b));
        }
    }

    let mut out = Comparison::default();
    for (group, mut pairs) in groups {
        if pairs.len() < 2 {
            out.skipped.push((group, pairs.len()));
            continue;
        }
        pairs.sort_by(|a, b| a.0.timestamp.total_cmp(&b.0.timestamp));
        let (ids, sqs): (Vec<DensityEstimate>, Vec<DensityEstimate>) = pairs.into_iter().unzip();
        let rho_id: Vec<f64> = ids.iter().map(|d| d.rho).collect();
        let rho_sq: Vec<f64> = sqs.iter().map(|d| d.rho).collect();
        let segmented = |series: &[DensityEstimate], values: &[f64]| -> Option<f64> {
            let report = detect_shift(series, shift?).ok()?;
            segmented_cv(values, &report.changepoints)
        };
        out.reports.push(CVReport {
            n_loads: rho_id.len(),
            cv_identity: cv(&rho_id)?,
            cv_sqrt: cv(&rho_sq)?,
            cv_identity_segmented: segmented(&ids, &rho_id),
            cv_sqrt_segmented: segmented(&sqs, &rho_sq),
            group,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub min_segment: usize,
    /// A split must reduce the squared error by more than
    /// `penalty × σ̂² × ln n`, with σ̂ the robust noise scale of the series.
    pub penalty: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self { min_segment: 5, penalty: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub load_index: usize,
    pub load_id: String,
    pub timestamp: f64,
    pub rho: f64,
    pub segment_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    /// Index of the first load of every segment after the first.
    pub changepoints: Vec<usize>,
    pub changepoint_timestamps: Vec<f64>,
    pub segment_means: Vec<f64>,
    pub segment_cvs: Vec<Option<f64>>,
    /// Robust noise scale σ̂ of the series.
    pub sigma: f64,
    /// Squared-error reduction a split had to beat.
    pub threshold: f64,
    /// Gain of splitting the whole series before index `k`, over σ̂².
    pub statistic: Vec<f64>,
    pub trace: Vec<TracePoint>,
}

/// Binary segmentation on a mean-shift squared-error cost.
pub fn detect_shift(series: &[DensityEstimate], cfg: &ShiftConfig) -> Result<ShiftReport> {
    let n = series.len();
    if n < 10 {
        return Err(Error::InsufficientData(format!("shift detection needs at least 10 loads, got {n}")));
    }
    if let Some(w) = series.windows(2).find(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::Stream(format!(
            "density series out of order: t = {} follows t = {}",
            w[1].timestamp, w[0].timestamp
        )));
    }
    let min_seg = cfg.min_segment.max(1);
    let x: Vec<f64> = series.iter().map(|d| d.rho).collect();
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, v) in x.iter().enumerate() {
        s1[i + 1] = s1[i] + v;
        s2[i + 1] = s2[i] + v * v;
    }
    let sse = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let s = s1[b] - s1[a];
        (s2[b] - s2[a] - s * s / m).max(0.0)
    };
    let best_split = |a: usize, b: usize| -> Option<(usize, f64)> {
        let total = sse(a, b);
        (a + min_seg..=b.saturating_sub(min_seg))
            .map(|k| (k, total - sse(a, k) - sse(k, b)))
            .fold(None, |best: Option<(usize, f64)>, c| match best {
                Some(b) if b.1 >= c.1 => Some(b),
                _ => Some(c),
            })
    };

    let sigma = noise_scale(&x);
    let var = sigma * sigma;
    let threshold = cfg.penalty * var * (n as f64).ln();

    let mut statistic = vec![0.0; n];
    if var > 0.0 {
        let total = sse(0, n);
        for (k, slot) in statistic.iter_mut().enumerate().take(n.saturating_sub(min_seg) + 1).skip(min_seg) {
            *slot = (total - sse(0, k) - sse(k, n)) / var;
        }
    }

    let mut changepoints = Vec::new();
    if var > 0.0 {
        let mut pending = vec![(0, n)];
        while let Some((a, b)) = pending.pop() {
            if let Some((k, gain)) = best_split(a, b) {
                if gain > threshold {
                    changepoints.push(k);
                    pending.push((a, k));
                    pending.push((k, b));
                }
            }
        }
    }
    changepoints.sort_unstable();

    let mut bounds = vec![0];
    bounds.extend(&changepoints);
    bounds.push(n);
    let mut segment_means = Vec::new();
    let mut segment_cvs = Vec::new();
    let mut trace = Vec::with_capacity(n);
    for w in bounds.windows(2) {
        let seg = &x[w[0]..w[1]];
        let m = mean(seg);
        segment_means.push(m);
        segment_cvs.push(cv(seg).ok());
        for i in w[0]..w[1] {
            trace.push(TracePoint {
                load_index: i,
                load_id: series[i].load_id.clone(),
                timestamp: series[i].timestamp,
                rho: x[i],
                segment_mean: m,
            });
        }
    }

    Ok(ShiftReport {
        changepoint_timestamps: changepoints.iter().map(|&k| series[k].timestamp).collect(),
        changepoints,
        segment_means,
        segment_cvs,
        sigma,
        threshold,
        statistic,
        trace,
    })
}

/// Noise standard deviation from the median absolute deviation of first
/// differences, which a few level shifts barely move. Falls back to the
/// plain deviation of the differences when the MAD is zero.
fn noise_scale(x: &[f64]) -> f64 {
    let mut d: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let med = median(&mut d.clone());
    let mut dev: Vec<f64> = d.iter().map(|v| (v - med).abs()).collect();
    let mad = 1.482_602_218_505_602 * median(&mut dev);
    if mad > 0.0 {
        return mad / std::f64::consts::SQRT_2;
    }
    let m = mean(&d);
    d.iter_mut().for_each(|v| *v = (*v - m).powi(2));
    (d.iter().sum::<f64>() / d.len().max(1) as f64).sqrt() / std::f64::consts::SQRT_2
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn load(id: &str, volume: f64, actual: Option<f64>) -> LoadRecord {
        LoadRecord {
            load_id: id.into(),
            key: GroupKey::new(Some(2014), "TX", CropType::Burnt),
            accumulated_volume: volume,
            predicted_mass: volume * 250.0,
            actual_mass: actual,
            duration: 60.0,
            n_frames: 450,
            n_low_light: 0,
            overflow: false,
            timestamp: 0.0,
        }
    }

    fn series(values: &[f64]) -> Vec<DensityEstimate> {
        values
            .iter()
            .enumerate()
            .map(|(i, &rho)| DensityEstimate {
                load_id: format!("L{i:03}"),
                rho,
                key: GroupKey::new(Some(2015), "LA", CropType::Green),
                timestamp: i as f64 * 3600.0,
            })
            .collect()
    }

    #[test]
    fn density_is_mass_over_volume() {
        let d = estimate_density(&load("a", 1.2, Some(300.0))).unwrap();
        assert!((d.rho - 250.0).abs() < 1e-12);
    }

    #[test]
    fn zero_volume_and_missing_truth_are_excluded() {
        assert!(matches!(estimate_density(&load("a", 0.0, Some(0.0))), Err(Error::ExcludedLoad { .. })));
        assert!(matches!(estimate_density(&load("b", 1.0, None)), Err(Error::ExcludedLoad { .. })));
    }

    #[test]
    fn cv_examples() {
        assert!((cv(&[100.0, 110.0, 90.0]).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(cv(&[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert!(matches!(cv(&[1.0]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn exact_line_fits_perfectly() {
        let pts: Vec<FitPoint> =
            (1..10).map(|i| FitPoint { predicted: i as f64, actual: 2.0 * i as f64, overflow: false }).collect();
        let fit = fit_through_origin(&pts, false).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert_eq!((fit.n, fit.excluded), (9, 0));
    }

    #[test]
    fn flagged_outlier_is_filtered() {
        let mut pts: Vec<FitPoint> =
            (1..10).map(|i| FitPoint { predicted: i as f64, actual: i as f64, overflow: false }).collect();
        pts.push(FitPoint { predicted: 5.0, actual: 40.0, overflow: true });
        let raw = fit_through_origin(&pts, false).unwrap();
        let filtered = fit_through_origin(&pts, true).unwrap();
        assert!(raw.r_squared < 0.5);
        assert!((filtered.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(filtered.excluded, 1);
    }

    #[test]
    fn degenerate_fit_inputs() {
        let zeros = [FitPoint { predicted: 0.0, actual: 1.0, overflow: false }; 3];
        assert!(matches!(fit_through_origin(&zeros, false), Err(Error::Fit(_))));
        let one = [FitPoint { predicted: 1.0, actual: 1.0, overflow: false }];
        assert!(matches!(fit_through_origin(&one, false), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn group_by_parsing() {
        assert_eq!("year,crop".parse::<GroupBy>().unwrap(), GroupBy { year: true, region: false, crop: true });
        assert_eq!("none".parse::<GroupBy>().unwrap().to_string(), "none");
        assert!("colour".parse::<GroupBy>().is_err());
        let key = GroupKey::new(Some(2014), "TX", CropType::Burnt);
        assert_eq!(GroupLabel::of(&key, GroupBy::default()).to_string(), "2014/burnt/TX");
        assert_eq!(GroupLabel::of(&key, "region".parse().unwrap()).to_string(), "*/*/TX");
    }

    #[test]
    fn constant_density_group_has_zero_cvs() {
        let id: Vec<LoadRecord> = (1..6).map(|i| load(&format!("l{i}"), i as f64, Some(250.0 * i as f64))).collect();
        let sq: Vec<LoadRecord> = (1..6)
            .map(|i| load(&format!("l{i}"), (i as f64).sqrt(), Some(250.0 * (i as f64).sqrt())))
            .collect();
        let cmp = compare_transforms(&id, &sq, GroupBy::default(), None).unwrap();
        assert_eq!(cmp.reports.len(), 1);
        assert!(cmp.reports[0].cv_identity.abs() < 1e-9 && cmp.reports[0].cv_sqrt.abs() < 1e-9);
    }

    #[test]
    fn small_groups_are_skipped() {
        let id = vec![load("only", 1.0, Some(250.0))];
        let cmp = compare_transforms(&id, &id, GroupBy::default(), None).unwrap();
        assert!(cmp.reports.is_empty());
        assert_eq!(cmp.skipped.len(), 1);
    }

    #[test]
    fn constant_series_has_no_changepoints() {
        let r = detect_shift(&series(&[3.0; 40]), &ShiftConfig::default()).unwrap();
        assert!(r.changepoints.is_empty());
        assert_eq!(r.segment_means, vec![3.0]);
    }

    #[test]
    fn iid_series_has_no_changepoints() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(250.0, 12.5).unwrap();
        let values: Vec<f64> = (0..100).map(|_| noise.sample(&mut rng)).collect();
        let r = detect_shift(&series(&values), &ShiftConfig::default()).unwrap();
        assert!(r.changepoints.is_empty(), "{:?}", r.changepoints);
    }

    #[test]
    fn single_shift_is_located_and_segments_tighten() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let values: Vec<f64> = (0..100)
            .map(|i| {
                let level = if i < 50 { 250.0 } else { 312.5 };
                level * (1.0 + noise.sample(&mut rng))
            })
            .collect();
        let r = detect_shift(&series(&values), &ShiftConfig::default()).unwrap();
        assert_eq!(r.changepoints.len(), 1);
        assert!(r.changepoints[0].abs_diff(50) <= 3);
        assert_eq!(r.changepoint_timestamps[0], r.changepoints[0] as f64 * 3600.0);
        assert_eq!(r.trace.len(), 100);
        assert!(segmented_cv(&values, &r.changepoints).unwrap() < cv(&values).unwrap());
    }

    #[test]
    fn shift_detection_rejects_short_or_unordered_series() {
        assert!(matches!(detect_shift(&series(&[1.0; 9]), &ShiftConfig::default()), Err(Error::InsufficientData(_))));
        let mut s = series(&[1.0; 12]);
        s[3].timestamp = -1.0;
        assert!(matches!(detect_shift(&s, &ShiftConfig::default()), Err(Error::Stream(_))));
    }
}
