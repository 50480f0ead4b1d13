//! On-disk formats. Every float is written with 6 significant digits.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calib::{CVReport, ShiftReport};
use crate::error::{Error, Result};
use crate::estimator::PointCloudFrame;
use crate::flow::{CropType, GroupKey, LoadRecord};

/// Formats `v` like C's `%g`: 6 significant digits, trailing zeros
/// dropped, exponent form outside `1e-4 ≤ |v| < 1e6`.
pub fn fmt6(v: f64) -> String {
    let mut s = String::with_capacity(12);
    push_fmt6(&mut s, v);
    s
}

pub fn push_fmt6(out: &mut String, v: f64) {
    if !v.is_finite() {
        out.push_str(if v.is_nan() { "NaN" } else if v > 0.0 { "inf" } else { "-inf" });
        return;
    }
    if v == 0.0 {
        out.push('0');
        return;
    }
    if v < 0.0 {
        out.push('-');
    }
    let a = v.abs();
    let mut exp = a.log10().floor() as i32;
    if exp.abs() > 290 {
        // Out of range for the integer scaling below.
        let e = format!("{a:.5e}");
        let (m, x) = e.split_once('e').expect("exponent form");
        out.push_str(m.trim_end_matches('0').trim_end_matches('.'));
        out.push('e');
        out.push_str(x);
        return;
    }
    let mut digits = scale_digits(a, exp);
    if digits >= 1_000_000 {
        exp += 1;
        digits = scale_digits(a, exp);
    } else if digits < 100_000 {
        exp -= 1;
        digits = scale_digits(a, exp);
    }
    let mut buf = [0u8; 6];
    let mut d = digits.min(999_999);
    for slot in buf.iter_mut().rev() {
        *slot = b'0' + (d % 10) as u8;
        d /= 10;
    }
    let sig = buf.iter().rposition(|&c| c != b'0').map_or(1, |p| p + 1);
    let digits = std::str::from_utf8(&buf[..sig]).expect("ascii digits");

    if (-4..6).contains(&exp) {
        if exp < 0 {
            out.push_str("0.");
            (0..(-exp - 1)).for_each(|_| out.push('0'));
            out.push_str(digits);
        } else {
            let int_len = exp as usize + 1;
            if sig <= int_len {
                out.push_str(digits);
                (sig..int_len).for_each(|_| out.push('0'));
            } else {
                out.push_str(&digits[..int_len]);
                out.push('.');
                out.push_str(&digits[int_len..]);
            }
        }
    } else {
        out.push_str(&digits[..1]);
        if sig > 1 {
            out.push('.');
            out.push_str(&digits[1..]);
        }
        out.push('e');
        out.push_str(&exp.to_string());
    }
}

/// `round(a × 10^(5 − exp))`, the six leading digits of `a`.
fn scale_digits(a: f64, exp: i32) -> u64 {
    let k = 5 - exp;
    let scaled = if k >= 0 { a * 10f64.powi(k) } else { a / 10f64.powi(-k) };
    scaled.round() as u64
}

/// serde_json formatter that writes floats through [`fmt6`], compact or pretty.
pub struct Fmt6Formatter {
    pretty: Option<serde_json::ser::PrettyFormatter<'static>>,
}

impl Fmt6Formatter {
    pub fn compact() -> Self {
        Self { pretty: None }
    }

    pub fn pretty() -> Self {
        Self { pretty: Some(serde_json::ser::PrettyFormatter::new()) }
    }
}

macro_rules! forward {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(fn $name<W: ?Sized + Write>(&mut self, writer: &mut W $(, $arg: $ty)*) -> io::Result<()> {
            match &mut self.pretty {
                Some(p) => p.$name(writer $(, $arg)*),
                None => serde_json::ser::CompactFormatter.$name(writer $(, $arg)*),
            }
        })*
    };
}

impl serde_json::ser::Formatter for Fmt6Formatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(fmt6(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    forward!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        end_object_key(),
        begin_object_value(),
        end_object_value(),
    );
}

pub fn to_json_bytes<T: Serialize>(value: &T, pretty: bool) -> Vec<u8> {
    let mut out = Vec::new();
    let fmt = if pretty { Fmt6Formatter::pretty() } else { Fmt6Formatter::compact() };
    let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
    value.serialize(&mut ser).expect("serializing to memory cannot fail");
    if pretty {
        out.push(b'\n');
    }
    out
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_json_bytes(value, true))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.into(), line: e.line(), message: e.to_string() })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        w.write_all(&to_json_bytes(item, false))
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = open(path)?;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: path.into(), line: i + 1, message: e.to_string() })?;
        out.push(item);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct FrameLine {
    timestamp_s: f64,
    lux: f64,
    points: Vec<f64>,
}

/// One frame per line: `timestamp_s`, `lux` and `points` as flat `x, y, z` triplets.
pub fn write_frames(path: &Path, frames: &[PointCloudFrame]) -> Result<()> {
    let mut w = create(path)?;
    let mut line = String::new();
    for f in frames {
        line.clear();
        line.push_str("{\"timestamp_s\":");
        push_fmt6(&mut line, f.timestamp);
        line.push_str(",\"lux\":");
        push_fmt6(&mut line, f.lux);
        line.push_str(",\"points\":[");
        for (i, p) in f.points.iter().enumerate() {
            for (k, c) in p.iter().enumerate() {
                if i + k > 0 {
                    line.push(',');
                }
                push_fmt6(&mut line, *c);
            }
        }
        line.push_str("]}\n");
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: &Path) -> Result<Vec<PointCloudFrame>> {
    let lines: Vec<FrameLine> = read_jsonl(path)?;
    lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            if l.points.len() % 3 != 0 {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    message: format!("{} point coordinates is not a multiple of 3", l.points.len()),
                });
            }
            let points = l.points.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            Ok(PointCloudFrame { timestamp: l.timestamp_s, lux: l.lux, points })
        })
        .collect()
}

pub const LOAD_COLUMNS: [&str; 12] = [
    "load_id",
    "year",
    "region",
    "crop_type",
    "accum_volume",
    "predicted_mass_kg",
    "actual_mass_kg",
    "duration_s",
    "n_frames",
    "n_low_light",
    "overflow",
    "timestamp_s",
];

pub fn write_loads(path: &Path, loads: &[LoadRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    w.write_record(LOAD_COLUMNS).map_err(csv_err)?;
    for l in loads {
        w.write_record([
            l.load_id.clone(),
            l.key.year.map(|y| y.to_string()).unwrap_or_default(),
            l.key.region.clone(),
            l.key.crop.as_str().to_string(),
            fmt6(l.accumulated_volume),
            fmt6(l.predicted_mass),
            l.actual_mass.map(fmt6).unwrap_or_default(),
            fmt6(l.duration),
            l.n_frames.to_string(),
            l.n_low_light.to_string(),
            l.overflow.to_string(),
            fmt6(l.timestamp),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct LoadRow {
    load_id: String,
    year: Option<u16>,
    region: String,
    crop_type: String,
    accum_volume: f64,
    predicted_mass_kg: f64,
    actual_mass_kg: Option<f64>,
    duration_s: f64,
    n_frames: usize,
    n_low_light: usize,
    #[serde(default)]
    overflow: bool,
    #[serde(default)]
    timestamp_s: f64,
}

pub fn read_loads(path: &Path) -> Result<Vec<LoadRecord>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for row in r.deserialize::<LoadRow>() {
        let row = row.map_err(|e| Error::Parse {
            path: path.into(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        out.push(LoadRecord {
            load_id: row.load_id,
            key: GroupKey::new(row.year, row.region, row.crop_type.parse::<CropType>()?),
            accumulated_volume: row.accum_volume,
            predicted_mass: row.predicted_mass_kg,
            actual_mass: row.actual_mass_kg,
            duration: row.duration_s,
            n_frames: row.n_frames,
            n_low_light: row.n_low_light,
            overflow: row.overflow,
            timestamp: row.timestamp_s,
        });
    }
    Ok(out)
}

/// Per-group CV table: `year, crop_type, location, n_loads, cv_pct, cv_pct_xfm`,
/// followed by the per-segment CVs (blank when not computed).
pub fn write_cv_report(path: &Path, reports: &[CVReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    w.write_record([
        "year",
        "crop_type",
        "location",
        "n_loads",
        "cv_pct",
        "cv_pct_xfm",
        "cv_pct_segmented",
        "cv_pct_xfm_segmented",
    ])
    .map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.group.year.map(|y| y.to_string()).unwrap_or_default(),
            r.group.crop.map(|c| c.as_str().to_string()).unwrap_or_default(),
            r.group.region.clone().unwrap_or_default(),
            r.n_loads.to_string(),
            fmt6(r.cv_identity),
            fmt6(r.cv_sqrt),
            r.cv_identity_segmented.map(fmt6).unwrap_or_default(),
            r.cv_sqrt_segmented.map(fmt6).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plottable density trace of every group: `group, load_index, load_id, rho, segment_mean`.
pub fn write_shift_trace(path: &Path, shifts: &[(String, ShiftReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["group", "load_index", "load_id", "rho", "segment_mean"]).map_err(csv_err)?;
    for (group, report) in shifts {
        for t in &report.trace {
            w.write_record([
                group.clone(),
                t.load_index.to_string(),
                t.load_id.clone(),
                fmt6(t.rho),
                fmt6(t.segment_mean),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fmt6_examples() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (0.004, "0.004"),
            (11.111111111, "11.1111"),
            (123456.7, "123457"),
            (999999.7, "1e6"),
            (1234567.0, "1.23457e6"),
            (0.0001, "0.0001"),
            (0.00001234567, "1.23457e-5"),
            (0.266666666, "0.266667"),
            (250.0, "250"),
            (100000.0, "100000"),
            (9.9999996, "10"),
        ];
        for (v, want) in cases {
            assert_eq!(fmt6(v), want, "{v}");
        }
    }

    proptest! {
        #[test]
        fn fmt6_keeps_six_significant_digits(v in prop::num::f64::NORMAL) {
            let back: f64 = fmt6(v).parse().unwrap();
            prop_assert!((back - v).abs() <= 5.000001e-6 * v.abs(), "{v} -> {}", fmt6(v));
        }
    }

    #[test]
    fn json_floats_use_fmt6() {
        #[derive(Serialize)]
        struct S {
            a: f64,
            b: Vec<f64>,
            n: u32,
        }
        let s = S { a: 1.0 / 3.0, b: vec![2.0, 1e-7], n: 7 };
        assert_eq!(String::from_utf8(to_json_bytes(&s, false)).unwrap(), r#"{"a":0.333333,"b":[2,1e-7],"n":7}"#);
        let pretty = String::from_utf8(to_json_bytes(&s, true)).unwrap();
        assert!(pretty.contains("\n  \"a\": 0.333333,"));
    }

    #[test]
    fn frames_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.jsonl");
        let frames = vec![
            PointCloudFrame { timestamp: 0.0, lux: 6700.0, points: vec![[0.1, 0.2, 0.03], [0.4, 0.25, 0.0]] },
            PointCloudFrame { timestamp: 0.133333333, lux: 6700.0, points: vec![] },
        ];
        write_frames(&path, &frames).unwrap();
        let back = read_frames(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].points, frames[0].points);
        assert_eq!(back[1].timestamp, 0.133333);
        assert!(back[1].points.is_empty());
    }

    #[test]
    fn malformed_frame_reports_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.jsonl");
        std::fs::write(&path, "{\"timestamp_s\":0,\"lux\":1,\"points\":[]}\n{\"timestamp_s\":1,\"lux\":1,\"points\":[1,2]}\n")
            .unwrap();
        match read_frames(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loads_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loads.csv");
        let loads = vec![
            LoadRecord {
                load_id: "lab-001".into(),
                key: GroupKey::new(None, "lab", CropType::Bamboo),
                accumulated_volume: 1.2,
                predicted_mass: 300.0,
                actual_mass: Some(295.0),
                duration: 60.0,
                n_frames: 450,
                n_low_light: 0,
                overflow: true,
                timestamp: 0.0,
            },
            LoadRecord {
                load_id: "TX-002".into(),
                key: GroupKey::new(Some(2014), "TX", CropType::Burnt),
                accumulated_volume: 0.0,
                predicted_mass: 0.0,
                actual_mass: None,
                duration: 20.0,
                n_frames: 150,
                n_low_light: 150,
                overflow: false,
                timestamp: 3600.0,
            },
        ];
        write_loads(&path, &loads).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("load_id,year,region,crop_type,accum_volume,predicted_mass_kg,actual_mass_kg,"));
        assert_eq!(read_loads(&path).unwrap(), loads);
    }
}
