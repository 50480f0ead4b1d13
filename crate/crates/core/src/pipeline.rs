//! File-based pipeline stages: simulate → estimate → calibrate → report.
//!
//! Every stage reads and rewrites `manifest.json` in the output directory.
//! The manifest records the resolved config's hash and a digest of every
//! artifact; a stage refuses to run when either no longer matches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{
    compare_transforms, detect_shift, estimate_density, fit_through_origin, mean, CVReport, FitPoint, FitResult,
    GroupBy, GroupLabel, ShiftReport,
};
use crate::campaign::{field_loads, lab_runs};
use crate::config::{sha256_hex, CampaignConfig, Overrides};
use crate::error::{Error, Result};
use crate::estimator::{estimate_frame, EstimatorConfig, Quality, VolumeEstimate};
use crate::flow::{
    accumulate, build_load_record, windowed_mass_flow, AccumulateConfig, FlowSample, FlowTotals, GroupKey, LoadRecord,
    LowLightPolicy, SpeedPulse, SpeedTrack, TransformSpec,
};
use crate::io::{self, fmt6};
use crate::sim::{run_scenario, RunTruth};

pub const TOOL_VERSION: &str = concat!("caneflow ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub id: String,
    pub files: BTreeMap<String, FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    /// Hash of the config the stage ran with, overrides included.
    pub config_hash: String,
    pub outputs: BTreeMap<String, FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub campaign: String,
    pub name: String,
    pub config: FileEntry,
    pub config_hash: String,
    pub simulation_hash: String,
    pub runs: Vec<RunEntry>,
    pub stages: BTreeMap<String, StageEntry>,
}

/// Ground truth and metadata for one run or wagon load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadTruth {
    pub load_id: String,
    pub key: GroupKey,
    pub timestamp_s: f64,
    pub actual_mass_kg: f64,
    pub overflow: bool,
    pub frame_rate: f64,
    pub lux: f64,
    /// Simulator truth for lab runs.
    #[serde(default)]
    pub run: Option<RunTruth>,
    /// Injected density multiplier for field loads.
    #[serde(default)]
    pub shift_factor: Option<f64>,
}

struct Workspace {
    root: PathBuf,
}

impl Workspace {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn entry(&self, rel: &str) -> Result<FileEntry> {
        let path = self.path(rel);
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut hasher = Sha256::new();
        let bytes = std::io::copy(&mut file, &mut hasher).map_err(|e| Error::io(&path, e))?;
        Ok(FileEntry { path: rel.to_string(), sha256: hex::encode(hasher.finalize()), bytes })
    }

    fn verify(&self, entry: &FileEntry) -> Result<()> {
        let path = self.path(&entry.path);
        if !path.is_file() {
            return Err(Error::Manifest(format!("{} is listed in the manifest but missing", entry.path)));
        }
        let now = self.entry(&entry.path)?;
        if now.sha256 != entry.sha256 {
            return Err(Error::Manifest(format!("{} changed since it was recorded in the manifest", entry.path)));
        }
        Ok(())
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<FileEntry> {
        io::write_json(&self.path(rel), value)?;
        self.entry(rel)
    }

    fn save(&self, manifest: &Manifest) -> Result<()> {
        io::write_bytes(&self.path(MANIFEST), &serde_json::to_vec_pretty(manifest).expect("manifest serializes"))
    }

    /// Loads the manifest and the stored config, checking the config's hash
    /// and, when given, that `expected` describes the same simulation.
    fn open(root: &Path, expected: Option<&CampaignConfig>) -> Result<(Self, Manifest, CampaignConfig)> {
        let ws = Workspace { root: root.to_path_buf() };
        let mpath = ws.path(MANIFEST);
        if !mpath.is_file() {
            return Err(Error::Manifest(format!("{} not found; run simulate first", mpath.display())));
        }
        let manifest: Manifest = io::read_json(&mpath)?;
        if manifest.tool_version != TOOL_VERSION {
            return Err(Error::Manifest(format!(
                "manifest written by {}, this is {TOOL_VERSION}",
                manifest.tool_version
            )));
        }
        ws.verify(&manifest.config)?;
        let cfg: CampaignConfig = io::read_json(&ws.path(&manifest.config.path))?;
        if cfg.hash() != manifest.config_hash {
            return Err(Error::Manifest("stored config does not match the manifest's config hash".into()));
        }
        if let Some(exp) = expected {
            if exp.simulation_hash() != manifest.simulation_hash {
                return Err(Error::Manifest(format!(
                    "config {} does not describe the simulation recorded in {}",
                    exp.name,
                    mpath.display()
                )));
            }
        }
        Ok((ws, manifest, cfg))
    }
}

fn run_dir(id: &str) -> String {
    format!("runs/{id}")
}

fn require_stage(manifest: &Manifest, stage: &str, next: &str) -> Result<()> {
    if manifest.stages.contains_key(stage) {
        Ok(())
    } else {
        Err(Error::Manifest(format!("{next} needs the {stage} stage to have run first")))
    }
}

/// Applies stage overrides to the stored config; they may not change the simulation.
fn resolve(stored: &CampaignConfig, manifest: &Manifest, o: &Overrides) -> Result<CampaignConfig> {
    let mut cfg = stored.clone();
    cfg.apply(o)?;
    if cfg.simulation_hash() != manifest.simulation_hash {
        return Err(Error::Manifest("overrides would change the simulated campaign; rerun simulate instead".into()));
    }
    Ok(cfg)
}

/// Generates the campaign's raw artifacts: frames, pulses and truth for lab
/// runs; logged estimates, pulses and truth for field loads.
pub fn simulate(cfg: &CampaignConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ws = Workspace { root: out.to_path_buf() };
    let stale = ws.path("runs");
    if stale.exists() {
        std::fs::remove_dir_all(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    io::write_bytes(&ws.path(CONFIG), &serde_json::to_vec_pretty(cfg).expect("config serializes"))?;
    let mut runs = Vec::new();

    if cfg.lab.is_some() {
        for run in lab_runs(cfg)? {
            let output = run_scenario(&cfg.sim, &run.scenario)?;
            let dir = run_dir(&run.id);
            let truth = LoadTruth {
                load_id: run.id.clone(),
                key: run.key.clone(),
                timestamp_s: run.timestamp,
                actual_mass_kg: output.truth.total_mass_kg,
                overflow: output.truth.overflow,
                frame_rate: run.scenario.frame_rate,
                lux: run.scenario.lighting.lux,
                run: Some(output.truth.clone()),
                shift_factor: None,
            };
            let mut files = BTreeMap::new();
            let frames = format!("{dir}/frames.jsonl");
            io::write_frames(&ws.path(&frames), &output.frames)?;
            files.insert("frames".into(), ws.entry(&frames)?);
            files.insert("pulses".into(), write_pulses(&ws, &dir, &output.pulses)?);
            files.insert("truth".into(), ws.write_json(&format!("{dir}/truth.json"), &truth)?);
            runs.push(RunEntry { id: run.id, files });
        }
    } else {
        let field = cfg.field.as_ref().expect("validated campaign");
        for load in field_loads(cfg)? {
            let dir = run_dir(&load.id);
            let truth = LoadTruth {
                load_id: load.id.clone(),
                key: load.key.clone(),
                timestamp_s: load.timestamp,
                actual_mass_kg: load.actual_mass,
                overflow: false,
                frame_rate: field.frame_rate,
                lux: field.lux,
                run: None,
                shift_factor: Some(load.shift_factor),
            };
            let mut files = BTreeMap::new();
            let est = format!("{dir}/estimates.jsonl");
            io::write_jsonl(&ws.path(&est), &load.estimates)?;
            files.insert("logged_estimates".into(), ws.entry(&est)?);
            files.insert("pulses".into(), write_pulses(&ws, &dir, &load.pulses)?);
            files.insert("truth".into(), ws.write_json(&format!("{dir}/truth.json"), &truth)?);
            runs.push(RunEntry { id: load.id, files });
        }
    }

    let mut manifest = Manifest {
        tool_version: TOOL_VERSION.into(),
        campaign: cfg.kind().into(),
        name: cfg.name.clone(),
        config: ws.entry(CONFIG)?,
        config_hash: cfg.hash(),
        simulation_hash: cfg.simulation_hash(),
        runs,
        stages: BTreeMap::new(),
    };
    manifest.stages.insert("simulate".into(), StageEntry { config_hash: cfg.hash(), outputs: BTreeMap::new() });
    ws.save(&manifest)?;
    Ok(manifest)
}

fn write_pulses(ws: &Workspace, dir: &str, pulses: &[SpeedPulse]) -> Result<FileEntry> {
    let rel = format!("{dir}/pulses.jsonl");
    io::write_jsonl(&ws.path(&rel), pulses)?;
    ws.entry(&rel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LuxSummary {
    pub lux: f64,
    pub runs: usize,
    pub frames: usize,
    pub low_light_frames: usize,
    pub low_light_pct: f64,
    /// Mean `v_c` over the level's frames, m³/m.
    pub mean_v_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub estimator: EstimatorConfig,
    pub runs: usize,
    pub frames: usize,
    pub low_light_frames: usize,
    pub empty_frames: usize,
    pub by_lux: Vec<LuxSummary>,
    /// Largest `v_c` seen in any frame of an empty run.
    pub empty_run_max_v_c: f64,
}

/// Turns frames into per-frame volume estimates. Field loads already carry
/// logged estimates, which are summarized as they are.
pub fn estimate(out: &Path, o: &Overrides, expected: Option<&CampaignConfig>) -> Result<EstimateSummary> {
    let (ws, mut manifest, stored) = Workspace::open(out, expected)?;
    require_stage(&manifest, "simulate", "estimate")?;
    let cfg = resolve(&stored, &manifest, o)?;
    let est_cfg = cfg.estimator;
    est_cfg.validate()?;
    let roi = cfg.sim.roi;

    let mut by_lux: BTreeMap<u64, LuxSummary> = BTreeMap::new();
    let (mut frames_total, mut low_total, mut empty_total, mut empty_max) = (0, 0, 0, 0.0f64);
    for run in &mut manifest.runs {
        let truth_entry = &run.files["truth"];
        ws.verify(truth_entry)?;
        let truth: LoadTruth = io::read_json(&ws.path(&truth_entry.path))?;
        let estimates: Vec<VolumeEstimate> = if let Some(frames_entry) = run.files.get("frames") {
            ws.verify(frames_entry)?;
            let frames = io::read_frames(&ws.path(&frames_entry.path))?;
            let estimates = frames
                .par_iter()
                .map(|f| estimate_frame(f, &roi, &est_cfg))
                .collect::<Result<Vec<_>>>()?;
            let rel = format!("{}/estimates.jsonl", run_dir(&run.id));
            io::write_jsonl(&ws.path(&rel), &estimates)?;
            run.files.insert("estimates".into(), ws.entry(&rel)?);
            estimates
        } else {
            let logged = run
                .files
                .get("logged_estimates")
                .ok_or_else(|| Error::Manifest(format!("run {} has neither frames nor estimates", run.id)))?
                .clone();
            ws.verify(&logged)?;
            run.files.insert("estimates".into(), logged.clone());
            io::read_jsonl(&ws.path(&logged.path))?
        };

        let low = estimates.iter().filter(|e| e.quality == Quality::LowLight).count();
        let sum_vc: f64 = estimates.iter().map(|e| e.v_c).sum();
        frames_total += estimates.len();
        low_total += low;
        empty_total += estimates.iter().filter(|e| e.quality == Quality::Empty).count();
        if truth.actual_mass_kg == 0.0 {
            empty_max = estimates.iter().map(|e| e.v_c).fold(empty_max, f64::max);
        }
        let s = by_lux.entry(truth.lux.to_bits()).or_insert(LuxSummary {
            lux: truth.lux,
            runs: 0,
            frames: 0,
            low_light_frames: 0,
            low_light_pct: 0.0,
            mean_v_c: 0.0,
        });
        s.runs += 1;
        s.frames += estimates.len();
        s.low_light_frames += low;
        s.mean_v_c += sum_vc;
    }

    let mut by_lux: Vec<LuxSummary> = by_lux.into_values().collect();
    by_lux.sort_by(|a, b| a.lux.total_cmp(&b.lux));
    for s in &mut by_lux {
        if s.frames > 0 {
            s.low_light_pct = 100.0 * s.low_light_frames as f64 / s.frames as f64;
            s.mean_v_c /= s.frames as f64;
        }
    }
    let summary = EstimateSummary {
        estimator: est_cfg,
        runs: manifest.runs.len(),
        frames: frames_total,
        low_light_frames: low_total,
        empty_frames: empty_total,
        by_lux,
        empty_run_max_v_c: empty_max,
    };
    let mut outputs = BTreeMap::new();
    outputs.insert("summary".into(), ws.write_json("estimate_summary.json", &summary)?);
    manifest.stages.retain(|k, _| k == "simulate");
    manifest.stages.insert("estimate".into(), StageEntry { config_hash: cfg.hash(), outputs });
    ws.save(&manifest)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCalibration {
    pub group: GroupLabel,
    pub n_loads: usize,
    /// Loads used for the density mean.
    pub n_calibration: usize,
    pub rho_identity: f64,
    pub rho_sqrt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitPair {
    pub identity: Option<FitResult>,
    pub sqrt: Option<FitResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupShift {
    pub group: GroupLabel,
    pub transform: TransformSpec,
    #[serde(flatten)]
    pub report: ShiftReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub transform: TransformSpec,
    pub low_light: LowLightPolicy,
    pub group_by: GroupBy,
    pub n_loads: usize,
    pub n_empty: usize,
    pub n_overflow: usize,
    pub n_low_light_loads: usize,
    pub total_actual_kg: f64,
    pub total_predicted_kg: f64,
    /// Largest absolute predicted mass over loads that weighed nothing.
    pub empty_run_bias_kg: f64,
    pub groups: Vec<GroupCalibration>,
    pub cv: Vec<CVReport>,
    /// Groups with fewer than 2 calibration loads.
    pub cv_skipped: Vec<GroupLabel>,
    pub fit: FitPair,
}

struct Accumulated {
    id: String,
    truth: LoadTruth,
    identity: FlowTotals,
    sqrt: FlowTotals,
    estimates: Vec<VolumeEstimate>,
    track: SpeedTrack,
}

/// Accumulates every run under both transforms, calibrates group densities
/// and writes the load tables, CV table, fit, shift reports and flow samples.
pub fn calibrate(out: &Path, o: &Overrides, expected: Option<&CampaignConfig>) -> Result<CalibrationSummary> {
    let (ws, mut manifest, stored) = Workspace::open(out, expected)?;
    require_stage(&manifest, "estimate", "calibrate")?;
    let cfg = resolve(&stored, &manifest, o)?;
    let primary = cfg.flow.transform;
    let by = cfg.calibration.group_by;

    let mut acc = Vec::with_capacity(manifest.runs.len());
    for run in &manifest.runs {
        let get = |name: &str| -> Result<&FileEntry> {
            let e = run.files.get(name).ok_or_else(|| Error::Manifest(format!("run {} has no {name}", run.id)))?;
            ws.verify(e)?;
            Ok(e)
        };
        let truth: LoadTruth = io::read_json(&ws.path(&get("truth")?.path))?;
        let estimates: Vec<VolumeEstimate> = io::read_jsonl(&ws.path(&get("estimates")?.path))?;
        let pulses: Vec<SpeedPulse> = io::read_jsonl(&ws.path(&get("pulses")?.path))?;
        let track = SpeedTrack::new(pulses, cfg.sim.sprocket, cfg.flow.speed_window)?;
        let totals = |transform| -> Result<FlowTotals> {
            let acfg = AccumulateConfig { density: 1.0, transform, low_light: cfg.flow.low_light, frame_rate: truth.frame_rate };
            Ok(accumulate(&estimates, &track, &acfg)?.1)
        };
        acc.push(Accumulated {
            id: run.id.clone(),
            identity: totals(TransformSpec::Identity)?,
            sqrt: totals(TransformSpec::Sqrt)?,
            truth,
            estimates,
            track,
        });
    }

    let calibration_set = |a: &Accumulated| {
        a.truth.actual_mass_kg > 0.0
            && a.identity.n_low_light == 0
            && !(cfg.calibration.overflow_filter && a.truth.overflow)
            && a.identity.volume > 0.0
    };
    let mut groups: BTreeMap<GroupLabel, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for a in &acc {
        let g = groups.entry(GroupLabel::of(&a.truth.key, by)).or_default();
        g.0 += 1;
        if calibration_set(a) {
            g.1.push(a.truth.actual_mass_kg / a.identity.volume);
            g.2.push(a.truth.actual_mass_kg / a.sqrt.volume);
        }
    }
    let mut densities = BTreeMap::new();
    let mut group_rows = Vec::new();
    for (label, (n, id, sq)) in &groups {
        if id.is_empty() {
            return Err(Error::InsufficientData(format!("group {label} has no calibratable loads")));
        }
        let rho = (mean(id), mean(sq));
        densities.insert(label.clone(), rho);
        group_rows.push(GroupCalibration {
            group: label.clone(),
            n_loads: *n,
            n_calibration: id.len(),
            rho_identity: rho.0,
            rho_sqrt: rho.1,
        });
    }

    let records = |transform: TransformSpec| -> Result<Vec<LoadRecord>> {
        acc.iter()
            .map(|a| {
                let label = GroupLabel::of(&a.truth.key, by);
                let (rho_id, rho_sq) = densities[&label];
                let (totals, rho) = match transform {
                    TransformSpec::Identity => (a.identity, rho_id),
                    TransformSpec::Sqrt => (a.sqrt, rho_sq),
                };
                let scaled = FlowTotals { mass: totals.volume * rho, ..totals };
                let mut rec = build_load_record(&a.id, &scaled, Some(a.truth.actual_mass_kg), a.truth.key.clone())?;
                rec.overflow = a.truth.overflow;
                rec.timestamp = a.truth.timestamp_s;
                Ok(rec)
            })
            .collect()
    };
    let loads_id = records(TransformSpec::Identity)?;
    let loads_sq = records(TransformSpec::Sqrt)?;
    let mut outputs = BTreeMap::new();
    io::write_loads(&ws.path("loads_identity.csv"), &loads_id)?;
    outputs.insert("loads_identity".into(), ws.entry("loads_identity.csv")?);
    io::write_loads(&ws.path("loads_sqrt.csv"), &loads_sq)?;
    outputs.insert("loads_sqrt".into(), ws.entry("loads_sqrt.csv")?);

    let in_set: Vec<bool> = acc.iter().map(calibration_set).collect();
    let pick = |loads: &[LoadRecord]| -> Vec<LoadRecord> {
        loads.iter().zip(&in_set).filter(|(_, k)| **k).map(|(l, _)| l.clone()).collect()
    };
    let (cal_id, cal_sq) = (pick(&loads_id), pick(&loads_sq));
    let comparison = compare_transforms(&cal_id, &cal_sq, by, Some(&cfg.calibration.shift))?;
    io::write_cv_report(&ws.path("cv_report.csv"), &comparison.reports)?;
    outputs.insert("cv_report".into(), ws.entry("cv_report.csv")?);

    let fit = |loads: &[LoadRecord]| -> Option<FitResult> {
        let points: Vec<FitPoint> = loads
            .iter()
            .filter(|l| l.n_low_light == 0 && l.actual_mass.is_some_and(|m| m > 0.0))
            .map(|l| FitPoint {
                predicted: l.predicted_mass_flow(),
                actual: l.actual_mass_flow().unwrap_or(0.0),
                overflow: l.overflow,
            })
            .collect();
        fit_through_origin(&points, cfg.calibration.overflow_filter).ok()
    };
    let fits = FitPair { identity: fit(&loads_id), sqrt: fit(&loads_sq) };
    outputs.insert("fit".into(), ws.write_json("fit.json", &fits)?);

    let primary_cal = match primary {
        TransformSpec::Identity => &cal_id,
        TransformSpec::Sqrt => &cal_sq,
    };
    let mut series: BTreeMap<GroupLabel, Vec<_>> = BTreeMap::new();
    for l in primary_cal {
        series.entry(GroupLabel::of(&l.key, by)).or_default().push(estimate_density(l)?);
    }
    let mut shifts = Vec::new();
    for (group, mut s) in series {
        s.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        if let Ok(report) = detect_shift(&s, &cfg.calibration.shift) {
            shifts.push(GroupShift { group, transform: primary, report });
        }
    }
    outputs.insert("shift".into(), ws.write_json("shift.json", &shifts)?);
    let traces: Vec<(String, ShiftReport)> = shifts.iter().map(|s| (s.group.to_string(), s.report.clone())).collect();
    io::write_shift_trace(&ws.path("shift_trace.csv"), &traces)?;
    outputs.insert("shift_trace".into(), ws.entry("shift_trace.csv")?);

    for (a, run) in acc.iter().zip(manifest.runs.iter_mut()) {
        let label = GroupLabel::of(&a.truth.key, by);
        let (rho_id, rho_sq) = densities[&label];
        let density = if primary == TransformSpec::Sqrt { rho_sq } else { rho_id };
        let acfg = AccumulateConfig { density, transform: primary, low_light: cfg.flow.low_light, frame_rate: a.truth.frame_rate };
        let (samples, _) = accumulate(&a.estimates, &a.track, &acfg)?;
        let rel = format!("{}/flow.jsonl", run_dir(&run.id));
        write_flow(&ws.path(&rel), &samples, cfg.flow.mass_flow_window)?;
        run.files.insert("flow".into(), ws.entry(&rel)?);
    }

    let primary_loads = if primary == TransformSpec::Sqrt { &loads_sq } else { &loads_id };
    let empty: Vec<&LoadRecord> = primary_loads.iter().filter(|l| l.actual_mass == Some(0.0)).collect();
    let summary = CalibrationSummary {
        transform: primary,
        low_light: cfg.flow.low_light,
        group_by: by,
        n_loads: acc.len(),
        n_empty: empty.len(),
        n_overflow: acc.iter().filter(|a| a.truth.overflow).count(),
        n_low_light_loads: acc.iter().filter(|a| a.identity.n_low_light > 0).count(),
        total_actual_kg: acc.iter().map(|a| a.truth.actual_mass_kg).sum(),
        total_predicted_kg: primary_loads.iter().map(|l| l.predicted_mass).sum(),
        empty_run_bias_kg: empty.iter().map(|l| l.predicted_mass.abs()).fold(0.0, f64::max),
        groups: group_rows,
        cv: comparison.reports,
        cv_skipped: comparison.skipped.into_iter().map(|(g, _)| g).collect(),
        fit: fits,
    };
    outputs.insert("summary".into(), ws.write_json("calibration.json", &summary)?);
    manifest.stages.retain(|k, _| k == "simulate" || k == "estimate");
    manifest.stages.insert("calibrate".into(), StageEntry { config_hash: cfg.hash(), outputs });
    ws.save(&manifest)?;
    Ok(summary)
}

#[derive(Serialize)]
struct FlowLine<'a> {
    #[serde(flatten)]
    sample: &'a FlowSample,
    mass_flow_kg_per_s: f64,
}

fn write_flow(path: &Path, samples: &[FlowSample], window: f64) -> Result<()> {
    let rates = windowed_mass_flow(samples, window);
    let lines: Vec<FlowLine> =
        samples.iter().zip(rates).map(|(s, (_, m))| FlowLine { sample: s, mass_flow_kg_per_s: m }).collect();
    io::write_jsonl(path, &lines)
}

/// One-page text summary of a calibrated campaign, also written to `report.txt`.
pub fn report(out: &Path) -> Result<String> {
    let (ws, mut manifest, cfg) = Workspace::open(out, None)?;
    require_stage(&manifest, "estimate", "report")?;
    require_stage(&manifest, "calibrate", "report")?;
    let stage = &manifest.stages["calibrate"];
    let cal_entry = &stage.outputs["summary"];
    let shift_entry = &stage.outputs["shift"];
    ws.verify(cal_entry)?;
    ws.verify(shift_entry)?;
    let est_entry = &manifest.stages["estimate"].outputs["summary"];
    ws.verify(est_entry)?;
    let cal: CalibrationSummary = io::read_json(&ws.path(&cal_entry.path))?;
    let est: EstimateSummary = io::read_json(&ws.path(&est_entry.path))?;
    let shifts: Vec<GroupShift> = io::read_json(&ws.path(&shift_entry.path))?;

    let mut r = String::new();
    let _ = writeln!(r, "{} campaign {:?}, seed {}", manifest.campaign, manifest.name, cfg.seed);
    let _ = writeln!(r, "config sha256 {}", manifest.config_hash);
    let _ = writeln!(r, "{TOOL_VERSION}");
    let _ = writeln!(r);
    let _ = writeln!(r, "loads: {} ({} empty), frames: {}", cal.n_loads, cal.n_empty, est.frames);
    let _ = writeln!(
        r,
        "low-light frames: {} ({}%), low-light loads: {} (policy {})",
        est.low_light_frames,
        fmt6(pct(est.low_light_frames, est.frames)),
        cal.n_low_light_loads,
        match cal.low_light {
            LowLightPolicy::Include => "include",
            LowLightPolicy::Exclude => "exclude",
        }
    );
    let _ = writeln!(r, "overflow loads: {}", cal.n_overflow);
    let _ = writeln!(
        r,
        "total mass: actual {} kg, predicted {} kg ({} transform)",
        fmt6(cal.total_actual_kg),
        fmt6(cal.total_predicted_kg),
        cal.transform.as_str()
    );
    let _ = writeln!(r, "empty-run bias: {:.3} kg", cal.empty_run_bias_kg);

    let _ = writeln!(r);
    let _ = writeln!(r, "density calibration, grouped by {}", cal.group_by);
    let _ = writeln!(r, "  {:<22} {:>7} {:>7} {:>12} {:>12}", "group", "loads", "calib", "rho_id", "rho_sqrt");
    for g in &cal.groups {
        let _ = writeln!(
            r,
            "  {:<22} {:>7} {:>7} {:>12} {:>12}",
            g.group.to_string(),
            g.n_loads,
            g.n_calibration,
            fmt6(g.rho_identity),
            fmt6(g.rho_sqrt)
        );
    }

    let _ = writeln!(r);
    let _ = writeln!(r, "density CV (%), identity vs sqrt transform");
    let _ = writeln!(r, "  {:<22} {:>7} {:>9} {:>9} {:>9} {:>9}", "group", "loads", "cv", "cv_xfm", "cv_seg", "xfm_seg");
    for c in &cal.cv {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), fmt6);
        let _ = writeln!(
            r,
            "  {:<22} {:>7} {:>9} {:>9} {:>9} {:>9}",
            c.group.to_string(),
            c.n_loads,
            fmt6(c.cv_identity),
            fmt6(c.cv_sqrt),
            opt(c.cv_identity_segmented),
            opt(c.cv_sqrt_segmented)
        );
    }
    for g in &cal.cv_skipped {
        let _ = writeln!(r, "  {g}: fewer than 2 calibration loads, skipped");
    }

    let _ = writeln!(r);
    let _ = writeln!(r, "through-origin fit of average mass flow, predicted vs actual");
    for (name, f) in [("identity", cal.fit.identity), ("sqrt", cal.fit.sqrt)] {
        match f {
            Some(f) => {
                let _ = writeln!(
                    r,
                    "  {name:<8} n {:>4}  overflow excluded {:>3}  slope {:>9}  R² {}",
                    f.n,
                    f.excluded,
                    fmt6(f.slope),
                    fmt6(f.r_squared)
                );
            }
            None => {
                let _ = writeln!(r, "  {name:<8} not enough loads to fit");
            }
        }
    }

    let _ = writeln!(r);
    let _ = writeln!(r, "density shifts ({} transform)", cal.transform.as_str());
    for s in &shifts {
        let cps = if s.report.changepoints.is_empty() {
            "none".to_string()
        } else {
            s.report.changepoints.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ")
        };
        let means = s.report.segment_means.iter().map(|m| fmt6(*m)).collect::<Vec<_>>().join(", ");
        let _ = writeln!(r, "  {:<22} changepoints: {cps}; segment means {means}", s.group.to_string());
    }
    if shifts.is_empty() {
        let _ = writeln!(r, "  no group has enough loads");
    }

    let _ = writeln!(r);
    let _ = writeln!(r, "lighting (gate {} lux)", fmt6(est.estimator.lux_gate));
    for l in &est.by_lux {
        let _ = writeln!(
            r,
            "  {:>8} lux  runs {:>4}  frames {:>7}  low-light {:>5}%  mean v_c {}",
            fmt6(l.lux),
            l.runs,
            l.frames,
            fmt6(l.low_light_pct),
            fmt6(l.mean_v_c)
        );
    }

    let mut outputs = BTreeMap::new();
    io::write_bytes(&ws.path("report.txt"), r.as_bytes())?;
    outputs.insert("report".into(), ws.entry("report.txt")?);
    manifest.stages.insert("report".into(), StageEntry { config_hash: manifest.config_hash.clone(), outputs });
    ws.save(&manifest)?;
    Ok(r)
}

fn pct(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * n as f64 / total as f64
    }
}

/// All four stages in order.
pub fn run_all(cfg: &CampaignConfig, out: &Path) -> Result<String> {
    simulate(cfg, out)?;
    estimate(out, &Overrides::default(), None)?;
    calibrate(out, &Overrides::default(), None)?;
    report(out)
}

/// Hash of a file's bytes, as recorded in manifests.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
