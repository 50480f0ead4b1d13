#![allow(dead_code)]

use std::path::{Path, PathBuf};

use caneflow::config::CampaignConfig;

/// The lab preset cut down to a few short runs: 12 loaded, 4 empty.
pub fn small_lab_toml(seed: u64) -> String {
    let preset = include_str!("../../presets/lab.toml");
    let lab = preset.find("[lab]").unwrap();
    format!(
        r#"{}[lab]
runs = 16
empty_runs = 4
lux_levels = [700.0, 1900.0, 3100.0, 4300.0, 5500.0, 6700.0]
speed_range = [1.0, 2.2]
duration_range = [20.0, 30.0]
mass_range = [60.0, 90.0]
empty_duration = 20.0
frame_rate = 7.5
overflow_enabled = true

[lab.group]
region = "lab"
crop = "bamboo"
"#,
        preset[..lab].replace("seed = 20140615", &format!("seed = {seed}"))
    )
}

pub fn small_lab(seed: u64) -> CampaignConfig {
    CampaignConfig::parse(&small_lab_toml(seed), Path::new("small-lab.toml")).unwrap()
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Relative path and bytes of every report file under `root`, sorted.
pub fn report_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|s| s.to_str()), Some("csv" | "json" | "jsonl" | "txt")) {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
