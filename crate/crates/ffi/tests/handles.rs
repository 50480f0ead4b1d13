use std::ffi::CStr;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use caneflow_ffi::*;

fn flat_bed(width: f64, length: f64, pitch: f64, z: f64) -> Vec<f64> {
    let mut xyz = Vec::new();
    let (nx, ny) = ((width / pitch) as usize, (length / pitch) as usize);
    for j in 0..ny {
        for i in 0..nx {
            xyz.extend([(i as f64 + 0.5) * pitch, (j as f64 + 0.5) * pitch, z]);
        }
    }
    xyz
}

#[test]
fn estimate_and_accumulate_through_handles() {
    let mut est = ptr::null_mut();
    assert_eq!(unsafe { cf_estimator_new(0.5, 0.25, &mut est) }, CfStatus::Ok);
    let xyz = flat_bed(0.5, 0.25, 0.01, 0.1);
    let mut e = CfVolumeEstimate { timestamp: 0.0, v_c: 0.0, quality: CfQuality::Empty };
    assert_eq!(unsafe { cf_estimator_estimate(est, 0.0, 6700.0, xyz.as_ptr(), xyz.len() / 3, &mut e) }, CfStatus::Ok);
    assert_eq!(e.quality, CfQuality::Ok);
    // 0.5 m × 0.1 m cross-section per meter of elevator.
    assert!((e.v_c - 0.05).abs() < 1e-9, "{}", e.v_c);

    let mut dark = e;
    assert_eq!(unsafe { cf_estimator_estimate(est, 0.0, 700.0, xyz.as_ptr(), xyz.len() / 3, &mut dark) }, CfStatus::Ok);
    assert_eq!(dark.quality, CfQuality::LowLight);
    assert_eq!(unsafe { cf_estimator_set_percentile(est, 150.0) }, CfStatus::Config);
    unsafe { cf_estimator_free(est) };

    let mut flow = ptr::null_mut();
    assert_eq!(unsafe { cf_flow_new(400.0, CfTransform::Identity, CfLowLight::Include, 10.0, &mut flow) }, CfStatus::Ok);
    // Default sprocket: 0.05 m per pulse, so 40 pulses/s is 2 m/s.
    for k in 0..=20 {
        assert_eq!(unsafe { cf_flow_push_pulse(flow, k as f64 * 0.1, 4 * k) }, CfStatus::Ok);
    }
    for k in 0..10 {
        let frame = CfVolumeEstimate { timestamp: k as f64 * 0.1, v_c: 0.05, quality: CfQuality::Ok };
        assert_eq!(unsafe { cf_flow_push_estimate(flow, frame) }, CfStatus::Ok);
    }
    let mut t = CfFlowTotals::default();
    assert_eq!(unsafe { cf_flow_totals(flow, &mut t) }, CfStatus::Ok);
    assert_eq!(t.n_frames, 10);
    assert!((t.volume - 0.1).abs() < 1e-12, "{}", t.volume);
    assert!((t.mass_kg - 40.0).abs() < 1e-9);
    assert!((t.mass_flow_kg_per_s - 40.0).abs() < 1e-9);
    unsafe { cf_flow_free(flow) };
}

#[test]
fn flow_errors_carry_messages() {
    let mut flow = ptr::null_mut();
    assert_eq!(unsafe { cf_flow_new(0.0, CfTransform::Sqrt, CfLowLight::Include, 7.5, &mut flow) }, CfStatus::Domain);
    assert_eq!(unsafe { cf_flow_new(1.0, CfTransform::Sqrt, CfLowLight::Include, 7.5, &mut flow) }, CfStatus::Ok);
    let mut t = CfFlowTotals::default();
    assert_eq!(unsafe { cf_flow_totals(flow, &mut t) }, CfStatus::InsufficientData);
    let msg = unsafe { CStr::from_ptr(cf_last_error_message()) }.to_str().unwrap().to_string();
    assert!(msg.contains("pulse"), "{msg}");
    unsafe { cf_flow_free(flow) };
    unsafe { cf_flow_free(ptr::null_mut()) };
}

#[test]
fn calibration_helpers() {
    let v = [10.0, 12.0, 14.0];
    let mut cv = 0.0;
    assert_eq!(unsafe { cf_cv(v.as_ptr(), v.len(), &mut cv) }, CfStatus::Ok);
    assert!((cv - 100.0 * 2.0 / 12.0).abs() < 1e-12);
    assert_eq!(unsafe { cf_cv(v.as_ptr(), 1, &mut cv) }, CfStatus::InsufficientData);

    let x = [1.0, 2.0, 3.0];
    let y = [2.0, 4.0, 6.0];
    let mut fit = CfFit::default();
    assert_eq!(unsafe { cf_fit_through_origin(x.as_ptr(), y.as_ptr(), 3, &mut fit) }, CfStatus::Ok);
    assert!((fit.slope - 2.0).abs() < 1e-12 && (fit.r_squared - 1.0).abs() < 1e-12 && fit.n == 3);
}

/// Compiles a C caller against the generated header and the static library.
#[test]
fn c_program_links_against_the_header() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    // `cargo test` builds only the rlib; make sure the archive is current.
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let built = Command::new(env!("CARGO"))
        .args(["build", "--quiet", "--lib", "-p", "caneflow-ffi"])
        .current_dir(&dir)
        .status()
        .unwrap();
    assert!(built.success(), "building the static library failed");
    let lib = dir.join("../../target/debug/libcaneflow_ffi.a");
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "caneflow.h"
int main(void) {
    double y = 0.0;
    if (cf_point_yield(30.0, 1.5, 1.8, &y) != CF_STATUS_OK) return 1;
    if (cf_point_yield(30.0, -1.0, 1.8, &y) != CF_STATUS_DOMAIN) return 2;
    if (cf_last_error_message() == NULL) return 3;
    CfConfig *cfg = NULL;
    if (cf_config_preset("lab", &cfg) != CF_STATUS_OK) return 4;
    char hash[65];
    if (cf_config_hash(cfg, hash, sizeof hash) != CF_STATUS_OK) return 5;
    cf_config_free(cfg);
    printf("%.6f %s\n", y, hash);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = tmp.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("11.111111 "), "{text}");
}
