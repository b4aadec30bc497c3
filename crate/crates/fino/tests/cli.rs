//! Black-box checks of the `fino` binary: exit codes and the
//! documented behavior of the cheap subcommands.

use std::path::Path;
use std::process::Command;

fn fino() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fino"))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = fino().args(["roundtrip", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    let out = fino().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn roundtrip_audit_passes_and_reports_error() {
    let out = fino()
        .args(["roundtrip", "--blocks", "2", "--layers", "4", "--seed", "7"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("max abs error"), "{text}");
}

#[test]
fn denoise_with_missing_checkpoint_is_a_runtime_error() {
    let out = fino()
        .args([
            "denoise",
            "--checkpoint",
            "/nonexistent.fino",
            "--input",
            "/nonexistent.ppm",
            "--output",
            "/tmp/never.ppm",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

/// noisegen writes counterparts, and eval on identical clean/denoised
/// directories reports infinite PSNR and SSIM 1.
#[test]
fn noisegen_then_eval_identical_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    std::fs::create_dir(&clean).unwrap();
    for (i, img) in fino::data::make_toy_dataset(2, 16, 1).iter().enumerate() {
        fino::data::save_image(img, &clean.join(format!("img{i}.pgm"))).unwrap();
    }

    let noisy = dir.path().join("noisy");
    let out = fino()
        .args(["noisegen", "--sigma", "25", "--seed", "3"])
        .arg("--input")
        .arg(&clean)
        .arg("--output")
        .arg(&noisy)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert_eq!(std::fs::read_dir(&noisy).unwrap().count(), 2);
    assert_ne!(
        std::fs::read(clean.join("img0.pgm")).unwrap(),
        std::fs::read(noisy.join("img0.pgm")).unwrap()
    );

    let report = run_eval(&clean, &clean);
    let mean = report.lines().last().unwrap();
    assert!(mean.starts_with("mean,inf,inf,1.000000"), "{report}");

    // noisy-vs-clean must report a finite, lower quality
    let report = run_eval(&clean, &noisy);
    assert!(!report.lines().last().unwrap().contains("inf"), "{report}");
}

fn run_eval(clean: &Path, denoised: &Path) -> String {
    let out = fino()
        .arg("eval")
        .arg("--clean-dir")
        .arg(clean)
        .arg("--denoised-dir")
        .arg(denoised)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    String::from_utf8(out.stdout).unwrap()
}
