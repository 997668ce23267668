//! Command-line behaviour of the `darkflash` binary.

use std::path::Path;
use std::process::{Command, Output};

use darkflash::burst::{FrameTag, SessionManifest};
use darkflash::formats::{read_pfm, write_pfm};
use darkflash::image::LinearImage;

fn darkflash(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_darkflash")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn texture(w: usize, h: usize) -> LinearImage {
    LinearImage::from_fn(w, h, 3, |x, y, c| (0.3 + 0.2 * ((x * 7 + y * 3 + c) % 11) as f64 / 11.0) as f32)
}

#[test]
fn evaluate_self_comparison_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.pfm");
    write_pfm(&img, &texture(32, 24)).unwrap();
    let out = darkflash(&["evaluate", "--test", path(&img), "--ref", path(&img)]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["psnr_db"], "inf");
    assert_eq!(report["ssim"], 1.0);
}

#[test]
fn missing_scene_exits_2_and_names_the_path() {
    let out = darkflash(&["meter", "--scene", "no/such/scene.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/scene.json"));
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(darkflash(&["demo", "--bogus"]).status.code(), Some(1));
    assert_eq!(darkflash(&["--threads", "0", "evaluate", "--test", "a", "--ref", "b"]).status.code(), Some(1));
    assert_eq!(darkflash(&["capture", "--scene", "s", "--metering", "m", "--out", "o", "--variant", "4"]).status.code(), Some(1));
    let help = darkflash(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("demo"));
}

#[test]
fn unreadable_grid_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let rgb = dir.path().join("rgb.pfm");
    write_pfm(&rgb, &texture(16, 16)).unwrap();
    let out = darkflash(&[
        "fuse", "--rgb", path(&rgb), "--flash", path(&rgb), "--grid", "missing_grid.json", "--out",
        path(&dir.path().join("o.pfm")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn subcommands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scene = d.join("scene/scene.json");
    let metering = d.join("metering.json");
    let burst = d.join("burst");
    let run = |args: &[&str]| {
        let out = darkflash(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["simulate", "--out", path(&scene), "--width", "96", "--height", "96", "--noiseless"]);
    run(&["meter", "--scene", path(&scene), "--out", path(&metering), "--noiseless"]);
    run(&[
        "capture", "--scene", path(&scene), "--metering", path(&metering), "--out", path(&burst), "--variant", "5",
        "--flash", "NIR",
    ]);
    let manifest = SessionManifest::load(&burst).unwrap();
    assert!(manifest.long_exposure(darkflash::sim::CameraId::Cam1).is_some());
    let t = manifest.frames.iter().find(|e| e.spec.tag == FrameTag::Burst1Off).unwrap().spec.t_index;
    let flow = d.join("flow.pfm");
    run(&["register", "--burst", path(&burst), "--t", &t.to_string(), "--out", path(&flow), "--tile", "8"]);
    let f = read_pfm(&flow).unwrap();
    assert_eq!((f.width(), f.height(), f.channels()), (96, 96, 3));

    let rgb = d.join("rgb.pfm");
    let fused = d.join("fused.pfm");
    write_pfm(&rgb, &texture(96, 96)).unwrap();
    run(&["fuse", "--rgb", path(&rgb), "--flash", path(&rgb), "--out", path(&fused)]);
    let report = d.join("report.json");
    run(&["evaluate", "--test", path(&fused), "--ref", path(&rgb), "--out", path(&report)]);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(r["ssim"].as_f64().unwrap() > 0.9);
}

#[test]
fn demo_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = darkflash(&["demo", "--seed", "3", "--threads", "2", "--out", path(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["fused.pfm", "flow.pfm", "report.json", "metering.json", "burst/manifest.json", "scene/scene.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(report["fused"]["psnr_db"].as_f64().unwrap() > report["noisy"]["psnr_db"].as_f64().unwrap());
}
