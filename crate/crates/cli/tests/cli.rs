use std::path::Path;
use std::process::{Command, Output};

fn anrlab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anrlab"))
        .args(args)
        .env("ANRLAB_OUT", out)
        .output()
        .expect("binary runs")
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn zero_tokens_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = anrlab(&["fit-image", "--model", "anr", "--tokens", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("N >= 1"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"steps": 9, "pe_sigma": 4.0, "seed": 5}"#).unwrap();
    let out = anrlab(
        &["fit-image", "--config", cfg.to_str().unwrap(), "--steps", "3", "--m", "0", "--clamp-target", "v", "--dry-run"],
        dir.path(),
    );
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["steps"], 3);
    assert_eq!(v["pe_sigma"], 4.0);
    assert_eq!(v["seed"], 5);
    assert_eq!(v["m"], 0.0);
    assert_eq!(v["clamp_target"], "v");
    assert_eq!(v["out_dir"], dir.path().to_str().unwrap());
}

#[test]
fn gradcheck_passes_and_writes_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let out = anrlab(&["gradcheck"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let bundle = dir.path().join("gradcheck-0");
    let csv = std::fs::read_to_string(bundle.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("op,max_rel_err"));
    assert!(csv.lines().any(|l| l.starts_with("localize,")));
    let s = summary(&bundle);
    assert_eq!(s["format_version"], "anrlab-bundle-1");
    assert_eq!(s["seed"], 0);
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(bundle.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["experiment"], "gradcheck");
}

#[test]
fn super_resolution_output_is_twice_the_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = anrlab(&["fit-image", "--steps", "3", "--sr", "2", "--model", "anr"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = anrlab::image::load_image(dir.path().join("fit-image-0/recon_anr_0_sr2.ppm")).unwrap();
    assert_eq!((img.width, img.height), (64, 64));
}

#[test]
fn image_file_is_cropped_to_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("in.pgm");
    let data = (0..40 * 48).map(|i| (i % 256) as f64 / 255.0).collect();
    anrlab::image::ImageBuffer::new(48, 40, 1, data).unwrap().save(&path).unwrap();
    let out = anrlab(
        &["fit-image", "--image", path.to_str().unwrap(), "--size", "16", "--steps", "2", "--model", "anr"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = anrlab::image::load_image(dir.path().join("fit-image-0/target.ppm")).unwrap();
    assert_eq!((img.width, img.height, img.channels), (16, 16, 1));
}

#[test]
fn seed_changes_fit1d_targets() {
    let dir = tempfile::tempdir().unwrap();
    for seed in ["1", "2"] {
        assert!(anrlab(&["fit1d", "--steps", "2", "--seed", seed, "--mlp-width", "16"], dir.path())
            .status
            .code()
            .is_some());
    }
    let a = summary(&dir.path().join("fit1d-1"));
    let b = summary(&dir.path().join("fit1d-2"));
    assert_ne!(a["results"]["target_bins"], b["results"]["target_bins"]);
    assert_eq!(a["seed"], 1);
    let spectrum = std::fs::read_to_string(dir.path().join("fit1d-1/spectrum.csv")).unwrap();
    assert_eq!(spectrum.lines().count(), 1 + 2 * 400);
}

#[test]
fn failing_check_gives_exit_code_one() {
    // without training both twins are the same network, so the strict comparison fails
    let dir = tempfile::tempdir().unwrap();
    let out = anrlab(&["fit1d", "--steps", "0", "--mlp-width", "8"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL]"));
}

#[test]
fn hypernet_demo_runs_both_architectures() {
    let dir = tempfile::tempdir().unwrap();
    for arch in ["encoder-decoder", "encoder-only"] {
        let out = anrlab(
            &["hypernet-demo", "--synthetic", "64", "--size", "16", "--steps", "2", "--arch", arch],
            dir.path(),
        );
        assert!(out.status.code().is_some());
        let s = summary(&dir.path().join("hypernet-demo-0"));
        assert_eq!(s["checks"][0]["passed"], true, "{arch}");
        let cfg: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("hypernet-demo-0/config.json")).unwrap())
                .unwrap();
        assert_eq!(cfg["arch"], arch);
    }
}

#[test]
fn seeds_fan_out_into_separate_bundles() {
    let dir = tempfile::tempdir().unwrap();
    anrlab(&["fit1d", "--steps", "1", "--mlp-width", "8", "--seed", "4", "--seeds", "2"], dir.path());
    assert!(dir.path().join("fit1d-4/metrics.csv").exists());
    assert!(dir.path().join("fit1d-5/metrics.csv").exists());
}
