use std::fs;
use std::path::Path;
use std::process::Command;

use mxvis::data::MultiplexImage;
use mxvis::io::{read_imxp, write_imxp};
use mxvis::network::NetworkConfig;
use mxvis::synth::CohortSpec;
use mxvis::trainer::TrainConfig;

fn mxvis(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mxvis")).args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

fn ok(args: &[&str]) {
    let (code, text) = mxvis(args);
    assert_eq!(code, 0, "mxvis {args:?} failed:\n{text}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_cohort(dir: &Path, seed: &str) {
    let spec = CohortSpec { images_per_panel: 2, height: 32, width: 32, ..CohortSpec::default() };
    let spec_path = dir.join("spec.toml");
    fs::write(&spec_path, spec.to_toml().unwrap()).unwrap();
    ok(&["synth", "--spec", p(&spec_path), "--out", p(&dir.join("cohort")), "--seed", seed]);
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        out.push((entry.strip_prefix(dir).unwrap().display().to_string(), fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    fs::read_dir(dir)
        .unwrap()
        .flat_map(|e| {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(&path)
            } else {
                vec![path]
            }
        })
        .collect()
}

#[test]
fn synth_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    small_cohort(a.path(), "4");
    small_cohort(b.path(), "4");
    small_cohort(c.path(), "5");
    let ta = tree_bytes(&a.path().join("cohort"));
    assert_eq!(ta.len(), 1 + 3 * 4);
    assert_eq!(ta, tree_bytes(&b.path().join("cohort")));
    assert_ne!(ta, tree_bytes(&c.path().join("cohort")));
}

#[test]
fn train_stain_and_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_cohort(d, "1");
    ok(&["preprocess", "--in", p(&d.join("cohort")), "--out", p(&d.join("pre"))]);
    assert_eq!(walk(&d.join("pre/images")).len(), 4);

    let cfg = TrainConfig { epochs: 1, warmup_epochs: 0, subimage: 32, net: NetworkConfig::micro(), ..TrainConfig::desk() };
    let cfg_path = d.join("train.toml");
    fs::write(&cfg_path, toml::to_string(&cfg).unwrap()).unwrap();
    let ckpt = d.join("model.ckpt");
    let metrics = d.join("metrics.csv");
    ok(&[
        "train", "--data", p(&d.join("cohort")), "--config", p(&cfg_path), "--out", p(&ckpt), "--metrics", p(&metrics),
    ]);
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 2);

    // five input channels in, two targets out: means then log-variances
    let src = read_imxp(&walk(&d.join("cohort/images"))[0]).unwrap();
    let five: Vec<usize> = (0..5).collect();
    let img = MultiplexImage::new(five.iter().map(|&i| src.markers[i].clone()).collect(), src.data.select(&five).unwrap()).unwrap();
    let img_path = d.join("five.imxp");
    write_imxp(&img_path, &img).unwrap();
    let stained = d.join("stained.imxp");
    ok(&["stain", "--ckpt", p(&ckpt), "--image", p(&img_path), "--targets", "M09,M10", "--out", p(&stained)]);
    let out = read_imxp(&stained).unwrap();
    assert_eq!(out.data.dims(), &[4, 32, 32]);
    assert_eq!(out.markers, ["M09:mu", "M10:mu", "M09:logvar", "M10:logvar"]);
    assert!(out.data.all_finite());

    let report = d.join("report");
    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&d.join("cohort")), "--report", p(&report), "--loo"]);
    let loo = fs::read_to_string(report.join("loo.csv")).unwrap();
    assert_eq!(loo.lines().count(), 1 + 4 * 8);
    assert!(!report.join("calibration.csv").exists());

    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&d.join("cohort")), "--report", p(&report), "--calibration"]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("summary.json")).unwrap()).unwrap();
    assert!(summary["calibration"]["coverage"].is_f64(), "{summary}");
    assert!(summary.get("loo").is_none());

    // unknown markers are a runtime error, not a panic
    let (code, text) = mxvis(&["stain", "--ckpt", p(&ckpt), "--image", p(&img_path), "--targets", "XYZ", "--out", p(&stained)]);
    assert_eq!(code, 1, "{text}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(mxvis(&["synth", "--bogus"]).0, 2);
    assert_eq!(mxvis(&["stain", "--ckpt", "x"]).0, 2);
    assert_eq!(mxvis(&[]).0, 2);
}

#[test]
fn malformed_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_cohort(d, "2");
    let images = walk(&d.join("cohort/images"));
    let bytes = fs::read(&images[0]).unwrap();
    fs::write(&images[0], &bytes[..bytes.len() - 3]).unwrap();
    let (code, text) = mxvis(&["preprocess", "--in", p(&d.join("cohort")), "--out", p(&d.join("pre"))]);
    assert_eq!(code, 1, "{text}");
    assert!(text.starts_with("error:"), "{text}");

    fs::write(&images[0], b"IMXP\x01garbage").unwrap();
    assert!(read_imxp(&images[0]).is_err());

    let ckpt = d.join("bad.ckpt");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let (code, text) = mxvis(&["eval", "--ckpt", p(&ckpt), "--data", p(&d.join("cohort")), "--report", p(&d.join("r"))]);
    assert_eq!(code, 1, "{text}");
}
