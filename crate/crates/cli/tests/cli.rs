use std::path::Path;
use std::process::{Command, Output};

use histotex::fixtures::{procedural_texture, two_region_fixture};
use histotex::imageio::{save_mask, save_rgb};

fn histotex(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_histotex"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_source(dir: &Path) {
    save_rgb(&procedural_texture::<f64>(48, 48, 4), dir.join("src.png")).unwrap();
}

#[test]
fn texture_without_source_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = histotex(dir.path(), &["texture", "--out", "o.png"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("--source"));
}

#[test]
fn one_mask_without_the_other_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_source(dir.path());
    let o = histotex(
        dir.path(),
        &["transfer", "--content", "src.png", "--style", "src.png", "--style-mask", "src.png", "--out", "o.png"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn missing_input_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = histotex(dir.path(), &["texture", "--source", "absent.png", "--out", "o.png"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_source(dir.path());
    std::fs::write(dir.path().join("c.json"), r#"{"iterationz": 3}"#).unwrap();
    let o = histotex(dir.path(), &["texture", "--source", "src.png", "--config", "c.json", "--out", "o.png"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn output_may_not_overwrite_an_input() {
    let dir = tempfile::tempdir().unwrap();
    write_source(dir.path());
    let before = std::fs::read(dir.path().join("src.png")).unwrap();
    let o = histotex(dir.path(), &["texture", "--source", "src.png", "--iterations", "2", "--out", "src.png"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("src.png")).unwrap(), before);
}

#[test]
fn manifest_rerun_reproduces_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_source(d);
    let o = histotex(
        d,
        &["texture", "--source", "src.png", "--iterations", "20", "--pyramid-levels", "2", "--seed", "4", "--report", "r.jsonl", "--out", "a.png"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = std::fs::read_to_string(d.join("r.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 20);
    let o = histotex(d, &["texture", "--config", "a.manifest.json", "--out", "b.png"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(d.join("a.png")).unwrap(), std::fs::read(d.join("b.png")).unwrap());

    // a changed input invalidates the manifest
    save_rgb(&procedural_texture::<f64>(48, 48, 5), d.join("src.png")).unwrap();
    let o = histotex(d, &["texture", "--config", "a.manifest.json", "--out", "c.png"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn masked_transfer_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (image, mask) = two_region_fixture::<f64>(48, 48);
    save_rgb(&image, d.join("img.png")).unwrap();
    save_mask(&mask, &[0, 255], d.join("mask.png")).unwrap();
    let o = histotex(
        d,
        &[
            "transfer", "--content", "img.png", "--style", "img.png", "--style-mask", "mask.png", "--out-mask",
            "mask.png", "--iterations", "6", "--pyramid-levels", "2", "--out", "o.png",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = std::fs::read_to_string(d.join("o.manifest.json")).unwrap();
    assert!(manifest.contains("style_mask") && manifest.contains("out_mask"));
}

#[test]
fn gram_lab_reports_every_instance() {
    let dir = tempfile::tempdir().unwrap();
    let o = histotex(dir.path(), &["gram-lab", "--dims", "1,2", "--instances", "5", "--out", "r.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["instances"].as_array().unwrap().len(), 10);
    assert_eq!(report["summary"].as_array().unwrap().len(), 2);
}

#[test]
fn gram_lab_example_and_long_gate() {
    let dir = tempfile::tempdir().unwrap();
    let o = histotex(dir.path(), &["gram-lab", "--fig3"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("mean 0.500000000000") && out.contains("equal normalized Gram: true"), "{out}");
    let o = histotex(dir.path(), &["gram-lab", "--dims", "32"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn selfcheck_passes_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = histotex(dir.path(), &["selfcheck", "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
    let o = histotex(dir.path(), &["selfcheck", "--inject-fault", "gram-sign"]);
    assert_eq!(code(&o), 5);
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_histotex"))
        .current_dir(dir.path())
        .env("HISTOTEX_THREADS", "zero")
        .args(["gram-lab", "--fig3"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}
