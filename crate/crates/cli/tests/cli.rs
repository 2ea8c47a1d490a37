//! Command-line behavior: exit codes, config validation, the alignment
//! report surface, and input immutability.

use std::path::Path;
use std::process::Command;

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_plaquemap")
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "not_a_field": 1 }"#).unwrap();
    let out = Command::new(binary())
        .arg("pipeline")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("not_a_field"), "stderr: {stderr}");
}

#[test]
fn even_cross_section_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(binary())
        .args(["mpr", "--ccta", "missing.json", "--centerline", "missing.csv"])
        .arg("--out")
        .arg(dir.path())
        .args(["--cross-section", "20"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(binary())
        .args(["mpr", "--ccta", "does-not-exist.json", "--centerline", "nope.csv"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

/// Single-reference alignment through the CLI exercises the base-ratio
/// fallback branch; the JSON report carries the ratios and endpoints.
#[test]
fn align_single_reference_uses_base_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("oct.csv");
    let mut text = String::from("# thickness_mm=0.2\n# taxonomy=oct6\nindex,label\n");
    for i in 0..50 {
        text.push_str(&format!("{i},healthy\n"));
    }
    std::fs::write(&labels, text).unwrap();
    let refs = dir.path().join("refs.csv");
    std::fs::write(&refs, "oct_index,mpr_index\n10,25\n").unwrap();
    // The alignment needs only the MPR header, not the voxel payload.
    let header = dir.path().join("mpr.json");
    std::fs::write(
        &header,
        r#"{"dims":[100,21,21],"spacing_mm":[0.5,0.3,0.3],"dtype":"float32","data_file":"mpr.raw"}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let status = Command::new(binary())
        .arg("align")
        .arg("--oct-labels")
        .arg(&labels)
        .arg("--references")
        .arg(&refs)
        .arg("--mpr")
        .arg(&header)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("alignment.json")).unwrap())
            .unwrap();
    assert_eq!(report["gamma_base"], 0.4);
    assert_eq!(report["map"]["gammas"]["gammas"], serde_json::json!([0.4, 0.4]));
    assert_eq!(report["segment_start"], 21);
    assert_eq!(report["segment_end"], 41);
    // 20 aligned slices.
    let strip = std::fs::read_to_string(out.join("mpr_labels.csv")).unwrap();
    assert_eq!(strip.lines().filter(|l| l.contains(",healthy")).count(), 20);
}

fn tree_snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for e in entries {
            if e.is_dir() {
                walk(root, &e, out);
            } else {
                out.push((
                    e.strip_prefix(root).unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&e).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

/// Subcommands never mutate their inputs, and the eval summary carries the
/// documented column layout.
#[test]
fn inputs_untouched_and_summary_layout() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    let status = Command::new(binary())
        .arg("synth")
        .arg("--out")
        .arg(&syn)
        .args(["--patients", "2", "--seed", "41"])
        .status()
        .unwrap();
    assert!(status.success());
    let before = tree_snapshot(&syn.join("phantoms"));

    let work = dir.path().join("work/p000");
    let status = Command::new(binary())
        .arg("mpr")
        .arg("--ccta")
        .arg(syn.join("phantoms/p000/ccta.json"))
        .arg("--centerline")
        .arg(syn.join("phantoms/p000/centerline.csv"))
        .arg("--out")
        .arg(&work)
        .status()
        .unwrap();
    assert!(status.success());
    let status = Command::new(binary())
        .arg("align")
        .arg("--oct-labels")
        .arg(syn.join("phantoms/p000/oct_labels.csv"))
        .arg("--references")
        .arg(syn.join("phantoms/p000/references.csv"))
        .arg("--mpr")
        .arg(work.join("mpr.json"))
        .arg("--out")
        .arg(&work)
        .status()
        .unwrap();
    assert!(status.success());

    let after = tree_snapshot(&syn.join("phantoms"));
    assert_eq!(before, after, "a subcommand mutated its inputs");

    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(work.join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["subcommand"], "align");
    assert!(manifest["inputs"].as_object().unwrap().len() >= 3);
}
