use std::path::Path;
use std::process::Command;

fn viewstab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_viewstab")).args(args).output().unwrap()
}

fn synth(dir: &Path) {
    let out = viewstab(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--scenes",
        "6",
        "--views",
        "36",
        "--dims",
        "16",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_then_run_all() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    for f in ["manifest.json", "ground_truth.csv", "reference.csv", "banks/feat00.json", "banks/feat00.vseb"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let out_dir = tmp.path().join("out");
    let out = viewstab(&[
        "run-all",
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--labels-bank",
        data.join("banks").to_str().unwrap(),
        "--reference-annotations",
        data.join("reference.csv").to_str().unwrap(),
        "--percentile",
        "94",
        "--k",
        "1,2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("summary.json").is_file());
    assert!(out_dir.join("feat02/zeroshot.csv").is_file());
}

#[test]
fn score_only_writes_instability() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let out_dir = tmp.path().join("out");
    let out = viewstab(&[
        "score",
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--featurizer",
        "feat01",
    ]);
    assert!(out.status.success());
    assert!(out_dir.join("feat01/instability.csv").is_file());
    assert!(!out_dir.join("feat00").exists());
    assert!(!out_dir.join("feat01/classifier.csv").exists());
}

#[test]
fn bad_input_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.json");
    let out = viewstab(&["score", "--manifest", missing.to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.json"));

    let data = tmp.path().join("data");
    synth(&data);
    let m = data.join("manifest.json");
    let out = viewstab(&["score", "--manifest", m.to_str().unwrap(), "--out", "x", "--percentile", "0"]);
    assert_eq!(out.status.code(), Some(2));

    let out = viewstab(&["zeroshot", "--manifest", m.to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("labels-bank"));
}
