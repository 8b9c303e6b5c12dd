use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn contourlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contourlab"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn write_track(dir: &Path, id: &str, frames: usize) {
    let mut csv = String::from("time,frequency,confidence\n");
    for i in 0..frames {
        let f = 220.0 * (1.0 + 0.01 * (i as f64 * 0.3).sin());
        csv.push_str(&format!("{:.3},{f:.4},0.9\n", i as f64 * 0.012));
    }
    fs::write(dir.join(format!("{id}.csv")), csv).unwrap();
}

fn write_manifest(dir: &Path, ids: &[&str]) {
    let recs: Vec<String> = ids
        .iter()
        .map(|id| format!(r#"{{"id": "{id}", "path": "{id}.csv", "labels": {{"singer": "s"}}}}"#))
        .collect();
    let text = format!(r#"{{"split": "train", "recordings": [{}]}}"#, recs.join(","));
    fs::write(dir.join("m.json"), text).unwrap();
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = contourlab(
            &["synth", "--out", out, "--seed", "7", "--recordings", "40", "--frames", "3000"],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    assert_eq!(a.len(), 42);
    assert!(a == b);
}

#[test]
fn fixture_of_250_frames_segments_into_three_contours() {
    let tmp = tempfile::tempdir().unwrap();
    write_track(tmp.path(), "rec", 250);
    write_manifest(tmp.path(), &["rec"]);
    let o = contourlab(&["segment", "--manifest", "m.json", "--out", "contours.json"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("contours.json")).unwrap()).unwrap();
    let lens: Vec<u64> = doc
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["valid_length"].as_u64().unwrap())
        .collect();
    assert_eq!(lens, [100, 100, 50]);
    assert!(tmp.path().join("contours.json.config.toml").exists());
}

#[test]
fn contiguous_training_on_one_recording_is_infeasible() {
    let tmp = tempfile::tempdir().unwrap();
    write_track(tmp.path(), "solo", 1000);
    write_manifest(tmp.path(), &["solo"]);
    let o = contourlab(
        &["train", "--task", "contiguous", "--manifest", "m.json", "--out", "run", "--epochs", "30"],
        tmp.path(),
    );
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    let last = err.lines().last().unwrap();
    assert!(last.starts_with("error: ") && last.contains("infeasible corpus"), "{err}");
    assert!(!tmp.path().join("run").join("model.ckpt.json").exists());
}

#[test]
fn bad_input_yields_one_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = contourlab(&["features", "--contours", "missing.json", "--out", "f.csv"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: "));

    fs::write(tmp.path().join("c.toml"), "[train]\nepochs = 3\n").unwrap();
    let o = contourlab(&["--config", "c.toml", "gradcheck", "--seeds", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("c.toml"));
}

#[test]
fn every_subcommand_documents_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let sub = ["synth", "segment", "pairs", "train", "embed", "features", "combine", "eval", "report", "gradcheck"];
    for s in sub {
        let o = contourlab(&[s, "--help"], tmp.path());
        assert!(o.status.success());
        let help = String::from_utf8_lossy(&o.stdout).into_owned();
        let usage = help.lines().find(|l| l.starts_with("Usage:")).unwrap();
        let mut entries: Vec<String> = Vec::new();
        for line in help.lines().skip_while(|l| !l.starts_with("Options:")).skip(1) {
            let t = line.trim_start();
            if t.starts_with("--") || t.starts_with("-h") {
                entries.push(t.to_string());
            } else if let Some(last) = entries.last_mut() {
                last.push(' ');
                last.push_str(t);
            }
        }
        for entry in entries.iter().filter(|e| e.starts_with("--")) {
            let flag = entry.split_whitespace().next().unwrap();
            if usage.contains(&format!("{flag} <")) {
                continue;
            }
            assert!(entry.contains("[default:"), "{s}: {entry}");
        }
    }
}
