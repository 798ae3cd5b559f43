use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[corpus]
population = 6
[corpus.train]
n_scenarios = 4
[corpus.val]
n_scenarios = 3
[corpus.face]
n_scenarios = 4
[corpus.face_held_out]
n_scenarios = 2
[embedder]
steps = 5
[face]
steps = 5
pretrain_steps = 5
[asd]
steps = 5
[ablation]
runs = 1
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_scan-asd"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap()
}

#[test]
fn gen_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(dir.path(), &["gen", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["train", "val", "face", "face-held-out"] {
        let rel = format!("corpus/{name}.corpus");
        assert_eq!(fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap(), "{rel}");
    }
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let o = run(dir.path(), &["gen", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    let o = run(dir.path(), &["eval", "--arm", "baseline", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("asd-baseline.ckpt"));
    let o = run(dir.path(), &["report", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ablation.json"));
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for stage in [
        vec!["gen"],
        vec!["train-embedder"],
        vec!["train-face"],
        vec!["enroll"],
        vec!["train-asd", "--arm", "scan-oracle"],
        vec!["eval", "--arm", "scan-oracle"],
    ] {
        let mut args = stage.clone();
        args.extend(["--seed", "2", "--out", out]);
        let o = run(dir.path(), &args);
        assert_eq!(o.status.code(), Some(0), "{stage:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let root = Path::new(out);
    assert!(root.join("predictions/scan-oracle.tsv").exists());
    let manifest = fs::read_to_string(root.join("manifest.json")).unwrap();
    assert!(manifest.contains("models/asd-scan-oracle.ckpt"));

    let o = run(dir.path(), &["eval", "--arm", "scan-oracle", "--seed", "3", "--out", out]);
    assert_eq!(o.status.code(), Some(2), "artifacts from another seed must be rejected");
}

#[test]
fn ablate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let o = run(dir.path(), &["ablate", "--seed", "1", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(dir.path(), &["report", "--seed", "1", "--out", out]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("AP (=mAP)"));
    for row in ["baseline ", "hypothesised", "ground truth"] {
        assert!(text.contains(row), "missing row {row}");
    }
    let json = fs::read_to_string(Path::new(out).join("reports/ablation.json")).unwrap();
    assert!(json.contains("config_hash"));
}
