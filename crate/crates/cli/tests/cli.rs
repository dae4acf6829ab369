use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hcvc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcvc"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("HCVC_VLM_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
seed = 1

[model]
queries = 4
layers = 1
c_d = 16
c_i = 16
heads = 2
d_ff = 16

[cue_encoder]
d_text = 8
buckets = 64
max_tokens = 12
layers = 1
heads = 2
d_ff = 8

[optimizer]
epochs = 2
batch_size = 2
lr = 1e-3

[data]
kind = "synthetic"
images = 4
"#;

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = hcvc(&["train", "-c", "tiny.toml", "--out", "run", "--preset", "one_tower", "--eval"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("Full"));
    for f in ["run/loss_curve.csv", "run/checkpoint.bin", "run/manifest.json", "run/eval/results.json", "run/eval/pr_curves.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(dir.path().join("run/manifest.json")).unwrap();
    assert!(manifest.contains("\"one_tower\""));

    let o = hcvc(&["eval", "-c", "tiny.toml", "--checkpoint", "run/checkpoint.bin", "--out", "again"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(dir.path().join("run/eval/results.json")).unwrap(),
        fs::read(dir.path().join("again/results.json")).unwrap()
    );
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();

    let o = hcvc(&["train", "-c", "tiny.toml", "--set", "optimizer.lr=-1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = hcvc(&["train", "-c", "tiny.toml", "--set", "bogus=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = hcvc(&["train", "-c", "tiny.toml", "--cue-mode", "cache", "--cue-cache", "empty.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no cues for 4 image(s)"));
    let o = hcvc(&["cues", "-c", "tiny.toml", "--cue-mode", "cache", "--cue-cache", "empty.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(3));

    let o = hcvc(&["cues", "-c", "tiny.toml", "--cue-cache", "full.jsonl"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("fixture 4"));
    let o = hcvc(&["cues", "-c", "tiny.toml", "--cue-mode", "cache", "--cue-cache", "full.jsonl"], dir.path());
    assert!(stdout(&o).contains("cache 4"), "{}", stdout(&o));

    let o = hcvc(&["cues", "-c", "tiny.toml", "--cue-mode", "live"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    fs::write(dir.path().join("bad.bin"), b"junk").unwrap();
    let o = hcvc(&["eval", "-c", "tiny.toml", "--checkpoint", "bad.bin"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn splits_and_synth() {
    let dir = tempfile::tempdir().unwrap();
    let o = hcvc(&["splits", "--setting", "RF-UC", "--out", "rf.json"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("480 seen, 120 unseen"), "{}", stdout(&o));
    let split: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("rf.json")).unwrap()).unwrap();
    assert_eq!(split["unseen"].as_array().unwrap().len(), 120);

    let o = hcvc(&["splits", "--setting", "uv", "--seed", "1"], dir.path());
    assert!(stdout(&o).contains("20 unseen verbs"));
    let o = hcvc(&["splits", "--setting", "uo", "--registry", "fixture"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = hcvc(&["synth", "--images", "3", "--out", "scenes.json", "--cue-dir", "cues"], dir.path());
    assert!(o.status.success());
    assert_eq!(fs::read_dir(dir.path().join("cues")).unwrap().count(), 3);
    let cfg = format!("{}\n", TINY.replace(
        "[data]\nkind = \"synthetic\"\nimages = 4\n",
        "[data]\nkind = \"annotations\"\npath = \"scenes.json\"\n\n[cues]\ndir = \"cues\"\n",
    ));
    fs::write(dir.path().join("file.toml"), cfg).unwrap();
    let o = hcvc(&["train", "-c", "file.toml", "--epochs", "1", "--out", "r"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = hcvc(&["splits", "--registry", "scenes.json"], dir.path());
    assert!(stdout(&o).contains("12 seen"), "{}", stdout(&o));
}
