use std::fs;
use std::path::Path;

use assert_cmd::Command;
use tempfile::TempDir;

const TINY: &str = r#"
[data.source]
kind = "synthetic"
n_classes = 10
samples_per_class = 6
image_size = 16
seed = 3

[data.split]
train = 6
val = 2
test = 2

[model]
embed = 4
top_k = 1
use_imse = true
use_imfr = true

[model.backbone]
channels = [4, 4, 4, 4]
input_size = 16

[train]
epochs = 2
episodes_per_epoch = 3
decay_epoch = 1
lr = 0.01
train_episode = { way = 2, shot = 1, query = 2 }
test_episode = { way = 2, shot = 1, query = 2 }
val_every = 1
val_episodes = 2
eval_episodes = 4

[output]
dir = "run"
formats = ["csv", "tsv", "json"]
"#;

fn cli(dir: &Path) -> Command {
    let mut cmd = Command::cargo_bin("causalfsfg").unwrap();
    cmd.current_dir(dir).env_remove("CAUSALFSFG_OUTPUT_ROOT");
    cmd
}

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn stdout(cmd: &mut Command) -> String {
    String::from_utf8(cmd.assert().success().get_output().stdout.clone()).unwrap()
}

#[test]
fn help_and_usage_errors() {
    let dir = workspace();
    cli(dir.path()).arg("--help").assert().success();
    cli(dir.path()).arg("frobnicate").assert().code(1);
    cli(dir.path()).args(["train"]).assert().code(1);
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = workspace();
    cli(dir.path())
        .args(["train", "-c", "tiny.toml", "--set", "train.lr=-1"])
        .assert()
        .code(1);
    cli(dir.path())
        .args(["train", "-c", "tiny.toml", "--set", "model.bogus=1"])
        .assert()
        .code(1);
    cli(dir.path()).args(["train", "-c", "missing.toml"]).assert().code(2);
}

#[test]
fn oracle_round_trips_its_model() {
    let dir = workspace();
    let first = stdout(cli(dir.path()).args(["oracle", "--seed", "4", "--save", "scm.toml"]));
    assert!(first.contains("do(X=0)"));
    assert!(first.contains("frontdoor"));
    let again = stdout(cli(dir.path()).args(["oracle", "--scm", "scm.toml"]));
    assert_eq!(first, again);

    fs::write(dir.path().join("bad.toml"), "form = \"monolithic\"\np_c = [0.5, 0.6]\n").unwrap();
    cli(dir.path()).args(["oracle", "--scm", "bad.toml"]).assert().failure();
}

#[test]
fn inspect_cost_reports_totals() {
    let dir = workspace();
    let out = stdout(cli(dir.path()).args(["inspect", "cost", "-c", "tiny.toml"]));
    assert!(out.contains("total params"));
    assert!(out.contains("imfr.reconstruction"));
}

#[test]
fn train_eval_heatmaps_end_to_end() {
    let dir = workspace();
    let run = dir.path().join("run");
    stdout(cli(dir.path()).args(["train", "-c", "tiny.toml", "--sequential"]));
    for f in ["config.resolved.toml", "train_log.jsonl", "validation.jsonl", "best.ckpt.json", "last.ckpt.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "episode", "loss", "accuracy", "lr"] {
        assert!(first.get(key).is_some(), "log line lacks {key}");
    }

    let out = stdout(cli(dir.path()).args(["eval", "-c", "tiny.toml", "--checkpoint", "run/best.ckpt.json", "--retain"]));
    assert!(out.contains("imse+imfr"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["n_episodes"], 4);
    assert_eq!(report["accuracies"].as_array().unwrap().len(), 4);
    for ext in ["csv", "tsv", "json"] {
        assert!(run.join(format!("eval.{ext}")).is_file());
    }

    stdout(cli(dir.path()).args([
        "inspect",
        "heatmaps",
        "-c",
        "tiny.toml",
        "--checkpoint",
        "run/best.ckpt.json",
        "--samples",
        "2",
    ]));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("heatmaps/manifest.json")).unwrap()).unwrap();
    let entries = manifest["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 12);
    for e in entries {
        assert!(run.join("heatmaps").join(e["file"].as_str().unwrap()).is_file());
    }
}

#[test]
fn eval_rejects_a_foreign_checkpoint() {
    let dir = workspace();
    cli(dir.path()).args(["eval", "-c", "tiny.toml", "--checkpoint", "nope.json"]).assert().code(2);
    fs::write(dir.path().join("junk.json"), "{\"not\": \"a checkpoint\"}").unwrap();
    cli(dir.path()).args(["eval", "-c", "tiny.toml", "--checkpoint", "junk.json"]).assert().failure();
}

#[test]
fn ablate_writes_four_rows() {
    let dir = workspace();
    let out = stdout(cli(dir.path()).args(["ablate", "-c", "tiny.toml", "--sequential", "--set", "train.epochs=1"]));
    for label in ["baseline", "+imse", "+imfr", "imse+imfr"] {
        assert!(out.contains(label), "{label} missing from\n{out}");
    }
    let csv = fs::read_to_string(dir.path().join("run/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn gen_data_writes_a_loadable_manifest() {
    let dir = workspace();
    let out = stdout(cli(dir.path()).args(["gen-data", "-c", "tiny.toml", "--out", "data.json"]));
    assert!(out.starts_with("60 images, 10 classes"));
    let manifest = dir.path().join("data.json");
    assert!(manifest.is_file());
    let cfg = TINY.replace(
        "kind = \"synthetic\"\nn_classes = 10\nsamples_per_class = 6\nimage_size = 16\nseed = 3",
        &format!("kind = \"manifest\"\npath = {:?}", manifest.display().to_string()),
    );
    fs::write(dir.path().join("from_manifest.toml"), cfg).unwrap();
    stdout(cli(dir.path()).args(["inspect", "cost", "-c", "from_manifest.toml"]));
    let again = stdout(cli(dir.path()).args(["gen-data", "-c", "from_manifest.toml", "--out", "again.json"]));
    assert!(again.starts_with("60 images, 10 classes"));
}
