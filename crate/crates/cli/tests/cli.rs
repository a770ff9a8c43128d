use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &[&str] = &[
    "--set", "image_size=16",
    "--set", "patch_size=16",
    "--set", "schedule.steps=20",
    "--set", "denoiser.base_width=8",
    "--set", "pretrain.corpus_size=4",
    "--set", "pretrain.warmup_steps=1",
    "--set", "pretrain.checkpoint_every=2",
    "--set", "data.train=3",
    "--set", "data.val=2",
    "--set", "data.test=2",
    "--set", "head.reduction=4",
    "--set", "head.fusion_width=4",
    "--set", "head.batch_size=2",
];

fn ddpmcd(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ddpmcd"))
        .args(TINY)
        .args(args)
        .output()
        .expect("binary runs");
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap_or(-1), text)
}

fn ok(args: &[&str]) -> String {
    let (code, text) = ddpmcd(args);
    assert_eq!(code, 0, "ddpmcd {}:\n{text}", args.join(" "));
    text
}

fn p(dir: &Path, rel: &str) -> String {
    dir.join(rel).to_str().unwrap().to_string()
}

#[test]
fn tiny_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["pretrain", "--steps", "3", "--out", &p(d, "pre")]);
    for f in ["loss.csv", "denoiser.ckpt", "denoiser_step2.ckpt", "summary.json", "config.toml", "run.log"] {
        assert!(d.join("pre").join(f).is_file(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(d.join("pre/loss.csv")).unwrap().lines().count(), 4);
    let ckpt = p(d, "pre/denoiser.ckpt");

    ok(&["sample", "--checkpoint", &ckpt, "-n", "2", "--out", &p(d, "sample")]);
    assert!(d.join("sample/sample_001.png").is_file());

    ok(&["extract-features", "--checkpoint", &ckpt, "--out", &p(d, "feat")]);
    assert!(d.join("feat/features/label.png").is_file());

    ok(&["train-cd", "--checkpoint", &ckpt, "--epochs", "1", "--timesteps", "50,100", "--out", &p(d, "cd")]);
    let head = p(d, "cd/head.ckpt");
    ok(&["eval", "--checkpoint", &ckpt, "--head", &head, "--out", &p(d, "eval")]);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval/metrics.json")).unwrap()).unwrap();
    assert!(metrics["counts"].is_object());
    assert_eq!(fs::read_dir(d.join("eval/pred")).unwrap().count(), 2);

    let table = ok(&["ablate-timesteps", "--checkpoint", &ckpt, "--tsets", "50;50,100", "--epochs", "1", "--out", &p(d, "abl")]);
    let rows = table.lines().filter(|l| l.starts_with("| {")).count();
    assert_eq!(rows, 2, "{table}");
    assert!(d.join("abl/head_1.ckpt").is_file() && d.join("abl/head_1-2.ckpt").is_file());
}

#[test]
fn schedule_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["pretrain", "--steps", "1", "--out", &p(d, "pre")]);
    let (code, text) = ddpmcd(&["--set", "schedule.steps=30", "sample", "--checkpoint", &p(d, "pre/denoiser.ckpt"), "--out", &p(d, "s")]);
    assert_eq!(code, 1, "{text}");
    assert!(d.join("s/FAILED").is_file());
}

#[test]
fn usage_and_config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _) = ddpmcd(&["no-such-command"]);
    assert_eq!(code, 1);
    let (code, text) = ddpmcd(&["--set", "head.epoch=3", "make-dataset", "--out", &p(tmp.path(), "x")]);
    assert_eq!(code, 1, "{text}");
    let (code, _) = ddpmcd(&["eval", "--out", &p(tmp.path(), "y")]);
    assert_eq!(code, 1);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, text) = ddpmcd(&["sample", "--checkpoint", &p(tmp.path(), "nope.ckpt"), "--out", &p(tmp.path(), "s")]);
    assert_eq!(code, 2, "{text}");
}

#[test]
fn output_root_env_picks_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ddpmcd"))
        .args(TINY)
        .arg("make-dataset")
        .env("DDPMCD_OUTPUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let runs: Vec<String> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].starts_with("make-dataset-"), "{runs:?}");
    let run = tmp.path().join(&runs[0]);
    assert!(run.join("dataset/train.txt").is_file());
    assert!(run.join("config.toml").is_file());
}
