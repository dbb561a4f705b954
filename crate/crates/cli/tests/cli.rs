use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
n_scenes = 16
n_labeled = 4
n_ood = 4
n_test = 4

[train]
n_labeled = 2
n_unlabeled_in = 2
n_unlabeled_out = 2
crop_size = 16
epochs = 1
model_width = 4

[sweep]
axis = "tau_out"
grid = [0.0, 0.5]
seeds = [1]
"#;

fn semiovs(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semiovs"))
        .args(args)
        .env("SEMIOVS_OUT", out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    for cmd in ["generate", "pseudolabel", "train", "eval"] {
        let o = semiovs(&[cmd, "--config", &cfg], &out);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    for f in [
        "dataset/ood_manifest.tsv",
        "dataset/config.resolved.toml",
        "pseudolabels/ood_0000.sovspl",
        "train/checkpoint.sovsckpt",
        "train/metrics.csv",
        "train/config.resolved.toml",
        "eval/eval.csv",
        "eval/loss_curves.svg",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("train/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,l_s,l_u_in,l_u_out,masked_frac_in,masked_frac_out,lr\n"));
    let eval = fs::read_to_string(out.join("eval/eval.csv")).unwrap();
    let lines: Vec<&str> = eval.lines().collect();
    assert!(lines[0].starts_with("split,mIoU,iou_background"));
    let miou: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&miou));

    let o = semiovs(&["eval", "--config", &cfg, "--split", "labeled", "--force"], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(out.join("eval/eval.csv")).unwrap().contains("\nlabeled,"));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    assert!(semiovs(&["generate", "--config", &cfg], &out).status.success());
    let again = semiovs(&["generate", "--config", &cfg], &out);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));
    assert!(semiovs(&["generate", "--config", &cfg, "--force"], &out).status.success());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let unknown = write_config(tmp.path(), "[train]\nlearning_rat = 0.1\n");
    let o = semiovs(&["generate", "--config", &unknown], &out);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rat"));

    let infeasible = write_config(tmp.path(), "[data]\nn_scenes = 10\nn_labeled = 11\n");
    let o = semiovs(&["generate", "--config", &infeasible], &out);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.join("dataset").exists());
}

#[test]
fn training_without_pseudo_labels_fails_fast() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    assert!(semiovs(&["generate", "--config", &cfg], &out).status.success());
    let o = semiovs(&["train", "--config", &cfg], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ood_0000"), "{}", stderr(&o));
    assert!(!out.join("train/metrics.csv").exists());
}

#[test]
fn same_seed_same_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        for cmd in ["generate", "pseudolabel", "train"] {
            let o = semiovs(&[cmd, "--config", &cfg, "--seed", "4"], &out);
            assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        }
        csvs.push(fs::read(out.join("train/metrics.csv")).unwrap());
        assert!(fs::read_to_string(out.join("train/config.resolved.toml")).unwrap().contains("seed = 4"));
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn sweep_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let o = semiovs(&["sweep", "--config", &cfg], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("sweep/miou_vs_tau_out.svg").exists());
    assert!(out.join("sweep/summary.md").exists());
}
