use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn scribreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scribreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen-data", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = scribreg(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

const SMALL: &[&str] = &["--scenes", "3", "--val-scenes", "1", "--size", "16x16", "--classes", "3", "--seed", "4"];
const QUICK: &[&str] = &["--iterations", "4", "--batch-size", "2", "--r", "2", "--hidden", "8", "--feat-dim", "4"];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    scribreg(&args)
}

#[test]
fn help_lists_every_config_key() {
    let o = scribreg(&["train", "--help"]);
    assert!(o.status.success());
    let help = stdout(&o);
    for key in scribreg::trainer::CONFIG_KEYS {
        assert!(help.contains(&format!("--{}", key.replace('_', "-"))), "missing {key}");
    }
    let o = scribreg(&["--help"]);
    assert!(stdout(&o).contains("Exit codes"));
}

#[test]
fn gen_data_is_byte_identical_under_a_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, &["--scenes", "1", "--size", "48x48", "--seed", "7"]);
    gen(&b, &["--scenes", "1", "--size", "48x48", "--seed", "7"]);
    let mut files = 0;
    for sub in ["", "train", "val"] {
        for entry in fs::read_dir(a.join(sub)).unwrap() {
            let entry = entry.unwrap();
            if entry.path().is_file() {
                let rel = entry.path().strip_prefix(&a).unwrap().to_path_buf();
                assert_eq!(fs::read(entry.path()).unwrap(), fs::read(b.join(&rel)).unwrap(), "{rel:?}");
                files += 1;
            }
        }
    }
    assert_eq!(files, 7);
}

#[test]
fn gen_data_reports_annotated_fraction() {
    let tmp = TempDir::new().unwrap();
    let o = scribreg(&["gen-data", "--out", tmp.path().to_str().unwrap(), "--scenes", "2", "--size", "24x24"]);
    assert!(o.status.success());
    let line = stdout(&o);
    let frac: f64 = line.trim().strip_prefix("annotated fraction: ").unwrap().parse().unwrap();
    assert!(frac > 0.0 && frac < 0.2);
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(scribreg(&["gen-data", "--out", out, "--classes", "1"]).status.code(), Some(1));
    assert_eq!(scribreg(&["gen-data", "--out", out, "--size", "4by4"]).status.code(), Some(1));
    assert_eq!(scribreg(&["gen-data", "--out", out, "--size", "0x4"]).status.code(), Some(1));
    assert_eq!(scribreg(&["frobnicate"]).status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_scribreg"))
        .args(["gradcheck", "--instances", "1"])
        .env("SCRIBREG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ambiguous_flag_marks_every_scene() {
    let tmp = TempDir::new().unwrap();
    gen(tmp.path(), &["--scenes", "3", "--size", "32x32", "--ambiguous", "on"]);
    let manifest = fs::read_to_string(tmp.path().join("manifest.txt")).unwrap();
    let scenes: Vec<&str> = manifest.lines().filter(|l| l.starts_with("scene ")).collect();
    assert_eq!(scenes.len(), 4);
    assert!(scenes.iter().all(|l| l.split_whitespace().nth(3) == Some("1")));
}

#[test]
fn zero_weights_reproduce_the_cross_entropy_baseline() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(train(&data, &a, &["--lambda1", "0", "--lambda2", "0"]).status.success());
    assert!(train(&data, &b, &["--enable-dfr", "off", "--enable-fd", "off", "--enable-fr", "off"])
        .status
        .success());
    let ma = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, fs::read_to_string(b.join("metrics.jsonl")).unwrap());
    assert_eq!(ma.lines().count(), 4);
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
}

#[test]
fn training_is_deterministic_and_config_files_apply() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, SMALL);
    let cfg = tmp.path().join("toy.cfg");
    fs::write(&cfg, "# toy run\nlambda2 = 0.1\nseed = 5\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train(&data, &a, &["--config", cfg]).status.success());
    assert!(train(&data, &b, &["--config", cfg]).status.success());
    for f in ["metrics.jsonl", "checkpoint.bin", "config.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let resolved = fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(resolved.contains("lambda2 = 0.1") && resolved.contains("seed = 5") && resolved.contains("r = 2"));
    let last = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert!(last.lines().last().unwrap().contains("\"val_miou\""));
}

#[test]
fn eval_on_an_overfit_scene_is_near_perfect() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, &["--scenes", "1", "--val-scenes", "1", "--size", "32x32", "--classes", "3", "--seed", "3"]);
    let run = tmp.path().join("run");
    let o = scribreg(&[
        "train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(),
        "--iterations", "600", "--batch-size", "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = scribreg(&[
        "eval", "--checkpoint", run.join("checkpoint.bin").to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--split", "train",
    ]);
    assert!(o.status.success());
    let csv = stdout(&o);
    assert!(csv.starts_with("metric,value\niou_0,"));
    let miou: f64 = csv.lines().last().unwrap().strip_prefix("miou,").unwrap().parse().unwrap();
    assert!(miou >= 0.95, "{csv}");
}

#[test]
fn io_failures_exit_with_three() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, SMALL);
    let missing = tmp.path().join("missing");
    assert_eq!(train(&missing, &tmp.path().join("o"), &[]).status.code(), Some(3));
    let bad = tmp.path().join("bad.bin");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = scribreg(&["eval", "--checkpoint", bad.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("corrupt checkpoint"));
}

#[test]
fn divergence_exits_with_two_and_names_the_term() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, SMALL);
    let o = train(&data, &tmp.path().join("o"), &["--lr", "1e200"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn ablate_preset_emits_one_row_per_configuration() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, SMALL);
    let mut args = vec!["ablate", "--data", data.to_str().unwrap(), "--preset", "loss-terms"];
    args.extend_from_slice(QUICK);
    let o = scribreg(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "row,seed,miou,pixel_accuracy,iou_0,iou_1,iou_2,final_loss");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("pce,0,") && lines[4].starts_with("pce+dfr+fd+fr,0,"));
}

#[test]
fn ablate_grid_file_with_seeds() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, SMALL);
    let grid = tmp.path().join("grid.txt");
    fs::write(&grid, "seeds 1 2\nrow base\nrow no-reg enable_dfr=off\n").unwrap();
    let out = tmp.path().join("table.csv");
    let mut args = vec![
        "ablate", "--data", data.to_str().unwrap(), "--grid", grid.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ];
    args.extend_from_slice(QUICK);
    assert!(scribreg(&args).status.success());
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.contains("\nno-reg,2,"));

    fs::write(&grid, "row broken lambda1\n").unwrap();
    assert_eq!(scribreg(&args).status.code(), Some(1));
    let o = scribreg(&["ablate", "--data", data.to_str().unwrap(), "--preset", "nope"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_on_a_clean_build() {
    let o = scribreg(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().count() >= 10);
    assert!(out.lines().all(|l| l.starts_with("PASS ")));
}
