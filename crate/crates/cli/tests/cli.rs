use finegrain::data::pnm;
use finegrain::run_dir::Summary;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "epochs": 2,
  "batch_size": 4,
  "widths": [4, 8],
  "parts": 2,
  "gaussian_hidden": 4,
  "image_side": 16,
  "num_classes": 2,
  "warmup_epochs": 1,
  "eval_every": 1,
  "checkpoint_every": 1,
  "data": {"synthetic": {"train_per_class": 4, "test_per_class": 3, "object_side_range": [0.25, 0.5]}}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_finegrain"));
    c.env_remove("FINEGRAIN_RUNS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn train(dir: &Path, name: &str) -> PathBuf {
    let cfg = write_config(dir, "tiny.json", TINY);
    let out = dir.join(name);
    ok(&run(&["train", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = train(tmp.path(), "run");
    for f in ["config.json", "metrics.csv", "summary.json", "checkpoints/final.ckpt", "checkpoints/epoch_0001.ckpt", "heatmaps/boxes.tsv"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    assert!(!run_dir.join(".lock").exists());
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,alpha,l_stage1,l_effect,l_stage2,total,top1,top5");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,0,"), "{}", lines[1]);
    assert!(lines[2].starts_with("1,1,"), "{}", lines[2]);
    let heatmaps = std::fs::read_dir(run_dir.join("heatmaps")).unwrap().count();
    assert_eq!(heatmaps, 4 * 5 + 1);
}

#[test]
fn reruns_produce_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(tmp.path(), "a");
    let b = train(tmp.path(), "b");
    for f in ["metrics.csv", "summary.json", "checkpoints/final.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", r#"{"epochs": 2, "foo": 1}"#);
    let out = run(&["train", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("foo"), "{}", stderr(&out));

    let cfg = write_config(tmp.path(), "bad2.json", r#"{"lr": -1}"#);
    let out = run(&["train", s(&cfg), "--out", s(&tmp.path().join("r2"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("`lr`"), "{}", stderr(&out));
    assert!(!tmp.path().join("r2/checkpoints/final.ckpt").exists());
}

#[test]
fn eval_matches_the_training_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = train(tmp.path(), "run");
    let ckpt = run_dir.join("checkpoints/final.ckpt");
    ok(&run(&["eval", s(&ckpt)]));
    let csv = std::fs::read_to_string(run_dir.join("eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "count,top1,top5,stage1_top1,localization");
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let summary: Summary = serde_json::from_str(&std::fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    assert!((row[1] - summary.top1).abs() < 1e-12);
    assert!((row[2] - summary.top5).abs() < 1e-12);

    let out_csv = tmp.path().join("gap.csv");
    ok(&run(&["eval", s(&ckpt), "--counterfactual-gap", "--out", s(&out_csv)]));
    let csv = std::fs::read_to_string(out_csv).unwrap();
    assert!(csv.lines().next().unwrap().ends_with(",counterfactual_gap"));
}

#[test]
fn corrupt_checkpoints_fail_with_an_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = train(tmp.path(), "run");
    let ckpt = run_dir.join("checkpoints/final.ckpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let out = run(&["eval", s(&ckpt)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("offset"), "{}", stderr(&out));
    assert!(!run_dir.join("eval.csv").exists());

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"JUNK");
    std::fs::write(&ckpt, &bad).unwrap();
    let out = run(&["eval", s(&ckpt)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("bad magic"), "{}", stderr(&out));
}

#[test]
fn config_mismatch_needs_the_override() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = train(tmp.path(), "run");
    let ckpt = run_dir.join("checkpoints/final.ckpt");
    let other = write_config(tmp.path(), "other.json", &TINY.replace("\"epochs\": 2", "\"epochs\": 3"));
    let out_csv = tmp.path().join("e.csv");
    let out = run(&["eval", s(&ckpt), "--config", s(&other), "--out", s(&out_csv)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--allow-config-mismatch"), "{}", stderr(&out));
    let out = run(&["eval", s(&ckpt), "--config", s(&other), "--out", s(&out_csv), "--allow-config-mismatch"]);
    ok(&out);
    assert!(stderr(&out).contains("warning"));
}

#[test]
fn viz_writes_five_files_per_image() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = train(tmp.path(), "run");
    let out_dir = tmp.path().join("viz");
    ok(&run(&["viz", s(&run_dir.join("checkpoints/final.ckpt")), "--out", s(&out_dir), "-n", "4"]));
    let mut names: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "boxes.tsv")
        .collect();
    names.sort();
    assert_eq!(names.len(), 20);
    assert!(names.contains(&"0000_original.ppm".to_string()));
    for n in &names {
        let r = pnm::read(&out_dir.join(n)).unwrap();
        assert_eq!((r.width, r.height), (16, 16));
    }
    // The overlay's outline sits exactly on the logged box.
    let boxes = std::fs::read_to_string(out_dir.join("boxes.tsv")).unwrap();
    let row: Vec<usize> = boxes.lines().nth(1).unwrap().split('\t').map(|v| v.parse().unwrap()).collect();
    let overlay = pnm::read(&out_dir.join(format!("{:04}_overlay.ppm", row[0]))).unwrap();
    let px = |r: usize, c: usize| &overlay.samples[(r * 16 + c) * 3..(r * 16 + c) * 3 + 3];
    assert_eq!(px(row[2], row[4]), &[255, 0, 0]);
    assert_eq!(px(row[3], row[5]), &[255, 0, 0]);

    let out = run(&["viz", s(&run_dir.join("checkpoints/final.ckpt")), "--out", s(&out_dir), "-n", "0"]);
    assert!(!out.status.success());
}

#[test]
fn ablate_writes_cells_and_means() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = format!(r#"{{"base": {}, "rows": ["a", "g"], "seeds": [0, 1]}}"#, TINY.replace("\"eval_every\": 1,", "\"eval_every\": 0,"));
    let cfg = write_config(tmp.path(), "grid.json", &grid);
    let out_dir = tmp.path().join("abl");
    ok(&run(&["ablate", s(&cfg), "--out", s(&out_dir), "--quiet"]));
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 4 + 2);
    assert!(lines[1].starts_with("a,0,0,0,0,0,"));
    assert!(lines[4].starts_with("g,1,1,1,1,1,"));
    let top1 = |l: &str| l.split(',').nth(6).unwrap().parse::<f64>().unwrap();
    assert!((top1(lines[5]) - (top1(lines[1]) + top1(lines[2])) / 2.0).abs() < 1e-12);
}

#[test]
fn gen_data_exports_ppm_folders() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY);
    let out_dir = tmp.path().join("data");
    ok(&run(&["gen-data", s(&cfg), "--out", s(&out_dir)]));
    let count = |split: &str| {
        std::fs::read_dir(out_dir.join(split))
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|d| std::fs::read_dir(d.path()).unwrap().count())
            .sum::<usize>()
    };
    assert_eq!((count("train"), count("test")), (8, 6));

    // The exported test folder evaluates like the generated split.
    let run_dir = train(tmp.path(), "run");
    let ckpt = run_dir.join("checkpoints/final.ckpt");
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    ok(&run(&["eval", s(&ckpt), "--out", s(&a)]));
    ok(&run(&["eval", s(&ckpt), "--out", s(&b), "--folder", s(&out_dir.join("test"))]));
    assert_eq!(std::fs::read_to_string(a).unwrap().lines().nth(1).unwrap().split(',').next(), Some("6"));
    assert_eq!(std::fs::read_to_string(b).unwrap().lines().nth(1).unwrap().split(',').next(), Some("6"));
}

#[test]
fn locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY);
    let out_dir = tmp.path().join("run");
    std::fs::create_dir_all(&out_dir).unwrap();
    std::fs::write(out_dir.join(".lock"), "1").unwrap();
    let out = run(&["train", s(&cfg), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("locked"), "{}", stderr(&out));
    assert!(!out_dir.join("metrics.csv").exists());
}

#[test]
fn run_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "envrun.json", TINY);
    let root = tmp.path().join("root");
    let out = bin().args(["train", s(&cfg), "--quiet"]).env("FINEGRAIN_RUNS", &root).output().unwrap();
    ok(&out);
    assert!(root.join("envrun/checkpoints/final.ckpt").exists());
}
