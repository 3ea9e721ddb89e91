use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn aled(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aled"))
        .args(args)
        .env("RAYON_NUM_THREADS", "1")
        .env("RUST_LOG", "warn")
        .env_remove("ALED_DATA_ROOT")
        .output()
        .expect("run aled")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Desk scene at 64x48 with four records.
fn small_spec(dir: &Path) -> PathBuf {
    let mut v: Value = serde_json::from_str(&stdout(&ok(aled(&["scene", "--seed", "3"])))).unwrap();
    let cam = &mut v["camera"];
    for key in ["fx", "fy", "cx", "cy"] {
        cam[key] = (cam[key].as_f64().unwrap() / 2.0).into();
    }
    cam["width"] = 64.into();
    cam["height"] = 48.into();
    v["duration_s"] = 0.2.into();
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    path
}

fn dataset(dir: &Path) -> PathBuf {
    let spec = small_spec(dir);
    let data = dir.join("data");
    fs::create_dir(&data).unwrap();
    ok(aled(&["gen", "--spec", s(&spec), "--out", s(&data.join("seq0"))]));
    data
}

fn train_small(data: &Path, out: &Path, epochs: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(out),
        "--base-channels",
        "4",
        "--batch-size",
        "1",
        "--tbptt",
        "2",
        "--hflip",
        "0.5",
        "--epochs",
        epochs,
    ];
    args.extend_from_slice(extra);
    aled(&args)
}

fn field<'a>(line: &'a str, i: usize) -> &'a str {
    line.split('\t').nth(i).unwrap()
}

fn block<'a>(report: &'a str, name: &str) -> Vec<&'a str> {
    report
        .split("# ")
        .find(|b| b.starts_with(name))
        .unwrap()
        .lines()
        .skip(2)
        .collect()
}

#[test]
fn gen_is_reproducible_and_checks_paths() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path());
    let a = ok(aled(&["gen", "--spec", s(&spec), "--out", s(&dir.path().join("a"))]));
    let b = ok(aled(&["gen", "--spec", s(&spec), "--out", s(&dir.path().join("b"))]));
    let c = ok(aled(&["gen", "--spec", s(&spec), "--out", s(&dir.path().join("c")), "--seed", "9"]));
    assert!(dir.path().join("a/meta.json").is_file());
    let sum = |o: &Output| stdout(o).lines().find(|l| l.starts_with("sha256")).unwrap().to_string();
    assert_eq!(sum(&a), sum(&b));
    assert_ne!(sum(&a), sum(&c));
    assert!(stdout(&a).contains("records\t4"));

    let missing = aled(&["gen", "--spec", s(&spec), "--out", s(&dir.path().join("no/such/out"))]);
    assert_eq!(missing.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"seed\": 1}").unwrap();
    let o = aled(&["gen", "--spec", s(&bad), "--out", s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.json"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(aled(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(aled(&["eval", "--data", "x"]).status.code(), Some(1));
    assert_eq!(aled(&["infer", "--checkpoint", "c", "--sequence", "s", "--out", "o", "--range", "9:1"]).status.code(), Some(1));
    assert!(aled(&["--help"]).status.success());
}

#[test]
fn train_writes_checkpoints_log_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("run");
    ok(train_small(&data, &out, "2", &["--lr", "1e-5"]));
    let mut ckpts: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    ckpts.sort();
    assert_eq!(ckpts, ["epoch_0001.ckpt", "epoch_0002.ckpt"]);
    let config = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.lines().any(|l| l.replace(' ', "") == "learning_rate=0.00001"), "{config}");
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch\tstep\tl1\tgradient\ttotal");
    assert_eq!(lines.len(), 3);
    assert_eq!(field(lines[1], 0), "1");
    assert_eq!(field(lines[2], 0), "2");

    // resuming continues the schedule
    ok(aled(&["train", "--data", s(&data), "--out", s(&out), "--resume", s(&out.join("epoch_0002.ckpt")), "--epochs", "3"]));
    assert!(out.join("epoch_0003.ckpt").is_file());
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    assert_eq!(field(log.lines().nth(3).unwrap(), 0), "3");
}

#[test]
fn train_refuses_bad_config_and_corrupt_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "learning_rate = 1e-4\nlerning_rate = 2\n").unwrap();
    let o = aled(&["train", "--data", s(&data), "--out", s(&dir.path().join("r1")), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lerning_rate"), "{}", stderr(&o));

    let depth = data.join("seq0/depth");
    let victim = fs::read_dir(&depth).unwrap().next().unwrap().unwrap().path();
    fs::write(&victim, [1u8, 2, 3]).unwrap();
    let o = train_small(&data, &dir.path().join("r2"), "1", &[]);
    assert_eq!(o.status.code(), Some(2));
    let name = victim.file_name().unwrap().to_str().unwrap();
    assert!(stderr(&o).contains(name), "{}", stderr(&o));
}

#[test]
fn eval_oracle_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let report = stdout(&ok(aled(&["eval", "--data", s(&data), "--oracle"])));
    let dense = block(&report, "dense");
    let cutoffs: Vec<&str> = dense.iter().filter(|l| l.starts_with("seq0")).map(|l| field(l, 1)).collect();
    assert_eq!(cutoffs, ["10", "20", "30", "100", "200"]);
    for line in &dense {
        for i in [2, 3, 4, 5] {
            let v = field(line, i);
            assert!(v == "-" || v.parse::<f64>().unwrap() == 0.0, "{line}");
        }
    }
    for line in block(&report, "sparse") {
        assert_eq!(field(line, 3).parse::<f64>().unwrap(), 0.0, "{line}");
        assert_eq!(field(line, 4).parse::<f64>().unwrap(), 0.0, "{line}");
    }
    for line in block(&report, "change") {
        assert_eq!(field(line, 2), "1.0000", "{line}");
    }

    let nn = stdout(&ok(aled(&["eval", "--data", s(&data), "--nn-only", "--cutoffs", "5,50"])));
    let sparse = block(&nn, "sparse");
    assert_eq!(sparse.len(), 2);
    assert!(field(sparse[1], 1).parse::<f64>().unwrap() >= 0.0);
    assert_eq!(field(sparse[1], 3), "-");
    assert_eq!(block(&nn, "dense").len(), 4);

    // the data root may come from the environment
    let o = Command::new(env!("CARGO_BIN_EXE_aled"))
        .args(["eval", "--nn-only"])
        .env("ALED_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn eval_refuses_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let meta = data.join("seq0/meta.json");
    ok(train_small(&data, &dir.path().join("run"), "1", &[]));
    let text = fs::read_to_string(&meta).unwrap().replace("\"bins\": 5", "\"bins\": 3");
    fs::write(&meta, text).unwrap();
    let ckpt = dir.path().join("run/epoch_0001.ckpt");
    let o = aled(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("bins"));
    let o = aled(&["infer", "--checkpoint", s(&dir.path().join("nope.ckpt")), "--sequence", s(&data.join("seq0")), "--out", s(&dir.path().join("i"))]);
    assert_eq!(o.status.code(), Some(2));
}

fn colours(path: &Path) -> HashSet<[u8; 3]> {
    image::open(path).unwrap().to_rgb8().pixels().map(|p| p.0).collect()
}

#[test]
fn infer_and_plot_emit_one_image_set_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    ok(train_small(&data, &dir.path().join("run"), "1", &[]));
    let out = dir.path().join("pred");
    let ckpt = dir.path().join("run/epoch_0001.ckpt");
    ok(aled(&["infer", "--checkpoint", s(&ckpt), "--sequence", s(&data.join("seq0")), "--out", s(&out)]));
    for step in 0..4 {
        for what in ["events", "pred_bf", "pred_af", "gt_bf", "gt_af", "change_pred", "change_gt"] {
            assert!(out.join(format!("step_{step:04}_{what}.png")).is_file(), "{step} {what}");
        }
        for which in ["bf", "af"] {
            let len = fs::metadata(out.join(format!("step_{step:04}_{which}.f32"))).unwrap().len();
            assert_eq!(len, 4 * 64 * 48);
        }
        for which in ["change_pred", "change_gt"] {
            let c = colours(&out.join(format!("step_{step:04}_{which}.png")));
            let allowed: HashSet<[u8; 3]> = [[0, 0, 0], [230, 230, 230], [40, 110, 255], [255, 60, 40]].into();
            assert!(c.is_subset(&allowed), "{c:?}");
        }
    }
    assert!(out.join("step_0000_lidar.png").is_file());
    let gt = out.join("step_0000_gt_bf.png");
    let before = fs::read(&gt).unwrap();
    ok(aled(&["plot", "--dir", s(&out), "--range", "0:200"]));
    assert_eq!(fs::read(&gt).unwrap(), before);
    ok(aled(&["plot", "--dir", s(&out), "--range", "0:20"]));
    assert_ne!(fs::read(&gt).unwrap(), before);
}
