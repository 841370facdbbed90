use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use msdet::zoo::{build, count_params, ModelVariant};

fn msdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msdet")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn kv(path: &Path) -> Vec<(String, String)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "colour = red\n").unwrap();
    let bad_cfg = bad_cfg.to_str().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["params", "--no-such-flag"],
        vec![],
        vec!["params", "--variant", "yolo"],
        vec!["params", "--config", bad_cfg],
        vec!["trace", "--input-size", "100"],
        vec!["split"],
        vec!["gen"],
        vec!["train", "--data", "synth"],
        vec!["eval", "--data", "synth"],
        vec!["compare"],
    ] {
        let o = msdet(&args);
        assert_eq!(code(&o), 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
    let help = msdet(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("compare"));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = msdet(&["train", "--data", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    // a dataset whose image file is corrupt
    let data = dir.path().join("data");
    let o = msdet(&["gen", "--images", "10", "--input-size", "64", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let img = fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().path();
    fs::write(&img, b"MSDT\x03\x00\x00\x00").unwrap();
    let o = msdet(&["train", "--data", data.to_str().unwrap(), "--out", dir.path().join("t").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("format error"));
}

#[test]
fn params_totals_match_the_zoo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.cfg");
    fs::write(&cfg, "preset = toy\nvariant = lska_gd\n").unwrap();
    let out = dir.path().join("params.txt");
    let o = msdet(&["params", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let table = count_params(&build(ModelVariant::LskaGd, &msdet::zoo::ModelConfig::toy()).unwrap());
    let rows = kv(&out);
    assert_eq!(rows[0], ("variant".to_string(), "lska_gd".to_string()));
    assert_eq!(rows.last().unwrap(), &("total".to_string(), table.total.to_string()));
    for r in &table.rows {
        assert!(rows.contains(&(r.module.clone(), r.count.to_string())), "{}", r.module);
    }
    let sum: u64 = rows[1..rows.len() - 1].iter().map(|(_, v)| v.parse::<u64>().unwrap()).sum();
    assert_eq!(sum, table.total);
    assert!(stdout(&o).contains("lska"));
}

#[test]
fn trace_lists_head_outputs() {
    let o = msdet(&["trace", "--variant", "gd_seam"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for (level, grid) in [(3, 32), (4, 16), (5, 8)] {
        let line = format!("head.p{level}.out concat 1x20x{grid}x{grid}");
        assert!(text.lines().any(|l| l == line), "missing {line}");
    }
}

#[test]
fn flops_total_is_the_row_sum() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flops.txt");
    let o = msdet(&["flops", "--variant", "lska_only", "--input-size", "128", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let rows = kv(&out);
    assert_eq!(rows[0].1, "128");
    let total: u64 = rows.last().unwrap().1.parse().unwrap();
    let sum: u64 = rows[2..rows.len() - 1].iter().map(|(_, v)| v.parse::<u64>().unwrap()).sum();
    assert_eq!(sum, total);
}

#[test]
fn split_of_a_label_directory() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels");
    fs::create_dir(&labels).unwrap();
    for i in 0..20 {
        let body = if i == 3 {
            "imagesource:GoogleEarth\ngsd:0.1\nnot a label line\n".to_string()
        } else {
            format!("imagesource:GoogleEarth\ngsd:0.1\n{0} 1 {1} 1 {1} 9 {0} 9 plane 0\n", i, i + 5)
        };
        fs::write(labels.join(format!("P{i:04}.txt")), body).unwrap();
    }
    fs::write(labels.join("notes.md"), "ignored").unwrap();
    let out = dir.path().join("split");
    let o = msdet(&["split", "--data", labels.to_str().unwrap(), "--seed", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("train 16  val 2  test 2"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("P0003.txt: skipped 1"));
    let mut all: Vec<String> = ["train.txt", "val.txt", "test.txt"]
        .iter()
        .flat_map(|f| fs::read_to_string(out.join(f)).unwrap().lines().map(String::from).collect::<Vec<_>>())
        .collect();
    all.sort();
    assert_eq!(all, (0..20).map(|i| format!("P{i:04}")).collect::<Vec<_>>());
}

#[test]
fn duplicate_ids_fail_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let ids = dir.path().join("ids.txt");
    fs::write(&ids, "a\nb\na\n").unwrap();
    let o = msdet(&["split", "--data", ids.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let d = data.to_str().unwrap();
    assert_eq!(code(&msdet(&["gen", "--images", "20", "--input-size", "64", "--seed", "2", "--out", d])), 0);
    for f in ["classes.txt", "gt.txt", "train.txt", "val.txt", "test.txt"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let o = msdet(&["train", "--data", d, "--variant", "lska_gd", "--epochs", "2", "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,loss_total,loss_box,loss_obj,loss_cls,val_recall,val_map50,val_map5095"));

    let report = dir.path().join("eval.txt");
    let weights = run.join("weights.manifest");
    let o = msdet(&[
        "eval",
        "--data",
        d,
        "--variant",
        "lska_gd",
        "--weights",
        weights.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&report).unwrap(), fs::read(run.join("test_report.txt")).unwrap());

    // weights of one variant do not load into another
    let o = msdet(&["eval", "--data", d, "--variant", "baseline", "--weights", weights.to_str().unwrap()]);
    assert_ne!(code(&o), 0);
}
