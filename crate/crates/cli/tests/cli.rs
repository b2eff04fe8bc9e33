use std::path::Path;
use std::process::{Command, Output};

fn aseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aseg")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(aseg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(aseg(&["phantom", "--bogus"]).status.code(), Some(2));
    assert_eq!(aseg(&["phantom", "--count", "0", "--out", "x"]).status.code(), Some(2));
    assert_eq!(aseg(&["train", "--data", "d", "--out", "o", "--lr", "-1"]).status.code(), Some(2));
    assert_eq!(aseg(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = aseg(&["train", "--data", p(&dir.path().join("nowhere")), "--out", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing directory"));
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "colour = blue\n").unwrap();
    let out = aseg(&["train", "--data", "d", "--out", "o", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let out = aseg(&["eval", "--checkpoint", p(&dir.path().join("none.aseg")), "--data", "d"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn phantom_writes_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let out = aseg(&["phantom", "--count", "8", "--size", "64", "--seed", "1", "--out", p(&d)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for sub in ["images", "masks"] {
        assert_eq!(std::fs::read_dir(d.join(sub)).unwrap().count(), 8);
    }
}

#[test]
fn compare_reports_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::write(
        a.join("summary.txt"),
        "\tminimum\tmaximum\tmean\tstandard deviation\naccuracy\t0.5\t0.9\t0.835\t0.081\noverlap rate\t0.4\t0.9\t0.7\t0.1\nF measure\t0.5\t0.9\t0.8\t0.05\n",
    )
    .unwrap();
    let out = aseg(&["compare", "--report", p(&a), "--report", p(&a), "--label", "X", "--label", "Y"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], "X\t0.835 ± 0.081\t0.700 ± 0.100\t0.800 ± 0.050\t-\t-");
    assert_eq!(lines[1].replacen('X', "Y", 1), lines[2]);

    std::fs::write(a.join("summary.txt"), "garbage").unwrap();
    assert_eq!(aseg(&["compare", "--report", p(&a), "--report", p(&a)]).status.code(), Some(1));
    assert_eq!(aseg(&["compare", "--report", p(&a)]).status.code(), Some(1));
}

#[test]
fn train_eval_infer_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let r = dir.path().join("r");
    assert!(aseg(&["phantom", "--count", "6", "--size", "32", "--seed", "2", "--out", p(&d)]).status.success());
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, "image_size = 32\ndepth = 3\nbase_width = 4\ndisc_base_width = 4\ndisc_layers = 2\n").unwrap();
    let out = aseg(&[
        "train", "--model", "unet", "--data", p(&d), "--config", p(&cfg), "--epochs", "1", "--train-count", "4",
        "--out", p(&r),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.echo", "trainlog.csv", "final.aseg", "manifest.tsv", "timing.txt"] {
        assert!(r.join(f).exists(), "{f}");
    }
    let echo = std::fs::read_to_string(r.join("config.echo")).unwrap();
    assert!(echo.contains("model = unet") && echo.contains("epochs = 1") && echo.contains("train_count = 4"));
    let manifest = std::fs::read_to_string(r.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.ends_with("\ttrain")).count(), 4);
    assert_eq!(manifest.lines().filter(|l| l.ends_with("\ttest")).count(), 2);

    let ck = r.join("final.aseg");
    let e = dir.path().join("e");
    let out = aseg(&["eval", "--checkpoint", p(&ck), "--data", p(&d), "--split", "test", "--out", p(&e), "--samples"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = std::fs::read_to_string(e.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 3);
    assert!(records.starts_with("id,accuracy,overlap_rate,f_measure\n"));
    assert!(std::fs::read_to_string(e.join("summary.txt")).unwrap().starts_with("\tminimum\tmaximum\tmean\tstandard deviation\n"));
    assert_eq!(std::fs::read_dir(e.join("samples")).unwrap().count(), 2);
    let timing = std::fs::read_to_string(e.join("timing.txt")).unwrap();
    assert!(timing.contains("train_seconds") && timing.contains("test_seconds"));

    let r = dir.path().join("r");
    let out = aseg(&["eval", "--checkpoint", p(&ck), "--data", p(&d), "--norm", "running", "--noise", "on", "--out", p(&r)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(r.join("records.csv")).unwrap().lines().count(), 3);
    assert_eq!(aseg(&["eval", "--checkpoint", p(&ck), "--data", p(&d), "--norm", "mean"]).status.code(), Some(2));

    let i = dir.path().join("i");
    let img = d.join("images/phantom_0000.png");
    let out = aseg(&["infer", "--checkpoint", p(&ck), "--input", p(&img), "--out", p(&i), "--raw"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(i.join("phantom_0000_mask.png").exists() && i.join("phantom_0000_raw.png").exists());

    let out = aseg(&["compare", "--report", p(&e), "--report", p(&e), "--out", p(&dir.path().join("c"))]);
    assert!(out.status.success());
    let table = std::fs::read_to_string(dir.path().join("c/compare.txt")).unwrap();
    assert!(table.lines().nth(1).unwrap().ends_with('s'));
}
