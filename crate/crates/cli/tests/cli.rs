use std::path::Path;
use std::process::{Command, Output};

fn cgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgd"))
        .args(args)
        .env_remove("CGD_DATA_ROOT")
        .env("CGD_LOG", "warn")
        .output()
        .expect("spawn cgd")
}

fn ok(args: &[&str]) -> String {
    let out = cgd(args);
    assert!(
        out.status.success(),
        "cgd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--out", s(d), "--pairs", "3", "--size", "32", "--seed", "5"]);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    ok(&["gen-data", "--out", s(&a), "--pairs", "3", "--size", "32", "--seed", "6"]);
    assert_ne!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn train_then_evaluate_and_denoise() {
    let t = tempfile::tempdir().unwrap();
    let (train, test, run) = (t.path().join("train"), t.path().join("test"), t.path().join("run"));
    ok(&["gen-data", "--out", s(&train), "--pairs", "8", "--size", "32", "--seed", "1"]);
    ok(&["gen-data", "--out", s(&test), "--pairs", "2", "--size", "32", "--seed", "2"]);
    ok(&["train", "--data", s(&train), "--out", s(&run), "--iters", "6", "--batch-size", "2"]);
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);
    let cfg = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(cfg.contains("total_iters = 6"), "{cfg}");

    let report = ok(&["eval-psnr", "--ckpt", s(&run.join("final")), "--data", s(&test)]);
    assert!(report.contains("pairs: 2") && report.contains("denoised PSNR"), "{report}");

    let input = t.path().join("in.ppm");
    let (w, h) = (10usize, 7usize);
    let mut ppm = format!("P6\n{w} {h}\n255\n").into_bytes();
    ppm.extend((0..w * h * 3).map(|i| (i * 13 % 256) as u8));
    std::fs::write(&input, ppm).unwrap();
    let output = t.path().join("out.png");
    ok(&["denoise", "--ckpt", s(&run.join("final")), "--input", s(&input), "--output", s(&output)]);
    assert!(std::fs::read(&output).unwrap().starts_with(b"\x89PNG"));
}

#[test]
fn ablate_writes_four_rows() {
    let t = tempfile::tempdir().unwrap();
    let (train, seqs, table) = (t.path().join("train"), t.path().join("seqs"), t.path().join("table.csv"));
    let curves = t.path().join("curves.csv");
    ok(&["gen-data", "--out", s(&train), "--pairs", "4", "--size", "32"]);
    ok(&["gen-sequences", "--out", s(&seqs), "--count", "2", "--frames", "8", "--frame-size", "64", "--target-size", "16"]);
    ok(&[
        "ablate", "--data", s(&train), "--sequences", s(&seqs), "--out", s(&table), "--curves", s(&curves),
        "--iters", "2", "--batch-size", "1",
    ]);
    let csv = std::fs::read_to_string(&table).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["baseline", "no-mkcr", "no-nrtc", "full"]);
    assert!(std::fs::metadata(&curves).unwrap().len() > 0);
}

#[test]
fn data_root_env_supplies_default_paths() {
    let t = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out", s(&t.path().join("train")), "--pairs", "2", "--size", "32"]);
    let out = Command::new(env!("CARGO_BIN_EXE_cgd"))
        .args(["train", "--out", s(&t.path().join("run")), "--iters", "1", "--batch-size", "1"])
        .env("CGD_DATA_ROOT", t.path())
        .env("CGD_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let out = cgd(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = cgd(&["train", "--out", s(t.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CGD_DATA_ROOT"));

    let data = t.path().join("d");
    ok(&["gen-data", "--out", s(&data), "--pairs", "2", "--size", "32"]);
    let out = cgd(&["train", "--data", s(&data), "--out", s(t.path()), "--set", "bogus_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("applying overrides"));

    let out = cgd(&["gen-data", "--out", s(&data), "--gain", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_exit_1() {
    let t = tempfile::tempdir().unwrap();
    let out = cgd(&["eval-psnr", "--ckpt", s(&t.path().join("none")), "--data", s(t.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loading checkpoint"));
}
