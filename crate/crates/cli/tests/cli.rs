use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vltb::datagen::{read_ppm, write_ppm};
use vltb::image::ImageU8;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vltb"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn smoke() -> PathBuf {
    configs().join("smoke.ini")
}

#[test]
fn single_run_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let run_dir = tmp.path().join(name);
        ok(&["gen-data", "--config", s(&smoke()), "--run", s(&run_dir)]);
        for step in ["pretrain", "finetune", "eval", "corrupt-eval"] {
            ok(&[step, "--run", s(&run_dir)]);
        }
        for f in ["config.ini", "env.txt", "encoder.ckpt", "model.ckpt", "history.csv", "corrupt.csv"] {
            assert!(run_dir.join(f).is_file(), "{name}: missing {f}");
        }
        metrics.push(fs::read(run_dir.join("metrics.csv")).unwrap());
        metrics.push(fs::read(run_dir.join("corrupt.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[2]);
    assert_eq!(metrics[1], metrics[3]);
    let text = String::from_utf8(metrics[0].clone()).unwrap();
    assert!(text.starts_with("run_id,seed,init_mode,task,domain,metric,value\n"));
    assert!(text.contains("targets,dg_mean"));
    // source + 3 targets + dg_mean + rpd (when the source metric is positive)
    assert!(text.lines().count() >= 6, "{text}");

    let report_dir = tmp.path().join("report");
    ok(&["report", "--out", s(&report_dir), s(&tmp.path().join("a"))]);
    let report = fs::read_to_string(report_dir.join("report.csv")).unwrap();
    assert!(report.lines().count() > text.lines().count());
    let summary = fs::read_to_string(report_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("run_id,init_mode,task,domain,metric,n,median,min,max\n"));

    // the same directory twice is a duplicate-row error, not a silent merge
    let dup = run(&["report", "--out", s(&report_dir), s(&tmp.path().join("a")), s(&tmp.path().join("a"))]);
    assert!(!dup.status.success());
}

#[test]
fn sweeps_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for sweep in ["pretrain-compare", "freeze-sweep", "lemma1"] {
        let mut outputs = Vec::new();
        for name in ["x", "y"] {
            let out = tmp.path().join(format!("{sweep}-{name}"));
            ok(&[sweep, "--config", s(&smoke()), "--out", s(&out)]);
            let file = if sweep == "lemma1" { "lemma1.csv" } else { "metrics.csv" };
            outputs.push(fs::read(out.join(file)).unwrap());
        }
        assert!(!outputs[0].is_empty());
        assert_eq!(outputs[0], outputs[1], "{sweep}");
    }
    let compare = fs::read_to_string(tmp.path().join("pretrain-compare-x/metrics.csv")).unwrap();
    assert!(compare.contains("compare-vl-contrastive,0,"));
    assert!(compare.contains("compare-random-init,1,"));
    let freeze = fs::read_to_string(tmp.path().join("freeze-sweep-x/metrics.csv")).unwrap();
    assert!(freeze.contains("freeze-early-to-deep-k8"));
    let lemma = fs::read_to_string(tmp.path().join("lemma1-x/lemma1.csv")).unwrap();
    assert_eq!(lemma.lines().count(), 1 + 2 * 2);
}

#[test]
fn corrupt_writes_a_same_size_image() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in.ppm");
    let data = (0..16 * 16 * 3).map(|i| (i * 7 % 256) as u8).collect();
    let img = ImageU8 {
        height: 16,
        width: 16,
        channels: 3,
        data,
    };
    write_ppm(&input, &img).unwrap();
    let out = tmp.path().join("out.ppm");
    ok(&["corrupt", "--type", "gaussian_noise", "--severity", "3", "--seed", "1", "--in", s(&input), "--out", s(&out)]);
    let got = read_ppm(&out).unwrap();
    assert_eq!((got.height, got.width), (16, 16));
    assert_ne!(got.data, img.data);
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();

    let missing = run(&["eval", "--run", s(&tmp.path().join("nowhere"))]);
    assert_eq!(code(&missing), 4);

    let typo = tmp.path().join("typo.ini");
    fs::write(&typo, "[data]\n[pretrain]\ntemprature = 0.1\n[finetune]\n[eval]\n[sweep]\n").unwrap();
    let out = run(&["lemma1", "--config", s(&typo), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("temprature") && err.contains("did you mean `temperature`"), "{err}");

    let bad_type = run(&["corrupt", "--type", "sparkle", "--severity", "1", "--in", "x.ppm", "--out", "y.ppm"]);
    assert_eq!(code(&bad_type), 2);

    let run_dir = tmp.path().join("run");
    ok(&["gen-data", "--config", s(&smoke()), "--run", s(&run_dir)]);
    let no_encoder = run(&["finetune", "--run", s(&run_dir)]);
    assert_eq!(code(&no_encoder), 4);
    let no_input = run(&["corrupt", "--type", "fog", "--severity", "1", "--in", s(&tmp.path().join("none.ppm")), "--out", "y.ppm"]);
    assert_ne!(code(&no_input), 0);
}
