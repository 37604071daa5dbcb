use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use biophys_core::growth::logistic;
use biophys_core::io::Volume;

fn biophys(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biophys"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = biophys(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_reports_small_error() {
    let stdout = ok(&["gradcheck", "--seed", "2024"]);
    let line = stdout
        .lines()
        .find(|l| l.starts_with("max relative error"))
        .unwrap();
    let value: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(value < 1e-5, "{stdout}");
}

#[test]
fn unknown_flag_prints_usage() {
    let out = biophys(&["train", "--frobnicate"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "{stderr}");
}

#[test]
fn pure_reaction_mass_is_logistic() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sim.json");
    fs::write(
        &config,
        r#"{"dims": [4, 4, 4], "d": 0.0, "rho": 0.3, "dt": 0.001, "steps": 10000,
            "snapshot_every": 1000, "initial": {"kind": "constant", "value": 0.1}}"#,
    )
    .unwrap();
    let out = dir.path().join("sim");
    ok(&[
        "simulate",
        "--config",
        path(&config),
        "--out-dir",
        path(&out),
    ]);
    let csv = fs::read_to_string(out.join("mass.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 11);
    for r in &rows {
        let expected = 64.0 * logistic(0.1, 0.3, r[1]);
        assert!(
            (r[2] - expected).abs() < 1e-4 * 64.0,
            "t={} mass={} expected {expected}",
            r[1],
            r[2]
        );
    }
    assert!((rows[10][1] - 10.0).abs() < 1e-9);
    let last = Volume::load(out.join("snapshot_0010.bvol")).unwrap();
    assert_eq!(last.dims, [4, 4, 4]);
}

#[test]
fn constant_volume_exports_uniform_gray() {
    let dir = tempfile::tempdir().unwrap();
    let vol = dir.path().join("c.bvol");
    Volume::new([3, 5, 2], 1, 1.0, vec![0.25; 30])
        .unwrap()
        .save(&vol)
        .unwrap();
    let pgm = dir.path().join("c.pgm");
    ok(&[
        "export-slice",
        "--input",
        path(&vol),
        "--slice",
        "1",
        "--out",
        path(&pgm),
    ]);
    let bytes = fs::read(&pgm).unwrap();
    let header = b"P5\n5 3\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 15);
    assert!(bytes[header.len()..].iter().all(|&b| b == 128));
}

const SMALL_SYNTH: &str = r#"{"dims": [8, 8, 8], "sim_steps": 10, "bump_sigma": [1.0, 1.5]}"#;

#[test]
fn data_train_eval_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let synth = root.join("synth.json");
    fs::write(&synth, SMALL_SYNTH).unwrap();
    let data = root.join("data");
    ok(&[
        "gen-data",
        "--config",
        path(&synth),
        "--seed",
        "5",
        "--cases",
        "10",
        "--out-dir",
        path(&data),
    ]);
    assert!(data.join("index.json").exists());

    let train = |out: &Path| {
        ok(&[
            "train",
            "--data",
            path(&data),
            "--seed",
            "3",
            "--steps",
            "4",
            "--train-size",
            "2",
            "--out-dir",
            path(out),
            "--lambda2",
            "0.5",
            "--drop-channels",
            "1",
        ]);
    };
    let (a, b) = (root.join("a"), root.join("b"));
    train(&a);
    train(&b);
    for f in ["checkpoint.bck", "loss.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let loss = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,lr,total,dice,pde,bc"));
    assert_eq!(loss.lines().count(), 5);

    let eval = root.join("eval");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        path(&a.join("checkpoint.bck")),
        "--data",
        path(&data),
        "--split",
        "test",
        "--out-dir",
        path(&eval),
    ]);
    assert!(stdout.contains("WT"));
    let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("case_id,region,dice,hd95"));
    assert_eq!(
        metrics.lines().filter(|l| l.starts_with("case0")).count(),
        2 * 3
    );
    assert_eq!(
        metrics.lines().filter(|l| l.starts_with("mean,")).count(),
        3
    );
    assert_eq!(metrics.lines().filter(|l| l.starts_with("std,")).count(), 3);
}

#[test]
fn ablate_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("protocol.json");
    fs::write(
        &config,
        format!(r#"{{"train_sizes": [1, 2], "seeds": [0], "steps": 2, "test_cases": 1, "synth": {SMALL_SYNTH}}}"#),
    )
    .unwrap();
    let out = dir.path().join("abl");
    let stdout = ok(&["ablate", "--config", path(&config), "--out-dir", path(&out)]);
    assert!(stdout.contains("biophys"));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(
        summary.lines().next(),
        Some("arm,train_size,seed,dice_tc,dice_wt,dice_et,mean_dice,final_loss")
    );
    assert_eq!(summary.lines().count(), 1 + 2 * 4);
}
