use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use erq::pipeline::RunReport;
use erq::synth::{self, Nonlinearity, SynthSpec};
use erq::tensor_store::{read_tensor, write_tensor, TensorData, TensorFile};

fn erq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erq")).args(args).output().expect("spawn erq")
}

fn synth_manifest(dir: &Path) -> String {
    let spec = SynthSpec {
        seed: 3,
        layers: vec![(8, 16), (6, 8)],
        n_rows: 128,
        activation: Default::default(),
        chain: vec![Nonlinearity::Softmax],
    };
    synth::write_manifest(&spec, dir, 4, 4).unwrap().to_str().unwrap().to_string()
}

#[test]
fn quantize_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_manifest(&dir.path().join("data"));
    let out = dir.path().join("out");
    let o = erq(&["quantize", "--manifest", &manifest, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report: RunReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.layers.len(), 2);
    assert!(report.failures.is_empty());
    assert!(report.layers.iter().all(|l| l.ratios_consistent()));
    assert_eq!(report.layers[1].act_quant.family, erq::quant::Family::LogSqrt2);

    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(
        lines.next().unwrap(),
        "layer_id,channel,iteration,slice_size,proxy_before,proxy_after,mse"
    );
    // 16 inputs → 5 rounds per channel, 8 inputs → 4 rounds.
    assert_eq!(lines.count(), 8 * 5 + 6 * 4);

    let codes = read_tensor(out.join("layer0.codes.npy")).unwrap();
    assert_eq!(codes.shape(), &[8, 16]);
    let TensorData::Int32(values) = codes.data() else {
        panic!("codes are not int32");
    };
    assert!(values.iter().all(|&c| (0..16).contains(&c)));

    let timings: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("timings.json")).unwrap()).unwrap();
    assert!(timings["layer0"]["wqer_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_manifest(&dir.path().join("data"));
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"stages": ["aqer"], "bits_w": 3}"#).unwrap();
    let out = dir.path().join("out");
    let o = erq(&[
        "quantize",
        "--manifest",
        &manifest,
        "--config",
        cfg.to_str().unwrap(),
        "--stages",
        "none",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let report: RunReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for l in &report.layers {
        assert_eq!(l.stages, erq::pipeline::Stages::NONE);
        assert_eq!(l.weight_quant.bits, 3);
        assert_eq!(l.mse_baseline, l.mse_after_wqer);
    }
}

#[test]
fn bad_layer_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = synth_manifest(&data);
    // Corrupt the second layer's calibration batch: wrong width.
    let bad = TensorFile::new(vec![4, 3], TensorData::Float32(vec![0.5; 12])).unwrap();
    write_tensor(data.join("layer1.calib.npy"), &bad).unwrap();
    let out = dir.path().join("out");
    let o = erq(&["quantize", "--manifest", &manifest, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let report: RunReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.layers.len(), 1);
    assert_eq!(report.layers[0].layer_id, "layer0");
    assert_eq!(report.failures.len(), 1);
    assert!(report.failures[0].error.contains("D_in"), "{}", report.failures[0].error);
    assert!(out.join("layer0.codes.npy").exists());
}

#[test]
fn numerical_failure_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    write_tensor(data.join("w.npy"), &TensorFile::new(vec![1, 2], TensorData::Float32(vec![0.5, -0.5])).unwrap()).unwrap();
    write_tensor(data.join("a.npy"), &TensorFile::new(vec![4, 2], TensorData::Float32(vec![0.0; 8])).unwrap()).unwrap();
    fs::write(
        data.join("m.json"),
        r#"{"layers":[{"layer_id":"z","weight_path":"w.npy","calib_path":"a.npy","act_quant":"uniform","bits_w":4,"bits_a":4}]}"#,
    )
    .unwrap();
    let o = erq(&[
        "quantize",
        "--manifest",
        data.join("m.json").to_str().unwrap(),
        "--lambda1",
        "0",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validation_exit_codes() {
    assert_eq!(erq(&["quantize", "--manifest", "/nonexistent.json", "--out", "/tmp/x"]).status.code(), Some(1));
    assert_eq!(erq(&["quantize", "--stages", "bogus"]).status.code(), Some(1));
    assert_eq!(erq(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(erq(&["--help"]).status.code(), Some(0));
}

#[test]
fn ablate_and_sweep_csv() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_manifest(&dir.path().join("data"));
    let out = dir.path().join("out");
    let o = erq(&["ablate", "--manifest", &manifest, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "aqer,rounding,ridge,mse_baseline,mse,reduction_ratio");
    assert_eq!(rows.len(), 9);
    assert!(rows[1].starts_with("false,false,false,"));

    // The all-off row equals the quantize baseline.
    let q = dir.path().join("q");
    assert!(erq(&["quantize", "--manifest", &manifest, "--out", q.to_str().unwrap()]).status.success());
    let report: RunReport = serde_json::from_str(&fs::read_to_string(q.join("report.json")).unwrap()).unwrap();
    let base: f64 = report.layers.iter().map(|l| l.mse_baseline).sum();
    let off: f64 = rows[1].split(',').nth(4).unwrap().parse().unwrap();
    assert_eq!(off, base);

    let o = erq(&["sweep", "--param", "lambda", "--range", "1e2:1e6:10", "--manifest", &manifest]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 6);

    let o = erq(&["sweep", "--param", "k", "--range", "0,1,2", "--manifest", &manifest]);
    assert!(o.status.success());
    let o = erq(&["sweep", "--param", "n_images", "--range", "1000", "--manifest", &manifest]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_passes() {
    let o = erq(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["suites"].as_array().unwrap().len(), 6);
}

#[test]
fn synth_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = erq(&["synth", "--d-out", "3", "--d-in", "5", "--rows", "20", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let w = read_tensor(dir.path().join("layer0.weight.npy")).unwrap();
    assert_eq!(w.shape(), &[3, 5]);
}
