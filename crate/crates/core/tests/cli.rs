mod common;

use std::path::Path;
use std::process::{Command, Output};

use rcfuse::fusion::FusionPlan;
use rcfuse::netir::load_model;
use rcfuse::tiling::TilePlan;
use serde_json::Value;

use common::model_path;

fn rcfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcfuse")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn model(name: &str) -> String {
    model_path(name).to_str().unwrap().to_string()
}

#[test]
fn convert_writes_the_shipped_converted_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.json");
    let o = rcfuse(&["convert", &model("yolov2_baseline.json"), "-o", path(&out)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("params"));
    let mut a = load_model(&out).unwrap();
    let b = load_model(model_path("yolov2_converted.json")).unwrap();
    a.name = b.name.clone();
    assert_eq!(a, b);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let o = rcfuse(&["plan", path(&bad)]);
    assert_eq!(o.status.code(), Some(3));
    let diag: Value = serde_json::from_str(String::from_utf8_lossy(&o.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(diag["error"], "parse");
    assert_eq!(diag["exit_code"], 3);

    let invalid = dir.path().join("invalid.json");
    std::fs::write(
        &invalid,
        r#"{"name":"x","input":{"w":4,"h":4,"c":1},"layers":[{"id":0,"kind":"conv","k":2,"out_channels":2}]}"#,
    )
    .unwrap();
    assert_eq!(rcfuse(&["plan", path(&invalid)]).status.code(), Some(4));

    assert_eq!(rcfuse(&["plan", "--no-such-flag", &model("toy_rcnet.json")]).status.code(), Some(2));
    assert_eq!(rcfuse(&["plan", &model("toy_rcnet.json"), "--weight-buffer", "0"]).status.code(), Some(2));

    let out = dir.path().join("p.json");
    let o = rcfuse(&["prune", &model("toy_rcnet.json"), "-o", path(&out), "--budget", "1000"]);
    assert_eq!(o.status.code(), Some(5));

    let missing = dir.path().join("missing.json");
    assert_eq!(rcfuse(&["plan", path(&missing)]).status.code(), Some(1));
}

#[test]
fn plan_and_tile_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pj = dir.path().join("plan.json");
    let o = rcfuse(&["plan", &model("toy_rcnet.json"), "--weight-buffer", "100K", "--json", path(&pj)]);
    assert!(o.status.success());
    let v = json(&pj);
    let plan: FusionPlan = serde_json::from_value(v["plan"].clone()).unwrap();
    assert_eq!(plan.groups.len(), 2);
    assert_eq!(serde_json::to_value(&plan).unwrap(), v["plan"]);

    let tj = dir.path().join("tile.json");
    let trace = dir.path().join("trace.csv");
    let o = rcfuse(&[
        "tile",
        &model("rc_yolov2_like.json"),
        "--json",
        path(&tj),
        "--trace",
        path(&trace),
        "--trace-layer",
        "0",
    ]);
    assert!(o.status.success());
    let v = json(&tj);
    let tiles: Vec<TilePlan> = serde_json::from_value(v["tiles"].clone()).unwrap();
    assert_eq!(serde_json::to_value(&tiles).unwrap(), v["tiles"]);
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("spatial,channel,bank,word,lane"));
    let first = &tiles[0];
    let rows = first.tile_height / 2; // layer 0 pools by 2
    assert_eq!(lines.count() as u32, rows * 640 * 32);
}

#[test]
fn sweep_writes_a_monotone_plot() {
    let dir = tempfile::tempdir().unwrap();
    let plot = dir.path().join("sweep.dat");
    let o = rcfuse(&["sweep", &model("rc_yolov2_like.json"), "--sizes", "50K..300K", "-o", path(&plot)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&plot).unwrap();
    let rows: Vec<(u64, f64)> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let mut it = l.split_whitespace();
            (it.next().unwrap().parse().unwrap(), it.next().unwrap().parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[0].0, 50 * 1024);
    assert!(rows.windows(2).all(|w| w[1].1 <= w[0].1));
}

#[test]
fn report_against_the_baseline_model() {
    let dir = tempfile::tempdir().unwrap();
    let rj = dir.path().join("r.json");
    let o = rcfuse(&[
        "report",
        &model("rc_yolov2_like.json"),
        "--baseline",
        &model("yolov2_baseline.json"),
        "--json",
        path(&rj),
    ]);
    assert!(o.status.success());
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.lines().any(|l| l.starts_with("feature MB/s") && l.ends_with("87.5%")), "{table}");
    let v = json(&rj);
    let want = 1.0 - 11_025_840.0 / 88_276_400.0;
    assert!((v["feature_reduction"].as_f64().unwrap() - want).abs() < 1e-12);
    let e = v["baseline_energy"]["mj_per_s"].as_f64().unwrap();
    let bw = v["baseline"]["total_bandwidth"].as_f64().unwrap();
    assert!((e - bw * 8.0 * 70.0 * 1e-9).abs() < 1e-6);
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        let o = rcfuse(&["pipeline", &model("toy_rcnet.json"), "--seed", "7", "--json", path(p)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let v = json(&a);
    assert!(v["traffic"]["fused"]["total_bytes"].as_u64() <= v["traffic"]["baseline"]["total_bytes"].as_u64());
}

#[test]
fn pipeline_on_a_single_layer() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("one.json");
    std::fs::write(
        &m,
        r#"{"name":"one","input":{"w":16,"h":16,"c":3},"layers":[{"id":0,"kind":"conv","k":3,"out_channels":8}]}"#,
    )
    .unwrap();
    let rj = dir.path().join("r.json");
    let o = rcfuse(&["pipeline", path(&m), "--json", path(&rj)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&rj);
    assert_eq!(v["groups"], serde_json::json!([[0]]));
    assert_eq!(v["tiles"][0]["tile_count"], 1);
    assert_eq!(v["final_model"]["params"], 3 * 3 * 3 * 8);
}

#[test]
fn simulate_writes_a_raw_output() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    std::fs::write(
        &m,
        r#"{"name":"m","input":{"w":12,"h":24,"c":3},"layers":[
            {"id":0,"kind":"conv","k":3,"out_channels":8},
            {"id":1,"kind":"depthwise","k":3},
            {"id":2,"kind":"pointwise","out_channels":8},
            {"id":3,"kind":"add","residual_from":0},
            {"id":4,"kind":"head","k":1,"out_channels":5}]}"#,
    )
    .unwrap();
    let raw = dir.path().join("y.raw");
    let sj = dir.path().join("s.json");
    let o = rcfuse(&[
        "simulate",
        path(&m),
        "--functional",
        "--dataflow",
        "--feature-half",
        "2000",
        "--output",
        path(&raw),
        "--json",
        path(&sj),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let y = rcfuse::sim::Tensor::read_raw(std::fs::File::open(&raw).unwrap()).unwrap();
    assert_eq!(y.shape, rcfuse::TensorShape::new(12, 24, 5));
    let v = json(&sj);
    assert_eq!(v["measured_passes"], v["perf"]["total_cycles"]);
    let check = &v["functional_check"];
    let checked = check["rows_checked"].as_u64().unwrap();
    assert!(checked > 0);
    assert_eq!(checked + check["seam_rows_skipped"].as_u64().unwrap(), 24);
    let o = rcfuse(&["simulate", path(&m), "--functional", "--precision-bits", "16"]);
    assert_eq!(o.status.code(), Some(2));
}
