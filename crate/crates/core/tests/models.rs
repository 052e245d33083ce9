mod common;

use rcfuse::convert::to_lightweight;
use rcfuse::netir::validate;
use rcfuse::{Error, LayerKind, NetGraph, TensorShape};
use serde_json::Value;

use common::{model_path, shipped};

/// (kernel, out_channels, pool) rows of the baseline backbone and head.
const YOLOV2: [(u64, u64, u64); 22] = [
    (3, 32, 2),
    (3, 64, 2),
    (3, 128, 1),
    (1, 64, 1),
    (3, 128, 2),
    (3, 256, 1),
    (1, 128, 1),
    (3, 256, 2),
    (3, 512, 1),
    (1, 256, 1),
    (3, 512, 1),
    (1, 256, 1),
    (3, 512, 2),
    (3, 1024, 1),
    (1, 512, 1),
    (3, 1024, 1),
    (1, 512, 1),
    (3, 1024, 1),
    (3, 1024, 1),
    (3, 1024, 1),
    (3, 1024, 1),
    (1, 125, 1),
];

fn yolov2_params() -> u64 {
    let mut cin = 3;
    let mut total = 0;
    for (k, out, _) in YOLOV2 {
        total += k * k * cin * out;
        cin = out;
    }
    total
}

fn yolov2_feature_io(w: u64, h: u64) -> u64 {
    let (mut w, mut h, mut c) = (w, h, 3);
    let mut total = 0;
    for (_, out, pool) in YOLOV2 {
        let input = w * h * c;
        w /= pool;
        h /= pool;
        c = out;
        total += input + w * h * c;
    }
    total
}

fn yolov2_converted_params() -> u64 {
    let mut cin = 3;
    let mut total = 0;
    for (i, (k, out, _)) in YOLOV2.into_iter().enumerate() {
        total += if i == 0 || k == 1 {
            k * k * cin * out
        } else {
            k * k * cin + cin * out
        };
        cin = out;
    }
    total
}

/// Weight count straight from a model file.
fn file_params(path: &str) -> u64 {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(model_path(path)).unwrap()).unwrap();
    let mut c = v["input"]["c"].as_u64().unwrap();
    let mut total = 0;
    for l in v["layers"].as_array().unwrap() {
        let k = l["k"].as_u64().unwrap_or(1);
        match l["kind"].as_str().unwrap() {
            "conv" | "head" | "pointwise" => {
                let out = l["out_channels"].as_u64().unwrap();
                total += k * k * c * out;
                c = out;
            }
            "depthwise" => total += k * k * c,
            _ => {}
        }
    }
    total
}

#[test]
fn shipped_models_load_and_round_trip() {
    for name in [
        "yolov2_baseline.json",
        "yolov2_baseline_416.json",
        "yolov2_converted.json",
        "rc_yolov2_like.json",
        "toy_rcnet.json",
    ] {
        let g = shipped(name);
        assert!(validate(&g).is_empty(), "{name}");
        assert_eq!(NetGraph::from_json(&g.to_json()).unwrap(), g, "{name}");
    }
}

#[test]
fn baseline_sizes_match_the_layer_table() {
    let g = shipped("yolov2_baseline.json");
    assert_eq!(g.param_count(), yolov2_params());
    assert_eq!(g.param_count(), 48_242_528);
    assert_eq!(g.feature_io_bytes(1), yolov2_feature_io(1280, 720));
    assert_eq!(g.input, TensorShape::new(1280, 720, 3));
    assert_eq!(g.output_shape(), TensorShape::new(40, 22, 125));
}

#[test]
fn baseline_416_has_a_13_by_13_grid() {
    let g = shipped("yolov2_baseline_416.json");
    assert_eq!(g.output_shape(), TensorShape::new(13, 13, 125));
    assert_eq!(g.feature_io_bytes(1), yolov2_feature_io(416, 416));
}

#[test]
fn converted_model_matches_conversion() {
    let base = shipped("yolov2_baseline.json");
    let conv = to_lightweight(&base).unwrap();
    assert_eq!(conv.param_count(), yolov2_converted_params());
    let mut shipped_conv = shipped("yolov2_converted.json");
    shipped_conv.name = conv.name.clone();
    assert_eq!(shipped_conv, conv);
    assert_eq!(to_lightweight(&conv).unwrap(), conv);
    assert_eq!(conv.layers[0].kind, LayerKind::Conv);
}

#[test]
fn rc_like_model_size() {
    let g = shipped("rc_yolov2_like.json");
    assert_eq!(g.param_count(), file_params("rc_yolov2_like.json"));
    assert_eq!(g.param_count(), 1_014_880);
    assert_eq!(g.output_shape(), TensorShape::new(40, 22, 125));
}

#[test]
fn malformed_files_are_rejected() {
    assert!(matches!(NetGraph::from_json("{"), Err(Error::Parse(_))));
    let unknown = r#"{"name":"x","input":{"w":4,"h":4,"c":1},"layers":[{"id":0,"kind":"conv","k":3,"out_channels":2,"bogus":1}]}"#;
    assert!(matches!(NetGraph::from_json(unknown), Err(Error::Parse(_))));
    let bad_kind = r#"{"name":"x","input":{"w":4,"h":4,"c":1},"layers":[{"id":0,"kind":"lstm"}]}"#;
    assert!(matches!(NetGraph::from_json(bad_kind), Err(Error::Parse(_))));
    let forward = r#"{"name":"x","input":{"w":4,"h":4,"c":1},"layers":[{"id":0,"kind":"add","residual_from":1}]}"#;
    assert!(matches!(NetGraph::from_json(forward), Err(Error::Validation(_))));
    let mismatch = r#"{"name":"x","input":{"w":8,"h":8,"c":1},"layers":[
        {"id":0,"kind":"conv","k":3,"out_channels":2},
        {"id":1,"kind":"maxpool","k":2,"stride":2},
        {"id":2,"kind":"add","residual_from":0}]}"#;
    assert!(NetGraph::from_json(mismatch).is_err());
}
