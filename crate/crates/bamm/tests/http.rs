use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use bamm::data::{generate_dataset, GeneratorSpec};
use bamm::decoder::{DecodeConfig, ModelStack};
use bamm::pipeline::{fit_tokenizer, prepare_motions, tokenize_all, RunConfig};
use bamm::service::{router, ServiceState};
use bamm::trainer::{train_main, train_refiner, TrainOutputs};
use bamm::transformer::{MainTransformer, Refiner};
use candle_core::DType;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// A briefly trained stack; the service contract does not depend on quality.
fn state() -> Arc<ServiceState> {
    static STATE: OnceLock<Arc<ServiceState>> = OnceLock::new();
    STATE
        .get_or_init(|| {
            let mut cfg = RunConfig::preset("toy").unwrap();
            cfg.tokenizer_train.steps = 10;
            cfg.train.steps = 4;
            cfg.refiner_train.steps = 2;
            let spec = GeneratorSpec::standard(8, 3);
            let records = generate_dataset(&spec).unwrap();
            let labels = spec.label_names();
            let max = cfg.transformer.max_tokens();
            let tok = fit_tokenizer(&records, &cfg, max, |_| {}).unwrap();
            let motions = prepare_motions(&tok, &records, max).unwrap();
            let (tokens, grids) = tokenize_all(&tok, &motions).unwrap();
            let k = tok.config().codebook_size;
            let main = MainTransformer::new(cfg.transformer_for(k, labels.len()), 7, DType::F32).unwrap();
            train_main(&main, &tokens, &cfg.train, &TrainOutputs::default(), |_| {}).unwrap();
            let refiner = Refiner::new(cfg.refiner_for(k, labels.len(), tok.config().num_quantizers), 7, DType::F32).unwrap();
            train_refiner(&refiner, &grids, &cfg.refiner_train, &TrainOutputs::default(), |_| {}).unwrap();
            let stack = ModelStack { tokenizer: tok, main, refiner: Some(refiner), labels };
            ServiceState::new(stack, DecodeConfig::toy(), 2)
        })
        .clone()
}

fn app() -> Router {
    router(state())
}

async fn call(req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn post_raw(uri: &str, body: String) -> (StatusCode, Vec<u8>) {
    call(Request::post(uri).header("content-type", "application/json").body(Body::from(body)).unwrap()).await
}

async fn post(uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = post_raw(uri, body.to_string()).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn assert_error(status: StatusCode, body: &Value, needle: &str) {
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    assert_eq!(body["error"]["code"], "bad_request");
    let msg = body["error"]["message"].as_str().unwrap();
    assert!(msg.contains(needle), "`{msg}` does not mention `{needle}`");
}

#[tokio::test]
async fn health_and_labels() {
    let (s, v) = get("/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));

    let (s, v) = get("/labels").await;
    assert_eq!(s, StatusCode::OK);
    let labels = v["labels"].as_array().unwrap();
    assert_eq!(labels.len(), 5);
    assert_eq!(labels[4], json!({"id": 4, "name": "walk_then_jump"}));
}

#[tokio::test]
async fn generate_fixed_length_and_repeatable() {
    let body = json!({"label": 1, "length": 40, "seed": 5});
    let (s, v) = post("/generate", body.clone()).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["length"], 40);
    assert_eq!(v["frames"].as_array().unwrap().len(), 40);
    assert_eq!(v["frames"][0].as_array().unwrap().len(), bamm::data::FEATURE_DIM);
    assert_eq!(v["tokens"].as_array().unwrap().len(), 10);
    assert_eq!(v["confidences"].as_array().unwrap().len(), 10);

    let (_, a) = post_raw("/generate", body.to_string()).await;
    let (_, b) = post_raw("/generate", body.to_string()).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn generate_with_predicted_length_and_preset() {
    let (s, v) = post("/generate", json!({"label": 0, "seed": 1, "cfg": "kit-paper"})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let t = v["tokens"].as_array().unwrap().len();
    assert!(t >= 1 && t <= 50);
    assert_eq!(v["length"].as_u64().unwrap() as usize, 4 * t);
}

#[tokio::test]
async fn generate_rejects_bad_input() {
    let (s, v) = post("/generate", json!({"label": 1, "length": 30})).await;
    assert_error(s, &v, "length");
    let (s, v) = post("/generate", json!({"label": "walk"})).await;
    assert_error(s, &v, "invalid field `label`");
    let (s, v) = post("/generate", json!({"label": 99})).await;
    assert_error(s, &v, "label");
    let (s, v) = post("/generate", json!({"label": 1, "cfg": "enormous"})).await;
    assert_error(s, &v, "enormous");
    let (s, v) = post("/generate", json!({"label": 1, "colour": "red"})).await;
    assert_error(s, &v, "colour");
    let (s, b) = post_raw("/generate", "{\"label\": ".into()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(serde_json::from_slice::<Value>(&b).unwrap()["error"]["message"].is_string());
}

#[tokio::test]
async fn edit_tokens_preserves_unmasked_positions() {
    let source: Vec<u32> = (0..12).map(|i| (i * 5) % 64).collect();
    let (s, v) = post("/edit", json!({"tokens": source, "label": 2, "task": "inpaint", "seed": 3})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let tokens: Vec<u32> = serde_json::from_value(v["tokens"].clone()).unwrap();
    assert_eq!(tokens.len(), 12);
    let preserved = v["preserved_positions"].as_array().unwrap();
    // First and last quarter of 12 tokens are kept.
    let positions: Vec<u64> = preserved.iter().map(|p| p["position"].as_u64().unwrap()).collect();
    assert_eq!(positions, vec![1, 2, 3, 10, 11, 12]);
    for p in preserved {
        let pos = p["position"].as_u64().unwrap() as usize;
        assert_eq!(p["token"].as_u64().unwrap() as u32, source[pos - 1]);
        assert_eq!(tokens[pos - 1], source[pos - 1]);
    }
    assert_eq!(v["frames"].as_array().unwrap().len(), 48);
}

#[tokio::test]
async fn edit_frames_custom_span() {
    let (_, g) = post("/generate", json!({"label": 0, "length": 48, "seed": 2})).await;
    let frames = g["frames"].clone();
    let (s, v) = post("/edit", json!({"frames": frames, "label": 3, "task": "custom", "spans": [[23, 42]], "seed": 4})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let out = v["frames"].as_array().unwrap();
    assert_eq!(out.len(), 48);
    // Frames outside the token-aligned span [20, 44) are copied from the source.
    for f in (0..20).chain(44..48) {
        assert_eq!(out[f], frames[f], "frame {f}");
    }
    let positions: Vec<u64> = v["preserved_positions"].as_array().unwrap().iter().map(|p| p["position"].as_u64().unwrap()).collect();
    assert_eq!(positions, vec![1, 2, 3, 4, 5, 12]);
}

#[tokio::test]
async fn edit_rejects_bad_input() {
    let (s, v) = post("/edit", json!({"tokens": [1, 2, 3, 4], "label": 0, "task": "custom", "spans": [[0, "x"]]})).await;
    assert_error(s, &v, "invalid field `spans[0][1]`");
    let (s, v) = post("/edit", json!({"tokens": [1, 2], "frames": [[0.0]], "label": 0, "task": "prefix"})).await;
    assert_error(s, &v, "exactly one");
    let (s, v) = post("/edit", json!({"tokens": [1, 2, 3, 4], "label": 0, "task": "rewind"})).await;
    assert_error(s, &v, "invalid field `task`");
    let (s, v) = post("/edit", json!({"tokens": [1, 2, 3, 4], "label": 0, "task": "custom", "spans": [[4, 2]]})).await;
    assert_error(s, &v, "span");
}

#[tokio::test]
async fn tokenize_detokenize_round_trip_shapes() {
    let frames: Vec<Vec<f32>> = (0..18).map(|i| (0..bamm::data::FEATURE_DIM).map(|j| ((i * j) as f32 * 0.1).sin()).collect()).collect();
    let (s, v) = post("/tokenize", json!({"frames": frames})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let grid: Vec<Vec<u32>> = serde_json::from_value(v["token_grid"].clone()).unwrap();
    assert_eq!(grid.len(), 3);
    assert!(grid.iter().all(|r| r.len() == 5), "18 frames pad up to 5 tokens");

    let (s, v) = post("/detokenize", json!({"token_grid": grid})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["frames"].as_array().unwrap().len(), 20);
    let (s, v) = post("/detokenize", json!({"token_grid": [grid[0].clone()]})).await;
    assert_eq!(s, StatusCode::OK, "base layer alone decodes: {v}");

    let (s, v) = post("/detokenize", json!({"token_grid": [[1, 2, 999]]})).await;
    assert_error(s, &v, "token_grid");
    let (s, v) = post("/tokenize", json!({"frames": [[1.0, 2.0]]})).await;
    assert_error(s, &v, "frames");
}

#[tokio::test]
async fn unknown_route_is_404() {
    let (s, _) = get("/nope").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
