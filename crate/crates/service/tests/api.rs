use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use vbitn_core::autodiff::Tensor;
use vbitn_core::checkpoint::Checkpoint;
use vbitn_core::data_synth::{decode_png, encode_png, generate_dataset, ImageBatch, StyleFamily};
use vbitn_core::networks::ModelBundle;
use vbitn_core::trainer::{AdamState, TrainConfig};
use vbitn_core::translation::{request_rng, translate};
use vbitn_service::{router, sha256_hex, AppState, ErrorBody, MetaResponse, ServiceConfig, TranslateResponse};

fn config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data.domains = vec!["ink".into(), "paint".into(), "neon".into()];
    cfg.model.widths = vec![4, 8, 8];
    cfg.model.disc_widths = vec![4, 4, 4];
    cfg
}

fn bundle() -> ModelBundle {
    let cfg = config();
    ModelBundle::init(cfg.model.clone(), cfg.domain_specs().unwrap(), 3).unwrap()
}

fn images(n: usize) -> ImageBatch {
    generate_dataset(StyleFamily::Ink, n, 11, 32).unwrap()
}

fn app_with(cfg: ServiceConfig) -> Router {
    router(AppState::new(bundle(), "test-ckpt".into(), Some(images(4)), cfg))
}

fn app() -> Router {
    app_with(ServiceConfig::default())
}

/// What the server sees after the PNG round trip.
fn quantized(t: &Tensor<f32>) -> Tensor<f32> {
    decode_png(&encode_png(t).unwrap()).unwrap()
}

fn png_b64(t: &Tensor<f32>) -> String {
    B64.encode(encode_png(t).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", uri, Some(body)).await
}

async fn session(app: &Router, image: &Tensor<f32>) -> String {
    let (status, v) = post(app, "/api/session", json!({ "image": png_b64(image) })).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

fn error_code(v: &Value) -> String {
    serde_json::from_value::<ErrorBody>(v.clone()).unwrap().error.code
}

#[tokio::test]
async fn meta_describes_the_model() {
    let app = app();
    let (status, v) = call(&app, "GET", "/api/meta", None).await;
    assert_eq!(status, StatusCode::OK);
    let meta: MetaResponse = serde_json::from_value(v).unwrap();
    assert_eq!(meta.source, "ink");
    assert_eq!(meta.targets, vec!["paint", "neon"]);
    assert_eq!((meta.style_dim, meta.content_dim), (8, 16));
    assert_eq!(meta.image_shape, [32, 32, 3]);
    assert_eq!(meta.checkpoint_id, "test-ckpt");
    assert_eq!(meta.dataset_size, Some(4));
    let (_, again) = call(&app, "GET", "/api/meta", None).await;
    assert_eq!(again["checkpoint_id"], "test-ckpt");
}

#[tokio::test]
async fn checkpoint_id_is_the_file_hash() {
    let cfg = config();
    let b = bundle();
    let ckpt = Checkpoint {
        step: 0,
        config_text: cfg.to_toml(),
        config: cfg,
        params: b.params.clone(),
        gen_optim: AdamState::default(),
        disc_optim: AdamState::default(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vbit");
    ckpt.save(&path).unwrap();
    let state = AppState::from_checkpoint(&path, None, ServiceConfig::default()).unwrap();
    assert_eq!(state.checkpoint_id(), sha256_hex(&std::fs::read(&path).unwrap()));
    let (_, v) = call(&router(state), "GET", "/api/meta", None).await;
    assert_eq!(v["checkpoint_id"].as_str().unwrap().len(), 64);
    assert_eq!(v["dataset_size"], Value::Null);
}

#[tokio::test]
async fn sessions_report_posteriors_and_are_keyed_by_content() {
    let app = app();
    let data = images(4);
    let (status, v) = post(&app, "/api/session", json!({ "image": png_b64(&data.image(1)) })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["style"]["mean"].as_array().unwrap().len(), 8);
    assert_eq!(v["content"]["std"].as_array().unwrap().len(), 16);
    assert!(v["content"]["std"].as_array().unwrap().iter().all(|s| s.as_f64().unwrap() > 0.0));

    let (_, again) = post(&app, "/api/session", json!({ "image": png_b64(&data.image(1)) })).await;
    assert_eq!(again["session_id"], v["session_id"]);
    let (_, other) = post(&app, "/api/session", json!({ "image": png_b64(&data.image(2)) })).await;
    assert_ne!(other["session_id"], v["session_id"]);

    let (status, by_index) = post(&app, "/api/session", json!({ "dataset_index": 3 })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(by_index["session_id"].as_str().unwrap().len(), 32);
    let (status, missing) = post(&app, "/api/session", json!({ "dataset_index": 99 })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&missing), "unknown_image");
}

#[tokio::test]
async fn translate_matches_the_library() {
    let app = app();
    let data = images(2);
    let id = session(&app, &data.image(0)).await;
    let (status, v) = post(&app, "/api/translate", json!({ "session_id": id, "target": "paint", "seed": 9 })).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let resp: TranslateResponse = serde_json::from_value(v).unwrap();
    let direct = translate(&bundle(), &quantized(&data.image(0)), "paint", &mut request_rng(9)).unwrap();
    assert_eq!(B64.decode(&resp.image).unwrap(), encode_png(&direct.image).unwrap());
    let y: Vec<f32> = direct.latents.y.iter().map(|v| *v as f32).collect();
    assert_eq!(resp.latents.y, y);
    assert_eq!(resp.decoder, "paint");
    assert_eq!(resp.session_id, id);
}

#[tokio::test]
async fn inline_images_work_without_a_session() {
    let app = app();
    let img = images(1).image(0);
    let body = json!({ "image": png_b64(&img), "target": "neon", "seed": 4 });
    let (status, cold) = post(&app, "/api/translate", body).await;
    assert_eq!(status, StatusCode::OK, "{cold}");
    let id = session(&app, &img).await;
    assert_eq!(cold["session_id"], id.as_str());
    let (_, warm) = post(&app, "/api/translate", json!({ "session_id": id, "target": "neon", "seed": 4 })).await;
    assert_eq!(cold, warm);
}

#[tokio::test]
async fn one_hot_mix_equals_translate() {
    let app = app();
    let id = session(&app, &images(1).image(0)).await;
    for (weights, target) in [(json!([1.0, 0.0]), "paint"), (json!([0.0, 1.0]), "neon")] {
        let (s1, mix) = post(&app, "/api/mix", json!({ "session_id": id, "weights": weights, "seed": 7 })).await;
        let (s2, tr) = post(&app, "/api/translate", json!({ "session_id": id, "target": target, "seed": 7 })).await;
        assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
        assert_eq!(mix["image"], tr["image"]);
        assert_eq!(mix["y"], tr["latents"]["y"]);
        assert_eq!(mix["chosen_decoder"], target);
    }
    let (_, mixed) = post(&app, "/api/mix", json!({ "session_id": id, "weights": [0.5, 0.5], "seed": 7 })).await;
    assert_eq!(mixed["chosen_decoder"], "paint");
    assert_eq!(mixed["y_source"]["kind"], "mixture");
}

#[tokio::test]
async fn style_edits_share_content() {
    let app = app();
    let id = session(&app, &images(1).image(0)).await;
    let (_, one) = post(&app, "/api/edit/style", json!({ "session_id": id, "target": "paint", "l": 1, "seed": 3 })).await;
    let (_, tr) = post(&app, "/api/translate", json!({ "session_id": id, "target": "paint", "seed": 3 })).await;
    assert_eq!(one["images"][0], tr["image"]);

    let (status, v) = post(&app, "/api/edit/style", json!({ "session_id": id, "target": "paint", "l": 8, "seed": 3 })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["images"].as_array().unwrap().len(), 8);
    let ys = v["y_list"].as_array().unwrap();
    assert_eq!(ys.len(), 8);
    assert_ne!(ys[0], ys[1]);
    for l in v["latents"].as_array().unwrap() {
        assert_eq!(l["z"], v["z"]);
    }
}

#[tokio::test]
async fn content_edits_share_style() {
    let app = app();
    let id = session(&app, &images(1).image(0)).await;
    let (_, one) = post(&app, "/api/edit/content", json!({ "session_id": id, "target": "neon", "m": 1, "seed": 5 })).await;
    let (_, tr) = post(&app, "/api/translate", json!({ "session_id": id, "target": "neon", "seed": 5 })).await;
    assert_eq!(one["images"][0], tr["image"]);

    let (status, v) = post(&app, "/api/edit/content", json!({ "session_id": id, "target": "neon", "m": 5, "seed": 5 })).await;
    assert_eq!(status, StatusCode::OK);
    let zs = v["z_list"].as_array().unwrap();
    assert_eq!(zs.len(), 5);
    assert_ne!(zs[0], zs[1]);
    for l in v["latents"].as_array().unwrap() {
        assert_eq!(l["y"], v["y"]);
    }
}

#[tokio::test]
async fn responses_are_deterministic() {
    let app = app();
    let img = images(1).image(0);
    let body = json!({ "image": png_b64(&img), "target": "paint", "l": 3, "seed": 12 });
    let (_, a) = post(&app, "/api/edit/style", body.clone()).await;
    let (_, b) = post(&app_with(ServiceConfig::default()), "/api/edit/style", body).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn latents_round_trip_through_json_exactly() {
    let app = app();
    let id = session(&app, &images(1).image(0)).await;
    let (_, v) = post(&app, "/api/translate", json!({ "session_id": id, "target": "paint", "seed": 1 })).await;
    let direct = translate(&bundle(), &quantized(&images(1).image(0)), "paint", &mut request_rng(1)).unwrap();
    for (got, want) in v["latents"]["z"].as_array().unwrap().iter().zip(&direct.latents.z) {
        let parsed: f32 = got.to_string().parse().unwrap();
        assert_eq!(parsed.to_bits(), (*want as f32).to_bits());
    }
}

#[tokio::test]
async fn unknown_session_is_404() {
    let (status, v) = post(&app(), "/api/translate", json!({ "session_id": "nope", "target": "paint", "seed": 1 })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&v), "unknown_session");
}

#[tokio::test]
async fn invalid_weights_are_422_with_the_constraint() {
    let app = app();
    let id = session(&app, &images(1).image(0)).await;
    for weights in [json!([0.7, 0.7]), json!([1.5, -0.5]), json!([0.5, 0.4999])] {
        let (status, v) = post(&app, "/api/mix", json!({ "session_id": id, "weights": weights, "seed": 1 })).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{weights}");
        assert_eq!(error_code(&v), "constraint_violation");
        assert!(v["error"]["message"].as_str().unwrap().contains("sum to 1 within 1e-6"));
    }
    let (status, v) = post(&app, "/api/mix", json!({ "session_id": id, "weights": [1.0], "seed": 1 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"]["message"].as_str().unwrap().contains("one per target"));
}

#[tokio::test]
async fn oversized_images_are_413() {
    let app = app_with(ServiceConfig { max_image_bytes: 8 << 10, ..Default::default() });
    let big = generate_dataset(StyleFamily::Paint, 1, 1, 64).unwrap().image(0);
    let (status, v) = post(&app, "/api/session", json!({ "image": png_b64(&big) })).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&v), "image_too_large");

    let noise: Vec<f32> = (0..128 * 128 * 3).map(|i| ((i * 7919) % 251) as f32 / 250.0).collect();
    let huge = Tensor::new(vec![128, 128, 3], noise).unwrap();
    let (status, _) = post(&app, "/api/translate", json!({ "image": png_b64(&huge), "target": "paint", "seed": 0 })).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn bad_inputs_are_rejected() {
    let app = app();
    let small = generate_dataset(StyleFamily::Ink, 1, 1, 16).unwrap().image(0);
    let (status, v) = post(&app, "/api/session", json!({ "image": png_b64(&small) })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"]["message"].as_str().unwrap().contains("16x16"));

    let (status, v) = post(&app, "/api/session", json!({ "image": "###" })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&v), "bad_base64");

    let (status, v) = post(&app, "/api/session", json!({ "image": B64.encode(b"not a png") })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&v), "bad_image");

    let id = session(&app, &images(1).image(0)).await;
    let (status, v) = post(&app, "/api/translate", json!({ "session_id": id, "target": "ink", "seed": 1 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&v), "unknown_domain");

    let (status, _) = post(&app, "/api/edit/style", json!({ "session_id": id, "target": "paint", "l": 0, "seed": 1 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = post(&app, "/api/edit/content", json!({ "session_id": id, "target": "paint", "m": 1000, "seed": 1 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, v) = post(&app, "/api/translate", json!({ "session_id": id, "target": "paint" })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"]["message"].as_str().unwrap().contains("seed"));

    let (status, _) = post(&app, "/api/translate", json!({ "target": "paint", "seed": 1 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn cors_headers_are_sent() {
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/api/translate")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app().oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_burst_keeps_sessions_apart() {
    let app = app();
    let data = images(32);
    let b = bundle();
    let mut handles = Vec::new();
    for i in 0..32 {
        let app = app.clone();
        let img = data.image(i);
        handles.push(tokio::spawn(async move {
            let id = session(&app, &img).await;
            let (status, v) = post(&app, "/api/translate", json!({ "session_id": id, "target": "paint", "seed": i })).await;
            (i, id, status, v)
        }));
    }
    let mut ids = std::collections::HashSet::new();
    for h in handles {
        let (i, id, status, v) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["session_id"], id.as_str());
        let direct = translate(&b, &quantized(&data.image(i)), "paint", &mut request_rng(i as u64)).unwrap();
        let z: Vec<f32> = direct.latents.z.iter().map(|v| *v as f32).collect();
        let got: Vec<f32> = serde_json::from_value(v["latents"]["z"].clone()).unwrap();
        assert_eq!(got, z, "request {i} got another session's content");
        ids.insert(id);
    }
    assert_eq!(ids.len(), 32);
}

#[tokio::test]
async fn old_sessions_expire_without_touching_others() {
    let app = app_with(ServiceConfig { max_sessions: 2, ..Default::default() });
    let data = images(3);
    let a = session(&app, &data.image(0)).await;
    let b = session(&app, &data.image(1)).await;
    let c = session(&app, &data.image(2)).await;
    let (status, _) = post(&app, "/api/translate", json!({ "session_id": a, "target": "paint", "seed": 1 })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    for id in [b, c] {
        let (status, _) = post(&app, "/api/translate", json!({ "session_id": id, "target": "paint", "seed": 1 })).await;
        assert_eq!(status, StatusCode::OK);
    }
}
