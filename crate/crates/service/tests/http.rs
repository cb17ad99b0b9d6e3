use std::convert::Infallible;
use std::pin::Pin;
use std::task::{Context, Poll};
use std::time::Duration;

use axum::body::{to_bytes, Body, Bytes, HttpBody};
use axum::http::{Request, StatusCode};
use axum::Router;
use finemem_core::reward::{
    compute_eara, compute_nec, grpo_advantages, total_step_rewards, EvidenceRecord, RewardWeights,
};
use finemem_service::{RewardService, ServiceConfig, VERSION};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use http_body::Frame;
use tokio::sync::mpsc;
use tower::ServiceExt;

fn router() -> Router {
    RewardService::new(ServiceConfig::default()).unwrap().router()
}

async fn call(app: &Router, method: &str, path: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(path);
    let request = match body {
        Some(body) => builder
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    raw(app, request).await
}

async fn raw(app: &Router, request: Request<Body>) -> (StatusCode, Value) {
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = to_bytes(response.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn nec_example() -> Value {
    json!({
        "nec_inputs": [
            {"score": 1.0, "retrieved_item_ids": [0, 1], "origin_steps": [0, 1]},
            {"score": 0.0, "retrieved_item_ids": [2], "origin_steps": [0]}
        ],
        "T": 2,
        "r_global": 0.5,
        "beta": 0.5
    })
}

#[tokio::test]
async fn health_reports_version() {
    let (status, body) = call(&router(), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"status": "ok", "version": VERSION}));
}

#[tokio::test]
async fn health_is_unavailable_during_shutdown() {
    let service = RewardService::new(ServiceConfig::default()).unwrap();
    let app = service.router();
    service.shutdown_handle().begin();
    let (status, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["status"], "shutting_down");
}

#[tokio::test]
async fn eara_nec_example() {
    let (status, body) = call(&router(), "POST", "/v1/eara", Some(nec_example())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(floats(&body["rewards"]), vec![0.25, 0.25]);
    assert_eq!(floats(&body["nec"]), vec![0.25, 0.25]);
    assert_eq!(body["conserved"], true);
}

#[tokio::test]
async fn eara_single_step_gets_everything() {
    let body = json!({
        "nec_inputs": [{"score": 0.75, "retrieved_item_ids": [4], "origin_steps": [0]}],
        "T": 1,
        "beta": 0.5
    });
    let (status, body) = call(&router(), "POST", "/v1/eara", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(floats(&body["rewards"]), vec![0.75]);
    assert_eq!(body["r_global"], 0.75);
    assert_eq!(body["conserved"], true);
}

#[tokio::test]
async fn eara_rejects_bad_dimensions() {
    let app = router();
    let mut body = nec_example();
    body["nec_inputs"][0]["origin_steps"] = json!([0, 2]);
    let (status, reply) = call(&app, "POST", "/v1/eara", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{reply}");
    assert_eq!(reply["error"], "invalid_dimensions");

    let mut body = nec_example();
    body["T"] = json!(0);
    assert_eq!(call(&app, "POST", "/v1/eara", Some(body)).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let mut body = nec_example();
    body["nec_inputs"][1]["retrieved_item_ids"] = json!([]);
    assert_eq!(call(&app, "POST", "/v1/eara", Some(body)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn schema_violations_are_400() {
    let app = router();
    let mut body = nec_example();
    body["bogus"] = json!(1);
    assert_eq!(call(&app, "POST", "/v1/eara", Some(body)).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(
        call(&app, "POST", "/v1/advantages", Some(json!({"groups": "x"}))).await.0,
        StatusCode::BAD_REQUEST
    );
    let request = Request::post("/v1/advantages")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let (status, body) = raw(&app, request).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "schema_violation");
}

#[tokio::test]
async fn content_type_is_enforced() {
    let request = Request::post("/v1/advantages")
        .header("content-type", "text/plain")
        .body(Body::from(r#"{"groups":[[0,1]]}"#))
        .unwrap();
    assert_eq!(raw(&router(), request).await.0, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    let request = Request::post("/v1/advantages")
        .header("content-type", "application/json; charset=utf-8")
        .body(Body::from(r#"{"groups":[[0,1]]}"#))
        .unwrap();
    assert_eq!(raw(&router(), request).await.0, StatusCode::OK);
}

#[tokio::test]
async fn advantages_examples() {
    let app = router();
    let (status, body) = call(&app, "POST", "/v1/advantages", Some(json!({"groups": [[0.5, 0.5]]}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"advantages": [[0.0, 0.0]]}));

    let (_, body) = call(&app, "POST", "/v1/advantages", Some(json!({"groups": [[0.2, 0.4, 0.6, 0.8]], "epsilon": 1e-8}))).await;
    let got = floats(&body["advantages"][0]);
    for (g, e) in got.iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
        assert!((g - e).abs() < 1e-4, "{got:?}");
    }

    let (_, body) = call(&app, "POST", "/v1/advantages", Some(json!({"groups": [[0.0, 1.0]], "epsilon": 0.5}))).await;
    assert_eq!(floats(&body["advantages"][0]), vec![-0.5, 0.5]);

    for bad in [json!({"groups": [[1.0]]}), json!({"groups": []}), json!({"groups": [[0, 1]], "epsilon": 0})] {
        assert_eq!(call(&app, "POST", "/v1/advantages", Some(bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    }
}

#[tokio::test]
async fn score_examples() {
    let app = router();
    let body = json!({"r_eara": [0.25, 0.25], "r_fmt": [1.0, 0.5], "r_chunk": [0.6, 1.0], "r_comp": 0.9});
    let (status, reply) = call(&app, "POST", "/v1/rollout/score", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let totals: Vec<f64> = reply["per_step"].as_array().unwrap().iter().map(|r| r["total"].as_f64().unwrap()).collect();
    assert!((totals[0] - 1.595).abs() < 1e-12 && (totals[1] - 1.295).abs() < 1e-12, "{totals:?}");
    assert_eq!(reply["weights"]["w1"], 0.5);
    assert_eq!(reply["weights"]["w2"], 0.05);

    let zeros = json!({"r_eara": [0.0, 0.0, 0.0], "r_fmt": [0.0, 0.0, 0.0], "r_chunk": [0.0, 0.0, 0.0], "r_comp": 0.0});
    let (_, reply) = call(&app, "POST", "/v1/rollout/score", Some(zeros)).await;
    assert!(reply["per_step"].as_array().unwrap().iter().all(|r| r["total"] == 0.0));

    let custom = json!({"r_eara": [0.1], "r_fmt": [1.0], "r_chunk": [1.0], "r_comp": 1.0, "weights": {"w1": 0.0}});
    let (_, reply) = call(&app, "POST", "/v1/rollout/score", Some(custom)).await;
    assert_eq!(reply["weights"]["w1"], 0.0);
    assert_eq!(reply["weights"]["beta"], 0.5);

    let mismatched = json!({"r_eara": [0.1, 0.2], "r_fmt": [1.0], "r_chunk": [1.0, 1.0], "r_comp": 1.0});
    assert_eq!(call(&app, "POST", "/v1/rollout/score", Some(mismatched)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn unknown_paths_and_methods() {
    let app = router();
    assert_eq!(call(&app, "GET", "/v2/none", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/v1/eara", None).await.0, StatusCode::METHOD_NOT_ALLOWED);
}

/// Request body that yields whatever is sent on the channel, so a test can
/// hold a request open.
struct ChannelBody(mpsc::Receiver<Bytes>);

impl HttpBody for ChannelBody {
    type Data = Bytes;
    type Error = Infallible;

    fn poll_frame(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Option<Result<Frame<Bytes>, Infallible>>> {
        self.0.poll_recv(cx).map(|chunk| chunk.map(|b| Ok(Frame::data(b))))
    }
}

fn held_request() -> (mpsc::Sender<Bytes>, Request<Body>) {
    let (tx, rx) = mpsc::channel(1);
    let request = Request::post("/v1/advantages")
        .header("content-type", "application/json")
        .body(Body::new(ChannelBody(rx)))
        .unwrap();
    (tx, request)
}

#[tokio::test]
async fn saturation_answers_503() {
    let config = ServiceConfig {
        max_concurrent_requests: 1,
        request_timeout: Duration::from_secs(5),
        ..ServiceConfig::default()
    };
    let app = RewardService::new(config).unwrap().router();
    let (tx, held) = held_request();
    let pending = tokio::spawn({
        let app = app.clone();
        async move { app.oneshot(held).await.unwrap().status() }
    });
    tokio::time::sleep(Duration::from_millis(50)).await;
    let (status, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "over_capacity");
    tx.send(Bytes::from_static(br#"{"groups":[[0,1]]}"#)).await.unwrap();
    drop(tx);
    assert_eq!(pending.await.unwrap(), StatusCode::OK);
    assert_eq!(call(&app, "GET", "/health", None).await.0, StatusCode::OK);
}

#[tokio::test]
async fn slow_requests_time_out() {
    let config = ServiceConfig {
        request_timeout: Duration::from_millis(50),
        ..ServiceConfig::default()
    };
    let app = RewardService::new(config).unwrap().router();
    let (_tx, held) = held_request();
    let (status, body) = raw(&app, held).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "timeout");
}

#[test]
fn zero_capacity_is_rejected() {
    let config = ServiceConfig {
        max_concurrent_requests: 0,
        ..ServiceConfig::default()
    };
    assert!(RewardService::new(config).is_err());
}

#[tokio::test]
async fn serves_over_tcp_and_shuts_down() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let address = listener.local_addr().unwrap();
    drop(listener);
    let config = ServiceConfig {
        bind_address: address,
        ..ServiceConfig::default()
    };
    let service = RewardService::new(config).unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(service.serve(async move {
        let _ = stopped.await;
    }));
    let mut reply = String::new();
    for _ in 0..50 {
        if let Ok(mut conn) = tokio::net::TcpStream::connect(address).await {
            use tokio::io::{AsyncReadExt, AsyncWriteExt};
            conn.write_all(b"GET /health HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n").await.unwrap();
            conn.read_to_string(&mut reply).await.unwrap();
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains(r#""status":"ok""#));
    stop.send(()).unwrap();
    server.await.unwrap().unwrap();
}

#[tokio::test]
async fn repeated_requests_are_identical() {
    let app = router();
    let first = call(&app, "POST", "/v1/eara", Some(nec_example())).await;
    let second = call(&app, "POST", "/v1/eara", Some(nec_example())).await;
    assert_eq!(first, second);
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[tokio::test]
async fn service_matches_local_engine() {
    let app = router();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E7);
    for case in 0..500 {
        match case % 3 {
            0 => {
                let steps = rng.gen_range(1..=16);
                let n = rng.gen_range(1..=12);
                let beta = [0.0, 0.25, 0.5, 1.0][rng.gen_range(0..4)];
                let records: Vec<EvidenceRecord> = (0..n)
                    .map(|j| {
                        let ids: Vec<u64> = (0..rng.gen_range(0..5)).map(|_| rng.gen_range(0..20)).collect();
                        EvidenceRecord {
                            question_index: j,
                            score: rng.gen_range(0.0..=1.0),
                            origin_steps: ids.iter().map(|&i| i as usize % steps).collect(),
                            retrieved_item_ids: ids,
                        }
                    })
                    .collect();
                let body = json!({"nec_inputs": records, "T": steps, "beta": beta});
                let (status, reply) = call(&app, "POST", "/v1/eara", Some(body)).await;
                assert_eq!(status, StatusCode::OK);
                let r_global = records.iter().map(|r| r.score).sum::<f64>() / n as f64;
                let nec = compute_nec(&records, steps).unwrap();
                let eara = compute_eara(&nec, r_global, beta).unwrap();
                assert!(same_bits(&floats(&reply["nec"]), &nec), "case {case}");
                assert!(same_bits(&floats(&reply["rewards"]), &eara), "case {case}");
                assert_eq!(reply["conserved"], true);
            }
            1 => {
                let groups: Vec<Vec<f64>> = (0..rng.gen_range(1..4))
                    .map(|_| (0..rng.gen_range(2..9)).map(|_| rng.gen_range(-1.0..3.0)).collect())
                    .collect();
                let (status, reply) = call(&app, "POST", "/v1/advantages", Some(json!({"groups": groups}))).await;
                assert_eq!(status, StatusCode::OK);
                for (g, got) in groups.iter().zip(reply["advantages"].as_array().unwrap()) {
                    assert!(same_bits(&floats(got), &grpo_advantages(g, 1e-8).unwrap()), "case {case}");
                }
            }
            _ => {
                let steps = rng.gen_range(1..10);
                let mut vector = || (0..steps).map(|_| rng.gen_range(0.0..=1.0)).collect::<Vec<f64>>();
                let (eara, fmt, chunk) = (vector(), vector(), vector());
                let weights = RewardWeights {
                    w1: rng.gen_range(0.0..=1.0),
                    w2: rng.gen_range(0.0..=1.0),
                    ..RewardWeights::default()
                };
                let r_comp = rng.gen_range(0.0..=1.0);
                let body = json!({"r_eara": eara, "r_fmt": fmt, "r_chunk": chunk, "r_comp": r_comp, "weights": weights});
                let (status, reply) = call(&app, "POST", "/v1/rollout/score", Some(body)).await;
                assert_eq!(status, StatusCode::OK);
                let local = total_step_rewards(&eara, &fmt, &chunk, r_comp, &weights).unwrap();
                let remote: Vec<f64> = reply["per_step"].as_array().unwrap().iter().map(|r| r["total"].as_f64().unwrap()).collect();
                let local: Vec<f64> = local.iter().map(|r| r.total).collect();
                assert!(same_bits(&remote, &local), "case {case}");
            }
        }
    }
}
