use std::sync::Arc;
use std::time::Duration;

use affectgen_core::lexicon::{builtin_topic_names, builtin_topic_words, demo_lexicon};
use affectgen_core::{ReferenceLm, ReferenceLmConfig, TokenizerVocabulary, VocabKind};
use affectgen_service::{router, AppState, ErrorBody, GenerateResponse, MetaResponse, ModelSlot, ServiceConfig};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Small random model whose vocabulary covers the demo lexicon and the
/// built-in topics.
fn model() -> Arc<ReferenceLm> {
    let lexicon = demo_lexicon();
    let mut tokens: Vec<String> = ["the", "day", "was", "a", "it", "."]
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend(lexicon.distinct_words().iter().map(|s| s.to_string()));
    for topic in builtin_topic_names() {
        tokens.extend(builtin_topic_words(topic).unwrap().iter().map(|s| s.to_string()));
    }
    let mut seen = std::collections::HashSet::new();
    tokens.retain(|t| seen.insert(t.clone()));
    let vocab = TokenizerVocabulary::from_tokens(tokens, VocabKind::Word).unwrap();
    let config = ReferenceLmConfig {
        layers: 1,
        heads: 2,
        dim: 16,
        context: 32,
        vocab_size: 0,
        seed: 3,
    };
    let mut m = ReferenceLm::new(config, vocab).unwrap();
    m.jitter_parameters(0.3, 1).unwrap();
    Arc::new(m)
}

fn state(slot: ModelSlot) -> AppState {
    AppState::new(slot, Arc::new(demo_lexicon()), ServiceConfig::default())
}

fn ready() -> axum::Router {
    router(state(ModelSlot::ready(model())))
}

async fn post(app: axum::Router, body: Value) -> (StatusCode, Vec<u8>) {
    let res = app
        .oneshot(
            Request::post("/generate")
                .header("content-type", "application/json")
                .body(Body::from(body.to_string()))
                .unwrap(),
        )
        .await
        .unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

#[tokio::test]
async fn meta_lists_emotions_topics_and_bounds() {
    let res = ready()
        .oneshot(Request::get("/meta").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    let meta: MetaResponse = serde_json::from_slice(&res.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(meta.emotions.len(), 8);
    for e in [
        "joy",
        "anger",
        "fear",
        "sadness",
        "surprise",
        "anticipation",
        "disgust",
        "trust",
    ] {
        assert!(meta.emotions.iter().any(|x| x == e), "{e}");
    }
    assert_eq!((meta.knob.min, meta.knob.max), (0.0, 1.0));
    assert!(!meta.topics.is_empty());
    assert!(meta.ready && meta.model_id.is_some());
    assert_eq!(meta.schema_version, affectgen_service::API_SCHEMA_VERSION);
}

#[tokio::test]
async fn generation_returns_requested_length_and_is_reproducible() {
    let body = json!({"prompt": "it was a", "emotion": "joy", "knob": 0.8, "length": 7, "seed": 11, "topic": "space"});
    let (status, bytes) = post(ready(), body.clone()).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let a: GenerateResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(a.tokens.len(), 7);
    assert_eq!(a.losses.len(), 7);
    assert!(a.intensity_score.is_some());
    let (_, bytes) = post(ready(), body).await;
    let b: GenerateResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(a.text, b.text);
}

#[tokio::test]
async fn validation_errors_name_fields() {
    let (status, bytes) = post(ready(), json!({"prompt": "it was", "knob": 2.0})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: ErrorBody = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(err.errors.len(), 1);
    assert_eq!(err.errors[0].field, "knob");

    let (status, bytes) = post(
        ready(),
        json!({"prompt": "", "emotion": "hope", "length": 1000, "variance": 0, "topic": "cooking"}),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: ErrorBody = serde_json::from_slice(&bytes).unwrap();
    let fields: Vec<_> = err.errors.iter().map(|e| e.field.as_str()).collect();
    for f in ["prompt", "emotion", "length", "variance", "topic"] {
        assert!(fields.contains(&f), "{f} missing from {fields:?}");
    }
    let emotion = err.errors.iter().find(|e| e.field == "emotion").unwrap();
    assert!(emotion.message.contains("anticipation"));

    let (status, _) = post(ready(), json!({"prompt": "a", "colour": "red"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn not_ready_is_503() {
    let app = router(state(ModelSlot::default()));
    let (status, _) = post(app.clone(), json!({"prompt": "it was"})).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let res = app
        .oneshot(Request::get("/meta").body(Body::empty()).unwrap())
        .await
        .unwrap();
    let meta: MetaResponse = serde_json::from_slice(&res.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert!(!meta.ready);
    assert_eq!(meta.emotions.len(), 8);
}

#[tokio::test]
async fn streaming_emits_one_event_per_token_then_summary() {
    let (status, bytes) = post(
        ready(),
        json!({"prompt": "the day", "emotion": "fear", "length": 5, "seed": 2, "stream": true}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(bytes).unwrap();
    let events: Vec<(&str, Value)> = text
        .split("\n\n")
        .filter(|chunk| !chunk.trim().is_empty())
        .map(|chunk| {
            let mut name = "";
            let mut data = Value::Null;
            for line in chunk.lines() {
                if let Some(n) = line.strip_prefix("event: ") {
                    name = n;
                } else if let Some(d) = line.strip_prefix("data: ") {
                    data = serde_json::from_str(d).unwrap();
                }
            }
            (name, data)
        })
        .collect();
    assert_eq!(events.len(), 6);
    for (i, (name, data)) in events[..5].iter().enumerate() {
        assert_eq!(*name, "token");
        assert_eq!(data["index"], i);
    }
    assert_eq!(events[5].0, "summary");
    let summary: GenerateResponse = serde_json::from_value(events[5].1.clone()).unwrap();
    assert_eq!(summary.tokens.len(), 5);
    let streamed: Vec<u64> = events[..5].iter().map(|(_, d)| d["token"].as_u64().unwrap()).collect();
    assert_eq!(streamed, summary.tokens.iter().map(|&t| t as u64).collect::<Vec<_>>());
}

#[tokio::test]
async fn concurrent_requests_do_not_interleave() {
    let app = router(AppState::new(
        ModelSlot::ready(model()),
        Arc::new(demo_lexicon()),
        ServiceConfig {
            session_limit: 2,
            ..Default::default()
        },
    ));
    let req = |seed: u64| json!({"prompt": "it was a", "emotion": "trust", "length": 6, "seed": seed});
    let solo: Vec<GenerateResponse> = {
        let mut out = Vec::new();
        for s in 0..3 {
            out.push(serde_json::from_slice(&post(app.clone(), req(s)).await.1).unwrap());
        }
        out
    };
    let handles: Vec<_> = (0..3).map(|s| tokio::spawn(post(app.clone(), req(s)))).collect();
    for (s, h) in handles.into_iter().enumerate() {
        let (status, bytes) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        let r: GenerateResponse = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(r.tokens, solo[s].tokens);
    }
}

#[tokio::test]
async fn timeout_is_reported() {
    let app = router(AppState::new(
        ModelSlot::ready(model()),
        Arc::new(demo_lexicon()),
        ServiceConfig {
            timeout: Duration::ZERO,
            ..Default::default()
        },
    ));
    let (status, _) = post(app, json!({"prompt": "it was a", "length": 50, "seed": 1})).await;
    assert!(
        status == StatusCode::GATEWAY_TIMEOUT || status == StatusCode::SERVICE_UNAVAILABLE,
        "{status}"
    );
}
