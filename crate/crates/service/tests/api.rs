mod common;

use std::collections::BTreeSet;

use axum::body::Body;
use axum::http::{HeaderMap, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use clbd_service::api::{router, AppState, Engine, IDEMPOTENCY_HEADER, REPLAY_HEADER};
use clbd_service::config::Config;
use clbd_service::store::Store;

use common::{prepared, MODELS};

const ADMIN: &str = "admin-secret";

fn auth_section() -> String {
    format!("[serve]\nshuffle_seed = 5\nadmin_token = \"{ADMIN}\"\n\n[serve.raters]\nann = \"tok-ann\"\nbob = \"tok-bob\"\ncyd = \"tok-cyd\"\n")
}

struct Harness {
    _dir: tempfile::TempDir,
    cfg: Config,
    app: Router,
    /// Every response body seen, in order.
    log: Vec<String>,
}

impl Harness {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = prepared(dir.path(), extra);
        let app = Self::app(&cfg, true);
        Self { _dir: dir, cfg, app, log: Vec::new() }
    }

    fn app(cfg: &Config, with_engine: bool) -> Router {
        let store = Store::open(cfg.store_dir(), cfg.serve.snapshot_every).unwrap();
        let engine = with_engine.then(|| Engine::open(cfg).unwrap());
        router(AppState::new(cfg.clone(), engine, store))
    }

    async fn call(&mut self, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let (s, _, v) = self.call_with(method, uri, token, body, &[]).await;
        (s, v)
    }

    async fn call_with(
        &mut self,
        method: &str,
        uri: &str,
        token: Option<&str>,
        body: Option<Value>,
        headers: &[(&str, &str)],
    ) -> (StatusCode, HeaderMap, Value) {
        let mut req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let body = body.map_or(Body::empty(), |b| Body::from(b.to_string()));
        let resp = self.app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        let headers = resp.headers().clone();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let text = String::from_utf8(bytes.to_vec()).unwrap();
        self.log.push(text.clone());
        let v = if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap() };
        (status, headers, v)
    }
}

fn query(extra: Value) -> Value {
    let mut q = json!({ "seed": "semantic parsing", "target_type": "Method", "direction": "forward", "background": "we study parsing of questions ." });
    for (k, v) in extra.as_object().unwrap() {
        q[k] = v.clone();
    }
    q
}

fn error_field(v: &Value) -> Option<&str> {
    v["error"]["field"].as_str()
}

#[tokio::test]
async fn retrieve_without_engine_is_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), "");
    let mut h = Harness { app: Harness::app(&cfg, false), cfg, _dir: dir, log: Vec::new() };
    let (s, v) = h.call("POST", "/v1/retrieve", None, Some(query(json!({})))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"]["code"], "not_initialized");
    let (s, _) = h.call("POST", "/v1/generate", None, Some(query(json!({ "model": "echo-gen" })))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    let (s, v) = h.call("GET", "/v1/health", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["engine"], false);
}

#[tokio::test]
async fn retrieve_returns_three_lists_and_model_input() {
    let mut h = Harness::new("");
    let (s, v) = h.call("POST", "/v1/retrieve", None, Some(query(json!({ "doc_id": "no-such-paper" })))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["neighbors"]["citation"], json!([]));
    assert!(v["neighbors"]["semantic"].as_array().unwrap().len() <= 20);
    assert!(v["neighbors"]["kg"].is_array());
    assert!(v["query"].as_str().unwrap().starts_with("semantic parsing is used for Method"), "{}", v["query"]);
    let text = v["model_input"]["text"].as_str().unwrap();
    assert!(text.starts_with("semantic parsing is used for Method"), "{text}");
    assert_eq!(v["model_input"]["neighbors"], v["neighbors"]["semantic"]);

    let (s, v) = h.call("POST", "/v1/retrieve", None, Some(query(json!({ "caps": { "semantic": 2 } })))).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["neighbors"]["semantic"].as_array().unwrap().len() <= 2);
}

#[tokio::test]
async fn malformed_fields_are_named() {
    let mut h = Harness::new("");
    for (body, field) in [
        (query(json!({ "direction": "sideways" })), "direction"),
        (query(json!({ "target_type": "Banana" })), "target_type"),
        (query(json!({ "seed": 3 })), "seed"),
        (query(json!({ "caps": { "semantic": -1 } })), "semantic"),
        (query(json!({ "caps": { "wide": 1 } })), "caps.wide"),
        (query(json!({ "surprise": true })), "surprise"),
        (json!({ "target_type": "Task", "direction": "forward" }), "seed"),
    ] {
        let (s, v) = h.call("POST", "/v1/retrieve", None, Some(body)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
        assert_eq!(error_field(&v), Some(field), "{v}");
    }
    let (s, v) = h.call("POST", "/v1/retrieve", None, None).await;
    assert_eq!((s, error_field(&v)), (StatusCode::BAD_REQUEST, Some("seed")));
    let req = Request::builder().method("POST").uri("/v1/retrieve").body(Body::from("{not json")).unwrap();
    assert_eq!(h.app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn generate_blinds_and_validates_models() {
    let mut h = Harness::new("");
    let (s, v) = h.call("POST", "/v1/generate", None, Some(query(json!({ "model": "ghost" })))).await;
    assert_eq!((s, error_field(&v)), (StatusCode::BAD_REQUEST, Some("models")));

    let (s, v) = h.call("POST", "/v1/generate", None, Some(query(json!({ "model": "encoder-stub" })))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let outputs = v["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 1);
    assert!(!v.to_string().contains("encoder-stub"));
    let handle = outputs[0]["handle"].as_str().unwrap().to_string();
    assert!(!outputs[0]["candidates"].as_array().unwrap().is_empty());
    assert_eq!(model_order(&h.cfg, v["generation_id"].as_str().unwrap()), vec!["encoder-stub"]);

    // Resolvable server-side, never over the API without a closed session.
    let (s, v) = h.call("GET", &format!("/v1/handles/{handle}"), None, None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_eq!(v["error"]["code"], "blinded");
    let (s, _) = h.call("GET", "/v1/handles/h-unknown", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, v) = h
        .call("POST", "/v1/generate", None, Some(query(json!({ "task": "sentence", "model": "encoder-stub" }))))
        .await;
    assert_eq!((s, error_field(&v)), (StatusCode::BAD_REQUEST, Some("models")));
}

/// Model order behind the handles of one generation, read from the store.
fn model_order(cfg: &Config, generation: &str) -> Vec<String> {
    let store = Store::open(cfg.store_dir(), 1000).unwrap();
    store.read(|s| s.generations[generation].items.iter().map(|i| i.model_id.clone()).collect())
}

#[tokio::test]
async fn five_models_shuffle_is_a_seeded_permutation() {
    let mut orders = Vec::new();
    for _ in 0..2 {
        let mut h = Harness::new("[serve]\nshuffle_seed = 99\n");
        let mut per_query = Vec::new();
        for seed in ["parsing", "translation", "tagging", "summarization"] {
            let body = query(json!({ "task": "sentence", "seed": seed, "models": MODELS }));
            let (s, v) = h.call("POST", "/v1/generate", None, Some(body)).await;
            assert_eq!(s, StatusCode::OK, "{v}");
            let outputs = v["outputs"].as_array().unwrap();
            assert_eq!(outputs.len(), 5);
            let handles: BTreeSet<&str> = outputs.iter().map(|o| o["handle"].as_str().unwrap()).collect();
            assert_eq!(handles.len(), 5);
            for m in MODELS {
                assert!(!v.to_string().contains(m), "model id leaked: {v}");
            }
            per_query.push(v["generation_id"].as_str().unwrap().to_string());
        }
        let cfg = h.cfg.clone();
        drop(h.app);
        let order: Vec<Vec<String>> = per_query.iter().map(|g| model_order(&cfg, g)).collect();
        for o in &order {
            let mut sorted = o.clone();
            sorted.sort();
            assert_eq!(sorted, MODELS.map(String::from).to_vec());
        }
        orders.push(order);
    }
    assert_eq!(orders[0], orders[1], "same seed, same permutations");
    let distinct: BTreeSet<&Vec<String>> = orders[0].iter().collect();
    assert!(distinct.len() > 1, "permutation should vary across instances");
}

struct Session {
    id: String,
    /// rater -> assigned instance ids
    assigned: Value,
}

async fn open_session(h: &mut Harness, raters: &[&str], models: &[&str], per_rater: u64, overlap: u64) -> Session {
    let body = json!({ "raters": raters, "models": models, "task": "sentence", "per_rater": per_rater, "overlap": overlap, "seed": 3 });
    let (s, v) = h.call("POST", "/v1/sessions", Some(ADMIN), Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["open"], true);
    assert!(v.get("models").is_none());
    Session { id: v["id"].as_str().unwrap().to_string(), assigned: v["assignment"]["per_rater"].clone() }
}

fn token(rater: &str) -> String {
    format!("tok-{rater}")
}

fn annotation(session: &str, instance: &str, handle: &str, label: &str) -> Value {
    json!({
        "session_id": session,
        "instance_id": instance,
        "output_id": handle,
        "label": label,
        "criteria": { "relevance": true, "novelty": label == "helpful", "scientific_sense": true, "clarity": true },
    })
}

#[tokio::test]
async fn annotation_round_trip_and_agreement() {
    let mut h = Harness::new(&auth_section());
    let s = open_session(&mut h, &["ann", "bob"], &["model-alpha"], 10, 10).await;
    let shared: Vec<String> =
        s.assigned["ann"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    assert_eq!(shared.len(), 10);

    // One blinded output per shared instance.
    let mut handles = Vec::new();
    for iid in &shared {
        let (st, v) = h
            .call("POST", "/v1/generate", Some(ADMIN), Some(json!({ "session_id": s.id, "instance_id": iid })))
            .await;
        assert_eq!(st, StatusCode::OK, "{v}");
        handles.push(v["outputs"][0]["handle"].as_str().unwrap().to_string());
    }

    // The rater view carries instances and outputs but no gold or model.
    let (st, v) = h.call("GET", &format!("/v1/sessions/{}/instances", s.id), Some(&token("bob")), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["instances"].as_array().unwrap().len(), 10);
    assert!(v["instances"][0]["instance"].get("target_node").is_none());
    assert!(v["instances"][0]["instance"].get("target_sentence").is_none());
    assert_eq!(v["instances"][0]["outputs"].as_array().unwrap().len(), 1);
    let (st, _) = h.call("GET", &format!("/v1/sessions/{}/instances?rater=ann", s.id), Some(&token("bob")), None).await;
    assert_eq!(st, StatusCode::FORBIDDEN);

    let mut first_id = String::new();
    for (i, (iid, handle)) in shared.iter().zip(&handles).enumerate() {
        let (st, v) = h.call("POST", "/v1/annotate", Some(&token("ann")), Some(annotation(&s.id, iid, handle, "helpful"))).await;
        assert_eq!(st, StatusCode::CREATED, "{v}");
        if i == 0 {
            first_id = v["id"].as_str().unwrap().to_string();
        }
        let label = if i < 8 { "helpful" } else { "unhelpful" };
        let (st, _) = h.call("POST", "/v1/annotate", Some(&token("bob")), Some(annotation(&s.id, iid, handle, label))).await;
        assert_eq!(st, StatusCode::CREATED);
    }

    // Stored fields come back unchanged.
    let (st, v) = h.call("GET", &format!("/v1/annotations/{first_id}"), Some(&token("ann")), None).await;
    assert_eq!(st, StatusCode::OK);
    let rec = &v["current"];
    assert_eq!(rec["rater_id"], "ann");
    assert_eq!(rec["instance_id"], shared[0].as_str());
    assert_eq!(rec["output_id"], handles[0].as_str());
    assert_eq!(rec["label"], "helpful");
    assert_eq!(rec["criteria"], json!({ "relevance": true, "novelty": true, "scientific_sense": true, "clarity": true }));
    let (st, _) = h.call("GET", &format!("/v1/annotations/{first_id}"), Some(&token("bob")), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND, "raters see only their own labels");

    // Blinded until close.
    let (st, _) = h.call("GET", &format!("/v1/reports/{}", s.id), Some(ADMIN), None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = h.call("GET", &format!("/v1/handles/{}", handles[0]), Some(ADMIN), None).await;
    assert_eq!(st, StatusCode::FORBIDDEN);
    for body in &h.log {
        for m in MODELS {
            assert!(!body.contains(m), "pre-close response exposes `{m}`: {body}");
        }
    }

    let (st, _) = h.call("POST", &format!("/v1/sessions/{}/close", s.id), Some(&token("ann")), None).await;
    assert_eq!(st, StatusCode::FORBIDDEN);
    let (st, v) = h.call("POST", &format!("/v1/sessions/{}/close", s.id), Some(ADMIN), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["models"], json!(["model-alpha"]));
    let (st, _) = h.call("POST", &format!("/v1/sessions/{}/close", s.id), Some(ADMIN), None).await;
    assert_eq!(st, StatusCode::OK, "closing twice is harmless");

    let (st, v) = h.call("GET", &format!("/v1/reports/{}", s.id), Some(ADMIN), None).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["pairs"][0]["raters"], json!(["ann", "bob"]));
    assert_eq!(v["pairs"][0]["shared_items"], 10);
    assert_eq!(v["pairs"][0]["percent"], 80.0);
    assert_eq!(v["models"]["model-alpha"]["helpful"], 18);
    assert_eq!(v["models"]["model-alpha"]["helpful_percent"], 90.0);

    let (st, v) = h.call("GET", &format!("/v1/handles/{}", handles[0]), Some(&token("bob")), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["model_id"], "model-alpha");

    let (st, _) = h
        .call("POST", "/v1/annotate", Some(&token("ann")), Some(annotation(&s.id, &shared[0], &handles[0], "unhelpful")))
        .await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = h
        .call("POST", "/v1/generate", Some(ADMIN), Some(json!({ "session_id": s.id, "instance_id": shared[0] })))
        .await;
    assert_eq!(st, StatusCode::CONFLICT);

    // The report survives a restart.
    drop(std::mem::replace(&mut h.app, Router::new()));
    h.app = Harness::app(&h.cfg, false);
    let (st, v) = h.call("GET", &format!("/v1/reports/{}", s.id), Some(ADMIN), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["pairs"][0]["percent"], 80.0);
}

async fn one_output(h: &mut Harness) -> (Session, String, String) {
    let s = open_session(h, &["ann", "bob", "cyd"], &["model-alpha", "model-bravo"], 10, 2).await;
    let iid = s.assigned["ann"][0].as_str().unwrap().to_string();
    let (st, v) = h.call("POST", "/v1/generate", Some(ADMIN), Some(json!({ "session_id": s.id, "instance_id": iid }))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["outputs"].as_array().unwrap().len(), 2);
    let handle = v["outputs"][0]["handle"].as_str().unwrap().to_string();
    (s, iid, handle)
}

#[tokio::test]
async fn duplicate_annotation_overwrites_with_history() {
    let mut h = Harness::new(&auth_section());
    let (s, iid, handle) = one_output(&mut h).await;
    let tok = token("ann");
    let (st, v1) = h.call("POST", "/v1/annotate", Some(&tok), Some(annotation(&s.id, &iid, &handle, "helpful"))).await;
    assert_eq!(st, StatusCode::CREATED);
    let (st, v2) = h.call("POST", "/v1/annotate", Some(&tok), Some(annotation(&s.id, &iid, &handle, "unhelpful"))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v1["id"], v2["id"]);
    assert_eq!(v2["revision"], 2);
    let (_, v) = h.call("GET", &format!("/v1/annotations/{}", v1["id"].as_str().unwrap()), Some(ADMIN), None).await;
    assert_eq!(v["current"]["label"], "unhelpful");
    assert_eq!(v["history"].as_array().unwrap().len(), 1);
    assert_eq!(v["history"][0]["label"], "helpful");
}

#[tokio::test]
async fn annotation_validation() {
    let mut h = Harness::new(&auth_section());
    let (s, iid, handle) = one_output(&mut h).await;
    let tok = token("ann");

    let (st, v) = h.call("POST", "/v1/annotate", Some(&tok), Some(annotation(&s.id, &iid, &handle, "neutral"))).await;
    assert_eq!((st, error_field(&v)), (StatusCode::BAD_REQUEST, Some("label")));

    let mut missing = annotation(&s.id, &iid, &handle, "helpful");
    missing["criteria"].as_object_mut().unwrap().remove("clarity");
    let (st, v) = h.call("POST", "/v1/annotate", Some(&tok), Some(missing)).await;
    assert_eq!((st, error_field(&v)), (StatusCode::BAD_REQUEST, Some("criteria.clarity")));

    let (st, v) = h.call("POST", "/v1/annotate", Some(&tok), Some(annotation(&s.id, &iid, "h-nope", "helpful"))).await;
    assert_eq!((st, error_field(&v)), (StatusCode::BAD_REQUEST, Some("output_id")));

    let (st, _) = h.call("POST", "/v1/annotate", Some(&tok), Some(annotation("s-none", &iid, &handle, "helpful"))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let mut other = annotation(&s.id, &iid, &handle, "helpful");
    other["rater_id"] = json!("bob");
    let (st, _) = h.call("POST", "/v1/annotate", Some(&tok), Some(other)).await;
    assert_eq!(st, StatusCode::FORBIDDEN);

    let (st, _) = h.call("POST", "/v1/annotate", None, Some(annotation(&s.id, &iid, &handle, "helpful"))).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    let (st, _) = h.call("POST", "/v1/annotate", Some("tok-mallory"), Some(annotation(&s.id, &iid, &handle, "helpful"))).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);

    // An instance outside the rater's assignment.
    let foreign = s.assigned["bob"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .find(|i| !s.assigned["ann"].as_array().unwrap().iter().any(|a| a == i))
        .unwrap()
        .to_string();
    let (st, v) = h.call("POST", "/v1/annotate", Some(&tok), Some(annotation(&s.id, &foreign, &handle, "helpful"))).await;
    assert_eq!((st, error_field(&v)), (StatusCode::BAD_REQUEST, Some("instance_id")));

    let (st, _) = h.call("POST", "/v1/sessions", Some(&tok), Some(json!({ "raters": ["ann"], "models": ["model-alpha"] }))).await;
    assert_eq!(st, StatusCode::FORBIDDEN);
    let (st, v) = h
        .call("POST", "/v1/sessions", Some(ADMIN), Some(json!({ "raters": ["ann", "zed"], "models": ["model-alpha"] })))
        .await;
    assert_eq!((st, error_field(&v)), (StatusCode::BAD_REQUEST, Some("raters")));
}

#[tokio::test]
async fn mutating_endpoints_are_idempotent() {
    let mut h = Harness::new(&auth_section());

    let body = json!({ "raters": ["ann", "bob"], "models": ["model-alpha"], "task": "sentence", "client_token": "create-1" });
    let (s1, v1) = h.call("POST", "/v1/sessions", Some(ADMIN), Some(body.clone())).await;
    let (s2, h2, v2) = h.call_with("POST", "/v1/sessions", Some(ADMIN), Some(body), &[]).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::CREATED));
    assert_eq!(v1, v2);
    assert_eq!(h2.get(REPLAY_HEADER).unwrap(), "true");
    let sid = v1["id"].as_str().unwrap().to_string();
    let iid = v1["assignment"]["per_rater"]["ann"][0].as_str().unwrap().to_string();

    let gen = json!({ "session_id": sid, "instance_id": iid });
    let key = [(IDEMPOTENCY_HEADER, "gen-1")];
    let (_, _, g1) = h.call_with("POST", "/v1/generate", Some(ADMIN), Some(gen.clone()), &key).await;
    let (_, hdr, g2) = h.call_with("POST", "/v1/generate", Some(ADMIN), Some(gen), &key).await;
    assert_eq!(g1, g2, "a retried generation returns the same handles");
    assert!(hdr.contains_key(REPLAY_HEADER));
    let handle = g1["outputs"][0]["handle"].as_str().unwrap().to_string();

    let tok = token("ann");
    let key = [(IDEMPOTENCY_HEADER, "ann-1")];
    let a = annotation(&sid, &iid, &handle, "helpful");
    let (st1, _, a1) = h.call_with("POST", "/v1/annotate", Some(&tok), Some(a.clone()), &key).await;
    let (st2, _, a2) = h.call_with("POST", "/v1/annotate", Some(&tok), Some(a), &key).await;
    assert_eq!((st1, st2), (StatusCode::CREATED, StatusCode::CREATED));
    assert_eq!(a1, a2);
    assert_eq!(a2["revision"], 1, "the retry did not write a second revision");

    let (_, v) = h.call("GET", &format!("/v1/annotations/{}", a1["id"].as_str().unwrap()), Some(ADMIN), None).await;
    assert!(v["history"].as_array().unwrap().is_empty());

    let (st, v) = h.call("GET", "/v1/instances?task=sentence", Some(&tok), None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(v["instances"][0].get("target_sentence").is_none());
    let (st, v) = h.call("GET", "/v1/instances?split=dev", Some(&tok), None).await;
    assert_eq!((st, error_field(&v)), (StatusCode::BAD_REQUEST, Some("split")));
}
