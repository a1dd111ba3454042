use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use nestcrt::correlation::{is_valid, CorrelationParams};
use nestcrt::design::{optimal_allocation, predicted_power, sensitivity_grid, GridAxis, GridParam};
use nestcrt::harness::{run_grid, Scenario};
use nestcrt::{BlockDims, DesignSpec, Link, OutcomeModel};
use nestcrt_service::{bind, router, serve, ServiceConfig, OPENAPI};

fn app() -> Router {
    router(ServiceConfig::default())
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<&Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = send(app, Method::POST, uri, Some(&body)).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = send(app, Method::GET, uri, None).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn reshape() -> Value {
    json!({"p0": 0.785, "p1": 0.88, "icc": [0.05, 0.04, 0.03], "dims": [3, 3, 36]})
}

fn with(mut v: Value, key: &str, x: Value) -> Value {
    v[key] = x;
    v
}

fn field_names(body: &Value) -> Vec<String> {
    body["fields"]
        .as_array()
        .map(|f| f.iter().map(|e| e["field"].as_str().unwrap().to_string()).collect())
        .unwrap_or_default()
}

/// Minimal structural check against the shipped document: types, required
/// keys, closed objects, enums, array items and lengths.
fn conforms(doc: &Value, schema: &Value, v: &Value, at: &str) -> Result<(), String> {
    if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        let name = r.rsplit('/').next().unwrap();
        return conforms(doc, &doc["components"]["schemas"][name], v, at);
    }
    if let Some(alts) = schema.get("oneOf").and_then(Value::as_array) {
        return if alts.iter().any(|s| conforms(doc, s, v, at).is_ok()) {
            Ok(())
        } else {
            Err(format!("{at}: no alternative matches {v}"))
        };
    }
    if let Some(e) = schema.get("enum").and_then(Value::as_array) {
        if !e.contains(v) {
            return Err(format!("{at}: {v} not in enum"));
        }
    }
    let ok = match schema.get("type").and_then(Value::as_str) {
        Some("object") => v.is_object(),
        Some("array") => v.is_array(),
        Some("string") => v.is_string(),
        Some("number") => v.is_number(),
        Some("integer") => v.is_u64() || v.is_i64(),
        Some("boolean") => v.is_boolean(),
        Some("null") => v.is_null(),
        _ => true,
    };
    if !ok {
        return Err(format!("{at}: {v} is not {}", schema["type"]));
    }
    if let (Some(obj), Some(props)) = (v.as_object(), schema.get("properties").and_then(Value::as_object)) {
        for req in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            if !obj.contains_key(req.as_str().unwrap()) {
                return Err(format!("{at}: missing `{req}`"));
            }
        }
        for (k, x) in obj {
            match props.get(k) {
                Some(s) => conforms(doc, s, x, &format!("{at}.{k}"))?,
                None if schema["additionalProperties"] == json!(false) => {
                    return Err(format!("{at}: unexpected `{k}`"))
                }
                None => {}
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), v.as_array()) {
        if let Some(n) = schema.get("minItems").and_then(Value::as_u64) {
            if (arr.len() as u64) < n {
                return Err(format!("{at}: too short"));
            }
        }
        if let Some(n) = schema.get("maxItems").and_then(Value::as_u64) {
            if (arr.len() as u64) > n {
                return Err(format!("{at}: too long"));
            }
        }
        for (i, x) in arr.iter().enumerate() {
            conforms(doc, items, x, &format!("{at}[{i}]"))?;
        }
    }
    Ok(())
}

fn check_schema(path: &str, method: &str, status: StatusCode, body: &Value) {
    let doc: Value = serde_json::from_str(OPENAPI).unwrap();
    let schema = &doc["paths"][path][method]["responses"][status.as_str()]["content"]["application/json"]["schema"];
    assert!(!schema.is_null(), "{method} {path} documents no {status} response");
    if let Err(e) = conforms(&doc, schema, body, "$") {
        panic!("{method} {path} {status}: {e}");
    }
}

fn reshape_spec() -> DesignSpec {
    DesignSpec::new(
        BlockDims::new(3, 3, 36).unwrap(),
        CorrelationParams::new(0.05, 0.04, 0.03).unwrap(),
        OutcomeModel::binary(Link::Logit, 0.785, 0.88).unwrap(),
    )
}

#[tokio::test]
async fn power_matches_library_and_reference() {
    let app = app();
    let (s, body) = post(&app, "/v1/power", with(reshape(), "n", json!(22))).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    check_schema("/v1/power", "post", s, &body);
    let p = body["power"].as_f64().unwrap();
    assert!((p - 0.8265).abs() <= 5e-4, "power {p}");
    assert_eq!(p, predicted_power(&reshape_spec().with_clusters(22)).unwrap());
    assert_eq!(body["spec"]["n_clusters"], json!(22));
    assert_eq!(body["spec"]["pi_c"], json!(0.5));
    assert_eq!(body["spec"]["outcome"]["link"], json!("logit"));
}

#[tokio::test]
async fn power_without_n_names_the_field() {
    let (s, body) = post(&app(), "/v1/power", reshape()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(field_names(&body), ["n"]);
}

#[tokio::test]
async fn sample_size_for_continuous_outcome() {
    let app = app();
    let input = json!({
        "family": "gaussian", "mu_c": 0.0, "mu_t": 0.19, "phi": 1.0,
        "icc": [0.445, 0.104, 0.008], "dims": [4, 25, 2]
    });
    let (s, body) = post(&app, "/v1/sample-size", input).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    check_schema("/v1/sample-size", "post", s, &body);
    assert_eq!(body["n_clusters"], json!(36));
    assert_eq!(body["spec"]["n_clusters"], json!(36));
    assert_eq!(body["spec"]["outcome"]["link"], json!("identity"));
    assert!((body["power"].as_f64().unwrap() - 0.8087).abs() <= 5e-4);
}

#[tokio::test]
async fn design_effect_route_from_individual_size() {
    let app = app();
    let (s, body) = post(&app, "/v1/design-effect", with(reshape(), "individual", json!(562))).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    check_schema("/v1/design-effect", "post", s, &body);
    assert_eq!(body["route"]["clustered_observations"], json!(6806));
    assert_eq!(body["route"]["n_clusters"], json!(22));
    let (s, body) = post(&app, "/v1/design-effect", reshape()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(body.get("route").is_none());
}

#[tokio::test]
async fn allocation_matches_library() {
    let app = app();
    let (s, body) = post(&app, "/v1/allocation", json!({"p0": 0.1, "p1": 0.3})).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    check_schema("/v1/allocation", "post", s, &body);
    let want = optimal_allocation(&OutcomeModel::binary(Link::Logit, 0.1, 0.3).unwrap()).unwrap();
    assert_eq!(body["pi_c"].as_f64().unwrap(), want);
}

#[tokio::test]
async fn validate_reports_spectrum_and_violations() {
    let app = app();
    let (s, body) = post(&app, "/v1/icc/validate", json!({"icc": [0, 0, 0], "dims": [2, 3, 5]})).await;
    assert_eq!(s, StatusCode::OK);
    check_schema("/v1/icc/validate", "post", s, &body);
    assert_eq!(body["valid"], json!(true));
    assert_eq!(body["spectrum"]["lambda"], json!([1.0, 1.0, 1.0, 1.0]));

    let (s, body) = post(&app, "/v1/icc/validate", json!({"icc": [0, 1, 0], "dims": [2, 3, 5]})).await;
    assert_eq!(s, StatusCode::OK);
    check_schema("/v1/icc/validate", "post", s, &body);
    assert_eq!(body["valid"], json!(false));
    assert!(body["violated"].as_array().unwrap().contains(&json!("lambda2")), "{body}");
}

#[tokio::test]
async fn invalid_correlation_is_unprocessable() {
    let (s, body) = post(&app(), "/v1/power", json!({
        "p0": 0.2, "p1": 0.5, "icc": [0.0, 0.9, 0.0], "dims": [2, 3, 5], "n": 10
    }))
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    check_schema("/v1/power", "post", s, &body);
    assert_eq!(body["error"], json!("domain"));
    assert!(!body["violated"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn grid_matches_library_and_masks_invalid_nodes() {
    let app = app();
    let axis1 = GridAxis::new(GridParam::Alpha1, 0.0, 0.2, 11);
    let axis2 = GridAxis::new(GridParam::Alpha2, 0.0, 0.2, 11);
    let req = json!({
        "spec": {"p0": 0.2, "p1": 0.5, "icc": [0.05, 0.02, 0.01], "dims": [2, 3, 5], "n": 14},
        "axis1": axis1, "axis2": axis2
    });
    let (s, body) = post(&app, "/v1/sensitivity-grid", req).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    check_schema("/v1/sensitivity-grid", "post", s, &body);

    let base = DesignSpec::new(
        BlockDims::new(2, 3, 5).unwrap(),
        CorrelationParams::new(0.05, 0.02, 0.01).unwrap(),
        OutcomeModel::binary(Link::Logit, 0.2, 0.5).unwrap(),
    )
    .with_clusters(14);
    let want = sensitivity_grid(&base, &axis1, &axis2).unwrap();
    assert_eq!(body["grid"], serde_json::to_value(&want).unwrap());
    assert!(want.masked_count() > 0, "grid should cross the boundary");
    assert_eq!(body["masked"], json!(want.masked_count()));

    for (i, a1) in want.axis1.values.iter().enumerate() {
        for (j, a2) in want.axis2.values.iter().enumerate() {
            let c = CorrelationParams::new(0.05, *a1, *a2).unwrap();
            let valid = is_valid(&c, &base.dims).valid;
            assert_eq!(want.power[i][j].is_some(), valid, "node ({a1}, {a2})");
        }
    }
}

#[tokio::test]
async fn grid_steps_are_capped() {
    let req = json!({
        "spec": with(reshape(), "n", json!(22)),
        "axis1": {"param": "alpha0", "lo": 0.0, "hi": 0.1, "steps": 5000},
        "axis2": {"param": "n", "lo": 10, "hi": 30, "steps": 3}
    });
    let (s, body) = post(&app(), "/v1/sensitivity-grid", req).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(field_names(&body), ["axis1.steps"]);
}

fn small_scenario(reps: usize) -> Value {
    json!({
        "name": "tiny", "p0": 0.3, "p1": 0.3, "icc": "A2", "dims": [2, 2, 3], "n": 10,
        "replications": reps, "analyses": ["independence"], "estimators": ["BC1"]
    })
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn simulate_runs_to_completion_and_matches_library() {
    let app = app();
    let (s, body) = post(&app, "/v1/simulate", json!({"scenarios": [small_scenario(20)], "master_seed": 7})).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{body}");
    check_schema("/v1/simulate", "post", s, &body);
    let id = body["job_id"].as_str().unwrap().to_string();

    let mut status = Value::Null;
    for _ in 0..600 {
        let (s, b) = get(&app, &format!("/v1/jobs/{id}")).await;
        assert_eq!(s, StatusCode::OK);
        check_schema("/v1/jobs/{id}", "get", s, &b);
        status = b;
        if status["state"] == json!("done") || status["state"] == json!("failed") {
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    assert_eq!(status["state"], json!("done"), "{status}");

    let sc: Scenario = serde_json::from_value(small_scenario(20)).unwrap();
    let want = run_grid(&[sc], 7, 0).unwrap();
    assert_eq!(status["report"], serde_json::to_value(&want).unwrap());
}

#[tokio::test]
async fn unknown_job_is_not_found() {
    let (s, body) = get(&app(), "/v1/jobs/job-ffffffff").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    check_schema("/v1/jobs/{id}", "get", s, &body);
}

#[tokio::test]
async fn simulate_caps_are_enforced() {
    let app = router(ServiceConfig {
        max_scenarios: 2,
        ..ServiceConfig::default()
    });
    let (s, body) = post(&app, "/v1/simulate", json!({"scenarios": [small_scenario(1001)]})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    let three = vec![small_scenario(10); 3];
    let (s, _) = post(&app, "/v1/simulate", json!({"scenarios": three})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, body) = post(&app, "/v1/simulate", json!({"scenarios": []})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(field_names(&body), ["scenarios"]);
    let mut bad = small_scenario(10);
    bad["replications"] = json!(0);
    let (s, body) = post(&app, "/v1/simulate", json!({"scenarios": [bad]})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(field_names(&body), ["scenarios[0].replications"]);
}

#[tokio::test]
async fn malformed_requests_name_the_field() {
    let app = app();
    let (s, body) = post(&app, "/v1/power", json!({"p0": 0.2, "p1": 0.5})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    check_schema("/v1/power", "post", s, &body);
    let fields = field_names(&body);
    assert!(fields.contains(&"icc".to_string()) && fields.contains(&"dims".to_string()), "{fields:?}");

    let (s, body) = post(&app, "/v1/power", with(reshape(), "p0", json!("high"))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(field_names(&body), ["p0"]);

    let (s, body) = post(&app, "/v1/power", with(reshape(), "colour", json!(1))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(body["message"].as_str().unwrap().contains("colour"));

    let (s, body) = post(&app, "/v1/power", with(with(reshape(), "n", json!(22)), "p0", json!(1.5))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{body}");

    let (s, body) = post(&app, "/v1/power", with(reshape(), "dims", json!([100, 100, 2]))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(field_names(&body), ["dims"]);

    let (s, body) = post(&app, "/v1/power", with(reshape(), "mu_c", json!(0.7))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(field_names(&body).contains(&"mu_c".to_string()));

    let req = Request::post("/v1/power")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from("{\"p0\": 0.2,"))
        .unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn non_json_bodies_are_rejected() {
    let app = app();
    let body = serde_json::to_vec(&reshape()).unwrap();
    for ct in [None, Some("text/plain")] {
        let mut req = Request::post("/v1/power");
        if let Some(ct) = ct {
            req = req.header(header::CONTENT_TYPE, ct);
        }
        let resp = app.clone().oneshot(req.body(Body::from(body.clone())).unwrap()).await.unwrap();
        assert_eq!(resp.status(), StatusCode::UNSUPPORTED_MEDIA_TYPE);
    }
}

#[tokio::test]
async fn identical_requests_give_identical_bytes() {
    let app = app();
    let req = with(reshape(), "n", json!(22));
    let a = send(&app, Method::POST, "/v1/power", Some(&req)).await;
    let b = send(&app, Method::POST, "/v1/power", Some(&req)).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn openapi_document_lists_every_route() {
    let (s, doc) = get(&app(), "/v1/openapi.json").await;
    assert_eq!(s, StatusCode::OK);
    for p in [
        "/v1/power",
        "/v1/sample-size",
        "/v1/design-effect",
        "/v1/allocation",
        "/v1/icc/validate",
        "/v1/sensitivity-grid",
        "/v1/simulate",
        "/v1/jobs/{id}",
    ] {
        assert!(doc["paths"].get(p).is_some(), "{p}");
    }
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/v1/power")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app().oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
}

#[tokio::test]
async fn occupied_port_is_a_clean_error() {
    let taken = bind(&ServiceConfig {
        port: 0,
        ..ServiceConfig::default()
    })
    .await
    .unwrap();
    let port = taken.local_addr().unwrap().port();
    let err = serve(
        ServiceConfig {
            port,
            ..ServiceConfig::default()
        },
        |_| {},
    )
    .await
    .unwrap_err();
    assert!(err.to_string().contains("already in use"), "{err}");
}
