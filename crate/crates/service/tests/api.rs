use std::path::Path;
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use serde_json::{json, Value};
use tower::ServiceExt;

use crossmask::dataset_io::{decode_mask_png, write_image, AnnotationDoc};
use crossmask::grid::Grid;
use crossmask::size_branching::{BranchThresholds, ThresholdTable};
use crossmask::multi_category::CategoryId;
use crossmask_service::{router, AppState, ErrorBody, ImageInfo, PreviewResponse, StoredAnnotation};

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

fn write_gray(path: &Path, w: usize, h: usize) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    write_image(&Grid::from_fn(w, h, |x, y| ((x + y) % 7) as f64 / 7.0), path).unwrap();
}

fn perpendicular(width: u32, height: u32) -> Value {
    json!({
        "cross": {"seg_ab": [[10.0, 5.0], [10.0, 25.0]], "seg_cd": [[3.0, 14.0], [22.0, 14.0]]},
        "sigma_ratio": "inf",
        "op": "mul",
        "width": width,
        "height": height
    })
}

fn sample_doc() -> Value {
    json!({
        "schema_version": 1,
        "image_ref": "a.png",
        "width": 32,
        "height": 32,
        "entries": [{
            "category": 1,
            "cross": {"seg_ab": [[10.0, 5.0], [10.0, 25.0]], "seg_cd": [[3.0, 14.0], [22.0, 14.0]]}
        }]
    })
}

#[tokio::test]
async fn empty_root_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(dir.path(), None));
    let (status, body) = call(&app, "GET", "/api/images", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Vec<ImageInfo>>(&body).unwrap(), vec![]);
}

#[tokio::test]
async fn images_listed_with_dimensions_and_fetchable() {
    let dir = tempfile::tempdir().unwrap();
    write_gray(&dir.path().join("a.png"), 32, 20);
    write_gray(&dir.path().join("b.png"), 8, 9);
    write_gray(&dir.path().join("sub/c.png"), 5, 6);
    std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
    write_gray(&dir.path().join("annotations/hidden.png"), 4, 4);
    let app = router(AppState::new(dir.path(), None));

    let (status, body) = call(&app, "GET", "/api/images", None).await;
    assert_eq!(status, StatusCode::OK);
    let list: Vec<ImageInfo> = serde_json::from_slice(&body).unwrap();
    let summary: Vec<(&str, u32, u32)> = list.iter().map(|i| (i.id.as_str(), i.width, i.height)).collect();
    assert_eq!(summary, vec![("a.png", 32, 20), ("b.png", 8, 9), ("sub/c.png", 5, 6)]);

    for info in &list {
        let (status, bytes) = call(&app, "GET", &format!("/api/images/{}", info.id), None).await;
        assert_eq!(status, StatusCode::OK);
        let on_disk = std::fs::read(dir.path().join(&info.id)).unwrap();
        assert_eq!(bytes, on_disk);
    }
    let (status, _) = call(&app, "GET", "/api/images/missing.png", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/api/images/annotations/hidden.png", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn preview_of_perpendicular_cross() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(dir.path(), None));
    let (status, body) = call(&app, "POST", "/api/preview", Some(perpendicular(32, 32))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let resp: PreviewResponse = serde_json::from_slice(&body).unwrap();
    let png = base64::engine::general_purpose::STANDARD.decode(&resp.mask_png_base64).unwrap();
    let mask = decode_mask_png(&png).unwrap();
    assert!(mask.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
    // x ∈ [3, 22] and y ∈ [5, 25] around pixel centres: 19 × 20 pixels
    assert_eq!(resp.area_px, 19 * 20);
    assert_eq!(mask.count_positive(), resp.area_px);
    assert_eq!(resp.relative_size, resp.area_px as f64 / (32.0 * 32.0));
    assert_eq!(resp.branch_index, None);

    // identical requests, identical responses
    let (_, again) = call(&app, "POST", "/api/preview", Some(perpendicular(32, 32))).await;
    assert_eq!(again, body);
}

#[tokio::test]
async fn preview_reports_branch_when_thresholds_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let mut table = ThresholdTable::default();
    table.0.insert(CategoryId::new(1).unwrap(), BranchThresholds::new(0.1, 0.3).unwrap());
    let app = router(AppState::new(dir.path(), Some(table)));
    let (_, body) = call(&app, "POST", "/api/preview", Some(perpendicular(32, 32))).await;
    let resp: PreviewResponse = serde_json::from_slice(&body).unwrap();
    // 380 / 1024 ≈ 0.37 lies above thr2
    assert_eq!(resp.branch_index, Some(3));

    let mut req = perpendicular(32, 32);
    req["category"] = json!(2);
    let (_, body) = call(&app, "POST", "/api/preview", Some(req)).await;
    let resp: PreviewResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.branch_index, None);
}

#[tokio::test]
async fn preview_geometry_errors_are_422() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(dir.path(), None));
    let cases = [
        (json!({"seg_ab": [[0.0, 0.0], [10.0, 0.0]], "seg_cd": [[0.0, 1.0], [10.0, 1.0]]}), "ParallelSegments"),
        (json!({"seg_ab": [[1.0, 1.0], [5.0, 1.0]], "seg_cd": [[8.0, 0.0], [8.0, 5.0]]}), "NoCrossing"),
        (json!({"seg_ab": [[10.0, 5.0], [10.0, 40.0]], "seg_cd": [[3.0, 14.0], [22.0, 14.0]]}), "BoundsError"),
    ];
    for (cross, kind) in cases {
        let mut req = perpendicular(32, 32);
        req["cross"] = cross;
        let (status, body) = call(&app, "POST", "/api/preview", Some(req)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        let err: ErrorBody = serde_json::from_slice(&body).unwrap();
        assert_eq!(err.error, kind, "{}", err.message);
    }
    let (status, body) = call(&app, "POST", "/api/preview", Some(json!({"op": "mul"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, "SchemaError");
}

#[tokio::test]
async fn preview_of_large_grid_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(dir.path(), None));
    let req = json!({
        "cross": {"seg_ab": [[512.0, 100.0], [512.0, 900.0]], "seg_cd": [[150.0, 480.0], [880.0, 530.0]]},
        "sigma_ratio": 0.5,
        "op": "add",
        "width": 1024,
        "height": 1024
    });
    // warm-up, then the worst of a few runs
    call(&app, "POST", "/api/preview", Some(req.clone())).await;
    let mut worst = Duration::ZERO;
    for _ in 0..3 {
        let start = Instant::now();
        let (status, _) = call(&app, "POST", "/api/preview", Some(req.clone())).await;
        assert_eq!(status, StatusCode::OK);
        worst = worst.max(start.elapsed());
    }
    assert!(worst < Duration::from_millis(200), "{worst:?}");
}

#[tokio::test]
async fn save_then_get_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(dir.path(), None));
    let (status, _) = call(&app, "GET", "/api/annotations/a.png", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = call(
        &app,
        "POST",
        "/api/annotations/a.png",
        Some(json!({"doc": sample_doc(), "base_version": 0})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), json!({"version": 1}));

    let (status, body) = call(&app, "GET", "/api/annotations/a.png", None).await;
    assert_eq!(status, StatusCode::OK);
    let stored: StoredAnnotation = serde_json::from_slice(&body).unwrap();
    assert_eq!(stored.version, 1);
    assert_eq!(stored.doc, AnnotationDoc::from_json(&sample_doc().to_string()).unwrap());
    assert!(dir.path().join("annotations/a.png.json").is_file());
}

#[tokio::test]
async fn fifty_saves_give_version_fifty() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(dir.path(), None));
    for v in 0..50u64 {
        let (status, body) = call(
            &app,
            "POST",
            "/api/annotations/sub/img.png",
            Some(json!({"doc": sample_doc(), "base_version": v})),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["version"], v + 1);
    }
    let (_, body) = call(&app, "GET", "/api/annotations/sub/img.png", None).await;
    assert_eq!(serde_json::from_slice::<StoredAnnotation>(&body).unwrap().version, 50);
}

#[tokio::test]
async fn stale_base_version_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(dir.path(), None));
    let save = |v: u64| json!({"doc": sample_doc(), "base_version": v});
    assert_eq!(call(&app, "POST", "/api/annotations/a.png", Some(save(0))).await.0, StatusCode::OK);
    assert_eq!(call(&app, "POST", "/api/annotations/a.png", Some(save(1))).await.0, StatusCode::OK);
    let (status, body) = call(&app, "POST", "/api/annotations/a.png", Some(save(1))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let err: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(err.error, "VersionConflict");
    assert_eq!(err.current_version, Some(2));
}

#[tokio::test]
async fn concurrent_saves_from_same_base_admit_exactly_one() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(dir.path(), None));
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let app = app.clone();
            tokio::spawn(async move {
                call(&app, "POST", "/api/annotations/a.png", Some(json!({"doc": sample_doc(), "base_version": 0})))
                    .await
                    .0
            })
        })
        .collect();
    let mut ok = 0;
    for t in tasks {
        match t.await.unwrap() {
            StatusCode::OK => ok += 1,
            StatusCode::CONFLICT => {}
            other => panic!("unexpected {other}"),
        }
    }
    assert_eq!(ok, 1);
}

#[tokio::test]
async fn invalid_documents_are_422() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(dir.path(), None));
    let mut missing = sample_doc();
    missing.as_object_mut().unwrap().remove("schema_version");
    let mut parallel = sample_doc();
    parallel["entries"][0]["cross"]["seg_cd"] = json!([[11.0, 5.0], [11.0, 25.0]]);
    for (doc, kind) in [(missing, "SchemaError"), (parallel, "ParallelSegments")] {
        let (status, body) =
            call(&app, "POST", "/api/annotations/a.png", Some(json!({"doc": doc, "base_version": 0}))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, kind);
    }
    // nothing was written
    assert!(!dir.path().join("annotations/a.png.json").exists());
}

#[tokio::test]
async fn annotation_ids_cannot_escape_root() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(dir.path().join("root"), None));
    let (status, _) = call(
        &app,
        "POST",
        "/api/annotations/..%2F..%2Fevil",
        Some(json!({"doc": sample_doc(), "base_version": 0})),
    )
    .await;
    assert_ne!(status, StatusCode::OK);
    assert!(!dir.path().join("evil.json").exists());
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(dir.path(), None));
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/api/preview")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}

#[test]
fn shipped_schema_files_parse() {
    let api = Path::new(env!("CARGO_MANIFEST_DIR")).join("api");
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(api.join("annotation.schema.json")).unwrap()).unwrap();
    let required: Vec<&str> = schema["required"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for key in required {
        assert!(sample_doc().get(key).is_some(), "schema requires {key}");
    }
    let openapi = std::fs::read_to_string(api.join("openapi.yaml")).unwrap();
    for path in ["/api/images:", "/api/images/{id}:", "/api/preview:", "/api/annotations/{id}:"] {
        assert!(openapi.contains(path), "{path} undocumented");
    }
}
