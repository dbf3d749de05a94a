use std::path::Path;
use std::sync::OnceLock;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use svs_cli::server::{start, AppState, ServerHandle};
use svs_cli::{generate, init_checkpoint, setup, Fixture};
use svs_core::pose::{PoseQuery, SceneInfo};
use tempfile::TempDir;

const SMALL: &str = "features = 8\nencoder.base_width = 4\naggregator.mlp_hidden = 16\nrender.base_width = 4\n";

struct Fixtures {
    _tmp: TempDir,
    server: ServerHandle,
}

fn ready() -> &'static Fixtures {
    static F: OnceLock<Fixtures> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let scene = tmp.path().join("scene");
        generate(&scene, Fixture::Diffuse).unwrap();
        let cfg = tmp.path().join("small.cfg");
        std::fs::write(&cfg, SMALL).unwrap();
        let ckpt = tmp.path().join("m.svs");
        init_checkpoint(&ckpt, Some(&cfg), None).unwrap();
        let (loaded, _) = setup(&scene, &ckpt).unwrap();
        let server = start(AppState::ready(loaded, 2), None).unwrap();
        Fixtures { _tmp: tmp, server }
    })
}

fn pose(fov: f64, w: usize) -> String {
    PoseQuery {
        fov_deg: fov,
        ..PoseQuery::orbit([0.0, 0.25, 0.0], 3.0, 10.0, 30.0, 45.0, w, 64)
    }
    .to_json()
}

#[test]
fn health_and_scene_info() {
    let s = &ready().server;
    let c = Client::new();
    let r = c.get(s.url("/health")).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert!(r.text().unwrap().contains("ready"));
    let info: SceneInfo = serde_json::from_str(&c.get(s.url("/scene-info")).send().unwrap().text().unwrap()).unwrap();
    assert_eq!(info.num_sources, 8);
    assert_eq!((info.width, info.height), (64, 64));
    assert!(info.orbit_radius > 1.0);
    for k in 0..3 {
        assert!(info.bounds.min[k] <= info.orbit_center[k] && info.orbit_center[k] <= info.bounds.max[k]);
    }
    let raw: serde_json::Value = serde_json::from_str(&c.get(s.url("/scene-info")).send().unwrap().text().unwrap()).unwrap();
    for key in ["bounds", "orbit_center", "orbit_radius", "num_sources"] {
        assert!(raw.get(key).is_some(), "{key}");
    }
}

#[test]
fn render_returns_identical_png_bytes() {
    let s = &ready().server;
    let c = Client::new();
    let a = c.post(s.url("/render")).body(pose(45.0, 64)).send().unwrap();
    assert_eq!(a.status(), StatusCode::OK);
    assert_eq!(a.headers()["content-type"], "image/png");
    let a = a.bytes().unwrap();
    let b = c.post(s.url("/render")).body(pose(45.0, 64)).send().unwrap().bytes().unwrap();
    assert_eq!(a, b);
    let img = svs_core::io::decode_png(&a, Path::new("r.png")).unwrap();
    assert_eq!(img.shape(), &[64, 64, 3]);
    let wide = c.post(s.url("/render")).body(pose(45.0, 96)).send().unwrap();
    assert_eq!(wide.status(), StatusCode::OK);
}

#[test]
fn invalid_poses_are_rejected_with_400() {
    let s = &ready().server;
    let c = Client::new();
    for body in [pose(0.0, 64), pose(45.0, 60), "{".to_string(), r#"{"fov_deg": 45}"#.to_string()] {
        let r = c.post(s.url("/render")).body(body.clone()).send().unwrap();
        assert_eq!(r.status(), StatusCode::BAD_REQUEST, "{body}");
    }
}

#[test]
fn builtin_viewer_page_is_served() {
    let s = &ready().server;
    let r = Client::new().get(s.url("/")).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert!(r.text().unwrap().contains("/scene-info"));
}

#[test]
fn loading_state_answers_503() {
    let server = start(AppState::loading(1), None).unwrap();
    let c = Client::new();
    let h = c.get(server.url("/health")).send().unwrap();
    assert_eq!(h.status(), StatusCode::OK);
    assert!(h.text().unwrap().contains("loading"));
    assert_eq!(c.get(server.url("/scene-info")).send().unwrap().status(), StatusCode::SERVICE_UNAVAILABLE);
    let r = c.post(server.url("/render")).body(pose(45.0, 64)).send().unwrap();
    assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE);

    let failed = AppState::loading(1);
    failed.set_failed("boom".into());
    let server = start(failed, None).unwrap();
    let r = c.get(server.url("/scene-info")).send().unwrap();
    assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE);
    assert!(r.text().unwrap().contains("boom"));
}

#[test]
fn static_directory_is_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>viewer</p>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let server = start(AppState::loading(1), Some(dir.path().to_path_buf())).unwrap();
    let c = Client::new();
    assert_eq!(c.get(server.url("/")).send().unwrap().text().unwrap(), "<p>viewer</p>");
    let js = c.get(server.url("/app.js")).send().unwrap();
    assert!(js.headers()["content-type"].to_str().unwrap().contains("javascript"));
    assert_eq!(c.get(server.url("/missing.css")).send().unwrap().status(), StatusCode::NOT_FOUND);
    assert_eq!(c.get(server.url("/health")).send().unwrap().status(), StatusCode::OK);
}
