//! HTTP render service.
//!
//! | route              | response                                        |
//! |--------------------|-------------------------------------------------|
//! | `GET /health`      | 200, `{"status": "ready"}` or `"loading"`       |
//! | `GET /scene-info`  | 200 [`SceneInfo`] JSON, 503 while loading       |
//! | `POST /render`     | 200 `image/png`, 400 bad pose, 503 while loading |
//! | `GET /`            | viewer assets                                   |

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use svs_core::pose::PoseQuery;
use tokio::sync::{oneshot, Semaphore};
use tower_http::services::ServeDir;

use crate::commands::{setup, Loaded};

const INDEX_HTML: &str = include_str!("../static/index.html");

pub struct AppState {
    loaded: OnceLock<Arc<Loaded>>,
    failure: OnceLock<String>,
    workers: Semaphore,
}

impl AppState {
    pub fn loading(workers: usize) -> Arc<Self> {
        Arc::new(AppState {
            loaded: OnceLock::new(),
            failure: OnceLock::new(),
            workers: Semaphore::new(workers.max(1)),
        })
    }

    pub fn ready(loaded: Loaded, workers: usize) -> Arc<Self> {
        let s = Self::loading(workers);
        let _ = s.loaded.set(Arc::new(loaded));
        s
    }

    pub fn set_loaded(&self, loaded: Loaded) {
        let _ = self.loaded.set(Arc::new(loaded));
    }

    pub fn set_failed(&self, msg: String) {
        let _ = self.failure.set(msg);
    }

    fn get(&self) -> Result<Arc<Loaded>, Response> {
        if let Some(l) = self.loaded.get() {
            return Ok(l.clone());
        }
        let msg = match self.failure.get() {
            Some(f) => format!("scene failed to load: {f}"),
            None => "scene is loading".to_string(),
        };
        Err((StatusCode::SERVICE_UNAVAILABLE, msg).into_response())
    }
}

async fn health(State(s): State<Arc<AppState>>) -> impl IntoResponse {
    let status = if s.loaded.get().is_some() {
        "ready"
    } else if s.failure.get().is_some() {
        "failed"
    } else {
        "loading"
    };
    Json(serde_json::json!({ "status": status }))
}

async fn scene_info(State(s): State<Arc<AppState>>) -> Response {
    match s.get() {
        Ok(l) => Json(l.info.clone()).into_response(),
        Err(r) => r,
    }
}

async fn render(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let l = match s.get() {
        Ok(l) => l,
        Err(r) => return r,
    };
    let pose = std::str::from_utf8(&body)
        .map_err(|e| anyhow::anyhow!("body is not UTF-8: {e}"))
        .and_then(|t| Ok(PoseQuery::from_json(t)?))
        .and_then(|p| l.check_pose(&p).map(|_| p));
    let pose = match pose {
        Ok(p) => p,
        Err(e) => return (StatusCode::BAD_REQUEST, format!("{e:#}")).into_response(),
    };
    let Ok(_permit) = s.workers.acquire().await else {
        return StatusCode::SERVICE_UNAVAILABLE.into_response();
    };
    match tokio::task::spawn_blocking(move || l.render_png(&pose)).await {
        Ok(Ok(png)) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        Ok(Err(e)) => (StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}")).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/scene-info", get(scene_info))
        .route("/render", post(render))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(INDEX_HTML) })),
    }
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    pub workers: usize,
    pub static_dir: Option<PathBuf>,
}

/// Loads the scene on a background thread so the service answers 503
/// until it is ready.
pub fn spawn_loader(state: Arc<AppState>, scene_dir: PathBuf, ckpt: PathBuf) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || match setup(&scene_dir, &ckpt) {
        Ok((l, outcome)) => {
            log::info!("scene `{}` ready ({outcome:?} feature cache)", l.scene.name);
            state.set_loaded(l);
        }
        Err(e) => {
            log::error!("loading {}: {e:#}", scene_dir.display());
            state.set_failed(format!("{e:#}"));
        }
    })
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

/// Blocks serving until the process is stopped.
pub fn serve(scene_dir: &Path, ckpt: &Path, opts: &ServeOptions) -> Result<()> {
    let rt = runtime()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(opts.addr)
            .await
            .with_context(|| format!("binding {}", opts.addr))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        let state = AppState::loading(opts.workers);
        spawn_loader(state.clone(), scene_dir.to_path_buf(), ckpt.to_path_buf());
        axum::serve(listener, router(state, opts.static_dir.as_deref())).await?;
        Ok(())
    })
}

/// A service running on its own thread, stopped on drop.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Starts a service over `state` on an ephemeral local port.
pub fn start(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Result<ServerHandle> {
    let rt = runtime()?;
    let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = oneshot::channel();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
            let app = router(state, static_dir.as_deref());
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
