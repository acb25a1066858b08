//! JSON HTTP service.
//!
//! | Method | Path | Body | Response |
//! |---|---|---|---|
//! | GET | `/health` | | `{"status":"ok"}` |
//! | POST | `/spec` | EnvironmentRequest | `{"dockerfile"}` |
//! | GET, POST | `/projects` | `{"name","description","projectType"}` | Project(s) |
//! | GET | `/projects/{id}` | | Project |
//! | POST | `/projects/{id}/files` | zip body, multipart `file`, or `{"url"}` | `{"projectId","files"}` |
//! | PUT | `/projects/{id}/files/{path}` | file bytes (`?folder=true` for a folder) | entry |
//! | PATCH | `/projects/{id}/files/{path}` | new file bytes | entry |
//! | DELETE | `/projects/{id}/files/{path}` | | entry |
//! | POST | `/projects/{id}/dataset` | `{"root","label","external"}` or `{"id"}` | Project |
//! | PUT | `/projects/{id}/seeds` | `[SeedDecl]` | Project |
//! | POST | `/projects/{id}/infer` | `?writeRequirements=true` | inference |
//! | POST | `/projects/{id}/environment` | EnvironmentRequest | `{"tagId",...}` |
//! | POST | `/projects/{id}/configure` | EnvironmentRequest + `command` | environment, report, runs |
//! | GET, POST | `/projects/{id}/runs` | `{"command","tagId","datasetId"}` | RunRecord(s) |
//! | GET | `/projects/{id}/runs/{rid}` | | RunRecord |
//! | POST | `/projects/{id}/verify` | `{"tagId","command"}` or `{"runs":[a,b]}` | report, runs |
//! | POST | `/projects/{id}/package` | `{"tagId","commands","out","embedImage","zip"}` | manifest |
//!
//! Errors are `{"code","message","stage"?,"details"?}` with status 404
//! (NotFound), 422 (Validation), 502 (EngineFailure) or 500.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::container::EnvironmentRequest;
use crate::service::{ApiError, ApiResult, Service, Upload};
use crate::store::{EntryAction, SeedDecl};

/// Default request body limit.
pub const DEFAULT_UPLOAD_LIMIT: usize = 512 * 1024 * 1024;

type Shared = Arc<Service>;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

/// Request body whose rejections keep their status but use the JSON error
/// shape.
struct Body(Bytes);

impl<S: Send + Sync> FromRequest<S> for Body {
    type Rejection = Response;

    async fn from_request(req: Request, state: &S) -> Result<Self, Response> {
        Bytes::from_request(req, state)
            .await
            .map(Body)
            .map_err(|e| rejection(e.status(), format!("request body: {}", e.body_text())))
    }
}

fn rejection(status: StatusCode, message: String) -> Response {
    (status, Json(ApiError::validation(message))).into_response()
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("request body: {e}")))
}

/// Run a blocking service call off the async executor.
async fn blocking<T, F>(svc: Shared, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Service) -> ApiResult<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&svc)).await {
        Ok(Ok(value)) => Json(value).into_response(),
        Ok(Err(err)) => err.into_response(),
        Err(join) => ApiError {
            code: crate::service::ApiErrorCode::StageFailure,
            message: format!("request handler failed: {join}"),
            stage: None,
            details: Vec::new(),
        }
        .into_response(),
    }
}

pub fn router(service: Shared, upload_limit: usize) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(serde_json::json!({"status": "ok"})) }))
        .route("/spec", post(spec))
        .route("/projects", get(list_projects).post(create_project))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/files", post(upload_files))
        .route(
            "/projects/{id}/files/{*path}",
            axum::routing::put(create_entry).patch(edit_entry).delete(delete_entry),
        )
        .route("/projects/{id}/dataset", post(set_dataset))
        .route("/projects/{id}/seeds", axum::routing::put(set_seeds))
        .route("/projects/{id}/infer", post(infer))
        .route("/projects/{id}/environment", post(environment))
        .route("/projects/{id}/configure", post(configure))
        .route("/projects/{id}/runs", get(list_runs).post(run))
        .route("/projects/{id}/runs/{rid}", get(get_run))
        .route("/projects/{id}/verify", post(verify))
        .route("/projects/{id}/package", post(package))
        .layer(DefaultBodyLimit::max(upload_limit))
        .with_state(service)
}

async fn spec(State(svc): State<Shared>, Body(body): Body) -> Response {
    blocking(svc, move |s| {
        let req: EnvironmentRequest = parse(&body)?;
        Ok(serde_json::json!({ "dockerfile": s.generate_spec(&req)? }))
    })
    .await
}

async fn list_projects(State(svc): State<Shared>) -> Response {
    blocking(svc, |s| s.list_projects()).await
}

async fn create_project(State(svc): State<Shared>, Body(body): Body) -> Response {
    blocking(svc, move |s| s.create_project(&parse(&body)?)).await
}

async fn get_project(State(svc): State<Shared>, Path(id): Path<String>) -> Response {
    blocking(svc, move |s| s.project(&id)).await
}

async fn upload_files(State(svc): State<Shared>, Path(id): Path<String>, req: Request) -> Response {
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    let upload = if content_type.starts_with("multipart/form-data") {
        match read_multipart(req).await {
            Ok(u) => u,
            Err(e) => return e.into_response(),
        }
    } else {
        let body = match Body::from_request(req, &()).await {
            Ok(Body(b)) => b,
            Err(rejected) => return rejected,
        };
        if content_type.starts_with("application/json") {
            #[derive(serde::Deserialize)]
            struct UrlBody {
                url: String,
            }
            match parse::<UrlBody>(&body) {
                Ok(b) => Upload::Url(b.url),
                Err(e) => return e.into_response(),
            }
        } else {
            Upload::ZipBytes(body.to_vec())
        }
    };
    blocking(svc, move |s| s.add_files(&id, upload)).await
}

async fn read_multipart(req: Request) -> Result<Upload, Response> {
    let mut form = Multipart::from_request(req, &())
        .await
        .map_err(|e| rejection(e.status(), format!("multipart body: {}", e.body_text())))?;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| rejection(e.status(), format!("multipart body: {}", e.body_text())))?
    {
        match field.name() {
            Some("file") => {
                let bytes = field
                    .bytes()
                    .await
                    .map_err(|e| rejection(e.status(), format!("multipart file: {}", e.body_text())))?;
                return Ok(Upload::ZipBytes(bytes.to_vec()));
            }
            Some("url") => {
                let url = field
                    .text()
                    .await
                    .map_err(|e| rejection(e.status(), format!("multipart url: {}", e.body_text())))?;
                return Ok(Upload::Url(url));
            }
            _ => {}
        }
    }
    Err(ApiError::validation("multipart body needs a `file` or `url` field").into_response())
}

async fn create_entry(
    State(svc): State<Shared>,
    Path((id, path)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
    Body(body): Body,
) -> Response {
    let folder = q.get("folder").is_some_and(|v| v == "true" || v == "1");
    let action = if folder {
        EntryAction::CreateFolder
    } else {
        EntryAction::CreateFile(body.to_vec())
    };
    blocking(svc, move |s| s.modify_entry(&id, &path, action)).await
}

async fn edit_entry(State(svc): State<Shared>, Path((id, path)): Path<(String, String)>, Body(body): Body) -> Response {
    blocking(svc, move |s| s.modify_entry(&id, &path, EntryAction::EditFile(body.to_vec()))).await
}

async fn delete_entry(State(svc): State<Shared>, Path((id, path)): Path<(String, String)>) -> Response {
    blocking(svc, move |s| s.modify_entry(&id, &path, EntryAction::Delete)).await
}

async fn set_dataset(State(svc): State<Shared>, Path(id): Path<String>, Body(body): Body) -> Response {
    blocking(svc, move |s| s.set_dataset(&id, &parse(&body)?)).await
}

async fn set_seeds(State(svc): State<Shared>, Path(id): Path<String>, Body(body): Body) -> Response {
    blocking(svc, move |s| s.declare_seeds(&id, parse::<Vec<SeedDecl>>(&body)?)).await
}

async fn infer(State(svc): State<Shared>, Path(id): Path<String>, Query(q): Query<HashMap<String, String>>) -> Response {
    let write = q.get("writeRequirements").is_some_and(|v| v == "true" || v == "1");
    blocking(svc, move |s| s.infer(&id, write)).await
}

async fn environment(State(svc): State<Shared>, Path(id): Path<String>, Body(body): Body) -> Response {
    blocking(svc, move |s| s.environment(&id, &parse(&body)?)).await
}

async fn configure(State(svc): State<Shared>, Path(id): Path<String>, Body(body): Body) -> Response {
    blocking(svc, move |s| s.configure(&id, &parse(&body)?)).await
}

async fn run(State(svc): State<Shared>, Path(id): Path<String>, Body(body): Body) -> Response {
    blocking(svc, move |s| s.run(&id, &parse(&body)?)).await
}

async fn list_runs(State(svc): State<Shared>, Path(id): Path<String>) -> Response {
    blocking(svc, move |s| s.list_runs(&id)).await
}

async fn get_run(State(svc): State<Shared>, Path((id, rid)): Path<(String, String)>) -> Response {
    blocking(svc, move |s| s.get_run(&id, &rid)).await
}

async fn verify(State(svc): State<Shared>, Path(id): Path<String>, Body(body): Body) -> Response {
    blocking(svc, move |s| s.verify(&id, &parse(&body)?)).await
}

async fn package(State(svc): State<Shared>, Path(id): Path<String>, Body(body): Body) -> Response {
    blocking(svc, move |s| s.package(&id, &parse(&body)?)).await
}

/// Serve until `shutdown` resolves. `on_bound` receives the bound address,
/// which matters when binding port 0.
pub async fn serve_with_shutdown(
    service: Shared,
    addr: SocketAddr,
    upload_limit: usize,
    on_bound: impl FnOnce(SocketAddr),
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(service, upload_limit))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Serve until interrupted.
pub async fn serve(service: Shared, addr: SocketAddr, upload_limit: usize) -> std::io::Result<()> {
    serve_with_shutdown(
        service,
        addr,
        upload_limit,
        |bound| log::info!("listening on http://{bound}"),
        async {
            let _ = tokio::signal::ctrl_c().await;
        },
    )
    .await
}

/// Start the service on a background runtime thread; returns its address
/// and a handle that stops it when dropped.
pub fn spawn(service: Shared, addr: SocketAddr, upload_limit: usize) -> std::io::Result<ServerHandle> {
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || -> std::io::Result<()> {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(serve_with_shutdown(
            service,
            addr,
            upload_limit,
            move |bound| {
                let _ = addr_tx.send(bound);
            },
            async {
                let _ = stop_rx.await;
            },
        ))
    });
    match addr_rx.recv() {
        Ok(bound) => Ok(ServerHandle {
            addr: bound,
            stop: Some(stop_tx),
            thread: Some(thread),
        }),
        Err(_) => match thread.join() {
            Ok(Err(e)) => Err(e),
            _ => Err(std::io::Error::other("server thread exited before binding")),
        },
    }
}

#[derive(Debug)]
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
