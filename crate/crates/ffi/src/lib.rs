//! C ABI over the reprokit service.
//!
//! Requests and results are JSON strings with the same field names as the
//! HTTP API. Every call returns an [`RkStatus`]; on failure the error
//! document is available from [`rk_last_error`] on the calling thread.
//! Strings handed out through `out` parameters are owned by the caller and
//! released with [`rk_string_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use libc::c_char;
use serde::Deserialize;

use reprokit::container::EnvironmentRequest;
use reprokit::language::infer_languages;
use reprokit::service::{
    ApiError, ApiErrorCode, CreateProjectRequest, DriverKind, RunRequest, Service, ServiceConfig, Upload,
    VerifyRequest,
};
use reprokit::store::FileNode;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RkStatus {
    Ok = 0,
    NotFound = 1,
    Validation = 2,
    EngineFailure = 3,
    StageFailure = 4,
    Storage = 5,
    InvalidArgument = 6,
    Panic = 7,
}

impl From<ApiErrorCode> for RkStatus {
    fn from(code: ApiErrorCode) -> Self {
        match code {
            ApiErrorCode::NotFound => RkStatus::NotFound,
            ApiErrorCode::Validation => RkStatus::Validation,
            ApiErrorCode::EngineFailure => RkStatus::EngineFailure,
            ApiErrorCode::StageFailure => RkStatus::StageFailure,
            ApiErrorCode::Storage => RkStatus::Storage,
        }
    }
}

/// Opaque service handle.
pub struct RkService {
    inner: Service,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: RkStatus,
    document: String,
}

impl From<ApiError> for Failure {
    fn from(err: ApiError) -> Self {
        Failure {
            status: err.code.into(),
            document: serde_json::to_string(&err).unwrap_or_else(|_| err.message.clone()),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    let message = message.into();
    Failure {
        status: RkStatus::InvalidArgument,
        document: serde_json::json!({ "code": "InvalidArgument", "message": message }).to_string(),
    }
}

fn set_last_error(document: String) {
    let c = CString::new(document.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RkStatus::Ok,
        Ok(Err(failure)) => {
            set_last_error(failure.document);
            failure.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_last_error(serde_json::json!({ "code": "Panic", "message": msg }).to_string());
            RkStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

fn json_arg<T: serde::de::DeserializeOwned>(text: &str, name: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure::from(ApiError::validation(format!("{name}: {e}"))))
}

/// # Safety
/// `out` is null or valid for one pointer write.
unsafe fn put(out: *mut *mut c_char, value: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid("out is null"));
    }
    let c = CString::new(value).map_err(|_| invalid("result contains a NUL byte"))?;
    *out = c.into_raw();
    Ok(())
}

/// # Safety
/// `out` is null or valid for one pointer write.
unsafe fn put_json<T: serde::Serialize>(out: *mut *mut c_char, value: &T) -> Result<(), Failure> {
    put(out, serde_json::to_string(value).expect("response serializes"))
}

/// # Safety
/// `handle` is null or a pointer from [`rk_service_open`] not yet freed.
unsafe fn service<'a>(handle: *const RkService) -> Result<&'a Service, Failure> {
    handle.as_ref().map(|h| &h.inner).ok_or_else(|| invalid("service handle is null"))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ConfigDoc {
    store: PathBuf,
    #[serde(default)]
    driver: Option<String>,
    #[serde(default)]
    engine_cli: Option<PathBuf>,
    #[serde(default)]
    sandbox_dir: Option<PathBuf>,
    #[serde(default)]
    sandbox_path: Vec<PathBuf>,
}

/// Open a service from a JSON configuration:
/// `{"store", "driver"?, "engineCli"?, "sandboxDir"?, "sandboxPath"?}`.
///
/// # Safety
/// `config_json` is a valid NUL-terminated string and `out` is valid for
/// one pointer write.
#[no_mangle]
pub unsafe extern "C" fn rk_service_open(config_json: *const c_char, out: *mut *mut RkService) -> RkStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let doc: ConfigDoc = json_arg(arg(config_json, "config_json")?, "config_json")?;
        let driver: DriverKind = match doc.driver.as_deref() {
            None => DriverKind::Docker,
            Some(d) => d.parse().map_err(|e: reprokit::Error| Failure::from(ApiError::from(e)))?,
        };
        let mut config = ServiceConfig::new(doc.store, driver);
        config.engine_cli = doc.engine_cli;
        config.sandbox_dir = doc.sandbox_dir;
        config.sandbox_path = doc.sandbox_path;
        let inner = Service::open(config)?;
        *out = Box::into_raw(Box::new(RkService { inner }));
        Ok(())
    })
}

/// # Safety
/// `handle` is null or a pointer from [`rk_service_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rk_service_free(handle: *mut RkService) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Render the Dockerfile for an environment request.
///
/// # Safety
/// `request_json` is a valid NUL-terminated string and `out` is valid for
/// one pointer write.
#[no_mangle]
pub unsafe extern "C" fn rk_generate_spec(request_json: *const c_char, out: *mut *mut c_char) -> RkStatus {
    guard(|| {
        let req = EnvironmentRequest::from_json(arg(request_json, "request_json")?).map_err(ApiError::from)?;
        let spec = reprokit::container::generate_spec(&req).map_err(ApiError::from)?;
        put(out, spec.render())
    })
}

/// Language profile of a JSON list of relative file paths.
///
/// # Safety
/// `paths_json` is a valid NUL-terminated string and `out` is valid for one
/// pointer write.
#[no_mangle]
pub unsafe extern "C" fn rk_infer_languages(paths_json: *const c_char, out: *mut *mut c_char) -> RkStatus {
    guard(|| {
        let paths: Vec<String> = json_arg(arg(paths_json, "paths_json")?, "paths_json")?;
        let tree: Vec<FileNode> = paths.iter().map(|p| FileNode::file(p.as_str(), b"")).collect();
        put_json(out, &infer_languages(&tree))
    })
}

/// # Safety
/// `handle` comes from [`rk_service_open`]; `request_json` is a valid
/// NUL-terminated string; `out` is valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn rk_create_project(
    handle: *const RkService,
    request_json: *const c_char,
    out: *mut *mut c_char,
) -> RkStatus {
    guard(|| {
        let svc = service(handle)?;
        let req: CreateProjectRequest = json_arg(arg(request_json, "request_json")?, "request_json")?;
        put_json(out, &svc.create_project(&req)?)
    })
}

/// Add files from a local directory or zip archive, or from a git or DOI
/// URL when `source` contains `://` or starts with `doi:`.
///
/// # Safety
/// `handle` comes from [`rk_service_open`]; `project_id` and `source` are
/// valid NUL-terminated strings; `out` is valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn rk_add_files(
    handle: *const RkService,
    project_id: *const c_char,
    source: *const c_char,
    out: *mut *mut c_char,
) -> RkStatus {
    guard(|| {
        let svc = service(handle)?;
        let id = arg(project_id, "project_id")?;
        let source = arg(source, "source")?;
        let upload = if source.contains("://") || source.starts_with("doi:") || source.starts_with("git@") {
            Upload::Url(source.to_string())
        } else {
            Upload::Path(PathBuf::from(source))
        };
        put_json(out, &svc.add_files(id, upload)?)
    })
}

/// Generate the project's container spec and build its image.
///
/// # Safety
/// `handle` comes from [`rk_service_open`]; `project_id` and `request_json`
/// are valid NUL-terminated strings; `out` is valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn rk_build_environment(
    handle: *const RkService,
    project_id: *const c_char,
    request_json: *const c_char,
    out: *mut *mut c_char,
) -> RkStatus {
    guard(|| {
        let svc = service(handle)?;
        let id = arg(project_id, "project_id")?;
        let req = EnvironmentRequest::from_json(arg(request_json, "request_json")?).map_err(ApiError::from)?;
        put_json(out, &svc.environment(id, &req)?)
    })
}

/// Run a command: `{"command", "tagId", "datasetId"?}`.
///
/// # Safety
/// `handle` comes from [`rk_service_open`]; `project_id` and `request_json`
/// are valid NUL-terminated strings; `out` is valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn rk_run(
    handle: *const RkService,
    project_id: *const c_char,
    request_json: *const c_char,
    out: *mut *mut c_char,
) -> RkStatus {
    guard(|| {
        let svc = service(handle)?;
        let id = arg(project_id, "project_id")?;
        let req: RunRequest = json_arg(arg(request_json, "request_json")?, "request_json")?;
        put_json(out, &svc.run(id, &req)?)
    })
}

/// Double-run or compare stored runs, as the `/verify` endpoint.
///
/// # Safety
/// `handle` comes from [`rk_service_open`]; `project_id` and `request_json`
/// are valid NUL-terminated strings; `out` is valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn rk_verify(
    handle: *const RkService,
    project_id: *const c_char,
    request_json: *const c_char,
    out: *mut *mut c_char,
) -> RkStatus {
    guard(|| {
        let svc = service(handle)?;
        let id = arg(project_id, "project_id")?;
        let req: VerifyRequest = json_arg(arg(request_json, "request_json")?, "request_json")?;
        put_json(out, &svc.verify(id, &req)?)
    })
}

/// Check a package directory; the result is its manifest.
///
/// # Safety
/// `dir` is a valid NUL-terminated string and `out` is valid for one
/// pointer write.
#[no_mangle]
pub unsafe extern "C" fn rk_verify_package(dir: *const c_char, out: *mut *mut c_char) -> RkStatus {
    guard(|| {
        let dir = arg(dir, "dir")?;
        let manifest = reprokit::package::verify_package(std::path::Path::new(dir)).map_err(ApiError::from)?;
        put_json(out, &manifest)
    })
}

/// JSON error document of the last failed call on this thread, or null.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rk_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` is null or a string returned through an `out` parameter of this
/// library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn rk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
