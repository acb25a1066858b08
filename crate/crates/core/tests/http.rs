mod common;

use std::sync::Arc;

use serde_json::{json, Value};

use reprokit::http::{spawn, ServerHandle, DEFAULT_UPLOAD_LIMIT};

use common::*;

struct Client {
    base: String,
    agent: ureq::Agent,
    _server: ServerHandle,
    _dir: tempfile::TempDir,
}

type Reply = (u16, Value);

impl Client {
    fn start(limit: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let svc = Arc::new(sandbox_service(dir.path()));
        let server = spawn(svc, "127.0.0.1:0".parse().unwrap(), limit).unwrap();
        let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Client {
            base: format!("http://{}", server.addr),
            agent,
            _server: server,
            _dir: dir,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn reply(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Reply {
        let mut resp = resp.unwrap();
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
    }

    fn get(&self, path: &str) -> Reply {
        Self::reply(self.agent.get(self.url(path)).call())
    }

    fn delete(&self, path: &str) -> Reply {
        Self::reply(self.agent.delete(self.url(path)).call())
    }

    fn send(&self, method: &str, path: &str, content_type: &str, body: &[u8]) -> Reply {
        let url = self.url(path);
        let req = match method {
            "POST" => self.agent.post(url),
            "PUT" => self.agent.put(url),
            "PATCH" => self.agent.patch(url),
            other => panic!("{other}"),
        };
        Self::reply(req.header("content-type", content_type).send(body))
    }

    fn post(&self, path: &str, body: Value) -> Reply {
        self.send("POST", path, "application/json", body.to_string().as_bytes())
    }

    fn project_with(&self, fixture: &str) -> String {
        let (status, p) = self.post("/projects", json!({"name": fixture}));
        assert_eq!(status, 200, "{p}");
        let id = p["id"].as_str().unwrap().to_string();
        let zip = zip_dir(&fixtures().join(fixture).join("tree"));
        let (status, files) = self.send("POST", &format!("/projects/{id}/files"), "application/zip", &zip);
        assert_eq!(status, 200, "{files}");
        id
    }
}

fn fixture_json(rel: &str) -> Value {
    serde_json::from_str(&fixture_text(rel)).unwrap()
}

#[test]
fn health_and_spec() {
    let c = Client::start(DEFAULT_UPLOAD_LIMIT);
    assert_eq!(c.get("/health"), (200, json!({"status": "ok"})));
    let (status, body) = c.post("/spec", fixture_json("e8/request.json"));
    assert_eq!(status, 200);
    assert_eq!(body["dockerfile"], fixture_text("e8/Dockerfile"));
    let (status, body) = c.post("/spec", json!({"languages": ["fortran"]}));
    assert_eq!(status, 422, "{body}");
    assert_eq!(body["code"], "Validation");
}

#[test]
fn malformed_bodies_and_unknown_ids() {
    let c = Client::start(DEFAULT_UPLOAD_LIMIT);
    let (status, body) = c.send("POST", "/projects", "application/json", b"{not json");
    assert_eq!(status, 422, "{body}");
    assert_eq!(c.get("/projects/does-not-exist").0, 404);
    assert_eq!(c.get("/projects/..%2F..").0, 404);

    let id = c.project_with("e3");
    let (status, body) = c.post(&format!("/projects/{id}/runs"), json!({"command": "  ", "tagId": 1}));
    assert_eq!(status, 422, "{body}");
    let (status, body) = c.get(&format!("/projects/{id}/runs/9b2f1d7e-0000-4000-8000-000000000000"));
    assert_eq!(status, 404, "{body}");
    assert_eq!(body["code"], "NotFound");
    let (status, _) = c.get(&format!("/projects/{id}/runs/not-a-uuid"));
    assert_eq!(status, 404);
}

#[test]
fn e8_environment_returns_tag_and_runs() {
    let c = Client::start(DEFAULT_UPLOAD_LIMIT);
    let id = c.project_with("e8");
    let (status, env) = c.post(&format!("/projects/{id}/environment"), fixture_json("e8/request.json"));
    assert_eq!(status, 200, "{env}");
    let tag = env["tagId"].as_u64().expect("tagId");
    assert_eq!(env["dockerfile"], fixture_text("e8/Dockerfile"));

    let (status, run) = c.post(
        &format!("/projects/{id}/runs"),
        json!({"command": "cat RLCheck/jqf/target/build.txt", "tagId": tag}),
    );
    assert_eq!(status, 200, "{run}");
    assert_eq!(run["outcome"]["exitCode"], 0);
    let (status, runs) = c.get(&format!("/projects/{id}/runs"));
    assert_eq!(status, 200);
    assert_eq!(runs.as_array().unwrap().len(), 1);
    assert_eq!(runs[0]["runId"], run["runId"]);
}

#[test]
fn entries_via_put_patch_delete() {
    let c = Client::start(DEFAULT_UPLOAD_LIMIT);
    let (_, p) = c.post("/projects", json!({"name": "entries"}));
    let id = p["id"].as_str().unwrap();

    let (status, e) = c.send("PUT", &format!("/projects/{id}/files/src?folder=true"), "application/octet-stream", b"");
    assert_eq!(status, 200, "{e}");
    let (status, e) = c.send("PUT", &format!("/projects/{id}/files/src/a.py"), "application/octet-stream", b"print(1)\n");
    assert_eq!(status, 200, "{e}");
    assert_eq!(e["entry"]["size"], 9);
    let (status, _) = c.send("PUT", &format!("/projects/{id}/files/src/a.py"), "application/octet-stream", b"again");
    assert_eq!(status, 422);
    let (status, e) = c.send("PATCH", &format!("/projects/{id}/files/src/a.py"), "application/octet-stream", b"print(2)\n");
    assert_eq!(status, 200, "{e}");
    let (status, e) = c.send("PATCH", &format!("/projects/{id}/files/src/none.py"), "application/octet-stream", b"x");
    assert_eq!(status, 404, "{e}");
    let (status, e) = c.delete(&format!("/projects/{id}/files/src"));
    assert_eq!(status, 200, "{e}");
    assert_eq!(e["deleted"], true);
    let (_, project) = c.get(&format!("/projects/{id}"));
    assert_eq!(project["files"], json!([]));
}

#[test]
fn multipart_upload_and_infer() {
    let c = Client::start(DEFAULT_UPLOAD_LIMIT);
    let (_, p) = c.post("/projects", json!({"name": "mp"}));
    let id = p["id"].as_str().unwrap();
    let zip = zip_dir(&fixtures().join("e3/tree"));
    let boundary = "reprokit-test-boundary";
    let mut body = format!(
        "--{boundary}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"e3.zip\"\r\nContent-Type: application/zip\r\n\r\n"
    )
    .into_bytes();
    body.extend_from_slice(&zip);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    let (status, files) = c.send(
        "POST",
        &format!("/projects/{id}/files"),
        &format!("multipart/form-data; boundary={boundary}"),
        &body,
    );
    assert_eq!(status, 200, "{files}");
    assert!(files["files"].as_array().unwrap().iter().any(|f| f["path"] == "src/bbfs_edge.cpp"));

    let (status, inferred) = c.post(&format!("/projects/{id}/infer"), Value::Null);
    assert_eq!(status, 200, "{inferred}");
    let langs: Vec<&str> = inferred["profile"]["languages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l.as_str().unwrap())
        .collect();
    assert_eq!(langs.len(), 4, "{langs:?}");
}

#[test]
fn body_limit_is_enforced() {
    let c = Client::start(1024);
    let (_, p) = c.post("/projects", json!({"name": "big"}));
    let id = p["id"].as_str().unwrap();
    // Small enough to be fully sent before the server answers and closes.
    let (status, body) = c.send("POST", &format!("/projects/{id}/files"), "application/zip", &vec![0u8; 4096]);
    assert_eq!(status, 413);
    assert!(body["message"].as_str().is_some_and(|m| !m.is_empty()), "{body}");
    let (status, _) = c.send("PUT", &format!("/projects/{id}/files/big.bin"), "application/octet-stream", &vec![0u8; 4096]);
    assert_eq!(status, 413);
}

#[test]
fn verify_and_package_endpoints() {
    if !have("g++", "--version") {
        eprintln!("g++ not installed; skipping");
        return;
    }
    let c = Client::start(DEFAULT_UPLOAD_LIMIT);
    let id = c.project_with("e3");
    let (status, env) = c.post(&format!("/projects/{id}/environment"), fixture_json("e3/request.json"));
    assert_eq!(status, 200, "{env}");
    let tag = env["tagId"].as_u64().unwrap();
    let command = fixture_json("e3/run.json")["command"].clone();

    let (status, v) = c.post(&format!("/projects/{id}/verify"), json!({"tagId": tag, "command": command}));
    assert_eq!(status, 200, "{v}");
    assert_eq!(v["report"]["verdict"], "reproduced");
    let a = v["runs"][0]["runId"].clone();
    let b = v["runs"][1]["runId"].clone();
    let (status, again) = c.post(&format!("/projects/{id}/verify"), json!({"runs": [a, b]}));
    assert_eq!(status, 200, "{again}");
    assert_eq!(again["report"]["verdict"], "reproduced");

    let (status, pkg) = c.post(&format!("/projects/{id}/package"), json!({"tagId": tag, "zip": true}));
    assert_eq!(status, 200, "{pkg}");
    assert_eq!(pkg["manifest"]["commands"], json!([command]));
    let dir = std::path::PathBuf::from(pkg["path"].as_str().unwrap());
    assert!(dir.join("runExperiment.sh").is_file() && dir.join("runExperiment.bat").is_file());
    assert!(std::path::Path::new(pkg["zip"].as_str().unwrap()).is_file());
}
