use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::Deserialize;
use tiny_http::{Header, Method as HttpMethod, Request, Response, Server};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::oracle::{HumanBridge, SubmitError};

#[derive(Deserialize)]
struct LabelBody {
    query_id: u64,
    choice: String,
}

/// HTTP front of a [`HumanBridge`].
///
/// `GET /queries/pending` lists pending queries, `POST /labels` takes
/// `{"query_id": n, "choice": "a" | "b" | "equal"}`, and `GET /metrics`
/// returns the run's `metrics.csv`.
pub struct QueryService {
    server: Arc<Server>,
    handle: Option<JoinHandle<()>>,
    port: u16,
}

impl QueryService {
    /// Binds `addr` (e.g. `127.0.0.1:0`) and serves on a background thread.
    pub fn start(addr: &str, bridge: HumanBridge, metrics: Option<PathBuf>) -> Result<Self> {
        let server = Server::http(addr).map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?;
        let port = server.server_addr().to_ip().map(|a| a.port()).unwrap_or(0);
        let server = Arc::new(server);
        let s = Arc::clone(&server);
        let handle = std::thread::spawn(move || {
            for req in s.incoming_requests() {
                handle(req, &bridge, metrics.as_ref());
            }
        });
        Ok(QueryService { server, handle: Some(handle), port })
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for QueryService {
    fn drop(&mut self) {
        self.stop();
    }
}

fn json_header() -> Header {
    Header::from_bytes("Content-Type", "application/json").expect("static header")
}

fn reply(req: Request, status: u16, body: String, json: bool) {
    let mut resp = Response::from_string(body).with_status_code(status);
    if json {
        resp = resp.with_header(json_header());
    } else {
        resp = resp.with_header(Header::from_bytes("Content-Type", "text/csv").expect("static header"));
    }
    if let Err(e) = req.respond(resp) {
        log::warn!("query service: {e}");
    }
}

fn error_body(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn handle(mut req: Request, bridge: &HumanBridge, metrics: Option<&PathBuf>) {
    let path = req.url().split('?').next().unwrap_or("").to_string();
    match (req.method(), path.as_str()) {
        (HttpMethod::Get, "/queries/pending") => {
            let body = serde_json::to_string(&bridge.pending()).expect("payload serialises");
            reply(req, 200, body, true);
        }
        (HttpMethod::Post, "/labels") => {
            let mut text = String::new();
            if req.as_reader().read_to_string(&mut text).is_err() {
                return reply(req, 400, error_body("unreadable body"), true);
            }
            let parsed = serde_json::from_str::<LabelBody>(&text)
                .map_err(|e| e.to_string())
                .and_then(|b| Label::from_choice(&b.choice).map(|l| (b.query_id, l)).map_err(|e| e.to_string()));
            match parsed {
                Err(msg) => reply(req, 400, error_body(&msg), true),
                Ok((id, label)) => match bridge.submit(id, label) {
                    Ok(()) => reply(req, 200, serde_json::json!({ "status": "ok", "query_id": id }).to_string(), true),
                    Err(SubmitError::NotFound) => reply(req, 404, error_body("unknown or expired query"), true),
                    Err(SubmitError::Conflict) => reply(req, 409, error_body("query already labeled"), true),
                },
            }
        }
        (HttpMethod::Get, "/metrics") => match metrics.map(std::fs::read_to_string) {
            Some(Ok(text)) => reply(req, 200, text, false),
            _ => reply(req, 404, error_body("no metrics available"), true),
        },
        _ => reply(req, 404, error_body("no such endpoint"), true),
    }
}
