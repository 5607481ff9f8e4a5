use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;

use tiny_http::{Header, Method, Response, Server};

use crate::error::{Error, Result};
use crate::volume::{BrickStore, StoreError};

/// Plain response produced by the routing layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl Reply {
    fn new(status: u16, content_type: &'static str, body: impl Into<Vec<u8>>) -> Self {
        Self {
            status,
            content_type,
            body: body.into(),
        }
    }

    fn text(status: u16, msg: &str) -> Self {
        Self::new(status, "text/plain; charset=utf-8", msg.as_bytes())
    }
}

fn store_error(e: StoreError) -> Reply {
    match e {
        StoreError::NotFound => Reply::text(404, "not found"),
        StoreError::Unsupported => Reply::text(501, "metadata queries not supported"),
        StoreError::Io(s) => Reply::text(500, &s),
    }
}

fn parse_list<const N: usize>(s: &str) -> Option<[u32; N]> {
    let v: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse().ok())
        .collect::<Option<_>>()?;
    v.try_into().ok()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

/// Route one GET request. `target` is the raw request target (path plus
/// optional query).
pub fn route(store: &dyn BrickStore, static_dir: Option<&Path>, target: &str) -> Reply {
    let (path, query) = target.split_once('?').unwrap_or((target, ""));
    let parts: Vec<&str> = path.trim_start_matches('/').split('/').collect();
    match parts.as_slice() {
        ["manifest"] => Reply::new(200, "application/json", store.manifest().to_text()),
        ["brick", rest @ ..] => {
            if rest.len() != 5 {
                return Reply::text(400, "expected /brick/{c}/{l}/{z}/{y}/{x}");
            }
            let nums: Option<Vec<u32>> = rest.iter().map(|s| s.parse().ok()).collect();
            let Some(n) = nums else {
                return Reply::text(400, "brick path components must be integers");
            };
            match store.brick_bytes(n[0], n[1], [n[4], n[3], n[2]]) {
                Ok(b) => Reply::new(200, "application/octet-stream", b),
                Err(e) => store_error(e),
            }
        }
        ["metadata"] => {
            let mut c = None;
            let mut l = None;
            let mut bx = None;
            for kv in query.split('&').filter(|s| !s.is_empty()) {
                match kv.split_once('=') {
                    Some(("c", v)) => c = v.parse::<u32>().ok(),
                    Some(("l", v)) => l = v.parse::<u32>().ok(),
                    Some(("box", v)) => bx = parse_list::<6>(v),
                    _ => return Reply::text(400, "unknown query parameter"),
                }
            }
            let (Some(c), Some(l), Some(b)) = (c, l, bx) else {
                return Reply::text(400, "expected ?c=&l=&box=x0,y0,z0,x1,y1,z1");
            };
            match store.region_minmax(c, l, [b[0], b[1], b[2]], [b[3], b[4], b[5]]) {
                Ok((mn, mx)) => Reply::new(
                    200,
                    "application/json",
                    format!("{{\"min\":{mn},\"max\":{mx}}}"),
                ),
                Err(e) => store_error(e),
            }
        }
        ["viewer", rest @ ..] => {
            let Some(dir) = static_dir else {
                return Reply::text(404, "no static assets configured");
            };
            let rel: PathBuf = if rest.is_empty() || rest == [""] {
                "index.html".into()
            } else {
                rest.iter().collect()
            };
            if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
                return Reply::text(400, "bad path");
            }
            let full = dir.join(&rel);
            match std::fs::read(&full) {
                Ok(b) => Reply::new(200, content_type(&full), b),
                Err(_) => Reply::text(404, "not found"),
            }
        }
        _ => Reply::text(400, "unknown endpoint"),
    }
}

/// Multi-threaded HTTP/1.1 brick server.
pub struct BrickServer {
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

impl BrickServer {
    pub fn start(store: Arc<dyn BrickStore>, addr: &str, threads: usize) -> Result<Self> {
        Self::start_with_static(store, addr, threads, None)
    }

    pub fn start_with_static(
        store: Arc<dyn BrickStore>,
        addr: &str,
        threads: usize,
        static_dir: Option<PathBuf>,
    ) -> Result<Self> {
        let server = Arc::new(
            Server::http(addr).map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?,
        );
        let bound = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Config("server is not bound to an IP address".into()))?;
        let static_dir = Arc::new(static_dir);
        let workers = (0..threads.max(1))
            .map(|_| {
                let server = server.clone();
                let store = store.clone();
                let static_dir = static_dir.clone();
                std::thread::spawn(move || {
                    for req in server.incoming_requests() {
                        let reply = if *req.method() == Method::Get {
                            route(store.as_ref(), static_dir.as_deref(), req.url())
                        } else {
                            Reply::text(405, "only GET is supported")
                        };
                        let header =
                            Header::from_bytes("Content-Type", reply.content_type).unwrap();
                        let resp = Response::from_data(reply.body)
                            .with_status_code(reply.status)
                            .with_header(header);
                        if let Err(e) = req.respond(resp) {
                            log::debug!("respond failed: {e}");
                        }
                    }
                })
            })
            .collect();
        Ok(Self {
            server,
            workers,
            addr: bound,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the server is shut down from another thread.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for BrickServer {
    fn drop(&mut self) {
        self.stop();
    }
}
