use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::paging::BrickRequest;
use crate::volume::{BrickStore, StoreError, VolumeManifest};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FetchError {
    #[error("not found")]
    NotFound,
    #[error("not supported by server")]
    Unsupported,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("corrupt payload: {0}")]
    Corrupt(String),
}

impl FetchError {
    /// Worth another attempt.
    pub fn is_transient(&self) -> bool {
        matches!(self, FetchError::Transport(_))
    }
}

impl From<StoreError> for FetchError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound => FetchError::NotFound,
            StoreError::Unsupported => FetchError::Unsupported,
            StoreError::Io(s) => FetchError::Transport(s),
        }
    }
}

/// Engine-side access to a brick server.
pub trait Transport: Send + Sync {
    fn manifest(&self) -> Result<VolumeManifest, FetchError>;

    /// Compressed brick bytes.
    fn brick(&self, req: BrickRequest) -> Result<Vec<u8>, FetchError>;

    /// Min/max over the half-open voxel box `[lo, hi)` of one level.
    fn region_minmax(
        &self,
        channel: u32,
        level: u32,
        lo: [u32; 3],
        hi: [u32; 3],
    ) -> Result<(u8, u8), FetchError>;
}

/// Calls a [`BrickStore`] directly.
#[derive(Clone)]
pub struct InProcessTransport {
    store: Arc<dyn BrickStore>,
}

impl InProcessTransport {
    pub fn new(store: Arc<dyn BrickStore>) -> Self {
        Self { store }
    }
}

impl Transport for InProcessTransport {
    fn manifest(&self) -> Result<VolumeManifest, FetchError> {
        Ok(self.store.manifest().clone())
    }

    fn brick(&self, req: BrickRequest) -> Result<Vec<u8>, FetchError> {
        Ok(self.store.brick_bytes(req.channel, req.level, req.coord)?)
    }

    fn region_minmax(
        &self,
        channel: u32,
        level: u32,
        lo: [u32; 3],
        hi: [u32; 3],
    ) -> Result<(u8, u8), FetchError> {
        Ok(self.store.region_minmax(channel, level, lo, hi)?)
    }
}

/// HTTP client for the brick server.
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base_url: &str) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build();
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent: config.into(),
        }
    }

    fn get(&self, path: &str) -> Result<Vec<u8>, FetchError> {
        let url = format!("{}{}", self.base, path);
        let mut resp = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| FetchError::Transport(e.to_string()))?;
        match resp.status().as_u16() {
            200 => resp
                .body_mut()
                .with_config()
                .limit(64 << 20)
                .read_to_vec()
                .map_err(|e| FetchError::Transport(e.to_string())),
            404 => Err(FetchError::NotFound),
            501 => Err(FetchError::Unsupported),
            s => Err(FetchError::Transport(format!("GET {url}: status {s}"))),
        }
    }
}

impl Transport for HttpTransport {
    fn manifest(&self) -> Result<VolumeManifest, FetchError> {
        let body = self.get("/manifest")?;
        let text = String::from_utf8(body).map_err(|e| FetchError::Corrupt(e.to_string()))?;
        VolumeManifest::from_text(&text).map_err(|e| FetchError::Corrupt(e.to_string()))
    }

    fn brick(&self, req: BrickRequest) -> Result<Vec<u8>, FetchError> {
        let [x, y, z] = req.coord;
        self.get(&format!("/brick/{}/{}/{z}/{y}/{x}", req.channel, req.level))
    }

    fn region_minmax(
        &self,
        channel: u32,
        level: u32,
        lo: [u32; 3],
        hi: [u32; 3],
    ) -> Result<(u8, u8), FetchError> {
        let body = self.get(&format!(
            "/metadata?c={channel}&l={level}&box={},{},{},{},{},{}",
            lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]
        ))?;
        let v: serde_json::Value =
            serde_json::from_slice(&body).map_err(|e| FetchError::Corrupt(e.to_string()))?;
        let field = |k: &str| {
            v.get(k)
                .and_then(|x| x.as_u64())
                .filter(|&x| x <= 255)
                .map(|x| x as u8)
                .ok_or_else(|| FetchError::Corrupt(format!("metadata response lacks `{k}`")))
        };
        Ok((field("min")?, field("max")?))
    }
}

/// Retry transient failures with exponential backoff.
#[derive(Copy, Clone, Debug)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(20),
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T, FetchError>) -> Result<T, FetchError> {
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match f() {
                Err(e) if e.is_transient() && attempt < self.attempts => {
                    log::debug!("attempt {attempt} failed: {e}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                r => return r,
            }
        }
    }
}
