use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use super::{Capabilities, ChatProvider, ChatRequest, ChatResponse};
use crate::error::GatewayError;

/// One recorded call: the full request and its response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub digest: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

/// A directory holding one `<digest>.json` file per recorded request.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureStore { dir: dir.into() }
    }

    /// Like [`new`](Self::new) but creates the directory.
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let store = Self::new(dir);
        std::fs::create_dir_all(&store.dir)?;
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn record(&self, request: &ChatRequest, response: &ChatResponse) -> Result<(), GatewayError> {
        std::fs::create_dir_all(&self.dir)?;
        let fixture = Fixture { digest: request.digest(), request: request.clone(), response: response.clone() };
        let mut body = serde_json::to_string_pretty(&fixture).map_err(|e| GatewayError::Malformed(e.to_string()))?;
        body.push('\n');
        let path = self.path_for(&fixture.digest);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, body)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(&self, digest: &str) -> Result<Fixture, GatewayError> {
        let path = self.path_for(digest);
        let raw = match std::fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(GatewayError::MissingFixture { digest: digest.to_string() })
            }
            Err(e) => return Err(e.into()),
        };
        serde_json::from_str(&raw).map_err(|e| GatewayError::Malformed(format!("{}: {e}", path.display())))
    }

    /// The stored response for `request`, verified against the full stored request.
    pub fn replay(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let digest = request.digest();
        let fixture = self.load(&digest)?;
        if fixture.digest != digest || !fixture.request.same_identity(request) {
            return Err(GatewayError::DigestCollision { digest });
        }
        Ok(fixture.response)
    }

    /// Digests of every fixture in the store, sorted.
    pub fn digests(&self) -> Result<Vec<String>, GatewayError> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().to_string();
            if let Some(d) = name.strip_suffix(".json") {
                out.push(d.to_string());
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Serves every request from a [`FixtureStore`]; never touches the network.
pub struct ReplayProvider {
    store: FixtureStore,
}

impl ReplayProvider {
    pub fn new(store: FixtureStore) -> Self {
        ReplayProvider { store }
    }
}

impl ChatProvider for ReplayProvider {
    fn id(&self) -> &str {
        "replay"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::ALL
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.store.replay(request)
    }
}
