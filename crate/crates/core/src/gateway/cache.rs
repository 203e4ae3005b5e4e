use async_trait::async_trait;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{CompletionRequest, CompletionResponse, Gateway, GatewayError};

/// SHA-256 over the canonical JSON of the fields that determine a completion.
/// Tags and scopes are bookkeeping and do not enter the key.
pub fn cache_key(req: &CompletionRequest) -> String {
    let mut canonical = serde_json::json!({
        "model": req.model,
        "messages": req.messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    });
    if let Some(seed) = req.seed {
        canonical["seed"] = seed.into();
    }
    // serde_json maps are ordered by key, which makes the text canonical.
    let text = serde_json::to_string(&canonical).expect("request serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Serves repeated requests from `dir/<key>.json`, calling `inner` on a miss.
pub struct CachedGateway<G> {
    inner: G,
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<G> CachedGateway<G> {
    pub fn new(inner: G, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            inner,
            dir,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::SeqCst)
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }
}

fn read_entry(path: &Path) -> Option<CompletionResponse> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_entry(path: &Path, response: &CompletionResponse) -> Result<(), GatewayError> {
    let err = |e: std::io::Error| GatewayError::Cache(format!("{}: {e}", path.display()));
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let text = serde_json::to_string(response).map_err(|e| GatewayError::Cache(e.to_string()))?;
    fs::write(&tmp, text).map_err(err)?;
    fs::rename(&tmp, path).map_err(err)
}

#[async_trait]
impl<G: Gateway> Gateway for CachedGateway<G> {
    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let path = self.path_for(&cache_key(req));
        if let Some(hit) = read_entry(&path) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.complete(req).await?;
        write_entry(&path, &response)?;
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{tags, CallCounter, FnGateway};

    fn req(prompt: &str) -> CompletionRequest {
        CompletionRequest::new("p", tags::AUGMENTATION, "m", prompt, 0.7)
    }

    #[test]
    fn key_ignores_bookkeeping_fields() {
        let a = req("x");
        let mut b = a.clone();
        b.scope = "other".into();
        b.tag = tags::JUDGE.into();
        assert_eq!(cache_key(&a), cache_key(&b));
        b.temperature = 0.0;
        assert_ne!(cache_key(&a), cache_key(&b));
        let mut c = a.clone();
        c.seed = Some(1);
        assert_ne!(cache_key(&a), cache_key(&c));
        assert_eq!(cache_key(&a).len(), 64);
    }

    #[tokio::test]
    async fn second_call_is_served_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let counter = CallCounter::new(FnGateway(|r: &CompletionRequest| Ok(format!("<{}>", r.prompt()))));
        let gw = CachedGateway::new(&counter, dir.path()).unwrap();
        assert_eq!(gw.complete(&req("a")).await.unwrap().content, "<a>");
        assert_eq!(gw.complete(&req("a")).await.unwrap().content, "<a>");
        assert_eq!(gw.complete(&req("b")).await.unwrap().content, "<b>");
        assert_eq!(counter.total(), 2);
        assert_eq!((gw.hits(), gw.misses()), (1, 2));
        assert!(dir.path().join(format!("{}.json", cache_key(&req("a")))).exists());
    }

    #[tokio::test]
    async fn errors_are_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let gw = CachedGateway::new(
            FnGateway(|_: &CompletionRequest| Err(GatewayError::Timeout)),
            dir.path(),
        )
        .unwrap();
        assert!(gw.complete(&req("a")).await.is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
