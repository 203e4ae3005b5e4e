use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use super::{CompletionRequest, CompletionResponse, Gateway, GatewayError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    /// Reply text stored in a file next to the script.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_file: Option<String>,
}

impl ReplayEntry {
    pub fn new(tag: &str, content: impl Into<String>) -> Self {
        Self {
            tag: tag.to_string(),
            content: Some(content.into()),
            content_file: None,
        }
    }
}

/// Ordered replies per scope. Calls within a scope must arrive in script
/// order; scopes are independent, so pairs may run concurrently.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayScript {
    pub scopes: BTreeMap<String, Vec<ReplayEntry>>,
}

impl ReplayScript {
    pub fn push(&mut self, scope: &str, tag: &str, content: impl Into<String>) {
        self.scopes
            .entry(scope.to_string())
            .or_default()
            .push(ReplayEntry::new(tag, content));
    }

    /// Loads a JSON script, inlining `content_file` entries relative to the
    /// script's directory.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let config = |e: String| GatewayError::Config(format!("{}: {e}", path.display()));
        let text = fs::read_to_string(path).map_err(|e| config(e.to_string()))?;
        let mut script: ReplayScript = serde_json::from_str(&text).map_err(|e| config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for entries in script.scopes.values_mut() {
            for entry in entries {
                if entry.content.is_none() {
                    let file = entry
                        .content_file
                        .take()
                        .ok_or_else(|| config(format!("entry `{}` has no content", entry.tag)))?;
                    let body = fs::read_to_string(base.join(&file))
                        .map_err(|e| config(format!("{file}: {e}")))?;
                    entry.content = Some(body);
                }
            }
        }
        Ok(script)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        crate::corpus::write_json(path, self)
    }
}

pub struct ReplayGateway {
    queues: Mutex<BTreeMap<String, VecDeque<ReplayEntry>>>,
}

impl ReplayGateway {
    pub fn new(script: ReplayScript) -> Self {
        let queues = script
            .scopes
            .into_iter()
            .map(|(scope, entries)| (scope, entries.into()))
            .collect();
        Self {
            queues: Mutex::new(queues),
        }
    }

    /// Replies not yet consumed, per scope.
    pub fn remaining(&self) -> BTreeMap<String, usize> {
        self.queues
            .lock()
            .unwrap()
            .iter()
            .map(|(scope, q)| (scope.clone(), q.len()))
            .collect()
    }
}

#[async_trait]
impl Gateway for ReplayGateway {
    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let mut queues = self.queues.lock().unwrap();
        let exhausted = || GatewayError::ReplayExhausted {
            scope: req.scope.clone(),
            tag: req.tag.clone(),
        };
        let queue = queues.get_mut(&req.scope).ok_or_else(exhausted)?;
        let next = queue.front().ok_or_else(exhausted)?;
        if next.tag != req.tag {
            return Err(GatewayError::ReplayDivergence {
                scope: req.scope.clone(),
                expected: next.tag.clone(),
                actual: req.tag.clone(),
            });
        }
        let entry = queue.pop_front().expect("front exists");
        Ok(CompletionResponse::text(entry.content.unwrap_or_default()))
    }
}

/// Forwards to `inner` and records every reply as a replay script.
pub struct RecordingGateway<G> {
    inner: G,
    script: Mutex<ReplayScript>,
}

impl<G> RecordingGateway<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            script: Mutex::new(ReplayScript::default()),
        }
    }

    pub fn script(&self) -> ReplayScript {
        self.script.lock().unwrap().clone()
    }
}

#[async_trait]
impl<G: Gateway> Gateway for RecordingGateway<G> {
    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let response = self.inner.complete(req).await?;
        self.script
            .lock()
            .unwrap()
            .push(&req.scope, &req.tag, response.content.clone());
        Ok(response)
    }
}
