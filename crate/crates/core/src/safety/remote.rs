//! JSON-over-HTTP client for an external classification and rewriting agent.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{rules_verdict, Backend, Evidence, LemmaList, RewriteRequest, Rewriter, ToxicityVerdict};
use crate::corpus::ToxicityLevel;
use crate::error::{Error, Result};

/// Environment variable naming the agent endpoint.
pub const AGENT_ENV: &str = "MOTION_UNLEARN_AGENT_URL";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Serialize)]
struct ClassifyRequest<'a> {
    caption: &'a str,
}

#[derive(Debug, Serialize)]
struct RewriteBody<'a> {
    caption: &'a str,
    level: u8,
    targets: &'a [String],
}

#[derive(Debug, Deserialize)]
struct AgentResponse {
    #[serde(default)]
    level: Option<u8>,
    #[serde(default)]
    evidence: Vec<String>,
    #[serde(default)]
    rewritten: Option<String>,
}

/// Remote agent; classification falls back to the rule engine on any
/// transport or protocol failure.
#[derive(Debug, Clone)]
pub struct RemoteAgent {
    endpoint: String,
    timeout: Duration,
    fallback: LemmaList,
}

impl RemoteAgent {
    pub fn new(endpoint: impl Into<String>, fallback: LemmaList) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: DEFAULT_TIMEOUT,
            fallback,
        }
    }

    /// Reads the endpoint from [`AGENT_ENV`], if set and non-empty.
    pub fn from_env(fallback: LemmaList) -> Option<Self> {
        std::env::var(AGENT_ENV)
            .ok()
            .filter(|v| !v.trim().is_empty())
            .map(|v| Self::new(v, fallback))
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn post<T: Serialize>(&self, body: &T) -> Result<AgentResponse> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let payload = serde_json::to_string(body)?;
        let mut resp = agent
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .send(payload)
            .map_err(|e| Error::Remote(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Remote(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::Remote(format!("malformed response: {e}")))
    }

    pub fn classify(&self, caption: &str) -> Result<ToxicityVerdict> {
        let fallback = |reason: String| -> Result<ToxicityVerdict> {
            log::warn!("remote classifier unavailable, using rules: {reason}");
            let mut v = rules_verdict(caption, &self.fallback)?;
            v.warning = Some(reason);
            Ok(v)
        };
        if crate::text::tokenize(caption).is_empty() {
            return Err(Error::EmptyCondition);
        }
        match self.post(&ClassifyRequest { caption }) {
            Ok(AgentResponse { level: Some(l), evidence, .. }) => match ToxicityLevel::from_u8(l) {
                Ok(level) => Ok(ToxicityVerdict {
                    level,
                    evidence: evidence
                        .into_iter()
                        .map(|term| Evidence { term, span: None, clause: None })
                        .collect(),
                    backend: Backend::Remote,
                    warning: None,
                }),
                Err(_) => fallback(format!("level {l} out of range")),
            },
            Ok(_) => fallback("response without level".into()),
            Err(e) => fallback(e.to_string()),
        }
    }
}

impl Rewriter for RemoteAgent {
    fn rewrite(&self, req: &RewriteRequest<'_>) -> Result<String> {
        let resp = self.post(&RewriteBody {
            caption: req.caption,
            level: req.level.as_u8(),
            targets: &req.targets,
        })?;
        resp.rewritten
            .ok_or_else(|| Error::Rewrite("response without rewritten caption".into()))
    }
}
