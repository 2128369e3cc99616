use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{GuardianError, Result};
use crate::graph_model::AgentId;

pub const DEFAULT_REMOTE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Serialize)]
struct AgentRequest<'a> {
    agent_id: usize,
    round: usize,
    prompt: &'a str,
    question: &'a str,
    context: &'a [String],
}

#[derive(Deserialize)]
struct AgentResponse {
    response: String,
}

/// Client for agents served over HTTP.
#[derive(Debug, Clone)]
pub struct RemoteAgentClient {
    url: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteAgentClient {
    pub fn new(url: impl Into<String>, token: Option<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GuardianError::Config(format!("remote agent client: {e}")))?;
        Ok(Self {
            url: url.into(),
            token,
            client,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn respond(&self, agent: AgentId, round: usize, prompt: &str, question: &str, context: &[String]) -> Result<String> {
        let fail = |reason: String| GuardianError::RemoteAgent { agent: agent.0, round, reason };
        let mut req = self.client.post(&self.url).json(&AgentRequest {
            agent_id: agent.0,
            round,
            prompt,
            question,
            context,
        });
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| fail(format!("{}: {e}", self.url)))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(fail(format!("{} returned {status}", self.url)));
        }
        let body: AgentResponse = resp.json().map_err(|e| fail(format!("bad response body: {e}")))?;
        Ok(body.response)
    }
}
