//! Adapters for services reached over HTTP: the model server and an
//! outbound chat webhook.

use std::io::{BufRead, BufReader};
use std::time::Duration;

use ops_core::react::{ModelClient, ModelError, TextStream};
use ops_core::relay::{ExpertQuery, Replier, Responder};
use serde::Deserialize;
use serde_json::json;

/// Client for `POST {endpoint}/v1/generate`, which answers with one JSON
/// object per line, each carrying a `delta` of generated text.
pub struct HttpModelClient {
    endpoint: String,
    name: String,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct Chunk {
    #[serde(default)]
    delta: String,
    #[serde(default)]
    error: Option<String>,
}

impl HttpModelClient {
    pub fn new(endpoint: &str, name: &str) -> Result<Self, ModelError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(None::<Duration>)
            .build()
            .map_err(|e| ModelError::Unavailable(e.to_string()))?;
        Ok(HttpModelClient {
            endpoint: endpoint.trim_end_matches('/').to_owned(),
            name: name.to_owned(),
            client,
        })
    }
}

impl ModelClient for HttpModelClient {
    fn stream(&self, prompt: &str, stop: &[String]) -> Result<TextStream, ModelError> {
        let url = format!("{}/v1/generate", self.endpoint);
        let body = json!({ "model": self.name, "prompt": prompt, "stop": stop, "stream": true });
        let resp = self
            .client
            .post(&url)
            .json(&body)
            .send()
            .map_err(|e| ModelError::Unavailable(format!("{url}: {e}")))?;
        if !resp.status().is_success() {
            return Err(ModelError::Unavailable(format!(
                "{url}: HTTP {}",
                resp.status()
            )));
        }
        let lines = BufReader::new(resp).lines();
        Ok(Box::new(lines.filter_map(|line| match line {
            Err(e) => Some(Err(ModelError::Unavailable(e.to_string()))),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(match serde_json::from_str::<Chunk>(&l) {
                Ok(Chunk { error: Some(e), .. }) => Err(ModelError::Unavailable(e)),
                Ok(c) => Ok(c.delta),
                Err(e) => Err(ModelError::Unavailable(format!(
                    "bad chunk from model server: {e}"
                ))),
            }),
        })))
    }
}

/// Forwards questions to a chat system as `POST {channel, text, query_id}`.
/// Answers come back through the gateway's reply endpoint.
pub struct WebhookResponder {
    url: String,
    client: reqwest::blocking::Client,
}

impl WebhookResponder {
    pub fn new(url: &str) -> Self {
        WebhookResponder {
            url: url.to_owned(),
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Responder for WebhookResponder {
    fn on_question(&self, query: &ExpertQuery, _replier: Replier) {
        let body =
            json!({ "channel": query.channel, "text": query.question, "query_id": query.id });
        match self.client.post(&self.url).json(&body).send() {
            Ok(r) if r.status().is_success() => {}
            Ok(r) => {
                tracing::warn!(url = %self.url, status = %r.status(), "webhook refused question")
            }
            Err(e) => tracing::warn!(url = %self.url, "webhook unreachable: {e}"),
        }
    }
}
