use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{prompt, Provider, ProviderError, ProviderRequest};

#[derive(Debug, Clone)]
pub struct HttpProviderConfig {
    /// Base URL; requests go to `<endpoint>/v1/<capability>`.
    pub endpoint: String,
    pub credential: Option<String>,
    pub timeout: Duration,
}

/// Provider reached over HTTP. The remote side receives
/// `{capability, prompt, payload, idempotency_key}` and answers with the
/// capability's structured JSON output.
pub struct HttpProvider {
    client: reqwest::Client,
    config: HttpProviderConfig,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self, ProviderError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ProviderError::Unavailable(format!("http client: {e}")))?;
        Ok(HttpProvider { client, config })
    }
}

#[async_trait]
impl Provider for HttpProvider {
    fn name(&self) -> &'static str {
        "http"
    }

    async fn call(&self, request: &ProviderRequest) -> Result<Value, ProviderError> {
        let url = format!("{}/v1/{}", self.config.endpoint.trim_end_matches('/'), request.capability.as_str());
        let body = json!({
            "capability": request.capability,
            "prompt": prompt::render(request),
            "payload": request.payload,
            "idempotency_key": request.idempotency_key,
        });
        let mut builder = self.client.post(&url).header("Idempotency-Key", &request.idempotency_key).json(&body);
        if let Some(token) = &self.config.credential {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().await.map_err(|e| ProviderError::Unavailable(format!("{url}: {e}")))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 || status.as_u16() == 408 {
            return Err(ProviderError::Unavailable(format!("{url}: status {status}")));
        }
        if !status.is_success() {
            return Err(ProviderError::MalformedOutput(format!("{url}: status {status}")));
        }
        response.json::<Value>().await.map_err(|e| ProviderError::MalformedOutput(format!("{url}: {e}")))
    }
}
