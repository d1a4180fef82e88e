use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use grader_core::provider::{
    Gateway, GatewayConfig, HttpProvider, HttpProviderConfig, MockFixture, MockProvider, PayloadLog, Provider,
};

use crate::error::AppError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderMode {
    Mock { fixtures: Option<PathBuf> },
    Http { endpoint: String, token: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub port: u16,
    /// Store directory; `None` keeps everything in memory.
    pub store: Option<PathBuf>,
    pub provider: ProviderMode,
    /// Optional file receiving canonical provider request/response lines.
    pub payload_log: Option<PathBuf>,
    pub parallelism: usize,
    pub snapshot_every: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            port: 8080,
            store: None,
            provider: ProviderMode::Mock { fixtures: None },
            payload_log: None,
            parallelism: 8,
            snapshot_every: 1000,
        }
    }
}

impl Config {
    /// Read `GRADER_*` variables through `get`, falling back to defaults.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Config, AppError> {
        let mut config = Config::default();
        if let Some(port) = get("GRADER_PORT") {
            config.port = port.parse().map_err(|_| AppError::bad(format!("GRADER_PORT: bad port {port:?}")))?;
        }
        config.store = get("GRADER_STORE").map(PathBuf::from);
        config.payload_log = get("GRADER_PAYLOAD_LOG").map(PathBuf::from);
        if let Some(n) = get("GRADER_PARALLELISM") {
            config.parallelism =
                n.parse().ok().filter(|n| *n > 0).ok_or_else(|| AppError::bad(format!("GRADER_PARALLELISM: {n:?}")))?;
        }
        config.provider = match get("GRADER_PROVIDER").as_deref().unwrap_or("mock") {
            "mock" => ProviderMode::Mock { fixtures: get("GRADER_FIXTURES").map(PathBuf::from) },
            "http" => ProviderMode::Http {
                endpoint: get("GRADER_PROVIDER_URL")
                    .ok_or_else(|| AppError::bad("GRADER_PROVIDER=http needs GRADER_PROVIDER_URL"))?,
                token: get("GRADER_PROVIDER_TOKEN"),
            },
            other => return Err(AppError::bad(format!("GRADER_PROVIDER: unknown mode {other:?}"))),
        };
        Ok(config)
    }

    pub fn from_env() -> Result<Config, AppError> {
        Config::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn build_gateway(&self) -> Result<Gateway, AppError> {
        let provider: Arc<dyn Provider> = match &self.provider {
            ProviderMode::Mock { fixtures } => {
                let fixture = match fixtures {
                    Some(path) => MockFixture::load(path).map_err(|e| AppError::bad(e.to_string()))?,
                    None => MockFixture::default(),
                };
                Arc::new(MockProvider::new(fixture))
            }
            ProviderMode::Http { endpoint, token } => Arc::new(
                HttpProvider::new(HttpProviderConfig {
                    endpoint: endpoint.clone(),
                    credential: token.clone(),
                    timeout: Duration::from_secs(60),
                })
                .map_err(AppError::from)?,
            ),
        };
        let gateway =
            Gateway::new(provider, GatewayConfig { parallelism: self.parallelism, ..GatewayConfig::default() });
        Ok(match &self.payload_log {
            Some(path) => {
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| AppError::bad(format!("payload log {}: {e}", path.display())))?;
                gateway.with_payload_log(PayloadLog::new(Box::new(file)))
            }
            None => gateway,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn lookup(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn defaults_and_overrides() {
        assert_eq!(Config::from_lookup(lookup(&[])).unwrap(), Config::default());
        let c = Config::from_lookup(lookup(&[
            ("GRADER_PORT", "9000"),
            ("GRADER_PROVIDER", "http"),
            ("GRADER_PROVIDER_URL", "http://llm"),
            ("GRADER_PROVIDER_TOKEN", "tok"),
        ]))
        .unwrap();
        assert_eq!(c.port, 9000);
        assert_eq!(c.provider, ProviderMode::Http { endpoint: "http://llm".into(), token: Some("tok".into()) });
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_lookup(lookup(&[("GRADER_PORT", "x")])).is_err());
        assert!(Config::from_lookup(lookup(&[("GRADER_PROVIDER", "http")])).is_err());
        assert!(Config::from_lookup(lookup(&[("GRADER_PROVIDER", "magic")])).is_err());
    }
}
