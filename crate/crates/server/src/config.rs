use std::path::Path;

use promptlens::embedding::RemoteEmbedderConfig;
use promptlens::gateway::OpenAiConfig;
use serde::{Deserialize, Serialize};

pub const ENV_BIND: &str = "PROMPTLENS_BIND";
pub const ENV_API_KEY: &str = "PROMPTLENS_API_KEY";
pub const ENV_TIMEOUT: &str = "PROMPTLENS_TIMEOUT_SECS";
pub const DEFAULT_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub timeout_secs: u64,
    /// Upper bound on per-request explainer parallelism.
    pub max_parallelism: usize,
    /// Explanation jobs allowed to run at once across all requests.
    pub max_concurrent_jobs: usize,
    pub cors_origins: Vec<String>,
    /// Optional static key; when set, every route except health requires it.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub reference_seed: u64,
    pub models: Vec<ModelEntry>,
    pub embedding: Option<EmbeddingEntry>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            timeout_secs: 120,
            max_parallelism: 8,
            max_concurrent_jobs: 4,
            cors_origins: vec![],
            api_key: None,
            reference_seed: 0,
            models: vec![],
            embedding: None,
        }
    }
}

/// A remote chat-completions model. The bearer token is read from the
/// environment variable named by `api_key_env`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEntry {
    #[serde(flatten)]
    pub openai: OpenAiConfig,
    pub api_key_env: Option<String>,
    /// `false` for endpoints that return text only.
    #[serde(default = "yes")]
    pub logprobs: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingEntry {
    #[serde(flatten)]
    pub remote: RemoteEmbedderConfig,
    pub api_key_env: Option<String>,
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Applies environment overrides and resolves API keys.
    pub fn with_env(mut self, get: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        if let Some(bind) = get(ENV_BIND) {
            self.bind = bind;
        }
        if let Some(key) = get(ENV_API_KEY) {
            self.api_key = Some(key);
        }
        if let Some(t) = get(ENV_TIMEOUT) {
            self.timeout_secs = t.parse().map_err(|_| {
                format!("{ENV_TIMEOUT} must be a whole number of seconds, got {t:?}")
            })?;
        }
        for m in &mut self.models {
            let var = m.api_key_env.as_deref().unwrap_or(DEFAULT_KEY_ENV);
            if m.openai.api_key.is_none() {
                m.openai.api_key = get(var);
            }
        }
        if let Some(e) = &mut self.embedding {
            let var = e.api_key_env.as_deref().unwrap_or(DEFAULT_KEY_ENV);
            if e.remote.api_key.is_none() {
                e.remote.api_key = get(var);
            }
        }
        Ok(self)
    }

    pub fn from_process_env(self) -> Result<Self, String> {
        self.with_env(|k| std::env::var(k).ok())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_models_and_env() {
        let cfg = ServerConfig::from_toml(
            r#"
            bind = "0.0.0.0:9000"
            cors_origins = ["http://localhost:5173"]

            [[models]]
            name = "gpt"
            base_url = "https://api.example.com"
            model = "gpt-3.5-turbo"
            api_key_env = "GPT_KEY"

            [embedding]
            base_url = "https://api.example.com"
            model = "all-minilm"
            "#,
        )
        .unwrap()
        .with_env(|k| match k {
            "GPT_KEY" => Some("sk-1".into()),
            ENV_BIND => Some("127.0.0.1:1".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.bind, "127.0.0.1:1");
        assert_eq!(cfg.timeout_secs, 120);
        assert_eq!(cfg.models[0].openai.api_key.as_deref(), Some("sk-1"));
        assert_eq!(cfg.models[0].openai.top_logprobs, Some(20));
        assert!(cfg.embedding.unwrap().remote.api_key.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ServerConfig::from_toml("bnid = \"x\"").is_err());
    }
}
