use std::collections::BTreeMap;
use std::sync::Arc;

use promptlens::embedding::{Embedder, HashedBagEmbedder, RemoteEmbedder};
use promptlens::eval::synthetic::keyword_backend;
use promptlens::gateway::{Backend, ModelCapabilities, OpenAiBackend};
use promptlens::reference_lm::{RefModel, RefModelConfig, ReferenceBackend};
use promptlens::Result;
use serde::Serialize;

use crate::config::ServerConfig;

pub const REFERENCE_MODEL: &str = "ref";
pub const KEYWORD_MODEL: &str = "ref-keyword";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Reference,
    Openai,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelInfo {
    pub name: String,
    pub kind: ModelKind,
    pub capabilities: ModelCapabilities,
}

/// Named backends plus the embedder used by `perb_sim`.
pub struct Registry {
    backends: BTreeMap<String, (ModelKind, Arc<dyn Backend>)>,
    embedder: Arc<dyn Embedder>,
}

impl Registry {
    /// The two reference models and the built-in embedder only.
    pub fn reference(seed: u64) -> Result<Self> {
        let mut backends: BTreeMap<String, (ModelKind, Arc<dyn Backend>)> = BTreeMap::new();
        let plain = RefModel::new(RefModelConfig {
            seed,
            ..Default::default()
        })?;
        backends.insert(
            REFERENCE_MODEL.into(),
            (
                ModelKind::Reference,
                Arc::new(ReferenceBackend::new(REFERENCE_MODEL, plain)),
            ),
        );
        backends.insert(
            KEYWORD_MODEL.into(),
            (
                ModelKind::Reference,
                Arc::new(keyword_backend(KEYWORD_MODEL, seed)?),
            ),
        );
        Ok(Self {
            backends,
            embedder: Arc::new(HashedBagEmbedder::default()),
        })
    }

    pub fn from_config(cfg: &ServerConfig) -> Result<Self> {
        let mut reg = Self::reference(cfg.reference_seed)?;
        for entry in &cfg.models {
            let mut oc = entry.openai.clone();
            if !entry.logprobs {
                oc.top_logprobs = None;
            }
            let name = oc.name.clone();
            reg.backends
                .insert(name, (ModelKind::Openai, Arc::new(OpenAiBackend::new(oc)?)));
        }
        if let Some(e) = &cfg.embedding {
            reg.embedder = Arc::new(RemoteEmbedder::new(e.remote.clone())?);
        }
        Ok(reg)
    }

    pub fn insert(&mut self, name: &str, kind: ModelKind, backend: Arc<dyn Backend>) {
        self.backends.insert(name.to_string(), (kind, backend));
    }

    pub fn backend(&self, name: &str) -> Option<Arc<dyn Backend>> {
        self.backends.get(name).map(|(_, b)| b.clone())
    }

    pub fn embedder(&self) -> Arc<dyn Embedder> {
        self.embedder.clone()
    }

    pub fn models(&self) -> Vec<ModelInfo> {
        self.backends
            .iter()
            .map(|(name, (kind, b))| ModelInfo {
                name: name.clone(),
                kind: *kind,
                capabilities: b.capabilities(),
            })
            .collect()
    }
}
