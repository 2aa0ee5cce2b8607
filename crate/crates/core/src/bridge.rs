//! HTTP client for an external language-model service.
//!
//! The service speaks UTF-8 JSON over HTTP/1.1 under a `/v1` prefix. Items
//! travel as catalog keys; the service owns the item tokens. Failures come
//! back as a non-2xx status with a `{category, message}` body.
//!
//! ```text
//! GET  /healthz                -> ok
//! GET  /v1/meta                -> {"model_name":"tiny","hidden_dim":64,"max_sequence_tokens":512,"adapter_loaded":true}
//! POST /v1/state               {"history":["i0003","i0007"],"template_id":"default"}
//!                              -> {"state":[0.25,-1.5,...]}
//! POST /v1/reward              {"history":["i0003"],"action":"i0009","template_id":"default"}
//!                              -> {"raw":0.0,"value":0.5}
//! POST /v1/augment             {"history":["i0003"],"candidates":["i0001",...5 keys],"template_id":"default"}
//!                              -> {"selected_index":4}
//! POST /v1/tokenize_item       {"text":"track is titled ...","iters":300,"lr":0.005,"seed":7}
//!                              -> {"embedding":[...]}
//! ```

use std::collections::HashMap;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::BridgeConfig;
use crate::data::{ItemId, RewardValue, AUGMENT_CANDIDATES};
use crate::env::{Candidates, Capabilities, Environment};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeMeta {
    pub model_name: String,
    pub hidden_dim: usize,
    pub max_sequence_tokens: usize,
    pub adapter_loaded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateRequest {
    pub history: Vec<String>,
    pub template_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateResponse {
    pub state: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRequest {
    pub history: Vec<String>,
    pub action: String,
    pub template_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardResponse {
    pub raw: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRequest {
    pub history: Vec<String>,
    pub candidates: Vec<String>,
    pub template_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentResponse {
    pub selected_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizeRequest {
    pub text: String,
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizeResponse {
    pub embedding: Vec<f64>,
}

/// Error body sent with every non-2xx status.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub category: String,
    pub message: String,
}

/// Thin blocking client, one method per endpoint.
pub struct BridgeClient {
    base: String,
    agent: ureq::Agent,
}

impl BridgeClient {
    pub fn new(url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        BridgeClient {
            base: url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn finish<T: DeserializeOwned>(
        &self,
        resp: std::result::Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T> {
        let mut resp = resp.map_err(|e| Error::Bridge {
            status: 0,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Bridge {
                status,
                message: e.to_string(),
            })?;
        if !(200..300).contains(&status) {
            let message = match serde_json::from_str::<WireError>(&text) {
                Ok(w) => format!("{}: {}", w.category, w.message),
                Err(_) => text.trim().to_string(),
            };
            return Err(Error::Bridge { status, message });
        }
        serde_json::from_str(&text).map_err(|e| Error::Bridge {
            status,
            message: format!("malformed response: {e}"),
        })
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.finish(self.agent.get(format!("{}{path}", self.base)).call())
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        self.finish(
            self.agent
                .post(format!("{}{path}", self.base))
                .send_json(body),
        )
    }

    pub fn healthy(&self) -> bool {
        self.agent
            .get(format!("{}/healthz", self.base))
            .call()
            .is_ok_and(|r| r.status().as_u16() == 200)
    }

    pub fn meta(&self) -> Result<BridgeMeta> {
        self.get("/v1/meta")
    }

    pub fn state(&self, req: &StateRequest) -> Result<StateResponse> {
        self.post("/v1/state", req)
    }

    pub fn reward(&self, req: &RewardRequest) -> Result<RewardResponse> {
        self.post("/v1/reward", req)
    }

    pub fn augment(&self, req: &AugmentRequest) -> Result<AugmentResponse> {
        if req.candidates.len() != AUGMENT_CANDIDATES {
            return Err(Error::invalid(format!(
                "augmentation needs {AUGMENT_CANDIDATES} candidates, got {}",
                req.candidates.len()
            )));
        }
        self.post("/v1/augment", req)
    }

    pub fn tokenize_item(&self, req: &TokenizeRequest) -> Result<TokenizeResponse> {
        if req.text.trim().is_empty() {
            return Err(Error::invalid("empty item text"));
        }
        self.post("/v1/tokenize_item", req)
    }
}

/// An [`Environment`] served by a remote model.
pub struct BridgeEnv {
    pub client: BridgeClient,
    pub meta: BridgeMeta,
    template_id: String,
    item_keys: Vec<String>,
}

impl BridgeEnv {
    /// Connects and reads the model metadata.
    pub fn connect(cfg: &BridgeConfig, item_keys: &[String]) -> Result<Self> {
        let client = BridgeClient::new(&cfg.url, Duration::from_millis(cfg.timeout_ms));
        let meta = client.meta()?;
        if meta.hidden_dim == 0 {
            return Err(Error::Bridge {
                status: 200,
                message: "service reports hidden_dim 0".into(),
            });
        }
        Ok(BridgeEnv {
            client,
            meta,
            template_id: cfg.template_id.clone(),
            item_keys: item_keys.to_vec(),
        })
    }

    fn keys(&self, items: &[ItemId]) -> Result<Vec<String>> {
        items
            .iter()
            .map(|i| {
                self.item_keys
                    .get(i.index())
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("item {i} outside the catalog")))
            })
            .collect()
    }

    /// Reverse lookup used by tests and tools.
    pub fn key_index(&self) -> HashMap<&str, ItemId> {
        self.item_keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.as_str(), ItemId(i as u32)))
            .collect()
    }
}

impl Environment for BridgeEnv {
    fn state_dim(&self) -> usize {
        self.meta.hidden_dim
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            state: true,
            reward: self.meta.adapter_loaded,
            augment: true,
        }
    }

    fn state_of(&self, history: &[ItemId]) -> Result<Vec<f64>> {
        let r = self.client.state(&StateRequest {
            history: self.keys(history)?,
            template_id: self.template_id.clone(),
        })?;
        if r.state.len() != self.meta.hidden_dim {
            return Err(Error::dim(format!(
                "service returned a state of width {}, expected {}",
                r.state.len(),
                self.meta.hidden_dim
            )));
        }
        Ok(r.state)
    }

    fn reward_of(&self, history: &[ItemId], action: ItemId) -> Result<RewardValue> {
        let r = self.client.reward(&RewardRequest {
            history: self.keys(history)?,
            action: self.keys(&[action])?.remove(0),
            template_id: self.template_id.clone(),
        })?;
        Ok(RewardValue::from_raw(r.raw))
    }

    fn select(&self, history: &[ItemId], list: &Candidates) -> Result<usize> {
        let r = self.client.augment(&AugmentRequest {
            history: self.keys(history)?,
            candidates: self.keys(list)?,
            template_id: self.template_id.clone(),
        })?;
        if r.selected_index >= AUGMENT_CANDIDATES {
            return Err(Error::Bridge {
                status: 200,
                message: format!("selected_index {} out of range", r.selected_index),
            });
        }
        Ok(r.selected_index)
    }
}
