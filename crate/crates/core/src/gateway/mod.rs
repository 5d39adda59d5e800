//! Provider-agnostic model access. Binds the evolution, execution, and
//! embedding roles to concrete providers and layers caching, bounded
//! retries, rate limiting, and structured-output repair on top. Every call
//! is recorded in an exchange log for cost accounting and audits.

mod limiter;
mod parse;
mod provider;

pub use limiter::Limiter;
pub use parse::{try_parse_prediction, ParsedPrediction, PredictionEntry};
pub use provider::{
    payload_hash, CallbackProvider, ChatProvider, ChatRequest, EmbedProvider, HashEmbedder,
    HttpProvider, ProviderError, ScriptedProvider, ScriptedRule, DEFAULT_HASH_DIM,
};

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The three model roles. Evolution and execution may (and usually should)
/// bind to different providers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Evolution,
    Execution,
    Embedding,
}

impl std::fmt::Display for ModelRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelRole::Evolution => write!(f, "evolution"),
            ModelRole::Execution => write!(f, "execution"),
            ModelRole::Embedding => write!(f, "embedding"),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no provider configured for role {0}")]
    ConfigMissing(ModelRole),
    #[error("provider for role {role} unavailable after {attempts} attempts: {message}")]
    ProviderUnavailable {
        role: ModelRole,
        attempts: u32,
        message: String,
    },
    #[error("embedding dimension drift: expected {expected}, got {got}")]
    DimensionDrift { expected: usize, got: usize },
    #[error("embed called with empty input")]
    EmptyEmbedInput,
    #[error("provider config: {0}")]
    Config(String),
}

/// One recorded call, cache hits included.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatExchange {
    pub role: ModelRole,
    /// What the call was for: "router", "detector:<category>", "mutation",
    /// "structuring", "flat", plus ":repair" suffixes.
    pub purpose: String,
    pub instruction: String,
    pub payload: String,
    pub response: Option<String>,
    pub error: Option<String>,
    pub cache_hit: bool,
    pub input_chars: usize,
    pub output_chars: usize,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: 200,
        }
    }
}

struct RoleBinding {
    provider: Arc<dyn ChatProvider>,
    temperature: f64,
    limiter: Limiter,
    invocations: AtomicUsize,
}

struct EmbedBinding {
    provider: Arc<dyn EmbedProvider>,
    limiter: Limiter,
    invocations: AtomicUsize,
}

/// The gateway itself. Safe to share across worker threads; the cache and
/// exchange log are the only synchronized state.
pub struct Gateway {
    chat_roles: HashMap<ModelRole, RoleBinding>,
    embedder: Option<EmbedBinding>,
    cache_enabled: bool,
    cache: Mutex<HashMap<String, String>>,
    exchanges: Mutex<Vec<ChatExchange>>,
    retry: RetryPolicy,
}

pub struct GatewayBuilder {
    gateway: Gateway,
}

impl GatewayBuilder {
    pub fn chat_role(
        mut self,
        role: ModelRole,
        provider: Arc<dyn ChatProvider>,
        temperature: f64,
        limiter: Limiter,
    ) -> Self {
        self.gateway.chat_roles.insert(
            role,
            RoleBinding {
                provider,
                temperature,
                limiter,
                invocations: AtomicUsize::new(0),
            },
        );
        self
    }

    pub fn embedder(mut self, provider: Arc<dyn EmbedProvider>, limiter: Limiter) -> Self {
        self.gateway.embedder = Some(EmbedBinding {
            provider,
            limiter,
            invocations: AtomicUsize::new(0),
        });
        self
    }

    pub fn cache(mut self, enabled: bool) -> Self {
        self.gateway.cache_enabled = enabled;
        self
    }

    pub fn retry(mut self, policy: RetryPolicy) -> Self {
        self.gateway.retry = policy;
        self
    }

    pub fn build(self) -> Gateway {
        self.gateway
    }
}

impl Gateway {
    pub fn builder() -> GatewayBuilder {
        GatewayBuilder {
            gateway: Gateway {
                chat_roles: HashMap::new(),
                embedder: None,
                cache_enabled: true,
                cache: Mutex::new(HashMap::new()),
                exchanges: Mutex::new(Vec::new()),
                retry: RetryPolicy::default(),
            },
        }
    }

    /// Sends one chat call. Identical (provider, role, instruction, payload)
    /// tuples hit the cache when caching is enabled; transient transport
    /// failures are retried with exponential backoff.
    pub fn chat(
        &self,
        role: ModelRole,
        instruction: &str,
        payload: &str,
        purpose: &str,
    ) -> Result<String, GatewayError> {
        let binding = self
            .chat_roles
            .get(&role)
            .ok_or(GatewayError::ConfigMissing(role))?;
        let started = Instant::now();
        let key = cache_key(binding.provider.id(), role, instruction, payload);

        if self.cache_enabled {
            if let Some(hit) = self.cache.lock().unwrap().get(&key).cloned() {
                self.record(role, purpose, instruction, payload, Ok(&hit), true, started);
                return Ok(hit);
            }
        }

        let request = ChatRequest {
            role,
            instruction,
            payload,
            temperature: binding.temperature,
        };
        let mut last_message = String::new();
        for attempt in 1..=self.retry.max_attempts {
            let _permit = binding.limiter.acquire();
            binding.invocations.fetch_add(1, Ordering::Relaxed);
            match binding.provider.chat(&request) {
                Ok(response) => {
                    if self.cache_enabled {
                        self.cache.lock().unwrap().insert(key, response.clone());
                    }
                    self.record(
                        role,
                        purpose,
                        instruction,
                        payload,
                        Ok(&response),
                        false,
                        started,
                    );
                    return Ok(response);
                }
                Err(ProviderError::Transport(message)) => {
                    log::warn!("{role} attempt {attempt} transport failure: {message}");
                    last_message = message;
                    if attempt < self.retry.max_attempts {
                        let backoff = self.retry.backoff_ms << (attempt - 1);
                        std::thread::sleep(std::time::Duration::from_millis(backoff));
                    }
                }
                Err(ProviderError::Fatal(message)) => {
                    self.record(
                        role,
                        purpose,
                        instruction,
                        payload,
                        Err(&message),
                        false,
                        started,
                    );
                    return Err(GatewayError::ProviderUnavailable {
                        role,
                        attempts: attempt,
                        message,
                    });
                }
            }
        }
        self.record(
            role,
            purpose,
            instruction,
            payload,
            Err(&last_message),
            false,
            started,
        );
        Err(GatewayError::ProviderUnavailable {
            role,
            attempts: self.retry.max_attempts,
            message: last_message,
        })
    }

    /// Chat plus structured-output parsing with the one-shot repair policy:
    /// an unparseable reply triggers a single re-ask, after which the call
    /// abstains (empty prediction) rather than erroring.
    pub fn chat_structured(
        &self,
        role: ModelRole,
        instruction: &str,
        payload: &str,
        purpose: &str,
        allowed_labels: &HashSet<String>,
    ) -> Result<(ParsedPrediction, String), GatewayError> {
        let response = self.chat(role, instruction, payload, purpose)?;
        if let Some(parsed) = try_parse_prediction(&response, allowed_labels) {
            return Ok((parsed, response));
        }
        log::warn!("{purpose}: unparseable reply, issuing one repair re-ask");
        let repair_instruction = format!(
            "{instruction}\n\nYour previous reply could not be parsed. \
             Reply with valid structured output only: a single JSON object \
             with a \"predictions\" array."
        );
        let repair_purpose = format!("{purpose}:repair");
        let response = self.chat(role, &repair_instruction, payload, &repair_purpose)?;
        match try_parse_prediction(&response, allowed_labels) {
            Some(mut parsed) => {
                parsed.repaired = true;
                Ok((parsed, response))
            }
            None => Ok((ParsedPrediction::abstain(), response)),
        }
    }

    /// Embeds a batch of texts: one vector per text, input order, uniform
    /// dimension.
    pub fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyEmbedInput);
        }
        let binding = self
            .embedder
            .as_ref()
            .ok_or(GatewayError::ConfigMissing(ModelRole::Embedding))?;
        let mut last_message = String::new();
        for attempt in 1..=self.retry.max_attempts {
            let _permit = binding.limiter.acquire();
            binding.invocations.fetch_add(1, Ordering::Relaxed);
            match binding.provider.embed(texts) {
                Ok(vectors) => {
                    let expected = vectors.first().map(Vec::len).unwrap_or(0);
                    for v in &vectors {
                        if v.len() != expected {
                            return Err(GatewayError::DimensionDrift {
                                expected,
                                got: v.len(),
                            });
                        }
                    }
                    return Ok(vectors);
                }
                Err(ProviderError::Transport(message)) => {
                    log::warn!("embedding attempt {attempt} transport failure: {message}");
                    last_message = message;
                    if attempt < self.retry.max_attempts {
                        let backoff = self.retry.backoff_ms << (attempt - 1);
                        std::thread::sleep(std::time::Duration::from_millis(backoff));
                    }
                }
                Err(ProviderError::Fatal(message)) => {
                    return Err(GatewayError::ProviderUnavailable {
                        role: ModelRole::Embedding,
                        attempts: attempt,
                        message,
                    });
                }
            }
        }
        Err(GatewayError::ProviderUnavailable {
            role: ModelRole::Embedding,
            attempts: self.retry.max_attempts,
            message: last_message,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        role: ModelRole,
        purpose: &str,
        instruction: &str,
        payload: &str,
        outcome: Result<&str, &str>,
        cache_hit: bool,
        started: Instant,
    ) {
        let exchange = ChatExchange {
            role,
            purpose: purpose.to_string(),
            instruction: instruction.to_string(),
            payload: payload.to_string(),
            response: outcome.ok().map(str::to_string),
            error: outcome.err().map(str::to_string),
            cache_hit,
            input_chars: instruction.len() + payload.len(),
            output_chars: outcome.map(str::len).unwrap_or(0),
            latency_ms: started.elapsed().as_millis() as u64,
        };
        self.exchanges.lock().unwrap().push(exchange);
    }

    /// Snapshot of the exchange log.
    pub fn exchanges(&self) -> Vec<ChatExchange> {
        self.exchanges.lock().unwrap().clone()
    }

    /// Logical calls (cache hits included) whose purpose matches exactly.
    pub fn calls_with_purpose(&self, purpose: &str) -> usize {
        self.exchanges
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.purpose == purpose)
            .count()
    }

    /// Logical calls whose purpose starts with the given prefix.
    pub fn calls_with_purpose_prefix(&self, prefix: &str) -> usize {
        self.exchanges
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.purpose.starts_with(prefix))
            .count()
    }

    /// Physical provider invocations (cache hits excluded) for a role.
    pub fn provider_invocations(&self, role: ModelRole) -> usize {
        match role {
            ModelRole::Embedding => self
                .embedder
                .as_ref()
                .map(|b| b.invocations.load(Ordering::Relaxed))
                .unwrap_or(0),
            _ => self
                .chat_roles
                .get(&role)
                .map(|b| b.invocations.load(Ordering::Relaxed))
                .unwrap_or(0),
        }
    }

    pub fn clear_exchanges(&self) {
        self.exchanges.lock().unwrap().clear();
    }
}

fn cache_key(provider_id: &str, role: ModelRole, instruction: &str, payload: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for part in [provider_id, &role.to_string(), instruction, payload] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|byte| format!("{byte:02x}"))
        .collect()
}

// ---------------------------------------------------------------------------
// Config-document construction
// ---------------------------------------------------------------------------

/// One role's entry in the providers config document. API keys come only
/// from the environment variable named in `key_env`.
#[derive(Debug, Clone, Deserialize)]
pub struct ProviderConfig {
    pub provider: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub key_env: Option<String>,
    #[serde(default)]
    pub fixtures_dir: Option<String>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub max_inflight: u32,
    #[serde(default)]
    pub requests_per_minute: u32,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GatewayConfig {
    pub execution: ProviderConfig,
    #[serde(default)]
    pub evolution: Option<ProviderConfig>,
    pub embedding: ProviderConfig,
    #[serde(default = "default_true")]
    pub cache: bool,
    #[serde(default)]
    pub retry: Option<RetryPolicy>,
}

fn default_true() -> bool {
    true
}

impl GatewayConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, GatewayError> {
        toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

fn chat_provider_from(
    config: &ProviderConfig,
    base_dir: &Path,
) -> Result<Arc<dyn ChatProvider>, GatewayError> {
    match config.provider.as_str() {
        "scripted" => {
            let dir = config.fixtures_dir.as_deref().ok_or_else(|| {
                GatewayError::Config("scripted provider requires fixtures_dir".into())
            })?;
            let provider = ScriptedProvider::open(base_dir.join(dir))
                .map_err(|e| GatewayError::Config(e.to_string()))?;
            Ok(Arc::new(provider))
        }
        "openai" => {
            let endpoint = config
                .endpoint
                .as_deref()
                .ok_or_else(|| GatewayError::Config("openai provider requires endpoint".into()))?;
            let model = config
                .model
                .as_deref()
                .ok_or_else(|| GatewayError::Config("openai provider requires model".into()))?;
            let key_env = config
                .key_env
                .as_deref()
                .ok_or_else(|| GatewayError::Config("openai provider requires key_env".into()))?;
            let provider = HttpProvider::new(endpoint, model, key_env)
                .map_err(|e| GatewayError::Config(e.to_string()))?;
            Ok(Arc::new(provider))
        }
        other => Err(GatewayError::Config(format!(
            "unknown chat provider kind {other}"
        ))),
    }
}

fn embed_provider_from(
    config: &ProviderConfig,
    _base_dir: &Path,
) -> Result<Arc<dyn EmbedProvider>, GatewayError> {
    match config.provider.as_str() {
        "hash" => Ok(Arc::new(HashEmbedder::new(
            config.dim.unwrap_or(DEFAULT_HASH_DIM),
        ))),
        "openai" => {
            let endpoint = config
                .endpoint
                .as_deref()
                .ok_or_else(|| GatewayError::Config("openai embedder requires endpoint".into()))?;
            let model = config
                .model
                .as_deref()
                .ok_or_else(|| GatewayError::Config("openai embedder requires model".into()))?;
            let key_env = config
                .key_env
                .as_deref()
                .ok_or_else(|| GatewayError::Config("openai embedder requires key_env".into()))?;
            let provider = HttpProvider::new(endpoint, model, key_env)
                .map_err(|e| GatewayError::Config(e.to_string()))?;
            Ok(Arc::new(provider))
        }
        other => Err(GatewayError::Config(format!(
            "unknown embed provider kind {other}"
        ))),
    }
}

impl Gateway {
    /// Builds a gateway from a providers config document. Relative
    /// `fixtures_dir` paths resolve against `base_dir` (normally the config
    /// file's directory). When no evolution role is configured it shares
    /// the execution provider, at evolution temperature.
    pub fn from_config(config: &GatewayConfig, base_dir: &Path) -> Result<Gateway, GatewayError> {
        let execution = chat_provider_from(&config.execution, base_dir)?;
        let evolution_cfg = config.evolution.as_ref().unwrap_or(&config.execution);
        let evolution = if config.evolution.is_some() {
            chat_provider_from(evolution_cfg, base_dir)?
        } else {
            Arc::clone(&execution)
        };
        let embedder = embed_provider_from(&config.embedding, base_dir)?;

        let mut builder = Gateway::builder()
            .chat_role(
                ModelRole::Execution,
                execution,
                config.execution.temperature.unwrap_or(0.0),
                Limiter::new(
                    config.execution.requests_per_minute,
                    config.execution.max_inflight,
                ),
            )
            .chat_role(
                ModelRole::Evolution,
                evolution,
                evolution_cfg.temperature.unwrap_or(0.8),
                Limiter::new(
                    evolution_cfg.requests_per_minute,
                    evolution_cfg.max_inflight,
                ),
            )
            .embedder(
                embedder,
                Limiter::new(
                    config.embedding.requests_per_minute,
                    config.embedding.max_inflight,
                ),
            )
            .cache(config.cache);
        if let Some(retry) = config.retry {
            builder = builder.retry(retry);
        }
        Ok(builder.build())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn echo_gateway() -> Gateway {
        let provider = CallbackProvider::new("echo", |req| Ok(format!("echo:{}", req.payload)));
        Gateway::builder()
            .chat_role(
                ModelRole::Execution,
                Arc::new(provider),
                0.0,
                Limiter::unlimited(),
            )
            .build()
    }

    #[test]
    fn scripted_chat_is_byte_stable() {
        let gw = echo_gateway();
        let a = gw
            .chat(ModelRole::Execution, "i", "payload", "test")
            .unwrap();
        let b = gw
            .chat(ModelRole::Execution, "i", "payload", "test")
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, "echo:payload");
    }

    #[test]
    fn cache_hit_skips_provider() {
        let calls = Arc::new(AtomicU32::new(0));
        let counter = calls.clone();
        let provider = CallbackProvider::new("counting", move |_| {
            counter.fetch_add(1, Ordering::SeqCst);
            Ok("ok".into())
        });
        let gw = Gateway::builder()
            .chat_role(
                ModelRole::Execution,
                Arc::new(provider),
                0.0,
                Limiter::unlimited(),
            )
            .cache(true)
            .build();
        gw.chat(ModelRole::Execution, "i", "p", "t").unwrap();
        gw.chat(ModelRole::Execution, "i", "p", "t").unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(gw.provider_invocations(ModelRole::Execution), 1);
        assert_eq!(gw.calls_with_purpose("t"), 2);
        let log = gw.exchanges();
        assert!(!log[0].cache_hit);
        assert!(log[1].cache_hit);
    }

    #[test]
    fn cache_key_misses_on_any_component_change() {
        let calls = Arc::new(AtomicU32::new(0));
        let counter = calls.clone();
        let provider = CallbackProvider::new("counting", move |_| {
            counter.fetch_add(1, Ordering::SeqCst);
            Ok("ok".into())
        });
        let gw = Gateway::builder()
            .chat_role(
                ModelRole::Execution,
                Arc::new(provider),
                0.0,
                Limiter::unlimited(),
            )
            .build();
        gw.chat(ModelRole::Execution, "i1", "p", "t").unwrap();
        gw.chat(ModelRole::Execution, "i2", "p", "t").unwrap();
        gw.chat(ModelRole::Execution, "i1", "p2", "t").unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_transient_failures() {
        let calls = Arc::new(AtomicU32::new(0));
        let counter = calls.clone();
        let provider = CallbackProvider::new("flaky", move |_| {
            let n = counter.fetch_add(1, Ordering::SeqCst);
            if n < 2 {
                Err(ProviderError::Transport("connection reset".into()))
            } else {
                Ok("recovered".into())
            }
        });
        let gw = Gateway::builder()
            .chat_role(
                ModelRole::Execution,
                Arc::new(provider),
                0.0,
                Limiter::unlimited(),
            )
            .retry(RetryPolicy {
                max_attempts: 3,
                backoff_ms: 0,
            })
            .build();
        let response = gw.chat(ModelRole::Execution, "i", "p", "t").unwrap();
        assert_eq!(response, "recovered");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_surface_unavailable() {
        let provider =
            CallbackProvider::new("down", |_| Err(ProviderError::Transport("refused".into())));
        let gw = Gateway::builder()
            .chat_role(
                ModelRole::Execution,
                Arc::new(provider),
                0.0,
                Limiter::unlimited(),
            )
            .retry(RetryPolicy {
                max_attempts: 2,
                backoff_ms: 0,
            })
            .build();
        let err = gw.chat(ModelRole::Execution, "i", "p", "t").unwrap_err();
        assert!(matches!(
            err,
            GatewayError::ProviderUnavailable { attempts: 2, .. }
        ));
    }

    #[test]
    fn missing_role_is_config_error() {
        let gw = echo_gateway();
        let err = gw.chat(ModelRole::Evolution, "i", "p", "t").unwrap_err();
        assert!(matches!(
            err,
            GatewayError::ConfigMissing(ModelRole::Evolution)
        ));
        assert!(matches!(
            gw.embed(&["x"]).unwrap_err(),
            GatewayError::ConfigMissing(ModelRole::Embedding)
        ));
    }

    #[test]
    fn embed_preserves_order_and_checks_dim() {
        let gw = Gateway::builder()
            .embedder(Arc::new(HashEmbedder::new(16)), Limiter::unlimited())
            .build();
        let vectors = gw.embed(&["a a a", "b b", "c"]).unwrap();
        assert_eq!(vectors.len(), 3);
        assert!(vectors.iter().all(|v| v.len() == 16));
        assert!(matches!(
            gw.embed(&[]).unwrap_err(),
            GatewayError::EmptyEmbedInput
        ));
    }

    struct DriftingEmbedder;
    impl EmbedProvider for DriftingEmbedder {
        fn id(&self) -> &str {
            "drift"
        }
        fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError> {
            Ok(texts
                .iter()
                .enumerate()
                .map(|(i, _)| vec![0.0; if i == 0 { 8 } else { 16 }])
                .collect())
        }
    }

    #[test]
    fn dimension_drift_detected() {
        let gw = Gateway::builder()
            .embedder(Arc::new(DriftingEmbedder), Limiter::unlimited())
            .build();
        assert!(matches!(
            gw.embed(&["a", "b"]).unwrap_err(),
            GatewayError::DimensionDrift {
                expected: 8,
                got: 16
            }
        ));
    }

    #[test]
    fn structured_repair_then_abstain() {
        let calls = Arc::new(AtomicU32::new(0));
        let counter = calls.clone();
        let provider = CallbackProvider::new("vague", move |_| {
            counter.fetch_add(1, Ordering::SeqCst);
            Ok("I cannot determine.".into())
        });
        let gw = Gateway::builder()
            .chat_role(
                ModelRole::Execution,
                Arc::new(provider),
                0.0,
                Limiter::unlimited(),
            )
            .build();
        let allowed: HashSet<String> = ["A".to_string()].into();
        let (parsed, _) = gw
            .chat_structured(ModelRole::Execution, "i", "p", "agent", &allowed)
            .unwrap();
        assert!(parsed.abstained);
        assert!(parsed.entries.is_empty());
        // One original ask plus exactly one repair re-ask.
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert_eq!(gw.calls_with_purpose("agent"), 1);
        assert_eq!(gw.calls_with_purpose("agent:repair"), 1);
    }

    #[test]
    fn structured_repair_recovers() {
        let provider = CallbackProvider::new("flip", |req: &ChatRequest<'_>| {
            if req.instruction.contains("could not be parsed") {
                Ok(r#"{"predictions": [{"label": "A", "confidence": 0.9}]}"#.into())
            } else {
                Ok("no json here".into())
            }
        });
        let gw = Gateway::builder()
            .chat_role(
                ModelRole::Execution,
                Arc::new(provider),
                0.0,
                Limiter::unlimited(),
            )
            .build();
        let allowed: HashSet<String> = ["A".to_string()].into();
        let (parsed, _) = gw
            .chat_structured(ModelRole::Execution, "i", "p", "agent", &allowed)
            .unwrap();
        assert!(parsed.repaired);
        assert_eq!(parsed.entries[0].label, "A");
    }
}
