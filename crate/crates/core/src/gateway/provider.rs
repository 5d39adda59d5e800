//! Provider backends: a scripted deterministic provider driven by fixture
//! files, a callback provider for in-process tests, an OpenAI-compatible
//! HTTP provider, and the local hashing embedder.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use super::ModelRole;

#[derive(Debug, Error)]
pub enum ProviderError {
    /// Transient transport failure; the gateway retries these.
    #[error("transport: {0}")]
    Transport(String),
    /// Permanent failure; surfaced without retry.
    #[error("{0}")]
    Fatal(String),
}

/// One chat call as seen by a provider.
#[derive(Debug, Clone)]
pub struct ChatRequest<'a> {
    pub role: ModelRole,
    pub instruction: &'a str,
    pub payload: &'a str,
    pub temperature: f64,
}

pub trait ChatProvider: Send + Sync {
    fn id(&self) -> &str;
    fn chat(&self, request: &ChatRequest<'_>) -> Result<String, ProviderError>;
}

pub trait EmbedProvider: Send + Sync {
    fn id(&self) -> &str;
    /// One vector per input text, in input order.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

/// Hex SHA-256 of a payload; scripted fixtures are keyed by this.
pub fn payload_hash(payload: &str) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(payload.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

// ---------------------------------------------------------------------------
// Scripted provider
// ---------------------------------------------------------------------------

/// Substring-match rule applied when no exact payload-hash fixture exists.
#[derive(Debug, Clone, Deserialize)]
pub struct ScriptedRule {
    /// Restrict the rule to one role; absent means any role.
    #[serde(default)]
    pub role: Option<ModelRole>,
    #[serde(default)]
    pub payload_contains: Option<String>,
    /// When set, `payload_contains` only searches the payload up to the
    /// first occurrence of this delimiter. Lets a rule key on a payload
    /// header section (e.g. the target code) without matching quoted
    /// material further down (e.g. retrieved evidence).
    #[serde(default)]
    pub payload_scope_end: Option<String>,
    #[serde(default)]
    pub instruction_contains: Option<String>,
    pub response: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct ScriptedRules {
    #[serde(default)]
    rules: Vec<ScriptedRule>,
    /// Fallback response per role ("execution" / "evolution").
    #[serde(default)]
    default: HashMap<ModelRole, String>,
}

/// Deterministic provider backed by a fixtures directory:
///
/// ```text
/// fixtures/
///   responses/<sha256-of-payload>.txt   exact canned responses
///   rules.json                          substring rules + per-role defaults
/// ```
///
/// Lookup order is exact hash file, then first matching rule, then the
/// role's default. Identical requests always produce identical responses.
pub struct ScriptedProvider {
    id: String,
    responses_dir: PathBuf,
    rules: ScriptedRules,
}

impl ScriptedProvider {
    pub fn open(fixtures_dir: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let dir = fixtures_dir.as_ref();
        let rules_path = dir.join("rules.json");
        let rules = if rules_path.is_file() {
            let text = std::fs::read_to_string(&rules_path)
                .map_err(|e| ProviderError::Fatal(format!("read {}: {e}", rules_path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| ProviderError::Fatal(format!("parse {}: {e}", rules_path.display())))?
        } else {
            ScriptedRules::default()
        };
        Ok(ScriptedProvider {
            id: format!("scripted:{}", dir.display()),
            responses_dir: dir.join("responses"),
            rules,
        })
    }
}

impl ChatProvider for ScriptedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn chat(&self, request: &ChatRequest<'_>) -> Result<String, ProviderError> {
        let exact = self
            .responses_dir
            .join(format!("{}.txt", payload_hash(request.payload)));
        if exact.is_file() {
            return std::fs::read_to_string(&exact)
                .map_err(|e| ProviderError::Fatal(format!("read {}: {e}", exact.display())));
        }
        for rule in &self.rules.rules {
            if let Some(role) = rule.role {
                if role != request.role {
                    continue;
                }
            }
            if let Some(needle) = &rule.payload_contains {
                let scope = match &rule.payload_scope_end {
                    Some(delim) => request
                        .payload
                        .split(delim.as_str())
                        .next()
                        .unwrap_or(request.payload),
                    None => request.payload,
                };
                if !scope.contains(needle.as_str()) {
                    continue;
                }
            }
            if let Some(needle) = &rule.instruction_contains {
                if !request.instruction.contains(needle.as_str()) {
                    continue;
                }
            }
            return Ok(rule.response.clone());
        }
        if let Some(default) = self.rules.default.get(&request.role) {
            return Ok(default.clone());
        }
        Err(ProviderError::Fatal(format!(
            "no scripted response for payload hash {}",
            payload_hash(request.payload)
        )))
    }
}

// ---------------------------------------------------------------------------
// Callback provider (test scripting without fixture files)
// ---------------------------------------------------------------------------

type ChatFn = dyn Fn(&ChatRequest<'_>) -> Result<String, ProviderError> + Send + Sync;

/// Wraps a closure as a provider; the programmatic counterpart of
/// [`ScriptedProvider`] for test harnesses.
pub struct CallbackProvider {
    id: String,
    callback: Box<ChatFn>,
}

impl CallbackProvider {
    pub fn new(
        id: impl Into<String>,
        callback: impl Fn(&ChatRequest<'_>) -> Result<String, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        CallbackProvider {
            id: id.into(),
            callback: Box::new(callback),
        }
    }
}

impl ChatProvider for CallbackProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn chat(&self, request: &ChatRequest<'_>) -> Result<String, ProviderError> {
        (self.callback)(request)
    }
}

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP provider
// ---------------------------------------------------------------------------

pub struct HttpProvider {
    id: String,
    endpoint: String,
    model: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    /// `endpoint` is the API base (e.g. `https://api.openai.com/v1`); the
    /// key is read from `key_env`, never from config files.
    pub fn new(endpoint: &str, model: &str, key_env: &str) -> Result<Self, ProviderError> {
        let api_key = std::env::var(key_env)
            .map_err(|_| ProviderError::Fatal(format!("environment variable {key_env} not set")))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| ProviderError::Fatal(e.to_string()))?;
        Ok(HttpProvider {
            id: format!("openai:{model}@{endpoint}"),
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            client,
        })
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<serde_json::Value, ProviderError> {
        let url = format!("{}{path}", self.endpoint);
        let response = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderError::Transport(format!("{url}: HTTP {status}")));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(ProviderError::Fatal(format!("{url}: HTTP {status}: {body}")));
        }
        response
            .json()
            .map_err(|e| ProviderError::Transport(format!("{url}: decode: {e}")))
    }
}

impl ChatProvider for HttpProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn chat(&self, request: &ChatRequest<'_>) -> Result<String, ProviderError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.instruction},
                {"role": "user", "content": request.payload},
            ],
        });
        let value = self.post("/chat/completions", body)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Fatal("response missing choices[0].message.content".into()))
    }
}

impl EmbedProvider for HttpProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let value = self.post("/embeddings", body)?;
        let data = value["data"]
            .as_array()
            .ok_or_else(|| ProviderError::Fatal("response missing data array".into()))?;
        let mut rows: Vec<(usize, Vec<f32>)> = Vec::with_capacity(data.len());
        for item in data {
            let index = item["index"].as_u64().unwrap_or(rows.len() as u64) as usize;
            let embedding = item["embedding"]
                .as_array()
                .ok_or_else(|| ProviderError::Fatal("embedding entry missing vector".into()))?
                .iter()
                .map(|v| v.as_f64().unwrap_or(0.0) as f32)
                .collect();
            rows.push((index, embedding));
        }
        rows.sort_by_key(|(index, _)| *index);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

// ---------------------------------------------------------------------------
// Hashing embedder
// ---------------------------------------------------------------------------

/// Deterministic local embedder: character trigrams and whitespace tokens
/// feature-hashed into a fixed-dimension signed-count vector.
pub struct HashEmbedder {
    id: String,
    dim: usize,
}

pub const DEFAULT_HASH_DIM: usize = 64;

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder {
            id: format!("hash:d{dim}"),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim];
        let mut add = |feature: &[u8]| {
            let h = crate::corpus::fnv1a(feature);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        };
        let bytes = text.as_bytes();
        if bytes.len() < 3 {
            add(bytes);
        } else {
            for window in bytes.windows(3) {
                add(window);
            }
        }
        for token in text.split_whitespace() {
            add(token.as_bytes());
        }
        if v.iter().all(|&x| x == 0.0) {
            // Signed counts cancelled out; pin one bucket so the vector
            // stays embeddable (unit-normalizable) downstream.
            let h = crate::corpus::fnv1a(bytes);
            v[(h % self.dim as u64) as usize] = 1.0;
        }
        v
    }
}

impl EmbedProvider for HashEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(crate::par::map_slice(texts, |t| self.embed_one(t)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn request(payload: &str) -> ChatRequest<'_> {
        ChatRequest {
            role: ModelRole::Execution,
            instruction: "instr",
            payload,
            temperature: 0.0,
        }
    }

    #[test]
    fn scripted_exact_hash_lookup() {
        let dir = TempDir::new().unwrap();
        let responses = dir.path().join("responses");
        std::fs::create_dir_all(&responses).unwrap();
        std::fs::write(
            responses.join(format!("{}.txt", payload_hash("hello"))),
            "canned",
        )
        .unwrap();
        let provider = ScriptedProvider::open(dir.path()).unwrap();
        assert_eq!(provider.chat(&request("hello")).unwrap(), "canned");
        assert_eq!(provider.chat(&request("hello")).unwrap(), "canned");
        assert!(provider.chat(&request("other")).is_err());
    }

    #[test]
    fn scripted_rules_and_default() {
        let dir = TempDir::new().unwrap();
        std::fs::write(
            dir.path().join("rules.json"),
            r#"{
                "rules": [
                    {"role": "execution", "payload_contains": "needle", "response": "matched"}
                ],
                "default": {"execution": "fallback"}
            }"#,
        )
        .unwrap();
        let provider = ScriptedProvider::open(dir.path()).unwrap();
        assert_eq!(provider.chat(&request("has needle here")).unwrap(), "matched");
        assert_eq!(provider.chat(&request("nothing")).unwrap(), "fallback");
        let evo = ChatRequest {
            role: ModelRole::Evolution,
            ..request("x")
        };
        assert!(provider.chat(&evo).is_err());
    }

    #[test]
    fn scripted_rule_scope_limits_match_window() {
        let dir = TempDir::new().unwrap();
        std::fs::write(
            dir.path().join("rules.json"),
            r#"{
                "rules": [
                    {"payload_contains": "needle", "payload_scope_end": "Evidence:", "response": "scoped"},
                    {"response": "fallthrough"}
                ]
            }"#,
        )
        .unwrap();
        let provider = ScriptedProvider::open(dir.path()).unwrap();
        assert_eq!(
            provider.chat(&request("needle up front\nEvidence:\nmore")).unwrap(),
            "scoped"
        );
        // The needle only occurs inside the evidence section: no match.
        assert_eq!(
            provider.chat(&request("target\nEvidence:\nneedle quoted")).unwrap(),
            "fallthrough"
        );
    }

    #[test]
    fn hash_embedder_deterministic_and_sized() {
        let embedder = HashEmbedder::new(64);
        let a = embedder.embed(&["int main() { return 0; }"]).unwrap();
        let b = embedder.embed(&["int main() { return 0; }"]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 64);
        let two = embedder.embed(&["alpha", "beta"]).unwrap();
        assert_eq!(two.len(), 2);
        assert_ne!(two[0], two[1]);
    }

    #[test]
    fn hash_embedder_batch_order_matches_singletons() {
        let embedder = HashEmbedder::new(32);
        let texts = ["one fish", "two fish", "red fish"];
        let batch = embedder.embed(&texts).unwrap();
        for (i, text) in texts.iter().enumerate() {
            let single = embedder.embed(&[text]).unwrap();
            assert_eq!(batch[i], single[0], "order drift at {i}");
        }
    }

    #[test]
    fn hash_embedder_never_zero() {
        let embedder = HashEmbedder::new(8);
        for text in ["a", "xy", "zzz", "  ", "\u{1f600}"] {
            let v = &embedder.embed(&[text]).unwrap()[0];
            assert!(v.iter().any(|&x| x != 0.0), "zero vector for {text:?}");
        }
    }
}
