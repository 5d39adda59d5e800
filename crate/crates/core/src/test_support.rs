//! Shared fixtures for unit, integration, and acceptance tests.

#![doc(hidden)]

use std::sync::Arc;

use crate::gateway::{Gateway, HashEmbedder, Limiter};
use crate::taxonomy::Taxonomy;

/// Two categories, two types each, benign sentinel "BENIGN".
pub fn two_category_taxonomy() -> Arc<Taxonomy> {
    Arc::new(
        Taxonomy::from_toml_str(
            r#"
[[categories]]
id = "memory"
name = "Memory Buffer Errors"
types = ["CWE-119", "CWE-125"]

[[categories]]
id = "injection"
name = "Injection"
types = ["CWE-79", "CWE-89"]
"#,
        )
        .expect("fixture taxonomy is valid"),
    )
}

/// Three categories x three types, the synthetic-corpus shape.
pub fn three_category_taxonomy() -> Arc<Taxonomy> {
    Arc::new(
        Taxonomy::from_toml_str(
            r#"
[[categories]]
id = "memory"
name = "Memory Buffer Errors"
types = ["CWE-119", "CWE-125", "CWE-787"]

[[categories]]
id = "injection"
name = "Injection"
types = ["CWE-79", "CWE-89", "CWE-78"]

[[categories]]
id = "logic"
name = "Logic and Validation"
types = ["CWE-20", "CWE-190", "CWE-369"]
"#,
        )
        .expect("fixture taxonomy is valid"),
    )
}

/// Gateway with only the hashing embedder bound: enough for KB work.
pub fn hash_gateway(dim: usize) -> Gateway {
    Gateway::builder()
        .embedder(Arc::new(HashEmbedder::new(dim)), Limiter::unlimited())
        .build()
}
