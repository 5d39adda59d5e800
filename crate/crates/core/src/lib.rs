//! Coarse-to-fine CWE detection for code snippets.
//!
//! A router agent ranks candidate vulnerability categories for a snippet,
//! then category-specialized detector agents name exact CWE types, each
//! grounded in evidence retrieved from an embedded knowledge base. Agent
//! instructions are produced by a cross-model evolutionary optimizer: one
//! model mutates candidate prompts while a different model executes and
//! scores them.
//!
//! The crate is organized around that pipeline:
//!
//! - [`taxonomy`]: the two-level category/type label space
//! - [`corpus`]: labeled samples, splits, per-category detector datasets
//! - [`structuring`]: the structured code representation fed to retrieval
//! - [`kb`]: the embedded, pool-partitioned evidence store
//! - [`gateway`]: provider access with caching, retries, and rate limits
//! - [`evolution`]: population-based prompt optimization
//! - [`pipeline`]: online route → detect → aggregate
//! - [`metrics`]: macro metrics, Recall@k, and few-shot tail statistics
//!
//! Data-parallel inner loops (embedding, similarity scans, batch detection,
//! per-category evolution) run on rayon under the default `parallel`
//! feature and fall back to sequential execution without it; both paths
//! produce identical output.

pub mod corpus;
pub mod evolution;
pub mod gateway;
pub mod kb;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod structuring;
pub mod taxonomy;

pub mod test_support;

pub use corpus::{CategoryDataset, CodeSample, LabeledDataset, NegativeRatios, SplitFractions};
pub use gateway::{Gateway, GatewayError, ModelRole};
pub use kb::{contrastive_budget, EvidenceBundle, EvidenceItem, KnowledgeBase, LeakageGuard};
pub use structuring::{StructuredRepresentation, Structurer, StructuringBackend};
pub use taxonomy::Taxonomy;
