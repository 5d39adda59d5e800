//! Two-level CWE label space: coarse categories, each owning a disjoint set
//! of fine-grained vulnerability types, plus a benign sentinel that lives
//! outside every category.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default id for the benign sentinel when the config does not set one.
pub const DEFAULT_BENIGN_LABEL: &str = "BENIGN";

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("type {type_id} appears in categories {first} and {second}")]
    DuplicateType {
        type_id: String,
        first: String,
        second: String,
    },
    #[error("category {0} has no types")]
    EmptyCategory(String),
    #[error("duplicate category id {0}")]
    DuplicateCategoryId(String),
    #[error("benign label {0} collides with a type or category id")]
    BenignCollision(String),
    #[error("category {0} has an empty id or type id")]
    EmptyId(String),
    #[error("failed to read taxonomy config: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse taxonomy config: {0}")]
    Parse(#[from] toml::de::Error),
}

/// A fine-grained vulnerability type (e.g. CWE-119).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CweType {
    pub id: String,
    pub name: String,
}

/// A coarse category owning one or more types.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Category {
    pub id: String,
    pub name: String,
    pub types: Vec<CweType>,
}

impl Category {
    pub fn type_ids(&self) -> impl Iterator<Item = &str> {
        self.types.iter().map(|t| t.id.as_str())
    }

    pub fn contains_type(&self, type_id: &str) -> bool {
        self.types.iter().any(|t| t.id == type_id)
    }
}

/// Validated two-level label space. Immutable after load; reads are safe to
/// share across threads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Taxonomy {
    categories: Vec<Category>,
    benign_label: String,
    #[serde(skip)]
    type_owner: HashMap<String, usize>,
}

/// Config-document form: in type lists, a bare string is shorthand for a
/// type whose name equals its id.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TypeEntry {
    Bare(String),
    Full { id: String, name: String },
}

#[derive(Debug, Deserialize)]
struct CategoryDoc {
    id: String,
    name: String,
    types: Vec<TypeEntry>,
}

#[derive(Debug, Deserialize)]
struct TaxonomyDoc {
    #[serde(default)]
    benign_label: Option<String>,
    categories: Vec<CategoryDoc>,
}

impl Taxonomy {
    /// Validates the invariants and builds the type → category map.
    pub fn from_parts(
        categories: Vec<Category>,
        benign_label: impl Into<String>,
    ) -> Result<Self, TaxonomyError> {
        let benign_label = benign_label.into();
        let mut type_owner: HashMap<String, usize> = HashMap::new();
        let mut category_ids: HashMap<&str, ()> = HashMap::new();

        for (idx, cat) in categories.iter().enumerate() {
            if cat.id.is_empty() {
                return Err(TaxonomyError::EmptyId(cat.name.clone()));
            }
            if category_ids.insert(cat.id.as_str(), ()).is_some() {
                return Err(TaxonomyError::DuplicateCategoryId(cat.id.clone()));
            }
            if cat.types.is_empty() {
                return Err(TaxonomyError::EmptyCategory(cat.id.clone()));
            }
            for ty in &cat.types {
                if ty.id.is_empty() {
                    return Err(TaxonomyError::EmptyId(cat.id.clone()));
                }
                if let Some(prev) = type_owner.insert(ty.id.clone(), idx) {
                    // Duplicate inside one category is also rejected here.
                    return Err(TaxonomyError::DuplicateType {
                        type_id: ty.id.clone(),
                        first: categories[prev].id.clone(),
                        second: cat.id.clone(),
                    });
                }
            }
        }
        if benign_label.is_empty()
            || type_owner.contains_key(&benign_label)
            || category_ids.contains_key(benign_label.as_str())
        {
            return Err(TaxonomyError::BenignCollision(benign_label));
        }

        Ok(Taxonomy {
            categories,
            benign_label,
            type_owner,
        })
    }

    pub fn from_toml_str(source: &str) -> Result<Self, TaxonomyError> {
        let doc: TaxonomyDoc = toml::from_str(source)?;
        let categories = doc
            .categories
            .into_iter()
            .map(|c| Category {
                id: c.id,
                name: c.name,
                types: c
                    .types
                    .into_iter()
                    .map(|t| match t {
                        TypeEntry::Bare(id) => CweType {
                            name: id.clone(),
                            id,
                        },
                        TypeEntry::Full { id, name } => CweType { id, name },
                    })
                    .collect(),
            })
            .collect();
        Self::from_parts(
            categories,
            doc.benign_label
                .unwrap_or_else(|| DEFAULT_BENIGN_LABEL.to_string()),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Owning category for a type id; `None` for the benign label and for
    /// unknown ids.
    pub fn category_of(&self, type_id: &str) -> Option<&Category> {
        self.type_owner
            .get(type_id)
            .map(|&idx| &self.categories[idx])
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn category(&self, category_id: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == category_id)
    }

    pub fn benign_label(&self) -> &str {
        &self.benign_label
    }

    pub fn is_benign(&self, label: &str) -> bool {
        label == self.benign_label
    }

    /// True for the benign label and every known type id.
    pub fn is_known_label(&self, label: &str) -> bool {
        self.is_benign(label) || self.type_owner.contains_key(label)
    }

    pub fn contains_type(&self, type_id: &str) -> bool {
        self.type_owner.contains_key(type_id)
    }

    pub fn type_ids(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().flat_map(|c| c.type_ids())
    }

    /// Number of categories (M).
    pub fn category_count(&self) -> usize {
        self.categories.len()
    }

    /// Number of fine-grained types (K).
    pub fn type_count(&self) -> usize {
        self.type_owner.len()
    }

    /// Rebuilds the derived type → category map, e.g. after deserializing.
    pub(crate) fn reindex(&mut self) {
        self.type_owner = self
            .categories
            .iter()
            .enumerate()
            .flat_map(|(idx, c)| c.types.iter().map(move |t| (t.id.clone(), idx)))
            .collect();
    }

    /// Deserialization entry point that restores derived state.
    pub fn from_serialized(mut taxonomy: Taxonomy) -> Result<Self, TaxonomyError> {
        taxonomy.reindex();
        Self::from_parts(taxonomy.categories, taxonomy.benign_label)
    }
}

impl fmt::Display for Taxonomy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} categories / {} types (benign: {})",
            self.category_count(),
            self.type_count(),
            self.benign_label
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> &'static str {
        r#"
benign_label = "BENIGN"

[[categories]]
id = "memory"
name = "Memory Buffer Errors"
types = ["CWE-119", { id = "CWE-125", name = "Out-of-bounds Read" }]

[[categories]]
id = "injection"
name = "Injection"
types = ["CWE-79", "CWE-89"]
"#
    }

    #[test]
    fn loads_and_indexes() {
        let t = Taxonomy::from_toml_str(tiny_config()).unwrap();
        assert_eq!(t.category_count(), 2);
        assert_eq!(t.type_count(), 4);
        assert_eq!(t.category_of("CWE-119").unwrap().id, "memory");
        assert_eq!(t.category_of("CWE-89").unwrap().id, "injection");
        assert_eq!(
            t.category_of("CWE-125").unwrap().name,
            "Memory Buffer Errors"
        );
        assert_eq!(t.categories()[0].types[1].name, "Out-of-bounds Read");
    }

    #[test]
    fn scales_to_ten_by_thirteen() {
        // 10 categories x 13 types = the 10/130 shape of the reference corpus.
        let categories: Vec<Category> = (0..10)
            .map(|c| Category {
                id: format!("cat{c}"),
                name: format!("Category {c}"),
                types: (0..13)
                    .map(|t| CweType {
                        id: format!("CWE-{}", 100 + c * 13 + t),
                        name: format!("Type {c}/{t}"),
                    })
                    .collect(),
            })
            .collect();
        let t = Taxonomy::from_parts(categories, "BENIGN").unwrap();
        assert_eq!(t.category_count(), 10);
        assert_eq!(t.type_count(), 130);
    }

    #[test]
    fn minimal_single_category() {
        let t = Taxonomy::from_toml_str(
            r#"
[[categories]]
id = "memory"
name = "Memory"
types = ["CWE-119"]
"#,
        )
        .unwrap();
        assert_eq!(t.category_count(), 1);
        assert_eq!(t.type_count(), 1);
        assert_eq!(t.benign_label(), DEFAULT_BENIGN_LABEL);
    }

    #[test]
    fn benign_and_unknown_have_no_category() {
        let t = Taxonomy::from_toml_str(tiny_config()).unwrap();
        assert!(t.category_of("BENIGN").is_none());
        assert!(t.category_of("CWE-9999").is_none());
    }

    #[test]
    fn rejects_type_in_two_categories() {
        let err = Taxonomy::from_toml_str(
            r#"
[[categories]]
id = "a"
name = "A"
types = ["CWE-119"]

[[categories]]
id = "b"
name = "B"
types = ["CWE-119"]
"#,
        )
        .unwrap_err();
        assert!(matches!(err, TaxonomyError::DuplicateType { .. }));
    }

    #[test]
    fn rejects_empty_category() {
        let err = Taxonomy::from_toml_str(
            r#"
[[categories]]
id = "a"
name = "A"
types = []
"#,
        )
        .unwrap_err();
        assert!(matches!(err, TaxonomyError::EmptyCategory(_)));
    }

    #[test]
    fn rejects_duplicate_category_id() {
        let err = Taxonomy::from_toml_str(
            r#"
[[categories]]
id = "a"
name = "A"
types = ["CWE-1"]

[[categories]]
id = "a"
name = "A again"
types = ["CWE-2"]
"#,
        )
        .unwrap_err();
        assert!(matches!(err, TaxonomyError::DuplicateCategoryId(_)));
    }

    #[test]
    fn rejects_benign_collision() {
        let err = Taxonomy::from_toml_str(
            r#"
benign_label = "CWE-119"

[[categories]]
id = "a"
name = "A"
types = ["CWE-119"]
"#,
        )
        .unwrap_err();
        assert!(matches!(err, TaxonomyError::BenignCollision(_)));
    }

    #[test]
    fn every_type_maps_to_exactly_one_owning_category() {
        let t = Taxonomy::from_toml_str(tiny_config()).unwrap();
        for type_id in t.type_ids() {
            let owner = t.category_of(type_id).unwrap();
            assert!(owner.contains_type(type_id));
            let owners = t
                .categories()
                .iter()
                .filter(|c| c.contains_type(type_id))
                .count();
            assert_eq!(owners, 1);
        }
    }

    #[test]
    fn category_type_sets_are_disjoint() {
        let t = Taxonomy::from_toml_str(tiny_config()).unwrap();
        for (i, a) in t.categories().iter().enumerate() {
            for b in t.categories().iter().skip(i + 1) {
                assert!(!a.types.iter().any(|ty| b.contains_type(&ty.id)));
            }
        }
    }
}
