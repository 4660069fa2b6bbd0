//! Two-dimensional label catalog: scenes × task attributes, restricted to a
//! sparse set of allowed pairs.
//!
//! Catalog files are TOML with three sections:
//!
//! ```toml
//! allowed_pairs = ["banking/ner", "insurance/slot-filling"]
//!
//! [[scenes]]
//! id = "banking"
//! display_name = "Banking"
//!
//! [[attributes]]
//! id = "ner"
//! display_name = "Named Entity Recognition"
//! ```
//!
//! Pairs are written in the canonical `scene/attribute` form used as the join
//! key everywhere else in the pipeline.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("cannot read catalog {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("catalog parse error: {0}")]
    Parse(String),
    #[error("invalid id {0:?}: ids must be non-empty lowercase-kebab")]
    InvalidId(String),
    #[error("duplicate scene id {0:?}")]
    DuplicateScene(String),
    #[error("duplicate attribute id {0:?}")]
    DuplicateAttribute(String),
    #[error("duplicate allowed pair {0}")]
    DuplicatePair(LabelKey),
    #[error("allowed pair {pair} references unknown scene {scene:?}")]
    UnknownScene { pair: LabelKey, scene: String },
    #[error("allowed pair {pair} references unknown attribute {attribute:?}")]
    UnknownAttribute { pair: LabelKey, attribute: String },
    #[error("catalog has no allowed pairs")]
    Empty,
    #[error("malformed label key {0:?}: expected \"scene/attribute\"")]
    MalformedKey(String),
}

/// Canonical `scene/attribute` label key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelKey {
    scene: String,
    attribute: String,
}

impl LabelKey {
    pub fn new(scene: impl Into<String>, attribute: impl Into<String>) -> Self {
        Self {
            scene: scene.into(),
            attribute: attribute.into(),
        }
    }

    pub fn scene(&self) -> &str {
        &self.scene
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }
}

impl fmt::Display for LabelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.scene, self.attribute)
    }
}

impl FromStr for LabelKey {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('/') {
            Some((scene, attribute)) if !scene.is_empty() && !attribute.is_empty() && !attribute.contains('/') => {
                Ok(Self::new(scene, attribute))
            }
            _ => Err(CatalogError::MalformedKey(s.to_string())),
        }
    }
}

impl Serialize for LabelKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LabelKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAttribute {
    pub id: String,
    pub display_name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CatalogDocument {
    allowed_pairs: Vec<LabelKey>,
    #[serde(default)]
    scenes: Vec<Scene>,
    #[serde(default)]
    attributes: Vec<TaskAttribute>,
}

/// Validated, immutable label catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCatalog {
    scenes: Vec<Scene>,
    attributes: Vec<TaskAttribute>,
    allowed: BTreeSet<LabelKey>,
}

/// Lowercase-kebab: `[a-z0-9]+(-[a-z0-9]+)*`.
pub fn is_kebab_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .split('-')
            .all(|part| !part.is_empty() && part.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()))
}

impl LabelCatalog {
    pub fn new(
        scenes: Vec<Scene>,
        attributes: Vec<TaskAttribute>,
        allowed_pairs: Vec<LabelKey>,
    ) -> Result<Self, CatalogError> {
        let mut scene_ids = BTreeSet::new();
        for scene in &scenes {
            if !is_kebab_id(&scene.id) {
                return Err(CatalogError::InvalidId(scene.id.clone()));
            }
            if !scene_ids.insert(scene.id.as_str()) {
                return Err(CatalogError::DuplicateScene(scene.id.clone()));
            }
        }
        let mut attribute_ids = BTreeSet::new();
        for attribute in &attributes {
            if attribute.id.is_empty() {
                return Err(CatalogError::InvalidId(attribute.id.clone()));
            }
            if !attribute_ids.insert(attribute.id.as_str()) {
                return Err(CatalogError::DuplicateAttribute(attribute.id.clone()));
            }
        }
        let mut allowed = BTreeSet::new();
        for pair in allowed_pairs {
            if !scene_ids.contains(pair.scene()) {
                return Err(CatalogError::UnknownScene {
                    scene: pair.scene().to_string(),
                    pair,
                });
            }
            if !attribute_ids.contains(pair.attribute()) {
                return Err(CatalogError::UnknownAttribute {
                    attribute: pair.attribute().to_string(),
                    pair,
                });
            }
            if allowed.contains(&pair) {
                return Err(CatalogError::DuplicatePair(pair));
            }
            allowed.insert(pair);
        }
        if allowed.is_empty() {
            return Err(CatalogError::Empty);
        }
        Ok(Self {
            scenes,
            attributes,
            allowed,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CatalogError> {
        let doc: CatalogDocument = toml::from_str(text).map_err(|e| CatalogError::Parse(e.to_string()))?;
        Self::new(doc.scenes, doc.attributes, doc.allowed_pairs)
    }

    pub fn to_toml_string(&self) -> String {
        let doc = CatalogDocument {
            allowed_pairs: self.allowed.iter().cloned().collect(),
            scenes: self.scenes.clone(),
            attributes: self.attributes.clone(),
        };
        toml::to_string(&doc).expect("catalog document is always representable as TOML")
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn attributes(&self) -> &[TaskAttribute] {
        &self.attributes
    }

    /// Allowed pairs in canonical key order.
    pub fn labels(&self) -> impl Iterator<Item = &LabelKey> {
        self.allowed.iter()
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn validate_label(&self, label: &LabelKey) -> bool {
        self.allowed.contains(label)
    }
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<LabelCatalog, CatalogError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    LabelCatalog::from_toml_str(&text)
}
