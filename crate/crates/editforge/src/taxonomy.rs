//! Editing taxonomy: 22 sub-tasks in four categories, with a basic/complex
//! split that decides which judge metrics apply.
//!
//! The canonical taxonomy ships as `data/taxonomy.toml` and is embedded as
//! the default. Sub-task names are normalized to snake_case keys for stable
//! manifest joins; display names are preserved separately.
//!
//! ```
//! use editforge::taxonomy::{Taxonomy, Category, Complexity, Metric};
//!
//! let tax = Taxonomy::default_taxonomy();
//! assert_eq!(tax.records().len(), 22);
//!
//! let st = tax.classify("Viewpoint Transformation").unwrap(); // case-insensitive
//! assert_eq!(st.category, Category::SceneEditing);
//! assert_eq!(st.complexity, Complexity::Complex);
//! assert_eq!(st.metric_set(), vec![Metric::If, Metric::Nc, Metric::Vq, Metric::Ra]);
//! ```

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// The four high-level editing categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ObjectEditing,
    AttributeEditing,
    SceneEditing,
    ReasoningEditing,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::ObjectEditing,
        Category::AttributeEditing,
        Category::SceneEditing,
        Category::ReasoningEditing,
    ];

    pub fn display(&self) -> &'static str {
        match self {
            Category::ObjectEditing => "Object Editing",
            Category::AttributeEditing => "Attribute Editing",
            Category::SceneEditing => "Scene Editing",
            Category::ReasoningEditing => "Reasoning Editing",
        }
    }
}

/// Basic edits are judged on IF/NC/VQ; complex edits add RA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Complexity {
    Basic,
    Complex,
}

/// One of the four judge dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "IF")]
    If,
    #[serde(rename = "NC")]
    Nc,
    #[serde(rename = "VQ")]
    Vq,
    #[serde(rename = "RA")]
    Ra,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::If => "IF",
            Metric::Nc => "NC",
            Metric::Vq => "VQ",
            Metric::Ra => "RA",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A populated sub-task record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubTask {
    /// Canonical snake_case key, e.g. `subject_addition`.
    pub key: String,
    pub category: Category,
    pub complexity: Complexity,
}

impl SubTask {
    /// Metric set applicable to this sub-task: {IF, NC, VQ} for basic
    /// edits, {IF, NC, VQ, RA} for complex edits.
    pub fn metric_set(&self) -> Vec<Metric> {
        match self.complexity {
            Complexity::Basic => vec![Metric::If, Metric::Nc, Metric::Vq],
            Complexity::Complex => vec![Metric::If, Metric::Nc, Metric::Vq, Metric::Ra],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("unknown sub-task: {0}")]
    UnknownSubTask(String),
    #[error("taxonomy file invalid: {0}")]
    Invalid(String),
    #[error("taxonomy io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
struct TaxonomyFile {
    version: u32,
    #[serde(rename = "subtask")]
    subtasks: Vec<SubTaskRecord>,
}

/// One row of the taxonomy data file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubTaskRecord {
    pub key: String,
    pub display: String,
    pub category: Category,
    pub complexity: Complexity,
    pub description: String,
}

/// The full taxonomy, loaded from a data file.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    pub version: u32,
    records: Vec<SubTaskRecord>,
    by_key: HashMap<String, usize>,
}

/// Normalize a sub-task name to its canonical key: lowercase, trimmed,
/// spaces and hyphens collapsed to single underscores.
pub fn normalize_key(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut last_sep = true;
    for ch in name.trim().chars() {
        if ch.is_whitespace() || ch == '-' || ch == '_' {
            if !last_sep {
                out.push('_');
                last_sep = true;
            }
        } else {
            for lc in ch.to_lowercase() {
                out.push(lc);
            }
            last_sep = false;
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}

impl Taxonomy {
    pub fn from_toml_str(s: &str) -> Result<Taxonomy, TaxonomyError> {
        let file: TaxonomyFile =
            toml::from_str(s).map_err(|e| TaxonomyError::Invalid(e.to_string()))?;
        let mut by_key = HashMap::new();
        for (i, rec) in file.subtasks.iter().enumerate() {
            if rec.key != normalize_key(&rec.key) {
                return Err(TaxonomyError::Invalid(format!(
                    "key not normalized: {}",
                    rec.key
                )));
            }
            if by_key.insert(rec.key.clone(), i).is_some() {
                return Err(TaxonomyError::Invalid(format!("duplicate key: {}", rec.key)));
            }
        }
        Ok(Taxonomy {
            version: file.version,
            records: file.subtasks,
            by_key,
        })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Taxonomy, TaxonomyError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// The embedded canonical taxonomy.
    pub fn default_taxonomy() -> &'static Taxonomy {
        static TAX: OnceLock<Taxonomy> = OnceLock::new();
        TAX.get_or_init(|| {
            Taxonomy::from_toml_str(include_str!("../data/taxonomy.toml"))
                .expect("embedded taxonomy is valid")
        })
    }

    pub fn records(&self) -> &[SubTaskRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Case-insensitive lookup by canonical key or display name.
    pub fn classify(&self, name: &str) -> Result<SubTask, TaxonomyError> {
        let key = normalize_key(name);
        let idx = self
            .by_key
            .get(&key)
            .ok_or_else(|| TaxonomyError::UnknownSubTask(name.to_string()))?;
        let rec = &self.records[*idx];
        Ok(SubTask {
            key: rec.key.clone(),
            category: rec.category,
            complexity: rec.complexity,
        })
    }

    pub fn display_name(&self, key: &str) -> Option<&str> {
        self.by_key
            .get(key)
            .map(|i| self.records[*i].display.as_str())
    }
}

/// Case-insensitive match against the 22 canonical names under the default
/// taxonomy.
pub fn classify_subtask(name: &str) -> Result<SubTask, TaxonomyError> {
    Taxonomy::default_taxonomy().classify(name)
}

/// Metric identifiers applicable to `subtask` under the benchmark protocol.
pub fn metric_set_for(subtask: &SubTask) -> Vec<Metric> {
    subtask.metric_set()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn has_22_subtasks_partitioned_7_5_5_5() {
        let tax = Taxonomy::default_taxonomy();
        assert_eq!(tax.len(), 22);
        let count = |c: Category| tax.records().iter().filter(|r| r.category == c).count();
        assert_eq!(count(Category::ObjectEditing), 7);
        assert_eq!(count(Category::AttributeEditing), 5);
        assert_eq!(count(Category::SceneEditing), 5);
        assert_eq!(count(Category::ReasoningEditing), 5);
    }

    #[test]
    fn complex_set_is_reasoning_plus_spatial_scene() {
        let tax = Taxonomy::default_taxonomy();
        for rec in tax.records() {
            let expect_complex = rec.category == Category::ReasoningEditing
                || rec.key == "viewpoint_transformation"
                || rec.key == "lens_zooming";
            assert_eq!(
                rec.complexity == Complexity::Complex,
                expect_complex,
                "{}",
                rec.key
            );
        }
    }

    #[test]
    fn classify_examples() {
        let st = classify_subtask("Style Transfer").unwrap();
        assert_eq!(st.category, Category::SceneEditing);
        assert_eq!(st.complexity, Complexity::Basic);

        let st = classify_subtask("implicit change edits").unwrap();
        assert_eq!(st.category, Category::ReasoningEditing);
        assert_eq!(st.complexity, Complexity::Complex);

        assert!(matches!(
            classify_subtask("Teleportation"),
            Err(TaxonomyError::UnknownSubTask(_))
        ));
    }

    #[test]
    fn classify_is_case_insensitive_and_idempotent() {
        let tax = Taxonomy::default_taxonomy();
        for rec in tax.records() {
            let upper = tax.classify(&rec.display.to_uppercase()).unwrap();
            let lower = tax.classify(&rec.display.to_lowercase()).unwrap();
            let by_key = tax.classify(&rec.key).unwrap();
            assert_eq!(upper, lower);
            assert_eq!(upper, by_key);
        }
    }

    #[test]
    fn names_pairwise_distinct_after_normalization() {
        let tax = Taxonomy::default_taxonomy();
        let mut keys: Vec<_> = tax
            .records()
            .iter()
            .map(|r| normalize_key(&r.display))
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 22);
    }

    #[test]
    fn ra_iff_complex() {
        let tax = Taxonomy::default_taxonomy();
        for rec in tax.records() {
            let st = tax.classify(&rec.key).unwrap();
            let has_ra = metric_set_for(&st).contains(&Metric::Ra);
            assert_eq!(has_ra, st.complexity == Complexity::Complex);
        }
    }

    #[test]
    fn metric_set_examples() {
        let basic = classify_subtask("Color Alteration").unwrap();
        assert_eq!(basic.metric_set(), vec![Metric::If, Metric::Nc, Metric::Vq]);
        let complex = classify_subtask("Spatial Reasoning").unwrap();
        assert_eq!(
            complex.metric_set(),
            vec![Metric::If, Metric::Nc, Metric::Vq, Metric::Ra]
        );
        let removal = classify_subtask("Subject Removal").unwrap();
        assert_eq!(removal.metric_set().len(), 3);
    }
}
