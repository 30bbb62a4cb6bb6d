//! The seven-category rhetorical taxonomy for related-work sentences.
//!
//! Every other module indexes categories through [`Category::index`], so the
//! order of [`all_categories`] is load-bearing: it fixes the row and column
//! order of confusion matrices, report tables and count-matrix CSV files.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of categories in the taxonomy.
pub const NUM_CATEGORIES: usize = 7;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("unknown label: {0:?}")]
    UnknownLabel(String),
}

/// Rhetorical role of a sentence within a literature review.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Overall,
    ResearchGap,
    Description,
    Result,
    Limitation,
    Extension,
    Other,
}

/// Whether a category talks about the research area or about one study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Topic,
    Study,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryDefinition {
    pub category: Category,
    pub level: Level,
    pub definition_text: &'static str,
}

const ALL: [Category; NUM_CATEGORIES] = [
    Category::Overall,
    Category::ResearchGap,
    Category::Description,
    Category::Result,
    Category::Limitation,
    Category::Extension,
    Category::Other,
];

/// The seven categories in their fixed reporting order.
pub fn all_categories() -> [Category; NUM_CATEGORIES] {
    ALL
}

impl Category {
    /// Position in [`all_categories`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Category> {
        ALL.get(index).copied()
    }

    /// Human-readable name used in prompts and reports.
    pub fn canonical_name(self) -> &'static str {
        match self {
            Category::Overall => "Overall",
            Category::ResearchGap => "Research Gap",
            Category::Description => "Description",
            Category::Result => "Result",
            Category::Limitation => "Limitation",
            Category::Extension => "Extension",
            Category::Other => "Other",
        }
    }

    /// Machine-safe identifier used in data files. Bijective with
    /// [`Category::canonical_name`].
    pub fn snake_name(self) -> &'static str {
        match self {
            Category::Overall => "overall",
            Category::ResearchGap => "research_gap",
            Category::Description => "description",
            Category::Result => "result",
            Category::Limitation => "limitation",
            Category::Extension => "extension",
            Category::Other => "other",
        }
    }

    pub fn from_snake(name: &str) -> Option<Category> {
        ALL.iter().copied().find(|c| c.snake_name() == name)
    }

    pub fn level(self) -> Level {
        match self {
            Category::Overall | Category::ResearchGap => Level::Topic,
            Category::Description
            | Category::Result
            | Category::Limitation
            | Category::Extension => Level::Study,
            Category::Other => Level::None,
        }
    }

    pub fn definition(self) -> CategoryDefinition {
        CategoryDefinition {
            category: self,
            level: self.level(),
            definition_text: definition_text(self),
        }
    }
}

fn definition_text(category: Category) -> &'static str {
    match category {
        Category::Overall => {
            "The sentence gives a general overview of the research area as a whole: \
             what the topic is, how the field has developed, or a summary of the body \
             of work, without focusing on any single study."
        }
        Category::ResearchGap => {
            "The sentence identifies an unresolved issue, open question or lack of \
             research in the field as a whole, signalling that further work on the \
             topic is needed."
        }
        Category::Description => {
            "The sentence describes a specific study: its aims, the problem it \
             addresses, the approach, method, data or system it uses."
        }
        Category::Result => {
            "The sentence reports the findings, outcomes or performance obtained by a \
             specific study."
        }
        Category::Limitation => {
            "The sentence points out a methodological or conceptual shortcoming, \
             weakness or constraint of a specific study."
        }
        Category::Extension => {
            "The sentence explains how the current work builds on, departs from or \
             extends previous studies: new ideas, contrasting perspectives or \
             elaborations of existing approaches that motivate the current work."
        }
        Category::Other => {
            "The sentence does not fit any of the categories above, or its role cannot \
             be determined with confidence."
        }
    }
}

/// All seven definitions in reporting order.
pub fn category_definitions() -> Vec<CategoryDefinition> {
    ALL.iter().map(|c| c.definition()).collect()
}

/// Trims, collapses internal whitespace runs, strips trailing `.`, `:` and `,`
/// and lowercases.
pub fn normalize_label(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let stripped =
        collapsed.trim_end_matches(|c: char| matches!(c, '.' | ':' | ',') || c.is_whitespace());
    stripped.to_lowercase()
}

/// Resolves a canonical category name, tolerating case, whitespace and
/// trailing punctuation differences.
pub fn parse_label(text: &str) -> Result<Category, SchemaError> {
    let normalized = normalize_label(text);
    ALL.iter()
        .copied()
        .find(|c| c.canonical_name().to_lowercase() == normalized)
        .ok_or_else(|| SchemaError::UnknownLabel(text.to_string()))
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

/// Accepts either the snake identifier or anything [`parse_label`] accepts.
impl FromStr for Category {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::from_snake(s.trim()).map_or_else(|| parse_label(s), Ok)
    }
}

impl Serialize for Category {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.snake_name())
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
