//! Fixed label vocabularies: object categories, colors, number words.

use crate::error::{Error, Result};

pub const CATEGORIES: [&str; 14] = [
    "car",
    "person",
    "truck",
    "sign",
    "wall",
    "bus",
    "tree",
    "building",
    "sidewalk",
    "bicycle",
    "motorcycle",
    "barrier",
    "pole",
    "cone",
];

/// Labels a noisy detector emits instead of the true category.
/// Index-aligned with [`CATEGORIES`].
pub const CONFUSIONS: [&str; 14] = [
    "van", "mannequin", "trailer", "billboard", "fence", "train", "bush", "tower", "road",
    "scooter", "moped", "railing", "post", "bollard",
];

pub const COLORS: [&str; 8] = ["red", "green", "blue", "black", "white", "orange", "yellow", "gray"];

pub const NUMBER_WORDS: [&str; 20] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
    "twenty",
];

pub const YES: &str = "yes";
pub const NO: &str = "no";

pub fn category_index(label: &str) -> Result<usize> {
    CATEGORIES
        .iter()
        .position(|c| *c == label)
        .ok_or_else(|| Error::UnknownLabel { kind: "category", label: label.to_string() })
}

pub fn color_index(label: &str) -> Result<usize> {
    COLORS
        .iter()
        .position(|c| *c == label)
        .ok_or_else(|| Error::UnknownLabel { kind: "color", label: label.to_string() })
}

/// `1..=20` to its English word.
pub fn number_word(n: usize) -> Option<&'static str> {
    n.checked_sub(1).and_then(|i| NUMBER_WORDS.get(i)).copied()
}

pub fn word_number(word: &str) -> Option<usize> {
    NUMBER_WORDS.iter().position(|w| *w == word).map(|i| i + 1)
}

pub fn confusion_of(category: &str) -> Result<&'static str> {
    category_index(category).map(|i| CONFUSIONS[i])
}

pub fn plural(category: &str) -> String {
    match category {
        "person" => "people".to_string(),
        "bus" => "buses".to_string(),
        c => format!("{c}s"),
    }
}

/// Maps a question token onto a category label, undoing the plural forms
/// produced by [`plural`]. Returns `None` for non-category tokens.
pub fn singular_category(token: &str) -> Option<&'static str> {
    let stem = match token {
        "people" => "person",
        "buses" => "bus",
        t => t,
    };
    if let Some(c) = CATEGORIES.iter().find(|c| **c == stem) {
        return Some(c);
    }
    let stripped = stem.strip_suffix('s')?;
    CATEGORIES.iter().find(|c| **c == stripped).copied()
}
