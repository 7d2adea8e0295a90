//! Template question generation and annotator simulation.
//!
//! Color and position questions only mention categories that occur exactly
//! once in the whole image set, so the gold answer is never ambiguous.
//! Position questions follow the extreme-object rule: the answer is always
//! the left-, right-, top- or bottom-most object of one image, and the
//! subject is its nearest neighbour by center distance. Exact ties in either
//! step drop the candidate instead of picking one arbitrarily.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{confusion_of, number_word, plural, word_number, CATEGORIES, COLORS, NO, YES};
use crate::scenes::{ImageSet, SceneTruth, NUM_IMAGES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    Color,
    Position,
    Count,
    Existence,
    /// Imported or otherwise untyped questions.
    Main,
}

impl QType {
    pub const ALL: [QType; 5] = [QType::Color, QType::Position, QType::Count, QType::Existence, QType::Main];

    pub fn as_str(&self) -> &'static str {
        match self {
            QType::Color => "color",
            QType::Position => "position",
            QType::Count => "count",
            QType::Existence => "existence",
            QType::Main => "main",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub qtype: QType,
    pub target_categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeric_target: Option<u32>,
}

impl Question {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }
}

/// Lowercases and splits on whitespace, dropping surrounding punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// A question with its true answer, before annotators are simulated.
#[derive(Debug, Clone, PartialEq)]
pub struct Draft {
    pub question: Question,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub image_set_ref: usize,
    pub question: Question,
    pub answers: Vec<String>,
    pub gold: String,
    #[serde(default)]
    pub pretrain: bool,
}

impl QASample {
    pub fn new(image_set_ref: usize, draft: Draft, answers: [String; 3], pretrain: bool) -> Self {
        Self { image_set_ref, question: draft.question, answers: answers.to_vec(), gold: draft.gold, pretrain }
    }
}

fn maybe_corrupt(category: &str, detector_noise: f64, rng: &mut impl Rng) -> String {
    if detector_noise > 0.0 && rng.random::<f64>() < detector_noise {
        confusion_of(category).expect("generated categories are in the vocabulary").to_string()
    } else {
        category.to_string()
    }
}

/// Categories with exactly one true object in the set.
fn unique_categories(scene: &SceneTruth) -> Vec<&'static str> {
    CATEGORIES.iter().copied().filter(|c| scene.count_of(c) == 1).collect()
}

pub fn gen_color_question(scene: &SceneTruth, detector_noise: f64, rng: &mut impl Rng) -> Option<Draft> {
    let unique = unique_categories(scene);
    let category = *unique.choose(rng)?;
    let object = scene.objects.iter().find(|o| o.category == category)?;
    let label = maybe_corrupt(category, detector_noise, rng);
    Some(Draft {
        question: Question {
            text: format!("what is the color of the {label}?"),
            qtype: QType::Color,
            target_categories: vec![label],
            numeric_target: None,
        },
        gold: object.color.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    fn phrase(&self) -> &'static str {
        match self {
            Relation::LeftOf => "to the left of",
            Relation::RightOf => "to the right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Key whose minimum selects the extreme object for this relation.
    fn key(&self, (cx, cy): (f64, f64)) -> f64 {
        match self {
            Relation::LeftOf => cx,
            Relation::RightOf => -cx,
            Relation::Above => cy,
            Relation::Below => -cy,
        }
    }
}

/// Index of the unique minimizer; `None` on an exact tie.
fn unique_argmin(values: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    let mut tied = false;
    for (i, v) in values {
        match best {
            None => best = Some((i, v)),
            Some((_, b)) if v < b => {
                best = Some((i, v));
                tied = false;
            }
            Some((_, b)) if v == b => tied = true,
            _ => {}
        }
    }
    if tied {
        None
    } else {
        best.map(|(i, _)| i)
    }
}

/// All unambiguous position questions of one scene, in a fixed order.
pub fn position_candidates(set: &ImageSet, scene: &SceneTruth) -> Vec<(Relation, String, String)> {
    let unique: BTreeSet<&str> = unique_categories(scene).into_iter().collect();
    let mut out = Vec::new();
    for img in 0..NUM_IMAGES {
        // (category, center) of every true-object appearance in this image
        let objs: Vec<(&str, (f64, f64))> = set
            .proposals
            .iter()
            .filter(|p| p.image_idx == img && p.duplicate_of.is_none())
            .map(|p| (p.category.as_str(), p.bbox.center()))
            .collect();
        if objs.len() < 2 {
            continue;
        }
        for rel in Relation::ALL {
            let Some(e) = unique_argmin(objs.iter().enumerate().map(|(i, (_, c))| (i, rel.key(*c)))) else {
                continue;
            };
            let (ex, ey) = objs[e].1;
            let dist = |(x, y): (f64, f64)| ((x - ex).powi(2) + (y - ey).powi(2)).sqrt();
            let Some(s) =
                unique_argmin(objs.iter().enumerate().filter(|(i, _)| *i != e).map(|(i, (_, c))| (i, dist(*c))))
            else {
                continue;
            };
            // the extreme must be strictly beyond the subject along the relation
            if rel.key(objs[e].1) >= rel.key(objs[s].1) {
                continue;
            }
            let (answer, subject) = (objs[e].0, objs[s].0);
            if answer != subject && unique.contains(answer) && unique.contains(subject) {
                out.push((rel, subject.to_string(), answer.to_string()));
            }
        }
    }
    out
}

pub fn gen_position_question(
    set: &ImageSet,
    scene: &SceneTruth,
    detector_noise: f64,
    rng: &mut impl Rng,
) -> Option<Draft> {
    let candidates = position_candidates(set, scene);
    let (rel, subject, answer) = candidates.choose(rng)?.clone();
    let label = maybe_corrupt(&subject, detector_noise, rng);
    Some(Draft {
        question: Question {
            text: format!("what is {} the {label}?", rel.phrase()),
            qtype: QType::Position,
            target_categories: vec![label],
            numeric_target: None,
        },
        gold: answer,
    })
}

/// Count question about `target`, or about a random present category.
/// Returns `None` when nothing is present or the count has no number word.
pub fn gen_count_question(scene: &SceneTruth, target: Option<&str>, rng: &mut impl Rng) -> Option<Draft> {
    let category = match target {
        Some(t) => CATEGORIES.iter().copied().find(|c| *c == t)?,
        None => *scene.present_categories().choose(rng)?,
    };
    let count = scene.count_of(category);
    let word = number_word(count)?;
    Some(Draft {
        question: Question {
            text: format!("how many {} are there?", plural(category)),
            qtype: QType::Count,
            target_categories: vec![category.to_string()],
            numeric_target: Some(count as u32),
        },
        gold: word.to_string(),
    })
}

pub fn gen_existence_question(scene: &SceneTruth, rng: &mut impl Rng) -> Draft {
    let present = scene.present_categories();
    let absent: Vec<&str> = CATEGORIES.iter().copied().filter(|c| !present.contains(c)).collect();
    let want_yes = rng.random::<bool>();
    let (category, answer) = match (want_yes, present.choose(rng), absent.choose(rng)) {
        (true, Some(c), _) | (false, Some(c), None) => (*c, YES),
        (_, _, Some(c)) => (*c, NO),
        (_, None, None) => unreachable!("category vocabulary is nonempty"),
    };
    Draft {
        question: Question {
            text: format!("is there a {category} in the scene?"),
            qtype: QType::Existence,
            target_categories: vec![category.to_string()],
            numeric_target: None,
        },
        gold: answer.to_string(),
    }
}

/// Three independent annotators; each errs with probability `error`.
///
/// A wrong count is off by one, a wrong color is another palette color, a
/// wrong yes/no is flipped, anything else is another category label.
pub fn simulate_annotators(gold: &str, qtype: QType, error: f64, rng: &mut impl Rng) -> [String; 3] {
    std::array::from_fn(|_| {
        if error > 0.0 && rng.random::<f64>() < error {
            perturb(gold, qtype, rng)
        } else {
            gold.to_string()
        }
    })
}

fn perturb(gold: &str, qtype: QType, rng: &mut impl Rng) -> String {
    let other = |pool: &[&str], rng: &mut _| -> String {
        let rest: Vec<&str> = pool.iter().copied().filter(|l| *l != gold).collect();
        rest.choose(rng).map(|s| s.to_string()).unwrap_or_else(|| gold.to_string())
    };
    if let Some(n) = word_number(gold) {
        let m = match n {
            1 => 2,
            20 => 19,
            _ if rng.random::<bool>() => n + 1,
            _ => n - 1,
        };
        return number_word(m).expect("1..=20").to_string();
    }
    match (qtype, gold) {
        (_, YES) => NO.to_string(),
        (_, NO) => YES.to_string(),
        (QType::Color, _) => other(&COLORS, rng),
        _ => other(&CATEGORIES, rng),
    }
}

/// Dense, lexicographically ordered answer label index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerVocab {
    labels: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl AnswerVocab {
    pub fn from_labels(labels: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = labels.into_iter().collect();
        let labels: Vec<String> = set.into_iter().collect();
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self { labels, index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn lookup(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn merged(&self, other: &AnswerVocab) -> AnswerVocab {
        AnswerVocab::from_labels(self.labels.iter().chain(other.labels.iter()).cloned())
    }

    pub fn is_superset_of(&self, other: &AnswerVocab) -> bool {
        other.labels.iter().all(|l| self.index.contains_key(l))
    }
}

impl From<Vec<String>> for AnswerVocab {
    fn from(v: Vec<String>) -> Self {
        AnswerVocab::from_labels(v)
    }
}

impl From<AnswerVocab> for Vec<String> {
    fn from(v: AnswerVocab) -> Self {
        v.labels
    }
}

/// Every label used by an annotator or as gold answer.
pub fn build_vocab<'a>(samples: impl IntoIterator<Item = &'a QASample>) -> Result<AnswerVocab> {
    let mut labels = BTreeSet::new();
    for s in samples {
        labels.extend(s.answers.iter().cloned());
        labels.insert(s.gold.clone());
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("cannot build an answer vocabulary from zero samples"));
    }
    Ok(AnswerVocab::from_labels(labels))
}
