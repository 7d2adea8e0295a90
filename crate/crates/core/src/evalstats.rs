//! VQA-accuracy, breakdowns, language-only ablation and answer-bias audits.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sha256_hex, Dataset};
use crate::error::{Error, Result};
use crate::labels::word_number;
use crate::model::Model;
use crate::qgen::{tokenize, Draft, QASample, QType, Question};

/// Tokens kept by [`question_type_key`].
pub const PREFIX_LEN: usize = 3;
/// Prefixes listed in distribution tables.
pub const TOP_PREFIXES: usize = 15;

/// 1 with two or more supporting annotators, 0.5 with one, 0 otherwise.
/// Matching is exact string equality.
pub fn vqa_accuracy(prediction: &str, answers: &[String]) -> Result<f64> {
    if answers.len() != 3 {
        return Err(Error::InvalidConfig(format!("expected 3 annotator answers, got {}", answers.len())));
    }
    Ok(match answers.iter().filter(|a| *a == prediction).count() {
        0 => 0.0,
        1 => 0.5,
        _ => 1.0,
    })
}

pub fn question_type_key(question: &str) -> String {
    question_prefix(question, PREFIX_LEN)
}

pub fn question_prefix(question: &str, len: usize) -> String {
    tokenize(question).into_iter().take(len).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub key: String,
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCount {
    pub answer: String,
    pub count: usize,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixAnswers {
    pub prefix: String,
    pub samples: usize,
    /// Gold answers, most frequent first, ties by label.
    pub answers: Vec<AnswerCount>,
    pub top2_share: f64,
}

/// Gold-answer frequencies for the [`TOP_PREFIXES`] most frequent question
/// prefixes. Prefix ties break alphabetically.
pub fn answer_distribution<'a>(samples: impl IntoIterator<Item = &'a QASample>) -> Vec<PrefixAnswers> {
    let mut by_prefix: HashMap<String, BTreeMap<&str, usize>> = HashMap::new();
    for s in samples {
        *by_prefix.entry(question_type_key(&s.question.text)).or_default().entry(s.gold.as_str()).or_default() += 1;
    }
    let mut rows: Vec<PrefixAnswers> = by_prefix
        .into_iter()
        .map(|(prefix, counts)| {
            let total: usize = counts.values().sum();
            let mut answers: Vec<AnswerCount> = counts
                .into_iter()
                .map(|(a, c)| AnswerCount { answer: a.to_string(), count: c, frequency: c as f64 / total as f64 })
                .collect();
            answers.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.answer.cmp(&b.answer)));
            let top2: usize = answers.iter().take(2).map(|a| a.count).sum();
            PrefixAnswers { prefix, samples: total, answers, top2_share: top2 as f64 / total as f64 }
        })
        .collect();
    rows.sort_by(|a, b| b.samples.cmp(&a.samples).then_with(|| a.prefix.cmp(&b.prefix)));
    rows.truncate(TOP_PREFIXES);
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// sha256 of the serialized checkpoint.
    pub checkpoint_id: String,
    /// Every proposal was removed before the forward pass.
    pub language_only: bool,
    pub samples: usize,
    pub overall_accuracy: f64,
    /// Equal to `overall_accuracy` when `language_only` is set.
    pub language_only_accuracy: Option<f64>,
    pub per_qtype: Vec<Breakdown>,
    /// Count questions grouped by their gold number word.
    pub per_count_answer: Vec<Breakdown>,
    pub per_prefix: Vec<Breakdown>,
    pub answer_distribution: Vec<PrefixAnswers>,
    /// Predicted answer per sample, in dataset order.
    pub predictions: Vec<String>,
}

fn breakdowns<K: Ord + Clone>(keys: &[K], scores: &[f64], name: impl Fn(&K) -> String) -> Vec<Breakdown> {
    let mut groups: BTreeMap<K, (usize, f64)> = BTreeMap::new();
    for (k, s) in keys.iter().zip(scores) {
        let g = groups.entry(k.clone()).or_default();
        g.0 += 1;
        g.1 += s;
    }
    groups.into_iter().map(|(k, (n, sum))| Breakdown { key: name(&k), samples: n, accuracy: sum / n as f64 }).collect()
}

/// Argmax prediction for every sample, ties to the lowest answer index.
/// With `scrub_visual` every proposal is removed, so predictions depend on
/// the question alone.
pub fn evaluate(model: &Model, data: &Dataset, scrub_visual: bool) -> Result<EvalReport> {
    let gen = data
        .gen_config
        .as_ref()
        .ok_or_else(|| Error::Unsupported("evaluation needs image sets; imported annotations only support analysis".into()))?;
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty"));
    }
    if gen.feature_dim != model.config().feature_dim {
        return Err(Error::VocabMismatch(format!(
            "dataset feature_dim {} but model expects {}",
            gen.feature_dim,
            model.config().feature_dim
        )));
    }
    let preds: Vec<usize> = data
        .samples
        .par_iter()
        .map(|s| {
            let input = model.input(&s.qa.question.text, &s.image_set)?;
            let scrub: Vec<usize> = if scrub_visual { (0..input.n()).collect() } else { Vec::new() };
            Ok(model.forward(&input, &scrub)?.argmax())
        })
        .collect::<Result<_>>()?;
    let predictions: Vec<String> = preds.iter().map(|&p| model.answers().label(p).to_string()).collect();
    let scores: Vec<f64> =
        data.qa().zip(&predictions).map(|(q, p)| vqa_accuracy(p, &q.answers)).collect::<Result<_>>()?;
    let n = scores.len();
    let overall = scores.iter().sum::<f64>() / n as f64;

    let qtypes: Vec<QType> = data.qa().map(|q| q.question.qtype).collect();
    let (count_keys, count_scores): (Vec<(usize, String)>, Vec<f64>) = data
        .qa()
        .zip(&scores)
        .filter(|(q, _)| q.question.qtype == QType::Count)
        .map(|(q, s)| ((word_number(&q.gold).unwrap_or(usize::MAX), q.gold.clone()), *s))
        .unzip();
    let prefixes: Vec<String> = data.qa().map(|q| question_type_key(&q.question.text)).collect();
    let distribution = answer_distribution(data.qa());
    let mut per_prefix = breakdowns(&prefixes, &scores, |k| k.clone());
    per_prefix.retain(|b| distribution.iter().any(|d| d.prefix == b.key));
    per_prefix.sort_by(|a, b| b.samples.cmp(&a.samples).then_with(|| a.key.cmp(&b.key)));

    Ok(EvalReport {
        checkpoint_id: sha256_hex(model.to_checkpoint()?.to_json()?.as_bytes()),
        language_only: scrub_visual,
        samples: n,
        overall_accuracy: overall,
        language_only_accuracy: scrub_visual.then_some(overall),
        per_qtype: breakdowns(&qtypes, &scores, |q| q.as_str().to_string()),
        per_count_answer: breakdowns(&count_keys, &count_scores, |k| k.1.clone()),
        per_prefix,
        answer_distribution: distribution,
        predictions,
    })
}

impl EvalReport {
    pub fn accuracy_for(&self, qtype: QType) -> Option<f64> {
        self.per_qtype.iter().find(|b| b.key == qtype.as_str()).map(|b| b.accuracy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `report.json` plus one CSV per breakdown into `dir`.
    ///
    /// Columns: `summary.csv` has checkpoint_id, language_only, samples,
    /// overall_accuracy. `per_qtype.csv`, `per_count_answer.csv` and
    /// `per_prefix.csv` have key, samples, accuracy. `answer_distribution.csv`
    /// has prefix, prefix_samples, top2_share, answer, count, frequency.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        w.write_record(["checkpoint_id", "language_only", "samples", "overall_accuracy"])?;
        w.write_record([
            self.checkpoint_id.clone(),
            self.language_only.to_string(),
            self.samples.to_string(),
            self.overall_accuracy.to_string(),
        ])?;
        w.flush()?;
        for (name, rows) in
            [("per_qtype", &self.per_qtype), ("per_count_answer", &self.per_count_answer), ("per_prefix", &self.per_prefix)]
        {
            let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        write_distribution_csv(&self.answer_distribution, &dir.join("answer_distribution.csv"))
    }
}

pub fn write_distribution_csv(rows: &[PrefixAnswers], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["prefix", "prefix_samples", "top2_share", "answer", "count", "frequency"])?;
    for p in rows {
        for a in &p.answers {
            w.write_record([
                p.prefix.clone(),
                p.samples.to_string(),
                p.top2_share.to_string(),
                a.answer.clone(),
                a.count.to_string(),
                a.frequency.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Which JSON fields hold the question, the annotator answers and the id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldMap {
    pub question: String,
    pub answers: String,
    pub id: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self { question: "question".into(), answers: "answers".into(), id: "id".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Imported {
    pub dataset: Dataset,
    pub warnings: Vec<ImportWarning>,
}

/// Reads a JSON array or JSON Lines file of annotations. Line numbers in
/// errors count records for a JSON array and physical lines otherwise.
/// Answer lists are padded by repeating their last entry or truncated to
/// three, with a warning. Ids may be integers or strings; a non-numeric
/// string id falls back to the record's position.
pub fn import_annotations(path: &Path, fields: &FieldMap) -> Result<Imported> {
    let text = fs::read_to_string(path)?;
    let records: Vec<(usize, serde_json::Value)> = if text.trim_start().starts_with('[') {
        let arr: Vec<serde_json::Value> = serde_json::from_str(&text).map_err(|e| Error::schema(e.line(), e.to_string()))?;
        arr.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect()
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map(|v| (i + 1, v)).map_err(|e| Error::schema(i + 1, e.to_string())))
            .collect::<Result<_>>()?
    };
    let mut warnings = Vec::new();
    let mut qa = Vec::with_capacity(records.len());
    for (ordinal, (line, rec)) in records.into_iter().enumerate() {
        let field = |name: &str| rec.get(name).ok_or_else(|| Error::schema(line, format!("missing field `{name}`")));
        let question = field(&fields.question)?
            .as_str()
            .filter(|q| !tokenize(q).is_empty())
            .ok_or_else(|| Error::schema(line, format!("`{}` must be a non-empty string", fields.question)))?
            .to_string();
        let mut answers: Vec<String> = field(&fields.answers)?
            .as_array()
            .ok_or_else(|| Error::schema(line, format!("`{}` must be an array", fields.answers)))?
            .iter()
            .map(|a| match a {
                serde_json::Value::String(s) => Ok(s.trim().to_lowercase()),
                serde_json::Value::Object(o) => o
                    .get("answer")
                    .and_then(|x| x.as_str())
                    .map(|s| s.trim().to_lowercase())
                    .ok_or_else(|| Error::schema(line, "answer objects need an `answer` string")),
                _ => Err(Error::schema(line, "answers must be strings")),
            })
            .collect::<Result<_>>()?;
        if answers.is_empty() {
            return Err(Error::schema(line, "no annotator answers"));
        }
        if answers.len() != 3 {
            warnings.push(ImportWarning { line, message: format!("{} answers normalized to 3", answers.len()) });
            let last = answers.last().cloned().expect("non-empty");
            answers.resize(3, last);
        }
        let id = match field(&fields.id)? {
            serde_json::Value::Number(n) => {
                n.as_u64().ok_or_else(|| Error::schema(line, "id must be a non-negative integer or a string"))? as usize
            }
            serde_json::Value::String(s) => s.parse().unwrap_or(ordinal),
            _ => return Err(Error::schema(line, "id must be a non-negative integer or a string")),
        };
        let gold = majority(&answers);
        let draft = Draft {
            question: Question { text: question, qtype: QType::Main, target_categories: Vec::new(), numeric_target: None },
            gold,
        };
        let [a, b, c]: [String; 3] = answers.try_into().expect("normalized to three");
        qa.push(QASample::new(id, draft, [a, b, c], false));
    }
    Ok(Imported { dataset: Dataset::from_annotations(qa), warnings })
}

/// Most common answer, ties to the earliest.
fn majority(answers: &[String]) -> String {
    let count = |a: &String| answers.iter().filter(|b| *b == a).count();
    let best = answers.iter().map(count).max().unwrap_or(0);
    answers.iter().find(|a| count(a) == best).cloned().unwrap_or_default()
}

/// Question-side audit usable on generated or imported data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub samples: usize,
    pub per_qtype_samples: BTreeMap<String, usize>,
    pub answer_distribution: Vec<PrefixAnswers>,
    pub warnings: Vec<ImportWarning>,
}

impl BiasReport {
    pub fn new(data: &Dataset, warnings: Vec<ImportWarning>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("nothing to analyze"));
        }
        let mut per_qtype_samples = BTreeMap::new();
        for q in data.qa() {
            *per_qtype_samples.entry(q.question.qtype.as_str().to_string()).or_default() += 1;
        }
        Ok(Self { samples: data.len(), per_qtype_samples, answer_distribution: answer_distribution(data.qa()), warnings })
    }
}
