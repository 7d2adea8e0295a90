//! Generated question sets and their JSON Lines form.
//!
//! File layout: one header line `{format_version, gen_config}` followed by one
//! line per sample. Features are either embedded or recomputed from the
//! header's seeds on load; both give bit-identical samples.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::CATEGORIES;
use crate::qgen::{
    build_vocab, gen_color_question, gen_count_question, gen_existence_question, gen_position_question,
    simulate_annotators, AnswerVocab, Draft, QASample, QType, Question,
};
use crate::scenes::{
    draw_biased_count, fill_features, generate_scene, sample_seed, FeatureSynth, GenConfig, ImageSet, ObjectProposal,
    SceneTruth, TrueObject,
};

pub const DATASET_VERSION: u32 = 1;
/// Fresh scenes tried before a color or position question gives up.
const SCENE_TRIES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_set: ImageSet,
    pub truth: SceneTruth,
    pub qa: QASample,
}

impl Sample {
    pub fn qtype(&self) -> QType {
        self.qa.question.qtype
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `None` for imported annotation files, which carry no images.
    pub gen_config: Option<GenConfig>,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    gen_config: Option<GenConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    sample_id: usize,
    question: Question,
    question_type: QType,
    answers: Vec<String>,
    gold: String,
    #[serde(default)]
    pretrain: bool,
    proposals: Vec<ObjectProposal>,
    objects: Vec<TrueObject>,
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let synth = FeatureSynth::from_config(cfg)?;
    let samples =
        (0..cfg.num_samples).into_par_iter().map(|id| generate_sample(cfg, &synth, id)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { gen_config: Some(cfg.clone()), samples })
}

/// Sample `id` depends only on `(cfg, id)`, so any generation order gives
/// the same dataset.
pub fn generate_sample(cfg: &GenConfig, synth: &FeatureSynth, id: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, id));
    let m = cfg.question_mix;
    let pick = WeightedIndex::new([m.color, m.position, m.count, m.existence])
        .map_err(|e| Error::InvalidConfig(format!("question_mix: {e}")))?;
    let qtype = [QType::Color, QType::Position, QType::Count, QType::Existence][pick.sample(&mut rng)];

    let (set, truth, draft) = match qtype {
        QType::Count => {
            let category = *CATEGORIES.choose(&mut rng).expect("categories");
            let count = draw_biased_count(&mut rng, cfg.bias_skew);
            let (set, truth) = generate_scene(cfg, synth, id, &mut rng, Some((category, count)))?;
            let draft = gen_count_question(&truth, Some(category), &mut rng)
                .ok_or_else(|| Error::OutOfRange(format!("no number word for {count}")))?;
            (set, truth, draft)
        }
        QType::Existence => {
            let (set, truth) = generate_scene(cfg, synth, id, &mut rng, None)?;
            let draft = gen_existence_question(&truth, &mut rng);
            (set, truth, draft)
        }
        _ => visual_question(cfg, synth, id, qtype, &mut rng)?,
    };
    let answers = simulate_annotators(&draft.gold, draft.question.qtype, cfg.annotator_error, &mut rng);
    let qa = QASample::new(id, draft, answers, cfg.pretrain);
    Ok(Sample { image_set: set, truth, qa })
}

/// Color and position questions need a unique object; draw scenes until one
/// qualifies. Main sets fall back to an existence question, pretrain sets
/// (which may hold only color/position) fail instead.
fn visual_question(
    cfg: &GenConfig,
    synth: &FeatureSynth,
    id: usize,
    qtype: QType,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageSet, SceneTruth, Draft)> {
    let mut last = None;
    for _ in 0..SCENE_TRIES {
        let (set, truth) = generate_scene(cfg, synth, id, rng, None)?;
        let draft = match qtype {
            QType::Color => gen_color_question(&truth, cfg.detector_noise, rng),
            _ => gen_position_question(&set, &truth, cfg.detector_noise, rng),
        };
        if let Some(d) = draft {
            return Ok((set, truth, d));
        }
        last = Some((set, truth));
    }
    if cfg.pretrain {
        return Err(Error::InvalidConfig(format!(
            "sample {id}: no {} question after {SCENE_TRIES} scenes; allow more objects per image",
            qtype.as_str()
        )));
    }
    let (set, truth) = last.expect("at least one scene");
    let draft = gen_existence_question(&truth, rng);
    Ok((set, truth, draft))
}

impl Dataset {
    /// Language-only data, e.g. from an annotation importer.
    pub fn from_annotations(qa: Vec<QASample>) -> Self {
        let samples = qa
            .into_iter()
            .map(|qa| Sample {
                image_set: ImageSet { sample_id: qa.image_set_ref, proposals: Vec::new() },
                truth: SceneTruth { objects: Vec::new() },
                qa,
            })
            .collect();
        Self { gen_config: None, samples }
    }

    pub fn has_images(&self) -> bool {
        self.gen_config.is_some()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn qa(&self) -> impl Iterator<Item = &QASample> {
        self.samples.iter().map(|s| &s.qa)
    }

    pub fn answer_vocab(&self) -> Result<AnswerVocab> {
        build_vocab(self.qa())
    }

    /// First `n` samples and the rest.
    pub fn split_at(mut self, n: usize) -> (Dataset, Dataset) {
        let rest = self.samples.split_off(n.min(self.samples.len()));
        let cfg = self.gen_config.clone();
        (self, Dataset { gen_config: cfg, samples: rest })
    }

    pub fn to_jsonl(&self, embed_features: bool) -> Result<String> {
        let mut out = serde_json::to_string(&Header { format_version: DATASET_VERSION, gen_config: self.gen_config.clone() })?;
        out.push('\n');
        for s in &self.samples {
            let proposals = s
                .image_set
                .proposals
                .iter()
                .map(|p| ObjectProposal { feature: if embed_features { p.feature.clone() } else { Vec::new() }, ..p.clone() })
                .collect();
            let line = SampleLine {
                sample_id: s.image_set.sample_id,
                question: s.qa.question.clone(),
                question_type: s.qa.question.qtype,
                answers: s.qa.answers.clone(),
                gold: s.qa.gold.clone(),
                pretrain: s.qa.pretrain,
                proposals,
                objects: s.truth.objects.clone(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(Error::EmptyInput("dataset file has no header line"))?;
        let header: Header = serde_json::from_str(first).map_err(|e| Error::schema(1, format!("header: {e}")))?;
        if header.format_version != DATASET_VERSION {
            return Err(Error::schema(1, format!("unsupported format_version {}", header.format_version)));
        }
        let synth = match &header.gen_config {
            Some(cfg) => {
                cfg.validate().map_err(|e| Error::schema(1, e.to_string()))?;
                Some(FeatureSynth::from_config(cfg)?)
            }
            None => None,
        };
        let mut samples = Vec::new();
        for (idx, raw) in lines {
            let line_no = idx + 1;
            let l: SampleLine = serde_json::from_str(raw).map_err(|e| Error::schema(line_no, e.to_string()))?;
            if l.question_type != l.question.qtype {
                return Err(Error::schema(line_no, "question_type disagrees with question.qtype"));
            }
            if l.answers.len() != 3 {
                return Err(Error::schema(line_no, format!("expected 3 answers, found {}", l.answers.len())));
            }
            let mut set = ImageSet { sample_id: l.sample_id, proposals: l.proposals };
            match (&synth, &header.gen_config) {
                (Some(synth), Some(cfg)) => {
                    let embedded = set.proposals.iter().filter(|p| !p.feature.is_empty()).count();
                    if embedded == 0 {
                        fill_features(&mut set, cfg.seed, synth).map_err(|e| Error::schema(line_no, e.to_string()))?;
                    } else if embedded != set.n() || set.proposals.iter().any(|p| p.feature.len() != cfg.feature_dim) {
                        return Err(Error::schema(line_no, "embedded features missing or of the wrong dimension"));
                    }
                }
                _ if !set.is_empty() => {
                    return Err(Error::schema(line_no, "proposals present but header has no gen_config"));
                }
                _ => {}
            }
            let qa = QASample {
                image_set_ref: l.sample_id,
                question: l.question,
                answers: l.answers,
                gold: l.gold,
                pretrain: l.pretrain,
            };
            samples.push(Sample { image_set: set, truth: SceneTruth { objects: l.objects }, qa });
        }
        Ok(Self { gen_config: header.gen_config, samples })
    }

    pub fn write_jsonl(&self, path: &Path, embed_features: bool) -> Result<()> {
        fs::write(path, self.to_jsonl(embed_features)?)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical (feature-free) serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_jsonl(false)?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
