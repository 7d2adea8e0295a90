//! Training schedules for every loss mode plus two-phase pre-training.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::{AdvConfig, AdvKind, Model, ModelConfig, ModelInput, Objective, Target, WordVocab};
use crate::qgen::{AnswerVocab, QType};
use crate::scenes::{mix_seed, GenConfig, QuestionMix};
use crate::traincore::{GradcheckReport, OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Baseline,
    CountAware,
    Regression,
    AdvregCe,
    AdvregBce,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Baseline, Mode::CountAware, Mode::Regression, Mode::AdvregCe, Mode::AdvregBce];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::CountAware => "count_aware",
            Mode::Regression => "regression",
            Mode::AdvregCe => "advreg_ce",
            Mode::AdvregBce => "advreg_bce",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Adversarial weight, advreg modes only.
    pub lambda_r: f64,
    /// Regression weight, regression mode only.
    pub lambda_reg: f64,
    /// Cap on the adversarial CE, advreg_ce only.
    pub adv_cap: f64,
    pub optimizer: OptimizerKind,
    /// Stop once the epoch loss has not improved by `min_delta` for this
    /// many epochs. `None` always runs every epoch.
    pub patience: Option<usize>,
    pub min_delta: f64,
    /// Phase-1 epochs when a pre-training set is given.
    pub pretrain_epochs: usize,
    /// Pre-training dataset file, read by the command-line front end.
    pub pretrain_dataset: Option<String>,
    pub word_dim: usize,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            mode: Mode::Baseline,
            lambda_r: 0.1,
            lambda_reg: 0.1,
            adv_cap: 10.0,
            optimizer: OptimizerKind::Adam,
            patience: None,
            min_delta: 1e-4,
            pretrain_epochs: 0,
            pretrain_dataset: None,
            word_dim: 32,
            hidden_dim: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lambda_r >= 0.0 && self.lambda_r.is_finite()) {
            return bad(format!("lambda_r must be >= 0, got {}", self.lambda_r));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return bad(format!("lambda_reg must be >= 0, got {}", self.lambda_reg));
        }
        if !(self.adv_cap > 0.0) {
            return bad(format!("adv_cap must be positive, got {}", self.adv_cap));
        }
        if self.word_dim == 0 || self.hidden_dim == 0 {
            return bad("word_dim and hidden_dim must be positive".into());
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        let adv = |kind| Objective::Adversarial(AdvConfig { kind, lambda_r: self.lambda_r, cap: self.adv_cap });
        match self.mode {
            Mode::Baseline | Mode::CountAware => Objective::Classification,
            Mode::Regression => Objective::Regression { lambda_reg: self.lambda_reg },
            Mode::AdvregCe => adv(AdvKind::Ce),
            Mode::AdvregBce => adv(AdvKind::Bce),
        }
    }

    pub fn model_config(&self, feature_dim: usize, num_answers: usize) -> ModelConfig {
        ModelConfig {
            word_dim: self.word_dim,
            hidden_dim: self.hidden_dim,
            feature_dim,
            num_answers,
            count_aware: self.mode == Mode::CountAware,
            regression_head: self.mode == Mode::Regression,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective over the epoch's samples.
    pub loss: f64,
    /// VQA-accuracy of the predictions made while training the epoch.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub name: String,
    pub dataset_hash: String,
    pub samples: usize,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub phase: String,
    pub epoch: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub dataset_hashes: BTreeMap<String, String>,
    pub phases: Vec<PhaseRecord>,
    pub optimizer_steps: u64,
    pub diverged: Option<Divergence>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
}

impl RunManifest {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.phases.last().and_then(|p| p.epochs.last())
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Model,
    pub manifest: RunManifest,
}

/// Network inputs for every sample; the model must know each gold answer.
pub fn training_batch(model: &Model, data: &Dataset) -> Result<Vec<(ModelInput, Target)>> {
    if !data.has_images() {
        return Err(Error::Unsupported("training needs a generated dataset with image sets".into()));
    }
    data.samples
        .iter()
        .map(|s| {
            let gold = model.answers().lookup(&s.qa.gold).ok_or_else(|| {
                Error::VocabMismatch(format!("gold answer `{}` of sample {} not in the answer vocabulary", s.qa.gold, s.qa.image_set_ref))
            })?;
            let count = match s.qa.question.qtype {
                QType::Count => s.qa.question.numeric_target.map(f64::from),
                _ => None,
            };
            Ok((model.input(&s.qa.question.text, &s.image_set)?, Target { gold, count }))
        })
        .collect()
}

fn word_vocab<'a>(sets: impl IntoIterator<Item = &'a Dataset>) -> WordVocab {
    WordVocab::from_texts(sets.into_iter().flat_map(|d| d.qa().map(|q| q.question.text.as_str())))
}

fn feature_dim(data: &Dataset) -> Result<usize> {
    data.gen_config
        .as_ref()
        .map(|c| c.feature_dim)
        .ok_or_else(|| Error::Unsupported("training needs a generated dataset with image sets".into()))
}

pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty"));
    }
    let answers = data.answer_vocab()?;
    let model = Model::new(cfg.model_config(feature_dim(data)?, answers.len()), word_vocab([data]), answers, cfg.seed)?;
    run_phases(model, &[("main", data, cfg.epochs)], cfg)
}

/// Phase 1 on `pretrain`, then phase 2 on `main`, over one merged answer
/// vocabulary. With zero phase-1 epochs this is exactly [`train`] on `main`.
pub fn pretrain_then_finetune(pretrain: &Dataset, main: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if cfg.pretrain_epochs == 0 {
        return train(main, cfg);
    }
    if main.is_empty() || pretrain.is_empty() {
        return Err(Error::EmptyInput("both phases need samples"));
    }
    if let Some(s) = pretrain.samples.iter().find(|s| !(s.qa.pretrain && matches!(s.qtype(), QType::Color | QType::Position))) {
        return Err(Error::InvalidConfig(format!(
            "pre-training sample {} is a {} question without the pretrain flag set appropriately",
            s.qa.image_set_ref,
            s.qtype().as_str()
        )));
    }
    let (pc, mc) = match (&pretrain.gen_config, &main.gen_config) {
        (Some(p), Some(m)) => (p, m),
        _ => return Err(Error::Unsupported("both phases need generated datasets with image sets".into())),
    };
    if (pc.feature_seed, pc.feature_dim) != (mc.feature_seed, mc.feature_dim) {
        return Err(Error::VocabMismatch(format!(
            "feature spaces differ: pretrain (feature_seed {}, dim {}) vs main (feature_seed {}, dim {})",
            pc.feature_seed, pc.feature_dim, mc.feature_seed, mc.feature_dim
        )));
    }
    let answers: AnswerVocab = main.answer_vocab()?.merged(&pretrain.answer_vocab()?);
    let model = Model::new(cfg.model_config(mc.feature_dim, answers.len()), word_vocab([pretrain, main]), answers, cfg.seed)?;
    run_phases(model, &[("pretrain", pretrain, cfg.pretrain_epochs), ("main", main, cfg.epochs)], cfg)
}

/// Starts the regression bias at the mean count target of `data`, so the
/// squared error does not open at ~25 and swamp the classifier gradient.
fn center_regression_bias(model: &mut Model, data: &Dataset) {
    let Some(id) = model.params().id("regression.b") else { return };
    let targets: Vec<f64> = data
        .qa()
        .filter(|q| q.question.qtype == QType::Count)
        .filter_map(|q| q.question.numeric_target.map(f64::from))
        .collect();
    if !targets.is_empty() {
        model.params_mut().get_mut(id)[0] = targets.iter().sum::<f64>() / targets.len() as f64;
    }
}

fn run_phases(mut model: Model, phases: &[(&str, &Dataset, usize)], cfg: &TrainConfig) -> Result<TrainRun> {
    let start = Instant::now();
    let objective = cfg.objective();
    let mut manifest = RunManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        model: *model.config(),
        dataset_hashes: BTreeMap::new(),
        phases: Vec::new(),
        optimizer_steps: 0,
        diverged: None,
        wall_clock_secs: 0.0,
        checkpoint: None,
    };
    'phases: for (pi, &(name, data, epochs)) in phases.iter().enumerate() {
        let hash = data.hash()?;
        manifest.dataset_hashes.insert(name.to_string(), hash.clone());
        let batch = training_batch(&model, data)?;
        if pi == 0 {
            center_regression_bias(&mut model, phases[phases.len() - 1].1);
        }
        let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, model.params())?;
        let mut record =
            PhaseRecord { name: name.to_string(), dataset_hash: hash, samples: data.len(), epochs: Vec::new(), stopped_early: false };
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..batch.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, pi as u64), epoch as u64)));
            match run_epoch(&mut model, &mut opt, &batch, data, &order, &objective, cfg.batch_size) {
                Ok((loss, acc)) => {
                    log::info!("{name} epoch {epoch}: loss {loss:.5} train accuracy {acc:.4}");
                    record.epochs.push(EpochRecord { epoch, loss, train_accuracy: acc })
                }
                Err(e @ (Error::NonFinite { .. } | Error::Diverged { .. })) => {
                    manifest.diverged = Some(Divergence { phase: name.to_string(), epoch, reason: e.to_string() });
                    manifest.phases.push(record);
                    break 'phases;
                }
                Err(e) => return Err(e),
            }
            let loss = record.epochs.last().expect("just pushed").loss;
            if loss < best - cfg.min_delta {
                best = loss;
                stale = 0;
            } else {
                stale += 1;
            }
            if cfg.patience.is_some_and(|p| stale >= p) {
                record.stopped_early = true;
                break;
            }
        }
        manifest.phases.push(record);
    }
    manifest.optimizer_steps = model.params().step();
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(TrainRun { model, manifest })
}

/// One pass over `order`. Per-sample gradients may be computed in parallel
/// but are always summed in sample order, so results do not depend on the
/// thread count.
fn run_epoch(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &[(ModelInput, Target)],
    data: &Dataset,
    order: &[usize],
    objective: &Objective,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    for chunk in order.chunks(batch_size) {
        let m: &Model = model;
        let per_sample: Vec<_> = chunk
            .par_iter()
            .map(|&i| {
                let mut g = m.params().zero_grads();
                let (input, target) = &batch[i];
                let (probe, pred) = m.sample_loss_with_prediction(input, target, objective, Some(&mut g))?;
                Ok((probe.loss, pred, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = model.params().zero_grads();
        for (&i, (loss, pred, g)) in chunk.iter().zip(&per_sample) {
            loss_sum += loss;
            acc_sum += crate::evalstats::vqa_accuracy(model.answers().label(*pred), &data.samples[i].qa.answers)?;
            total.add_assign(g);
        }
        total.scale(1.0 / chunk.len() as f64);
        opt.step(model.params_mut(), &mut total)?;
    }
    let n = order.len().max(1) as f64;
    let loss = loss_sum / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite { tensor: "loss".into() });
    }
    Ok((loss, acc_sum / n))
}

/// Small real-data problem for finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSetup {
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Each image set is cut to its first proposals.
    pub max_proposals: usize,
    pub samples: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        Self { word_dim: 6, hidden_dim: 8, feature_dim: 8, max_proposals: 4, samples: 3, seed: 0, tolerance: 1e-4 }
    }
}

/// Gradient check of the full model in `mode` on generated samples whose
/// image sets are truncated to `max_proposals`.
pub fn gradcheck_mode(mode: Mode, setup: &GradcheckSetup) -> Result<GradcheckReport> {
    if setup.max_proposals == 0 || setup.samples == 0 {
        return Err(Error::InvalidConfig("gradcheck needs at least one sample and one proposal".into()));
    }
    let gen = GenConfig {
        seed: setup.seed,
        num_samples: setup.samples,
        feature_dim: setup.feature_dim,
        question_mix: QuestionMix { color: 0.25, position: 0.0, count: 0.5, existence: 0.25 },
        ..GenConfig::default()
    };
    let mut data = generate_dataset(&gen)?;
    for s in &mut data.samples {
        s.image_set.proposals.truncate(setup.max_proposals);
    }
    let cfg = TrainConfig { mode, word_dim: setup.word_dim, hidden_dim: setup.hidden_dim, seed: setup.seed, ..TrainConfig::default() };
    // two fixed labels keep the classifier at least binary
    let answers = data.answer_vocab()?.merged(&AnswerVocab::from_labels(["yes".to_string(), "no".to_string()]));
    let model = Model::new(cfg.model_config(setup.feature_dim, answers.len()), word_vocab([&data]), answers, setup.seed)?;
    let batch = training_batch(&model, &data)?;
    model.gradcheck(&batch, &cfg.objective(), setup.tolerance)
}
