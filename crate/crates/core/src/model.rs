//! Attention fusion network over a set of object proposals.
//!
//! ```text
//! q   = tanh(Wq · mean(emb[tokens]) + bq)
//! v_i = tanh(Wv · x_i + bv)
//! a_i = σ(u · (q ∘ v_i))                       count-aware only
//! ṽ_i = C_i v_i  (C from the counting module)  count-aware, else ṽ = v
//! α   = softmax_i(w · tanh(W1 q + W2 ṽ_i)),  ctx = Σ α_i ṽ_i
//! h   = tanh(Wf [q; ctx] + bf + wc · ĉ)        wc · ĉ only when count-aware
//! logits = Wo h + bo,  r = wr · h + br         r only with the regression head
//! ```
//!
//! Scrubbed rows have their features zeroed, so each becomes `tanh(bv)`.
//! All `k` of them are carried as one placeholder row whose attention score
//! is offset by `ln k`, which is the same softmax as `k` identical rows.
//! The placeholder skips the counting graph (a zeroed detection has no box
//! to count) and enters pooling unscaled. A fully scrubbed input therefore
//! has `ctx = tanh(bv)` exactly and depends on the question alone, bit for
//! bit.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::counting::{distance_matrix, CountModuleParams, CountTape, PiecewiseLinearFn, PlacedBox};
use crate::error::{Error, Result};
use crate::labels::singular_category;
use crate::qgen::{tokenize, AnswerVocab, QType};
use crate::scenes::ImageSet;
use crate::traincore::layers::{
    affine, affine_backward, cross_entropy, cross_entropy_backward, dot, mean_embedding, mean_embedding_backward,
    sigmoid, softmax, softmax_backward, tanh_backward, tanh_in_place, AttentionPool,
};
use crate::traincore::{
    gradcheck, param_rng, Checkpoint, GradcheckReport, Grads, Init, ParamId, ParamStore, Probe,
};

pub const UNK: &str = "<unk>";
pub const COUNT_PIECES: usize = 8;
/// Upper clamp on adversarial probabilities inside the BCE term.
pub const BCE_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub num_answers: usize,
    pub count_aware: bool,
    pub regression_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { word_dim: 32, hidden_dim: 64, feature_dim: 64, num_answers: 2, count_aware: false, regression_head: false }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("word_dim", self.word_dim), ("hidden_dim", self.hidden_dim), ("feature_dim", self.feature_dim)] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.num_answers < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 answers, got {}", self.num_answers)));
        }
        Ok(())
    }
}

/// Question word index; slot 0 is the shared unknown-word token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct WordVocab {
    words: Vec<String>,
}

impl WordVocab {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(tokenize).filter(|w| w != UNK).collect();
        let mut words = vec![UNK.to_string()];
        words.extend(set);
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.words[1..].binary_search_by(|w| w.as_str().cmp(word)).map_or(0, |i| i + 1)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }
}

impl TryFrom<Vec<String>> for WordVocab {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        let ok = words.first().map(String::as_str) == Some(UNK) && words[1..].windows(2).all(|w| w[0] < w[1]);
        if !ok || words[1..].iter().any(|w| w == UNK) {
            return Err(Error::VocabMismatch("word list must start with <unk> and then be strictly sorted".into()));
        }
        Ok(Self { words })
    }
}

impl From<WordVocab> for Vec<String> {
    fn from(v: WordVocab) -> Self {
        v.words
    }
}

/// One sample in the form the network consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tokens: Vec<usize>,
    /// Row-major `(n, feature_dim)`.
    pub features: Vec<f64>,
    pub boxes: Vec<PlacedBox>,
    pub categories: Vec<String>,
}

impl ModelInput {
    pub fn n(&self) -> usize {
        self.boxes.len()
    }
}

/// Proposals whose category is named in the question (singular or plural).
pub fn scrub_objects<S: AsRef<str>>(question: &str, categories: &[S]) -> Vec<usize> {
    let named: BTreeSet<&str> = tokenize(question).iter().filter_map(|t| singular_category(t)).collect();
    categories
        .iter()
        .enumerate()
        .filter(|(_, c)| named.contains(c.as_ref()))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountInfo {
    /// Counting attention `a`, zero on scrubbed rows (they are not counted).
    pub attention: Vec<f64>,
    /// Per-proposal scores `C`.
    pub scores: Vec<f64>,
    pub c_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Fusion attention `α`.
    pub attention: Vec<f64>,
    pub count: Option<CountInfo>,
    pub regression: Option<f64>,
}

impl ForwardOutput {
    /// Highest-probability answer; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.logits.iter().enumerate() {
            if *v > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

pub fn loss_classification(out: &ForwardOutput, gold: usize) -> Result<f64> {
    if gold >= out.logits.len() {
        return Err(Error::OutOfRange(format!("gold index {gold} with {} answers", out.logits.len())));
    }
    Ok(cross_entropy(&out.logits, gold))
}

/// `(r - target)²` for count questions.
pub fn loss_regression(out: &ForwardOutput, qtype: QType, target: f64) -> Result<f64> {
    if qtype != QType::Count {
        return Err(Error::Unsupported(format!("regression loss on a {} question", qtype.as_str())));
    }
    let r = out.regression.ok_or_else(|| Error::Unsupported("model has no regression head".into()))?;
    Ok((r - target).powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvKind {
    /// Subtract the capped CE on the scrubbed input.
    Ce,
    /// Penalize every class probability on the scrubbed input.
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvConfig {
    pub kind: AdvKind,
    pub lambda_r: f64,
    pub cap: f64,
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_r >= 0.0 && self.lambda_r.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda_r must be >= 0, got {}", self.lambda_r)));
        }
        if !(self.cap > 0.0) {
            return Err(Error::InvalidConfig(format!("adversarial cap must be positive, got {}", self.cap)));
        }
        Ok(())
    }
}

fn bce_term(probs: &[f64]) -> f64 {
    probs.iter().map(|p| -(1.0 - p.clamp(0.0, BCE_CLAMP)).ln()).sum()
}

pub fn loss_adversarial(out_true: &ForwardOutput, out_adv: &ForwardOutput, gold: usize, cfg: &AdvConfig) -> Result<f64> {
    cfg.validate()?;
    let ce = loss_classification(out_true, gold)?;
    Ok(match cfg.kind {
        AdvKind::Ce => ce - cfg.lambda_r * loss_classification(out_adv, gold)?.min(cfg.cap),
        AdvKind::Bce => ce + cfg.lambda_r * bce_term(&out_adv.probs),
    })
}

/// What a training sample is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub gold: usize,
    /// Numeric answer, present only on count questions.
    pub count: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Classification,
    /// CE plus `lambda_reg·(r - t)²` on count samples.
    Regression { lambda_reg: f64 },
    Adversarial(AdvConfig),
}

#[derive(Debug, Clone, Copy)]
struct CountIds {
    u: ParamId,
    wc: ParamId,
    f: [ParamId; 3],
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    emb: ParamId,
    q_w: ParamId,
    q_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    att_w1: ParamId,
    att_w2: ParamId,
    att_w: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    count: Option<CountIds>,
    reg: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    model: ModelConfig,
    words: WordVocab,
    answers: AnswerVocab,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    words: WordVocab,
    answers: AnswerVocab,
    params: ParamStore,
    ids: Ids,
}

impl Model {
    pub fn new(config: ModelConfig, words: WordVocab, answers: AnswerVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if answers.len() != config.num_answers {
            return Err(Error::VocabMismatch(format!(
                "config expects {} answers, vocabulary has {}",
                config.num_answers,
                answers.len()
            )));
        }
        let (dw, dh, df, m) = (config.word_dim, config.hidden_dim, config.feature_dim, config.num_answers);
        let mut rng = param_rng(seed);
        let mut p = ParamStore::new();
        let rng = &mut rng;
        let emb = p.add_init("embedding", &[words.len(), dw], Init::FanIn(1), rng)?;
        let q_w = p.add_init("question.w", &[dh, dw], Init::FanIn(dw), rng)?;
        let q_b = p.add_init("question.b", &[dh], Init::FanIn(dw), rng)?;
        let v_w = p.add_init("visual.w", &[dh, df], Init::FanIn(df), rng)?;
        let v_b = p.add_init("visual.b", &[dh], Init::FanIn(df), rng)?;
        let att_w1 = p.add_init("attention.w1", &[dh, dh], Init::FanIn(dh), rng)?;
        let att_w2 = p.add_init("attention.w2", &[dh, dh], Init::FanIn(dh), rng)?;
        let att_w = p.add_init("attention.w", &[dh], Init::FanIn(dh), rng)?;
        let fuse_w = p.add_init("fusion.w", &[dh, 2 * dh], Init::FanIn(2 * dh), rng)?;
        let fuse_b = p.add_init("fusion.b", &[dh], Init::FanIn(2 * dh), rng)?;
        let out_w = p.add_init("classifier.w", &[m, dh], Init::FanIn(dh), rng)?;
        let out_b = p.add_init("classifier.b", &[m], Init::FanIn(dh), rng)?;
        let count = if config.count_aware {
            Some(CountIds {
                u: p.add_init("count.u", &[dh], Init::FanIn(dh), rng)?,
                wc: p.add_init("count.fusion", &[dh], Init::FanIn(dh), rng)?,
                f: [
                    p.add_init("count.f1", &[COUNT_PIECES], Init::Zeros, rng)?,
                    p.add_init("count.f2", &[COUNT_PIECES], Init::Zeros, rng)?,
                    p.add_init("count.f3", &[COUNT_PIECES], Init::Zeros, rng)?,
                ],
            })
        } else {
            None
        };
        let reg = if config.regression_head {
            Some((
                p.add_init("regression.w", &[dh], Init::FanIn(dh), rng)?,
                p.add_init("regression.b", &[1], Init::FanIn(dh), rng)?,
            ))
        } else {
            None
        };
        let ids = Ids { emb, q_w, q_b, v_w, v_b, att_w1, att_w2, att_w, fuse_w, fuse_b, out_w, out_b, count, reg };
        Ok(Self { config, words, answers, params: p, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn words(&self) -> &WordVocab {
        &self.words
    }

    pub fn answers(&self) -> &AnswerVocab {
        &self.answers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let header = CheckpointHeader { model: self.config, words: self.words.clone(), answers: self.answers.clone() };
        Ok(Checkpoint::from_store(&self.params, serde_json::to_value(header)?))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header: CheckpointHeader = serde_json::from_value(ck.config.clone())?;
        let mut model = Self::new(header.model, header.words, header.answers, 0)?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }

    /// Builds the network input for a question over an image set. Proposals
    /// must carry features.
    pub fn input(&self, question: &str, set: &ImageSet) -> Result<ModelInput> {
        let df = self.config.feature_dim;
        let mut features = Vec::with_capacity(set.n() * df);
        for p in &set.proposals {
            if p.feature.len() != df {
                return Err(Error::ShapeMismatch(format!(
                    "proposal {} of sample {} has {} feature values, model expects {df}",
                    p.id,
                    set.sample_id,
                    p.feature.len()
                )));
            }
            features.extend_from_slice(&p.feature);
        }
        Ok(ModelInput {
            tokens: self.words.encode(question),
            features,
            boxes: set.proposals.iter().map(|p| PlacedBox { image_idx: p.image_idx, bbox: p.bbox }).collect(),
            categories: set.proposals.iter().map(|p| p.category.clone()).collect(),
        })
    }

    /// Mean word embedding through `tanh(affine)`.
    pub fn encode_question(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self.encode(tokens)?.1)
    }

    fn encode(&self, tokens: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("question has no tokens"));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= self.words.len()) {
            return Err(Error::OutOfRange(format!("token id {t} outside a vocabulary of {}", self.words.len())));
        }
        let p = &self.params;
        let e = mean_embedding(p.get(self.ids.emb), self.config.word_dim, tokens);
        let mut q = affine(p.get(self.ids.q_w), Some(p.get(self.ids.q_b)), &e);
        tanh_in_place(&mut q);
        Ok((e, q))
    }

    pub fn forward(&self, input: &ModelInput, scrub: &[usize]) -> Result<ForwardOutput> {
        Ok(self.trace(input, scrub)?.output)
    }

    /// Forward pass that keeps every intermediate for one backward pass.
    pub fn trace<'a>(&self, input: &'a ModelInput, scrub: &[usize]) -> Result<Trace<'a>> {
        let (dh, df) = (self.config.hidden_dim, self.config.feature_dim);
        let n = input.n();
        if input.features.len() != n * df {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {n} proposals of dim {df}",
                input.features.len()
            )));
        }
        if input.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { tensor: "input features".into() });
        }
        let mut active = vec![true; n];
        for &i in scrub {
            *active
                .get_mut(i)
                .ok_or_else(|| Error::OutOfRange(format!("scrub row {i} with {n} proposals")))? = false;
        }
        let rows: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
        let scrubbed = n - rows.len();
        let p = &self.params;
        let (e, q) = self.encode(&input.tokens)?;

        // kept rows in order, then one placeholder standing in for all
        // scrubbed (zeroed) rows
        let mut v = Vec::with_capacity((rows.len() + 1) * dh);
        for &i in &rows {
            let mut vi = affine(p.get(self.ids.v_w), Some(p.get(self.ids.v_b)), &input.features[i * df..(i + 1) * df]);
            tanh_in_place(&mut vi);
            v.extend(vi);
        }
        if scrubbed > 0 {
            let mut vs = p.get(self.ids.v_b).to_vec();
            tanh_in_place(&mut vs);
            v.extend(vs);
        }
        let kept = rows.len() * dh;

        let mut count = None;
        let mut tape = None;
        let vt = match self.ids.count {
            Some(ci) => {
                let u = p.get(ci.u);
                let a: Vec<f64> = v[..kept]
                    .chunks_exact(dh)
                    .map(|vi| sigmoid(u.iter().zip(&q).zip(vi).map(|((u, q), v)| u * q * v).sum()))
                    .collect();
                let boxes: Vec<PlacedBox> = rows.iter().map(|&i| input.boxes[i]).collect();
                let t = CountTape::forward(&a, &distance_matrix(&boxes), &self.count_params(ci)?)?;
                let mut vt = v.clone();
                for (row, c) in vt.chunks_exact_mut(dh).zip(t.scores()) {
                    row.iter_mut().for_each(|x| *x *= c);
                }
                count = Some(CountInfo {
                    attention: scatter(&rows, &a, n),
                    scores: scatter(&rows, t.scores(), n),
                    c_hat: t.count(),
                });
                tape = Some((t, a));
                vt
            }
            None => v.clone(),
        };

        let qproj = affine(p.get(self.ids.att_w1), None, &q);
        let mut offsets = vec![0.0; rows.len()];
        if scrubbed > 0 {
            offsets.push((scrubbed as f64).ln());
        }
        let pool =
            AttentionPool::forward_with_offsets(&qproj, p.get(self.ids.att_w2), p.get(self.ids.att_w), &vt, dh, &offsets);
        let mut z = q.clone();
        z.extend_from_slice(&pool.pooled);
        let mut h = affine(p.get(self.ids.fuse_w), Some(p.get(self.ids.fuse_b)), &z);
        if let (Some(ci), Some(info)) = (self.ids.count, &count) {
            for (hk, wk) in h.iter_mut().zip(p.get(ci.wc)) {
                *hk += wk * info.c_hat;
            }
        }
        tanh_in_place(&mut h);
        let logits = affine(p.get(self.ids.out_w), Some(p.get(self.ids.out_b)), &h);
        let probs = softmax(&logits);
        let regression = self.ids.reg.map(|(w, b)| dot(p.get(w), &h) + p.get(b)[0]);

        let mut attention = scatter(&rows, &pool.alpha, n);
        if scrubbed > 0 {
            let share = pool.alpha[rows.len()] / scrubbed as f64;
            for (i, _) in active.iter().enumerate().filter(|(_, a)| !**a) {
                attention[i] = share;
            }
        }
        Ok(Trace {
            input,
            rows,
            e,
            q,
            v,
            vt,
            tape,
            z,
            h,
            output: ForwardOutput { logits, probs, attention, count, regression },
            pool,
        })
    }

    fn count_params(&self, ci: CountIds) -> Result<CountModuleParams> {
        let f = |id| PiecewiseLinearFn::from_raw(self.params.get(id).to_vec());
        Ok(CountModuleParams { f1: f(ci.f[0])?, f2: f(ci.f[1])?, f3: f(ci.f[2])? })
    }

    /// Loss of one sample under `objective`, accumulating its gradient into
    /// `grads` when given. The returned probe also fingerprints every
    /// non-smooth branch the loss went through.
    pub fn sample_loss(
        &self,
        input: &ModelInput,
        target: &Target,
        objective: &Objective,
        grads: Option<&mut Grads>,
    ) -> Result<Probe> {
        self.sample_loss_with_prediction(input, target, objective, grads).map(|(p, _)| p)
    }

    /// [`Model::sample_loss`] plus the argmax answer of the unscrubbed pass.
    pub fn sample_loss_with_prediction(
        &self,
        input: &ModelInput,
        target: &Target,
        objective: &Objective,
        grads: Option<&mut Grads>,
    ) -> Result<(Probe, usize)> {
        let m = self.config.num_answers;
        if target.gold >= m {
            return Err(Error::OutOfRange(format!("gold index {} with {m} answers", target.gold)));
        }
        let main = self.trace(input, &[])?;
        let prediction = main.output.argmax();
        let ce = cross_entropy(&main.output.logits, target.gold);
        let g_logits = cross_entropy_backward(&main.output.probs, target.gold);
        let mut g_r = 0.0;
        let mut total = ce;
        let mut kinks = main.kink_signature();
        let mut adv = None;

        match *objective {
            Objective::Classification => {}
            Objective::Regression { lambda_reg } => {
                if let (Some(t), Some(r)) = (target.count, main.output.regression) {
                    total += lambda_reg * (r - t).powi(2);
                    g_r = 2.0 * lambda_reg * (r - t);
                }
            }
            Objective::Adversarial(cfg) => {
                cfg.validate()?;
                let mask = scrub_objects_ids(&input.categories, &input.tokens, &self.words);
                let t = self.trace(input, &mask)?;
                kinks = kinks.wrapping_mul(31).wrapping_add(t.kink_signature());
                let g_adv = match cfg.kind {
                    AdvKind::Ce => {
                        let ce_adv = cross_entropy(&t.output.logits, target.gold);
                        let below = ce_adv < cfg.cap;
                        kinks = kinks.wrapping_mul(31).wrapping_add(below as u64);
                        total -= cfg.lambda_r * ce_adv.min(cfg.cap);
                        let mut g = cross_entropy_backward(&t.output.probs, target.gold);
                        let scale = if below { -cfg.lambda_r } else { 0.0 };
                        g.iter_mut().for_each(|x| *x *= scale);
                        g
                    }
                    AdvKind::Bce => {
                        let probs = &t.output.probs;
                        total += cfg.lambda_r * bce_term(probs);
                        let mut clamped = 0u64;
                        let gp: Vec<f64> = probs
                            .iter()
                            .enumerate()
                            .map(|(c, p)| {
                                if *p < BCE_CLAMP {
                                    cfg.lambda_r / (1.0 - p)
                                } else {
                                    clamped = clamped.wrapping_mul(31).wrapping_add(c as u64 + 1);
                                    0.0
                                }
                            })
                            .collect();
                        kinks = kinks.wrapping_mul(31).wrapping_add(clamped);
                        softmax_backward(probs, &gp)
                    }
                };
                adv = Some((t, g_adv));
            }
        }

        if let Some(grads) = grads {
            if grads.len() != self.params.len() {
                return Err(Error::ShapeMismatch("gradient buffers do not match the model".into()));
            }
            if !total.is_finite() {
                return Err(Error::NonFinite { tensor: "loss".into() });
            }
            if self.ids.reg.is_none() {
                g_r = 0.0;
            }
            main.backward(self, &g_logits, g_r, grads)?;
            if let Some((t, g)) = adv {
                t.backward(self, &g, 0.0, grads)?;
            }
        }
        Ok((Probe { loss: total, kinks }, prediction))
    }

    /// Mean loss over a batch, accumulating the mean gradient.
    pub fn batch_loss(
        &self,
        batch: &[(ModelInput, Target)],
        objective: &Objective,
        grads: Option<&mut Grads>,
    ) -> Result<Probe> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty batch"));
        }
        let mut total = 0.0;
        let mut kinks = 0u64;
        let mut local = grads.as_ref().map(|_| self.params.zero_grads());
        for (input, target) in batch {
            let p = self.sample_loss(input, target, objective, local.as_mut())?;
            total += p.loss;
            kinks = kinks.wrapping_mul(0x100_0000_01b3).wrapping_add(p.kinks);
        }
        let inv = 1.0 / batch.len() as f64;
        if let (Some(g), Some(mut l)) = (grads, local) {
            l.scale(inv);
            g.add_assign(&l);
        }
        Ok(Probe { loss: total * inv, kinks })
    }

    /// Central-difference check of every parameter gradient on `batch`.
    pub fn gradcheck(&self, batch: &[(ModelInput, Target)], objective: &Objective, tolerance: f64) -> Result<GradcheckReport> {
        let mut analytic = self.params.zero_grads();
        self.batch_loss(batch, objective, Some(&mut analytic))?;
        let mut probe_model = self.clone();
        gradcheck(&self.params, &analytic, tolerance, |store| {
            probe_model.params.clone_from(store);
            probe_model.batch_loss(batch, objective, None)
        })
    }
}

fn scrub_objects_ids(categories: &[String], tokens: &[usize], words: &WordVocab) -> Vec<usize> {
    let text: Vec<&str> = tokens.iter().map(|&t| words.words()[t].as_str()).collect();
    scrub_objects(&text.join(" "), categories)
}

/// Recorded forward pass. `backward` consumes it, so a trace can be
/// differentiated once.
#[derive(Debug)]
pub struct Trace<'a> {
    input: &'a ModelInput,
    /// Unscrubbed proposal indices; `v`, `vt` and the tape are indexed by
    /// position in this list. `v` and `vt` carry one extra placeholder row
    /// when anything was scrubbed.
    rows: Vec<usize>,
    e: Vec<f64>,
    q: Vec<f64>,
    v: Vec<f64>,
    vt: Vec<f64>,
    /// Counting tape and the attention `a` it was fed.
    tape: Option<(CountTape, Vec<f64>)>,
    pool: AttentionPool,
    z: Vec<f64>,
    h: Vec<f64>,
    output: ForwardOutput,
}

impl Trace<'_> {
    pub fn output(&self) -> &ForwardOutput {
        &self.output
    }

    pub fn kink_signature(&self) -> u64 {
        self.tape.as_ref().map_or(0, |(t, _)| t.kink_signature())
    }

    /// Accumulates the gradient of `g_logits · logits + g_r · r`.
    pub fn backward(self, model: &Model, g_logits: &[f64], g_r: f64, grads: &mut Grads) -> Result<()> {
        let cfg = &model.config;
        let ids = &model.ids;
        let p = &model.params;
        let (dh, dw, df) = (cfg.hidden_dim, cfg.word_dim, cfg.feature_dim);
        if g_logits.len() != cfg.num_answers {
            return Err(Error::ShapeMismatch(format!("{} logit gradients for {} answers", g_logits.len(), cfg.num_answers)));
        }
        let m = self.rows.len();
        let total_rows = self.v.len() / dh;

        let mut g_h = vec![0.0; dh];
        affine_backward(p.get(ids.out_w), &self.h, g_logits, grads.get_mut(ids.out_w), None, Some(&mut g_h));
        for (b, g) in grads.get_mut(ids.out_b).iter_mut().zip(g_logits) {
            *b += g;
        }
        if let Some((w, b)) = ids.reg {
            for ((gw, hk), (gh, wk)) in grads.get_mut(w).iter_mut().zip(&self.h).zip(g_h.iter_mut().zip(p.get(w))) {
                *gw += g_r * hk;
                *gh += g_r * wk;
            }
            grads.get_mut(b)[0] += g_r;
        }

        let g_pre = tanh_backward(&self.h, &g_h);
        let mut g_z = vec![0.0; 2 * dh];
        affine_backward(p.get(ids.fuse_w), &self.z, &g_pre, grads.get_mut(ids.fuse_w), None, Some(&mut g_z));
        for (b, g) in grads.get_mut(ids.fuse_b).iter_mut().zip(&g_pre) {
            *b += g;
        }
        let mut g_chat = 0.0;
        if let (Some(ci), Some(info)) = (ids.count, &self.output.count) {
            for ((gw, g), w) in grads.get_mut(ci.wc).iter_mut().zip(&g_pre).zip(p.get(ci.wc)) {
                *gw += g * info.c_hat;
                g_chat += g * w;
            }
        }
        let (g_q_direct, g_ctx) = g_z.split_at(dh);
        let mut g_q = g_q_direct.to_vec();

        let mut g_vt = vec![0.0; total_rows * dh];
        let mut g_w2 = vec![0.0; dh * dh];
        let mut g_w = vec![0.0; dh];
        let g_qproj = self.pool.backward(p.get(ids.att_w2), p.get(ids.att_w), &self.vt, dh, g_ctx, &mut g_w2, &mut g_w, &mut g_vt);
        add(grads.get_mut(ids.att_w2), &g_w2);
        add(grads.get_mut(ids.att_w), &g_w);
        affine_backward(p.get(ids.att_w1), &self.q, &g_qproj, grads.get_mut(ids.att_w1), None, Some(&mut g_q));

        let mut g_v = g_vt.clone();
        if let (Some(ci), Some((tape, a))) = (ids.count, self.tape) {
            // ṽ_k = C_k v_k
            let mut g_c = Vec::with_capacity(m);
            for k in 0..m {
                let r = k * dh..(k + 1) * dh;
                g_c.push(dot(&g_vt[r.clone()], &self.v[r.clone()]));
                for (gv, gt) in g_v[r.clone()].iter_mut().zip(&g_vt[r]) {
                    *gv = gt * tape.scores()[k];
                }
            }
            let cg = tape.backward(&g_c, g_chat)?;
            for (id, g) in ci.f.iter().zip([&cg.f1, &cg.f2, &cg.f3]) {
                add(grads.get_mut(*id), g);
            }
            // a_k = σ(u · (q ∘ v_k))
            let u = p.get(ci.u).to_vec();
            let gu = grads.get_mut(ci.u);
            for k in 0..m {
                let gs = cg.attention[k] * a[k] * (1.0 - a[k]);
                if gs == 0.0 {
                    continue;
                }
                let vk = &self.v[k * dh..(k + 1) * dh];
                for d in 0..dh {
                    gu[d] += gs * self.q[d] * vk[d];
                    g_q[d] += gs * u[d] * vk[d];
                    g_v[k * dh + d] += gs * u[d] * self.q[d];
                }
            }
        }

        let v_w = p.get(ids.v_w);
        for (k, &i) in self.rows.iter().enumerate() {
            let r = k * dh..(k + 1) * dh;
            let g_vpre = tanh_backward(&self.v[r.clone()], &g_v[r]);
            affine_backward(v_w, &self.input.features[i * df..(i + 1) * df], &g_vpre, grads.get_mut(ids.v_w), None, None);
            add(grads.get_mut(ids.v_b), &g_vpre);
        }
        if total_rows > m {
            // placeholder row: tanh(b_v), zero input
            let r = m * dh..(m + 1) * dh;
            add(grads.get_mut(ids.v_b), &tanh_backward(&self.v[r.clone()], &g_v[r]));
        }

        let g_qpre = tanh_backward(&self.q, &g_q);
        let mut g_e = vec![0.0; dw];
        affine_backward(p.get(ids.q_w), &self.e, &g_qpre, grads.get_mut(ids.q_w), None, Some(&mut g_e));
        add(grads.get_mut(ids.q_b), &g_qpre);
        mean_embedding_backward(dw, &self.input.tokens, &g_e, grads.get_mut(ids.emb));
        Ok(())
    }
}

fn scatter(rows: &[usize], values: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (&i, v) in rows.iter().zip(values) {
        out[i] = *v;
    }
    out
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
