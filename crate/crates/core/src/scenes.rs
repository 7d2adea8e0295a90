//! Synthetic multi-image scenes with exact ground truth.
//!
//! A scene is a set of [`NUM_IMAGES`] images, each holding a handful of true
//! objects. Every true object appearance becomes an [`ObjectProposal`];
//! some appearances additionally emit a jittered duplicate proposal, which is
//! what a real detector does when it fires twice on one object. Objects may
//! also reappear in an adjacent image with a translated box.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::labels::{category_index, color_index, CATEGORIES, COLORS};

/// Images per image set.
pub const NUM_IMAGES: usize = 6;

/// Largest IoU tolerated between two distinct true objects in one image.
const MAX_TRUE_OVERLAP: f64 = 0.2;
const PLACEMENT_TRIES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

/// Relative weights of the generated question types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionMix {
    pub color: f64,
    pub position: f64,
    pub count: f64,
    pub existence: f64,
}

impl Default for QuestionMix {
    fn default() -> Self {
        Self { color: 0.2, position: 0.2, count: 0.4, existence: 0.2 }
    }
}

impl QuestionMix {
    pub fn pretrain() -> Self {
        Self { color: 0.5, position: 0.5, count: 0.0, existence: 0.0 }
    }

    fn weights(&self) -> [f64; 4] {
        [self.color, self.position, self.count, self.existence]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    /// Seeds the per-label feature codes. Sets that should share one feature
    /// space (train, test, pretrain) must share this value.
    pub feature_seed: u64,
    pub num_samples: usize,
    pub objects_per_image: CountRange,
    pub dup_proposal_rate: f64,
    pub dup_jitter: f64,
    pub dup_iou_min: f64,
    pub cross_image_rate: f64,
    pub bias_skew: f64,
    pub detector_noise: f64,
    pub annotator_error: f64,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub question_mix: QuestionMix,
    /// Marks every generated sample as enhanced pre-training material.
    /// Requires a mix with only color and position weight.
    pub pretrain: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_seed: 0,
            num_samples: 1000,
            objects_per_image: CountRange { min: 1, max: 5 },
            dup_proposal_rate: 0.2,
            dup_jitter: 0.03,
            dup_iou_min: 0.5,
            cross_image_rate: 0.1,
            bias_skew: 0.0,
            detector_noise: 0.0,
            annotator_error: 0.1,
            feature_dim: 64,
            noise_std: 0.1,
            question_mix: QuestionMix::default(),
            pretrain: false,
        }
    }
}

impl GenConfig {
    /// Clean, unbiased data that the toy model should fit almost perfectly:
    /// few objects, no duplicate proposals, exact annotators, and only color
    /// and existence questions.
    pub fn easy() -> Self {
        Self {
            objects_per_image: CountRange { min: 1, max: 3 },
            dup_proposal_rate: 0.0,
            cross_image_rate: 0.0,
            bias_skew: 2.0 / 9.0,
            annotator_error: 0.0,
            noise_std: 0.05,
            question_mix: QuestionMix { color: 0.5, position: 0.0, count: 0.0, existence: 0.5 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("dup_proposal_rate", self.dup_proposal_rate),
            ("cross_image_rate", self.cross_image_rate),
            ("bias_skew", self.bias_skew),
            ("detector_noise", self.detector_noise),
            ("annotator_error", self.annotator_error),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.dup_iou_min > 0.0 && self.dup_iou_min <= 1.0) {
            return Err(Error::InvalidConfig(format!("dup_iou_min = {} not in (0, 1]", self.dup_iou_min)));
        }
        if !(0.0..0.5).contains(&self.dup_jitter) {
            return Err(Error::InvalidConfig(format!("dup_jitter = {} not in [0, 0.5)", self.dup_jitter)));
        }
        let CountRange { min, max } = self.objects_per_image;
        if min < 1 || max < min || max > 12 {
            return Err(Error::InvalidConfig(format!(
                "objects_per_image must satisfy 1 <= min <= max <= 12, got {min}..{max}"
            )));
        }
        if self.feature_dim < FeatureSynth::MIN_DIM {
            return Err(Error::InvalidConfig(format!(
                "feature_dim = {} below minimum {}",
                self.feature_dim,
                FeatureSynth::MIN_DIM
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_std = {}", self.noise_std)));
        }
        let w = self.question_mix.weights();
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidConfig("question_mix weights must be >= 0 with a positive sum".into()));
        }
        if self.pretrain && (self.question_mix.count > 0.0 || self.question_mix.existence > 0.0) {
            return Err(Error::InvalidConfig("pretrain sets hold only color and position questions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectProposal {
    pub id: usize,
    pub category: String,
    pub color: String,
    pub image_idx: usize,
    pub bbox: BBox,
    /// Proposal id of the referent when this proposal is a jittered duplicate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageSet {
    pub sample_id: usize,
    pub proposals: Vec<ObjectProposal>,
}

impl ImageSet {
    pub fn n(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// One underlying object and the non-duplicate proposals that depict it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueObject {
    pub id: usize,
    pub category: String,
    pub color: String,
    pub appearances: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneTruth {
    pub objects: Vec<TrueObject>,
}

impl SceneTruth {
    pub fn count_of(&self, category: &str) -> usize {
        self.objects.iter().filter(|o| o.category == category).count()
    }

    pub fn present_categories(&self) -> Vec<&'static str> {
        CATEGORIES.iter().copied().filter(|c| self.count_of(c) > 0).collect()
    }
}

/// Deterministic synthetic region features.
///
/// Layout: `category code | color code | x1 y1 x2 y2 | noise`. Codes are
/// seeded random unit vectors, one per label.
#[derive(Debug, Clone)]
pub struct FeatureSynth {
    dim: usize,
    noise_std: f64,
    category_codes: Vec<Vec<f64>>,
    color_codes: Vec<Vec<f64>>,
}

impl FeatureSynth {
    pub const MIN_DIM: usize = 8;

    pub fn new(seed: u64, dim: usize, noise_std: f64) -> Result<Self> {
        if dim < Self::MIN_DIM {
            return Err(Error::InvalidConfig(format!("feature dim {dim} < {}", Self::MIN_DIM)));
        }
        let (cat_dim, col_dim) = Self::split(dim);
        let codes = |salt: u64, count: usize, d: usize| -> Vec<Vec<f64>> {
            (0..count)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ salt, i as u64));
                    unit_vector(&mut rng, d)
                })
                .collect()
        };
        Ok(Self {
            dim,
            noise_std,
            category_codes: codes(0xC47E_6023, CATEGORIES.len(), cat_dim),
            color_codes: codes(0xC010_5EED, COLORS.len(), col_dim),
        })
    }

    pub fn from_config(cfg: &GenConfig) -> Result<Self> {
        Self::new(cfg.feature_seed, cfg.feature_dim, cfg.noise_std)
    }

    fn split(dim: usize) -> (usize, usize) {
        (dim / 3, dim / 4)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn synthesize(&self, category: &str, color: &str, bbox: &BBox, noise_seed: u64) -> Result<Vec<f64>> {
        let cat = category_index(category)?;
        let col = color_index(color)?;
        let mut out = Vec::with_capacity(self.dim);
        out.extend_from_slice(&self.category_codes[cat]);
        out.extend_from_slice(&self.color_codes[col]);
        out.extend_from_slice(&bbox.coords());
        let rest = self.dim - out.len();
        if rest > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            for _ in 0..rest {
                let z: f64 = StandardNormal.sample(&mut rng);
                out.push(self.noise_std * z);
            }
        }
        Ok(out)
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// SplitMix64 finalizer over `(seed, stream)`; used to derive independent
/// sub-seeds so that parallel and serial generation agree.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_seed(master: u64, sample_id: usize) -> u64 {
    mix_seed(master, sample_id as u64)
}

/// Noise seed for one proposal's feature vector.
pub fn proposal_noise_seed(master: u64, sample_id: usize, proposal_id: usize) -> u64 {
    mix_seed(mix_seed(master ^ 0xFEA7_0000, sample_id as u64), proposal_id as u64)
}

/// Count targets for a count question: with probability `bias_skew` the
/// count is two or three, otherwise uniform over one and four..nine.
pub fn draw_biased_count(rng: &mut impl Rng, bias_skew: f64) -> usize {
    const REST: [usize; 7] = [1, 4, 5, 6, 7, 8, 9];
    if rng.random::<f64>() < bias_skew {
        if rng.random::<bool>() {
            2
        } else {
            3
        }
    } else {
        REST[rng.random_range(0..REST.len())]
    }
}

/// Builds one scene. `count_target` forces an exact number of true objects
/// of one category; every other object then uses a different category.
pub fn generate_scene(
    cfg: &GenConfig,
    synth: &FeatureSynth,
    sample_id: usize,
    rng: &mut ChaCha8Rng,
    count_target: Option<(&str, usize)>,
) -> Result<(ImageSet, SceneTruth)> {
    let CountRange { min, max } = cfg.objects_per_image;
    let mut per_image: Vec<Vec<(String, String, BBox)>> = vec![Vec::new(); NUM_IMAGES];

    let mut planned: Vec<Vec<Option<String>>> = (0..NUM_IMAGES)
        .map(|_| vec![None; rng.random_range(min..=max)])
        .collect();
    if let Some((target, count)) = count_target {
        category_index(target)?;
        for _ in 0..count {
            let img = rng.random_range(0..NUM_IMAGES);
            match planned[img].iter_mut().find(|s| s.is_none()) {
                Some(slot) => *slot = Some(target.to_string()),
                None => planned[img].push(Some(target.to_string())),
            }
        }
    }
    let fillers: Vec<&str> = match count_target {
        Some((t, _)) => CATEGORIES.iter().copied().filter(|c| *c != t).collect(),
        None => CATEGORIES.to_vec(),
    };

    for (img, slots) in planned.into_iter().enumerate() {
        for slot in slots {
            let category = slot.unwrap_or_else(|| fillers.choose(rng).unwrap().to_string());
            let color = COLORS.choose(rng).unwrap().to_string();
            let existing: Vec<BBox> = per_image[img].iter().map(|(_, _, b)| *b).collect();
            let bbox = place_box(rng, &existing);
            per_image[img].push((category, color, bbox));
        }
    }

    // Appearances: (object id, image, box). Cross-image reappearances share the id.
    let mut objects = Vec::new();
    let mut appearances: Vec<(usize, usize, BBox)> = Vec::new();
    for (img, objs) in per_image.iter().enumerate() {
        for (category, color, bbox) in objs {
            let id = objects.len();
            objects.push(TrueObject {
                id,
                category: category.clone(),
                color: color.clone(),
                appearances: Vec::new(),
            });
            appearances.push((id, img, *bbox));
            if rng.random::<f64>() < cfg.cross_image_rate {
                let neighbor = match img {
                    0 => 1,
                    i if i == NUM_IMAGES - 1 => i - 1,
                    i => {
                        if rng.random::<bool>() {
                            i + 1
                        } else {
                            i - 1
                        }
                    }
                };
                appearances.push((id, neighbor, translate(rng, bbox)));
            }
        }
    }
    appearances.sort_by_key(|(_, img, _)| *img);

    let mut proposals = Vec::new();
    for (obj_id, img, bbox) in appearances {
        let referent = proposals.len();
        objects[obj_id].appearances.push(referent);
        let (category, color) = (objects[obj_id].category.clone(), objects[obj_id].color.clone());
        proposals.push((category.clone(), color.clone(), img, bbox, None));
        if rng.random::<f64>() < cfg.dup_proposal_rate {
            let dup = jitter(rng, &bbox, cfg.dup_jitter, cfg.dup_iou_min);
            proposals.push((category, color, img, dup, Some(referent)));
        }
    }

    let proposals = proposals
        .into_iter()
        .enumerate()
        .map(|(id, (category, color, image_idx, bbox, duplicate_of))| ObjectProposal {
            id,
            category,
            color,
            image_idx,
            bbox,
            duplicate_of,
            feature: Vec::new(),
        })
        .collect();
    let mut set = ImageSet { sample_id, proposals };
    fill_features(&mut set, cfg.seed, synth)?;
    Ok((set, SceneTruth { objects }))
}

/// (Re)computes every proposal feature from labels, box and seeds.
pub fn fill_features(set: &mut ImageSet, master_seed: u64, synth: &FeatureSynth) -> Result<()> {
    for p in &mut set.proposals {
        p.feature = synth.synthesize(&p.category, &p.color, &p.bbox, proposal_noise_seed(master_seed, set.sample_id, p.id))?;
    }
    Ok(())
}

fn place_box(rng: &mut impl Rng, existing: &[BBox]) -> BBox {
    let mut candidate = random_box(rng);
    for _ in 0..PLACEMENT_TRIES {
        if existing.iter().all(|b| iou(b, &candidate) <= MAX_TRUE_OVERLAP) {
            break;
        }
        candidate = random_box(rng);
    }
    candidate
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let w = rng.random_range(0.08..0.3);
    let h = rng.random_range(0.08..0.3);
    let x1 = rng.random_range(0.0..(1.0 - w));
    let y1 = rng.random_range(0.0..(1.0 - h));
    BBox::new(x1, y1, (x1 + w).min(1.0), (y1 + h).min(1.0)).expect("in-range box")
}

fn translate(rng: &mut impl Rng, b: &BBox) -> BBox {
    let w = b.x2() - b.x1();
    let dx: f64 = rng.random_range(-0.15..0.15);
    let x1 = (b.x1() + dx).clamp(0.0, 1.0 - w);
    BBox::new(x1, b.y1(), (x1 + w).min(1.0), b.y2()).expect("translated box stays in range")
}

/// Perturbs every coordinate by up to `amount`, clamps to the unit square and
/// retries until the IoU with the source box reaches `iou_min`.
fn jitter(rng: &mut impl Rng, b: &BBox, amount: f64, iou_min: f64) -> BBox {
    if amount > 0.0 {
        for _ in 0..PLACEMENT_TRIES {
            let c = b.coords().map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0));
            if let Ok(candidate) = BBox::new(c[0], c[1], c[2], c[3]) {
                if iou(b, &candidate) >= iou_min {
                    return candidate;
                }
            }
        }
    }
    *b
}

/// Sanity checks that the generator's own output obeys its invariants.
pub fn check_duplicates(set: &ImageSet, iou_min: f64) -> Result<()> {
    for p in &set.proposals {
        if let Some(r) = p.duplicate_of {
            let referent = set
                .proposals
                .iter()
                .find(|q| q.id == r)
                .ok_or_else(|| Error::OutOfRange(format!("proposal {} refers to missing {r}", p.id)))?;
            if referent.image_idx != p.image_idx || iou(&referent.bbox, &p.bbox) < iou_min {
                return Err(Error::OutOfRange(format!("duplicate {} does not overlap its referent", p.id)));
            }
        }
    }
    Ok(())
}
