use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setvqa::counting::PlacedBox;
use setvqa::geometry::BBox;
use setvqa::model::*;
use setvqa::qgen::{AnswerVocab, QType};
use setvqa::traincore::Checkpoint;
use setvqa::Error;

const QUESTIONS: [&str; 4] = [
    "how many cars are there?",
    "what is the color of the sign?",
    "is there a wall in the scene?",
    "what is left of the person?",
];
const CATS: [&str; 4] = ["car", "sign", "wall", "person"];

fn answers(m: usize) -> AnswerVocab {
    AnswerVocab::from_labels((0..m).map(|i| format!("a{i:03}")))
}

fn tiny(count_aware: bool, regression_head: bool, seed: u64) -> Model {
    let cfg = ModelConfig { word_dim: 6, hidden_dim: 8, feature_dim: 8, num_answers: 5, count_aware, regression_head };
    Model::new(cfg, WordVocab::from_texts(QUESTIONS), answers(5), seed).unwrap()
}

fn random_input(model: &Model, rng: &mut ChaCha8Rng, n: usize, question: &str) -> ModelInput {
    let df = model.config().feature_dim;
    let boxes = (0..n)
        .map(|_| {
            let (w, h) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
            let (x, y) = (rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h));
            PlacedBox { image_idx: rng.random_range(0..2), bbox: BBox::new(x, y, x + w, y + h).unwrap() }
        })
        .collect();
    ModelInput {
        tokens: model.words().encode(question),
        features: (0..n * df).map(|_| rng.random_range(-1.0..1.0)).collect(),
        boxes,
        categories: (0..n).map(|_| CATS[rng.random_range(0..CATS.len())].to_string()).collect(),
    }
}

fn zero_named(model: &mut Model, prefix: &str) {
    let names: Vec<String> =
        model.params().tensors().iter().filter(|t| t.name.starts_with(prefix)).map(|t| t.name.clone()).collect();
    for name in names {
        let id = model.params().id(&name).unwrap();
        model.params_mut().get_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn one_token_question_is_the_transformed_embedding() {
    let model = tiny(false, false, 3);
    let p = model.params();
    let tok = model.words().id("sign");
    let (dw, dh) = (6, 8);
    let emb = &p.get(p.id("embedding").unwrap())[tok * dw..(tok + 1) * dw];
    let (w, b) = (p.get(p.id("question.w").unwrap()), p.get(p.id("question.b").unwrap()));
    let expect: Vec<f64> =
        (0..dh).map(|o| (b[o] + (0..dw).map(|k| w[o * dw + k] * emb[k]).sum::<f64>()).tanh()).collect();
    assert_eq!(model.encode_question(&[tok]).unwrap(), expect);
}

#[test]
fn token_order_is_irrelevant() {
    let model = tiny(false, false, 3);
    let a = model.encode_question(&model.words().encode("what is the color of the sign")).unwrap();
    let b = model.encode_question(&model.words().encode("sign the of color the is what")).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn unknown_words_share_the_reserved_slot() {
    let model = tiny(false, false, 3);
    assert_eq!(model.words().id("zebra"), 0);
    let a = model.encode_question(&model.words().encode("zebra")).unwrap();
    let b = model.encode_question(&model.words().encode("giraffe")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_question_rejected() {
    let model = tiny(false, false, 3);
    assert!(matches!(model.encode_question(&[]), Err(Error::EmptyInput(_))));
}

#[test]
fn fully_scrubbed_input_depends_only_on_the_question() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for count_aware in [false, true] {
        let model = tiny(count_aware, false, 5);
        let reference = {
            let input = random_input(&model, &mut rng, 3, QUESTIONS[0]);
            model.forward(&input, &[0, 1, 2]).unwrap().logits
        };
        for _ in 0..100 {
            let n = rng.random_range(1..8);
            let input = random_input(&model, &mut rng, n, QUESTIONS[0]);
            let all: Vec<usize> = (0..n).collect();
            assert_eq!(model.forward(&input, &all).unwrap().logits, reference, "count_aware={count_aware}");
        }
    }
}

#[test]
fn scrubbing_matches_literally_zeroed_rows() {
    // Without the counting path, the placeholder row must reproduce k real
    // zero-feature rows.
    let model = tiny(false, false, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let df = model.config().feature_dim;
    for _ in 0..50 {
        let n = rng.random_range(1..7);
        let input = random_input(&model, &mut rng, n, QUESTIONS[2]);
        let scrub: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
        let mut zeroed = input.clone();
        for &i in &scrub {
            zeroed.features[i * df..(i + 1) * df].iter_mut().for_each(|x| *x = 0.0);
        }
        let a = model.forward(&input, &scrub).unwrap();
        let b = model.forward(&zeroed, &[]).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        for (x, y) in a.attention.iter().zip(&b.attention) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_features_are_allowed_and_nan_is_not() {
    let model = tiny(true, false, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut input = random_input(&model, &mut rng, 3, QUESTIONS[1]);
    input.features.iter_mut().for_each(|v| *v = 0.0);
    assert!(model.forward(&input, &[]).is_ok());
    input.features[4] = f64::NAN;
    assert!(matches!(model.forward(&input, &[]), Err(Error::NonFinite { .. })));
}

#[test]
fn single_confident_proposal_keeps_its_features() {
    // Point u along q ∘ v so that a = σ(scale·|q ∘ v|²) → 1 and C = a.
    let mut model = tiny(true, false, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = random_input(&model, &mut rng, 1, QUESTIONS[0]);
    let q = model.encode_question(&input.tokens).unwrap();
    let p = model.params();
    let (w, b) = (p.get(p.id("visual.w").unwrap()), p.get(p.id("visual.b").unwrap()));
    let v: Vec<f64> = (0..8).map(|o| (b[o] + (0..8).map(|k| w[o * 8 + k] * input.features[k]).sum::<f64>()).tanh()).collect();
    let dir: Vec<f64> = q.iter().zip(&v).map(|(q, v)| q * v).collect();
    let norm2: f64 = dir.iter().map(|x| x * x).sum();
    let u_id = model.params().id("count.u").unwrap();
    for (u, d) in model.params_mut().get_mut(u_id).iter_mut().zip(&dir) {
        *u = 40.0 * d / norm2;
    }
    let out = model.forward(&input, &[]).unwrap();
    let info = out.count.unwrap();
    assert!(info.attention[0] > 1.0 - 1e-12);
    assert!((info.scores[0] - 1.0).abs() < 1e-12);
    assert!((info.c_hat - 1.0).abs() < 1e-12);
}

#[test]
fn zero_classifier_gives_uniform_probabilities() {
    let mut model = tiny(true, true, 1);
    zero_named(&mut model, "classifier");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = model.forward(&random_input(&model, &mut rng, 4, QUESTIONS[2]), &[]).unwrap();
    for p in &out.probs {
        assert!((p - 0.2).abs() < 1e-15);
    }
    assert_eq!(out.argmax(), 0);
}

fn output_with_logits(logits: Vec<f64>) -> ForwardOutput {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let probs = logits.iter().map(|l| (l - max).exp() / z).collect();
    ForwardOutput { logits, probs, attention: vec![], count: None, regression: None }
}

#[test]
fn classification_loss_cases() {
    let uniform = output_with_logits(vec![0.0; 4]);
    assert!((loss_classification(&uniform, 1).unwrap() - 4f64.ln()).abs() < 1e-15);
    let sure = output_with_logits(vec![60.0, 0.0, 0.0]);
    assert!(loss_classification(&sure, 0).unwrap() < 1e-25);
    let mixed = output_with_logits(vec![0.3, -1.7, 2.2, 0.0]);
    for g in 0..4 {
        assert!((loss_classification(&mixed, g).unwrap() + mixed.probs[g].ln()).abs() < 1e-12);
    }
    assert!(loss_classification(&mixed, 4).is_err());
}

#[test]
fn regression_loss_cases() {
    let mut out = output_with_logits(vec![0.0; 2]);
    out.regression = Some(3.0);
    assert_eq!(loss_regression(&out, QType::Count, 3.0).unwrap(), 0.0);
    out.regression = Some(5.0);
    assert_eq!(loss_regression(&out, QType::Count, 3.0).unwrap(), 4.0);
    assert!(loss_regression(&out, QType::Color, 3.0).is_err());
}

#[test]
fn scrub_objects_cases() {
    assert_eq!(scrub_objects("how many cars are there?", &["car", "person", "car"]), vec![0, 2]);
    assert_eq!(scrub_objects("how many people are there?", &["car", "person"]), vec![1]);
    assert!(scrub_objects("is it sunny?", &["car", "sign"]).is_empty());
    assert_eq!(scrub_objects("what is the color of the sign?", &["sign", "wall"]), vec![0]);
}

#[test]
fn adversarial_loss_cases() {
    let t = output_with_logits(vec![0.5, 1.0, -0.5]);
    let a = output_with_logits(vec![2.0, -1.0, 0.0]);
    let ce = loss_classification(&t, 1).unwrap();
    for kind in [AdvKind::Ce, AdvKind::Bce] {
        let cfg = AdvConfig { kind, lambda_r: 0.0, cap: 10.0 };
        assert_eq!(loss_adversarial(&t, &a, 1, &cfg).unwrap(), ce);
        let bad = AdvConfig { kind, lambda_r: -0.1, cap: 10.0 };
        assert!(matches!(loss_adversarial(&t, &a, 1, &bad), Err(Error::InvalidConfig(_))));
    }
    // CE(adv) for gold 1 is about 40, beyond the cap
    let confident = output_with_logits(vec![40.0, 0.0, 0.0]);
    let cfg = AdvConfig { kind: AdvKind::Ce, lambda_r: 0.1, cap: 10.0 };
    assert!((loss_adversarial(&t, &confident, 1, &cfg).unwrap() - (ce - 1.0)).abs() < 1e-12);
}

#[test]
fn bce_on_uniform_650_way_output() {
    // 650·(-ln(1 - x)) with x = 1/650, from the series Σ x^k / k.
    let x: f64 = 1.0 / 650.0;
    let series: f64 = (1..12).map(|k| x.powi(k) / k as f64).sum::<f64>() * 650.0;
    assert!((series - 1.00077).abs() < 5e-6);
    let t = output_with_logits(vec![0.0; 650]);
    let cfg = AdvConfig { kind: AdvKind::Bce, lambda_r: 1.0, cap: 10.0 };
    let total = loss_adversarial(&t, &t, 0, &cfg).unwrap();
    let bce = total - loss_classification(&t, 0).unwrap();
    assert!((bce - series).abs() < 1e-9, "{bce} vs {series}");
}

proptest! {
    #[test]
    fn probabilities_form_a_simplex(seed in 0u64..10_000, n in 1usize..6, ca in any::<bool>(), scale in 0.1..50.0f64) {
        let model = tiny(ca, false, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = random_input(&model, &mut rng, n, QUESTIONS[(seed % 4) as usize]);
        input.features.iter_mut().for_each(|v| *v *= scale);
        let out = model.forward(&input, &[]).unwrap();
        prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((out.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        if let Some(c) = out.count {
            prop_assert!(c.attention.iter().all(|a| *a > 0.0 && *a < 1.0));
        }
    }

    #[test]
    fn capped_adversarial_ce_falls_as_adversarial_ce_rises(l1 in -5.0..5.0f64, l2 in -5.0..5.0f64, d in 0.01..3.0f64) {
        // raising the gold logit margin on the scrubbed side lowers CE(adv)
        let t = output_with_logits(vec![0.2, 0.1, -0.3]);
        let cfg = AdvConfig { kind: AdvKind::Ce, lambda_r: 0.1, cap: 10.0 };
        let lo = output_with_logits(vec![l1, l2, 0.0]);
        let hi = output_with_logits(vec![l1, l2 + d, 0.0]);
        let (ce_lo, ce_hi) = (loss_classification(&lo, 0).unwrap(), loss_classification(&hi, 0).unwrap());
        prop_assume!(ce_hi < 10.0);
        prop_assert!(ce_hi > ce_lo);
        prop_assert!(loss_adversarial(&t, &hi, 0, &cfg).unwrap() < loss_adversarial(&t, &lo, 0, &cfg).unwrap());
    }
}

fn batch(model: &Model, seed: u64) -> Vec<(ModelInput, Target)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        (random_input(model, &mut rng, 4, QUESTIONS[0]), Target { gold: 2, count: Some(3.0) }),
        (random_input(model, &mut rng, 3, QUESTIONS[1]), Target { gold: 4, count: None }),
    ]
}

fn objectives() -> Vec<(&'static str, bool, bool, Objective)> {
    vec![
        ("baseline", false, false, Objective::Classification),
        ("count_aware", true, false, Objective::Classification),
        ("regression", false, true, Objective::Regression { lambda_reg: 0.1 }),
        ("advreg_ce", false, false, Objective::Adversarial(AdvConfig { kind: AdvKind::Ce, lambda_r: 0.1, cap: 10.0 })),
        ("advreg_bce", false, false, Objective::Adversarial(AdvConfig { kind: AdvKind::Bce, lambda_r: 0.1, cap: 10.0 })),
        ("count_aware+regression+advreg_ce", true, true, Objective::Adversarial(AdvConfig { kind: AdvKind::Ce, lambda_r: 0.3, cap: 10.0 })),
    ]
}

#[test]
fn every_loss_mode_passes_gradcheck() {
    for (name, ca, reg, obj) in objectives() {
        for seed in 0..3 {
            let model = tiny(ca, reg, seed);
            let report = model.gradcheck(&batch(&model, seed + 100), &obj, 1e-4).unwrap();
            assert!(report.passed, "{name} seed {seed}: {:?}", report.worst.first());
            assert!(report.checked > report.skipped * 10, "{name}: {} checked {} skipped", report.checked, report.skipped);
        }
    }
}

#[test]
fn count_aware_gradcheck_with_trained_count_functions() {
    let mut model = tiny(true, false, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for name in ["count.f1", "count.f2", "count.f3"] {
        let id = model.params().id(name).unwrap();
        model.params_mut().get_mut(id).iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let report = model.gradcheck(&batch(&model, 7), &Objective::Classification, 1e-4).unwrap();
    assert!(report.passed, "{:?}", report.worst.first());
}

#[test]
fn zero_and_doubled_upstream_gradients() {
    let model = tiny(true, true, 4);
    let b = batch(&model, 1);
    let input = &b[0].0;

    let mut g0 = model.params().zero_grads();
    model.trace(input, &[]).unwrap().backward(&model, &[0.0; 5], 0.0, &mut g0).unwrap();
    assert!(g0.iter().flatten().all(|v| *v == 0.0));

    let up = [0.3, -0.2, 0.5, 0.1, -0.7];
    let mut g1 = model.params().zero_grads();
    model.trace(input, &[]).unwrap().backward(&model, &up, 0.4, &mut g1).unwrap();
    let mut g2 = model.params().zero_grads();
    let up2: Vec<f64> = up.iter().map(|v| 2.0 * v).collect();
    model.trace(input, &[]).unwrap().backward(&model, &up2, 0.8, &mut g2).unwrap();
    for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn advreg_with_zero_weight_matches_classification_gradients() {
    let model = tiny(false, false, 6);
    let b = batch(&model, 3);
    let mut plain = model.params().zero_grads();
    let l0 = model.batch_loss(&b, &Objective::Classification, Some(&mut plain)).unwrap();
    let mut adv = model.params().zero_grads();
    let cfg = AdvConfig { kind: AdvKind::Ce, lambda_r: 0.0, cap: 10.0 };
    let l1 = model.batch_loss(&b, &Objective::Adversarial(cfg), Some(&mut adv)).unwrap();
    assert_eq!(l0.loss, l1.loss);
    assert_eq!(plain, adv);
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let model = tiny(true, true, 12);
    let text = model.to_checkpoint().unwrap().to_json().unwrap();
    let back = Model::from_checkpoint(&Checkpoint::from_json(&text).unwrap()).unwrap();
    assert_eq!(back.params(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = random_input(&model, &mut rng, 3, QUESTIONS[3]);
    assert_eq!(back.forward(&input, &[]).unwrap(), model.forward(&input, &[]).unwrap());
}

#[test]
fn invalid_configs_rejected() {
    let words = WordVocab::from_texts(QUESTIONS);
    let cfg = ModelConfig { num_answers: 1, ..ModelConfig::default() };
    assert!(Model::new(cfg, words.clone(), answers(1), 0).is_err());
    let cfg = ModelConfig { hidden_dim: 0, num_answers: 3, ..ModelConfig::default() };
    assert!(Model::new(cfg, words.clone(), answers(3), 0).is_err());
    let cfg = ModelConfig { num_answers: 3, ..ModelConfig::default() };
    assert!(matches!(Model::new(cfg, words, answers(4), 0), Err(Error::VocabMismatch(_))));
}

#[test]
fn same_seed_same_parameters() {
    let (a, b, c) = (tiny(true, true, 1), tiny(true, true, 1), tiny(true, true, 2));
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    assert!(a.params().tensors().iter().flat_map(|t| &t.values).all(|v| v.is_finite() && v.abs() <= 1.0));
}
