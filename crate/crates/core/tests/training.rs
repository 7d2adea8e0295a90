use setvqa::dataset::{generate_dataset, Dataset};
use setvqa::scenes::{GenConfig, QuestionMix};
use setvqa::training::{pretrain_then_finetune, train, Mode, TrainConfig, TrainRun};
use setvqa::traincore::OptimizerKind;
use setvqa::Error;

fn data(seed: u64, n: usize) -> Dataset {
    generate_dataset(&GenConfig { seed, num_samples: n, feature_dim: 8, ..GenConfig::default() }).unwrap()
}

fn pretrain_data(seed: u64, n: usize) -> Dataset {
    generate_dataset(&GenConfig {
        seed,
        num_samples: n,
        feature_dim: 8,
        question_mix: QuestionMix::pretrain(),
        pretrain: true,
        ..GenConfig::default()
    })
    .unwrap()
}

fn small(mode: Mode) -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 4, word_dim: 6, hidden_dim: 8, mode, seed: 3, ..TrainConfig::default() }
}

fn checkpoint(run: &TrainRun) -> String {
    run.model.to_checkpoint().unwrap().to_json().unwrap()
}

#[test]
fn smoke_ten_samples() {
    for mode in Mode::ALL {
        let run = train(&data(1, 10), &TrainConfig { epochs: 1, ..small(mode) }).unwrap();
        let m = &run.manifest;
        assert_eq!(m.phases.len(), 1);
        assert_eq!(m.phases[0].epochs.len(), 1);
        let e = &m.phases[0].epochs[0];
        assert!(e.loss.is_finite(), "{mode:?}");
        assert!((0.0..=1.0).contains(&e.train_accuracy));
        assert_eq!(m.optimizer_steps, 3); // ceil(10 / 4)
        assert!(m.diverged.is_none());
        assert_eq!(m.dataset_hashes.len(), 1);
    }
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let d = data(2, 24);
    for mode in Mode::ALL {
        let a = train(&d, &small(mode)).unwrap();
        let b = train(&d, &small(mode)).unwrap();
        assert_eq!(checkpoint(&a), checkpoint(&b), "{mode:?}");
        assert_eq!(a.manifest.phases, b.manifest.phases);
    }
}

#[test]
fn thread_count_does_not_change_the_result() {
    let d = data(4, 30);
    let cfg = TrainConfig { batch_size: 10, ..small(Mode::AdvregCe) };
    let run_with = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| checkpoint(&train(&d, &cfg).unwrap()))
    };
    assert_eq!(run_with(1), run_with(4));
}

#[test]
fn different_seeds_differ() {
    let d = data(2, 12);
    let a = train(&d, &small(Mode::Baseline)).unwrap();
    let b = train(&d, &TrainConfig { seed: 4, ..small(Mode::Baseline) }).unwrap();
    assert_ne!(checkpoint(&a), checkpoint(&b));
}

#[test]
fn zero_weight_extras_follow_the_baseline_trajectory() {
    let d = data(5, 16);
    let base = train(&d, &small(Mode::Baseline)).unwrap();
    for mode in [Mode::AdvregCe, Mode::AdvregBce] {
        let run = train(&d, &TrainConfig { lambda_r: 0.0, ..small(mode) }).unwrap();
        assert_eq!(checkpoint(&run), checkpoint(&base), "{mode:?}");
    }
    // the regression head adds tensors; every shared one must match bit for bit
    let reg = train(&d, &TrainConfig { lambda_reg: 0.0, ..small(Mode::Regression) }).unwrap();
    let shared = base.model.params().tensors();
    for t in shared {
        let other = reg.model.params().tensor(reg.model.params().id(&t.name).unwrap());
        assert_eq!(t.values, other.values, "{}", t.name);
    }
}

#[test]
fn full_batch_sgd_loss_does_not_increase() {
    // one step per epoch, so each epoch's loss is the loss before that step
    let d = data(6, 8);
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 8,
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.05,
        ..small(Mode::Baseline)
    };
    let run = train(&d, &cfg).unwrap();
    let losses: Vec<f64> = run.manifest.phases[0].epochs.iter().map(|e| e.loss).collect();
    assert_eq!(losses.len(), 10);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "{losses:?}");
    }
}

#[test]
fn plateau_stops_early() {
    let cfg = TrainConfig {
        epochs: 10,
        patience: Some(2),
        min_delta: 1.0,
        optimizer: OptimizerKind::Sgd,
        learning_rate: 1e-9,
        ..small(Mode::Baseline)
    };
    let run = train(&data(7, 8), &cfg).unwrap();
    let phase = &run.manifest.phases[0];
    assert!(phase.stopped_early);
    assert_eq!(phase.epochs.len(), 3);
}

#[test]
fn divergence_is_flagged() {
    let cfg = TrainConfig {
        epochs: 5,
        optimizer: OptimizerKind::Sgd,
        learning_rate: 1e300,
        batch_size: 2,
        ..small(Mode::Baseline)
    };
    let run = train(&data(8, 8), &cfg).unwrap();
    let div = run.manifest.diverged.expect("should diverge");
    assert_eq!(div.phase, "main");
    assert!(run.model.params().check_finite().is_ok());
}

#[test]
fn invalid_configs_rejected() {
    let d = data(1, 4);
    for cfg in [
        TrainConfig { lambda_r: -0.1, ..small(Mode::AdvregCe) },
        TrainConfig { lambda_reg: -1.0, ..small(Mode::Regression) },
        TrainConfig { learning_rate: 0.0, ..small(Mode::Baseline) },
        TrainConfig { batch_size: 0, ..small(Mode::Baseline) },
        TrainConfig { adv_cap: 0.0, ..small(Mode::AdvregCe) },
    ] {
        assert!(matches!(train(&d, &cfg), Err(Error::InvalidConfig(_))), "{cfg:?}");
    }
    assert!(matches!(train(&Dataset::from_annotations(Vec::new()), &small(Mode::Baseline)), Err(Error::EmptyInput(_))));
    let imported = Dataset::from_annotations(d.qa().cloned().collect());
    assert!(matches!(train(&imported, &small(Mode::Baseline)), Err(Error::Unsupported(_))));
}

#[test]
fn zero_phase_one_epochs_is_plain_training() {
    let (pre, main) = (pretrain_data(9, 12), data(10, 12));
    let cfg = TrainConfig { pretrain_epochs: 0, ..small(Mode::Baseline) };
    let a = pretrain_then_finetune(&pre, &main, &cfg).unwrap();
    let b = train(&main, &cfg).unwrap();
    assert_eq!(checkpoint(&a), checkpoint(&b));
    assert_eq!(a.manifest.phases, b.manifest.phases);
}

#[test]
fn two_phase_vocabulary_covers_both_sets() {
    let (pre, main) = (pretrain_data(11, 16), data(12, 16));
    let cfg = TrainConfig { pretrain_epochs: 1, epochs: 1, ..small(Mode::CountAware) };
    let run = pretrain_then_finetune(&pre, &main, &cfg).unwrap();
    let vocab = run.model.answers();
    assert!(vocab.is_superset_of(&pre.answer_vocab().unwrap()));
    assert!(vocab.is_superset_of(&main.answer_vocab().unwrap()));
    let names: Vec<&str> = run.manifest.phases.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["pretrain", "main"]);
    assert_eq!(run.manifest.dataset_hashes.len(), 2);
}

#[test]
fn two_phase_preconditions() {
    let main = data(13, 8);
    let cfg = TrainConfig { pretrain_epochs: 1, ..small(Mode::Baseline) };
    // a main-style set is not pre-training material
    assert!(matches!(pretrain_then_finetune(&data(14, 8), &main, &cfg), Err(Error::InvalidConfig(_))));
    let mut pre_cfg = GenConfig {
        seed: 15,
        num_samples: 8,
        feature_dim: 8,
        question_mix: QuestionMix::pretrain(),
        pretrain: true,
        ..GenConfig::default()
    };
    pre_cfg.feature_seed = 99;
    let foreign = generate_dataset(&pre_cfg).unwrap();
    assert!(matches!(pretrain_then_finetune(&foreign, &main, &cfg), Err(Error::VocabMismatch(_))));
}

#[test]
fn gradcheck_passes_in_every_mode() {
    use setvqa::training::{gradcheck_mode, GradcheckSetup};
    for mode in Mode::ALL {
        for seed in 0..2 {
            let r = gradcheck_mode(mode, &GradcheckSetup { seed, ..GradcheckSetup::default() }).unwrap();
            assert!(r.passed, "{mode:?} seed {seed}: {:?}", r.worst.first());
            assert!(r.checked > 100);
        }
    }
}
