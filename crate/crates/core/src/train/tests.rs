use super::*;
use crate::data::{gen_phantom, PhantomSpec};
use crate::network::{ModelConfig, Variant};
use crate::priors::uniform_priors_n;

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        channels: 4,
        kernel: 3,
        n_descriptors: 3,
        patch_size: 11,
        attention_kernel: 3,
        se_reduction: 2,
        seed: 3,
    }
}

fn pairs(n: usize, seed: u64) -> Vec<ImagePair> {
    let spec = PhantomSpec {
        height: 64,
        width: 64,
        sigma: 0.06,
    };
    (0..n)
        .map(|i| {
            let id = format!("img{i:02}");
            let (ndct, ldct) = gen_phantom(&spec, &id, seed).unwrap();
            ImagePair { id, ldct, ndct }
        })
        .collect()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        schedule: LrSchedule {
            lr0: 1e-3,
            ..LrSchedule::default()
        },
        max_epochs: epochs,
        weighting: Weighting::Uniform,
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_examples() {
    let s = LrSchedule::default();
    for e in 1..=5 {
        assert_eq!(s.lr(e), 1e-5);
    }
    assert_eq!(s.lr(6), 5e-6);
    assert_eq!(s.lr(10), 5e-6);
    assert_eq!(s.lr(11), 2.5e-6);
    assert_eq!(s.lr(16), 1.25e-6);
    // 1e-5 / 2^17 < 1e-10 <= 1e-5 / 2^16
    assert!(s.lr(81) > 1e-10);
    assert_eq!(s.lr(86), 1e-10);
    assert_eq!(s.lr(151), 1e-10);
    assert_eq!(s.lr(usize::MAX), 1e-10);
}

#[test]
fn schedule_is_non_increasing() {
    let s = LrSchedule::default();
    for e in 1..200 {
        assert!(s.lr(e + 1) <= s.lr(e));
    }
}

#[test]
fn early_stopping_fires_after_patience() {
    let mut es = EarlyStopping::new(7);
    assert!(es.observe(1.0).improved);
    for i in 1..7 {
        let d = es.observe(1.0 + i as f64);
        assert!(!d.improved && !d.stop, "stopped after {i}");
    }
    assert!(es.observe(1.0).stop, "equal value is not an improvement");
    assert_eq!(es.best(), 1.0);
}

#[test]
fn early_stopping_resets_on_improvement() {
    let mut es = EarlyStopping::new(2);
    es.observe(1.0);
    assert!(!es.observe(2.0).stop);
    assert!(es.observe(0.5).improved);
    assert_eq!(es.since_best(), 0);
    assert!(!es.observe(0.6).stop);
    assert!(es.observe(0.7).stop);
}

#[test]
fn weighting_names() {
    for w in Weighting::ALL {
        assert_eq!(w.as_str().parse::<Weighting>().unwrap(), w);
        let json = serde_json::to_string(&w).unwrap();
        assert_eq!(json, format!("\"{w}\""));
    }
    assert!(matches!("clip".parse::<Weighting>(), Err(Error::Config(_))));
}

#[test]
fn prior_source_resolution() {
    assert_eq!(
        PriorSource::resolve(false, 17, Weighting::ClipFile, None, 0).unwrap(),
        PriorSource::None
    );
    assert!(matches!(
        PriorSource::resolve(true, 17, Weighting::ClipFile, None, 0),
        Err(Error::Prior(_))
    ));
    let PriorSource::Shared(u) = PriorSource::resolve(true, 17, Weighting::Uniform, None, 0).unwrap() else {
        panic!("expected shared prior");
    };
    assert!(u.probs().iter().all(|&p| (p - 1.0 / 17.0).abs() < 1e-15));
    assert_eq!(u.descriptors(), &DescriptorSet::default());
    let a = PriorSource::resolve(true, 3, Weighting::Random, None, 5).unwrap();
    let b = PriorSource::resolve(true, 3, Weighting::Random, None, 5).unwrap();
    assert_eq!(a, b);
    let table = PriorTable::new(DescriptorSet::default());
    assert!(matches!(
        PriorSource::resolve(true, 3, Weighting::ClipFile, Some(table), 0),
        Err(Error::Prior(_))
    ));
}

#[test]
fn per_image_source_reports_missing_ids() {
    let mut table = PriorTable::new(uniform_priors_n(3).unwrap().descriptors().clone());
    table.insert("a", uniform_priors_n(3).unwrap()).unwrap();
    let src = PriorSource::resolve(true, 3, Weighting::ClipFile, Some(table), 0).unwrap();
    assert!(src.for_image("a").unwrap().is_some());
    assert!(matches!(src.check_covers(&["a".into(), "b".into()]), Err(Error::Prior(_))));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            rotate_prob: 1.5,
            ..TrainConfig::default()
        },
        TrainConfig {
            schedule: LrSchedule {
                lr0: 1e-12,
                ..LrSchedule::default()
            },
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
    let parsed: TrainConfig = toml::from_str("patience = 3\nweighting = \"random\"\n[schedule]\nlr0 = 2e-5\n").unwrap();
    assert_eq!(parsed.patience, 3);
    assert_eq!(parsed.weighting, Weighting::Random);
    assert_eq!(parsed.schedule.lr0, 2e-5);
    assert_eq!(parsed.schedule.halve_every, 5);
}

#[test]
fn one_step_lowers_the_batch_loss() {
    let data = pairs(1, 11);
    let grid = PatchGrid::for_image(&data[0].ldct, 11).unwrap();
    let x = grid.patchify(&data[0].ldct.standardized()).unwrap();
    let y = grid.patchify(&data[0].ndct.standardized()).unwrap();
    let prior = vec![uniform_priors_n(3).unwrap()];
    for seed in 0..20 {
        let mut net = Network::new(ModelConfig {
            seed,
            ..small(Variant::BioAtt)
        })
        .unwrap();
        let mut adam = Adam::new(net.params());
        let before = train_step(&mut net, &mut adam, &x, &y, &prior, 1e-5).unwrap();
        let after = train_step(&mut net, &mut adam, &x, &y, &prior, 0.0).unwrap();
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn training_is_deterministic_and_keeps_the_best_epoch() {
    let data = pairs(4, 2);
    let refs: Vec<&ImagePair> = data.iter().collect();
    let (tr, va) = refs.split_at(3);
    let cfg = quick(3);
    let priors = PriorSource::resolve(true, 3, Weighting::Uniform, None, 0).unwrap();
    let run = || {
        let mut seen = Vec::new();
        let out = train(Network::new(small(Variant::BioAtt)).unwrap(), &cfg, tr, va, &priors, |r| {
            seen.push(r.epoch)
        })
        .unwrap();
        (out, seen)
    };
    let (a, seen) = run();
    let (b, _) = run();
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.params(), b.best.params());

    let best = a.history.iter().map(|r| r.val_rmse).fold(f64::INFINITY, f64::min);
    assert_eq!(a.history[a.best_epoch - 1].val_rmse, best);
    for w in a.history.windows(2) {
        assert!(w[1].best_val_rmse <= w[0].best_val_rmse);
    }
    let again = evaluate(&a.best, va, &priors, &EvalOptions::default(), "v").unwrap();
    assert_eq!(again.rmse.mean, best);
    assert_eq!(a.best_optimizer.step_count(), (a.best_epoch * 75usize.div_ceil(16)) as u64);

    // 3 images x 25 patches in batches of 16
    assert_eq!(a.input_shapes, vec![vec![16, 1, 11, 11], vec![11, 1, 11, 11]]);
    let csv = history_csv(&a.history);
    assert!(csv.starts_with("epoch,lr,train_mse,val_rmse,val_psnr,val_ssim\n1,1e-3,"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn whole_image_mode_feeds_full_images() {
    let data = pairs(3, 4);
    let refs: Vec<&ImagePair> = data.iter().collect();
    let cfg = TrainConfig {
        whole_image: true,
        ..quick(1)
    };
    let out = train(
        Network::new(small(Variant::Base)).unwrap(),
        &cfg,
        &refs[..2],
        &refs[2..],
        &PriorSource::None,
        |_| {},
    )
    .unwrap();
    assert_eq!(out.input_shapes, vec![vec![1, 1, 64, 64]]);
    assert_eq!(out.best_optimizer.step_count(), 2);
}

#[test]
fn training_rejects_missing_inputs() {
    let data = pairs(2, 4);
    let refs: Vec<&ImagePair> = data.iter().collect();
    let net = Network::new(small(Variant::Base)).unwrap();
    assert!(matches!(
        train(net.clone(), &quick(1), &refs, &[], &PriorSource::None, |_| {}),
        Err(Error::Data(_))
    ));
    let table = PriorSource::PerImage(PriorTable::new(uniform_priors_n(3).unwrap().descriptors().clone()));
    assert!(matches!(
        train(net, &quick(1), &refs[..1], &refs[1..], &table, |_| {}),
        Err(Error::Prior(_))
    ));
}

#[test]
fn denoise_fills_uncovered_pixels_from_the_input() {
    let data = pairs(1, 9);
    let net = Network::new(small(Variant::Spatial)).unwrap();
    // 64 with patch 11 leaves gaps between anchors 0,13,26,39,53
    let grid = PatchGrid::for_image(&data[0].ldct, 11).unwrap();
    let cover = grid.coverage();
    let out = denoise_standardized(&net, &data[0].ldct, None, &EvalOptions::default()).unwrap();
    let input = data[0].ldct.standardized();
    let mut uncovered = 0;
    for (i, &c) in cover.iter().enumerate() {
        if c == 0 {
            uncovered += 1;
            assert_eq!(out.data()[i], input.data()[i]);
        }
    }
    assert!(uncovered > 0);
    let chunked = denoise_standardized(
        &net,
        &data[0].ldct,
        None,
        &EvalOptions {
            batch: 7,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    assert_eq!(out, chunked);
    let whole = denoise(
        &net,
        &data[0].ldct,
        None,
        &EvalOptions {
            whole_image: true,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    assert_eq!((whole.height(), whole.width()), (64, 64));
}

#[test]
fn identity_baseline_matches_direct_metrics() {
    let data = pairs(2, 6);
    let refs: Vec<&ImagePair> = data.iter().collect();
    let r = evaluate_identity(&refs, &EvalOptions::default(), "ldct").unwrap();
    let direct = crate::metrics::rmse(data[0].ndct.standardized().data(), data[0].ldct.standardized().data()).unwrap();
    assert_eq!(r.images[0].rmse, direct);
    assert!((r.rmse.mean - 0.06).abs() < 0.02);
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let data = pairs(3, 8);
    let refs: Vec<&ImagePair> = data.iter().collect();
    let priors = PriorSource::resolve(true, 3, Weighting::Random, None, 4).unwrap();
    let out = train(
        Network::new(small(Variant::BioAtt)).unwrap(),
        &quick(1),
        &refs[..2],
        &refs[2..],
        &priors,
        |_| {},
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    crate::checkpoint::save(&path, &out.best, out.best_epoch as u64, Some(&out.best_optimizer)).unwrap();
    let loaded = crate::checkpoint::load(&path).unwrap().network;
    let opts = EvalOptions::default();
    let direct = evaluate(&out.best, &refs, &priors, &opts, "x").unwrap();
    let via_file = evaluate(&loaded, &refs, &priors, &opts, "x").unwrap();
    assert_eq!(direct, via_file);
    assert_eq!(direct, evaluate(&out.best, &refs, &priors, &opts, "x").unwrap());
}
