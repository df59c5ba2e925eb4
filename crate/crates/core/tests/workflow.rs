//! Public-API round trip: phantoms on disk, fixture priors, training,
//! checkpoint and evaluation.

use bioatt_core::checkpoint;
use bioatt_core::data::{gen_phantom, split_dataset, Dataset, ImagePair, PhantomSpec, SplitSpec};
use bioatt_core::network::{ModelConfig, Network, Variant};
use bioatt_core::priors::{fixture_priors, DescriptorSet, Normalization, PriorTable};
use bioatt_core::train::{evaluate, evaluate_identity, train, EvalOptions, LrSchedule, PriorSource, TrainConfig};

#[test]
fn phantoms_to_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { height: 64, width: 64, sigma: 0.06 };
    let pairs = (0..8)
        .map(|i| {
            let id = format!("ph{i:04}");
            let (ndct, ldct) = gen_phantom(&spec, &id, 11).unwrap();
            ImagePair { id, ldct, ndct }
        })
        .collect();
    Dataset { pairs }.save_dir(tmp.path()).unwrap();
    let ds = Dataset::load_dir(tmp.path()).unwrap();
    assert_eq!(ds.pairs.len(), 8);

    let descriptors = DescriptorSet::default();
    let mut table = PriorTable::new(descriptors.clone());
    for p in &ds.pairs {
        table.insert(p.id.clone(), fixture_priors(p.ldct.pixels(), &descriptors).unwrap()).unwrap();
    }
    let path = tmp.path().join("priors.json");
    table.save(&path).unwrap();
    let table = PriorTable::load(&path, &descriptors, Normalization::Strict).unwrap();

    let split = split_dataset(&ds.ids(), &SplitSpec::default()).unwrap();
    let (tr, va, te) = (
        ds.subset(&split.train).unwrap(),
        ds.subset(&split.val).unwrap(),
        ds.subset(&split.test).unwrap(),
    );
    let model = ModelConfig { variant: Variant::BioAtt, channels: 6, patch_size: 29, ..Default::default() };
    let cfg = TrainConfig {
        schedule: LrSchedule { lr0: 1e-3, ..Default::default() },
        max_epochs: 2,
        ..Default::default()
    };
    let priors = PriorSource::PerImage(table);
    let mut epochs = 0;
    let outcome = train(Network::new(model).unwrap(), &cfg, &tr, &va, &priors, |_| epochs += 1).unwrap();
    assert_eq!(epochs, 2);

    let ckpt = tmp.path().join("model.batt");
    checkpoint::save(&ckpt, &outcome.best, outcome.best_epoch as u64, None).unwrap();
    let loaded = checkpoint::load(&ckpt).unwrap().network;
    let opts = EvalOptions::default();
    let a = evaluate(&outcome.best, &te, &priors, &opts, "bioatt").unwrap();
    let b = evaluate(&loaded, &te, &priors, &opts, "bioatt").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.images.len(), te.len());
    let ldct = evaluate_identity(&te, &opts, "ldct").unwrap();
    assert!(a.rmse.mean.is_finite() && ldct.rmse.mean > 0.0);
}
