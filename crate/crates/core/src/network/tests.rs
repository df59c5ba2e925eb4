use super::*;
use crate::gradcheck::{check, GradCheckOptions};
use crate::priors::{uniform_priors_n, PriorDistribution};
use rand::Rng;

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        channels: 4,
        kernel: 3,
        n_descriptors: 3,
        patch_size: 11,
        attention_kernel: 3,
        se_reduction: 2,
        seed: 7,
    }
}

fn one_hot(n: usize, j: usize) -> PriorDistribution {
    let mut p = vec![0.0; n];
    p[j] = 1.0;
    PriorDistribution::new(p, uniform_priors_n(n).unwrap().descriptors().clone()).unwrap()
}

fn noise<T: Element>(shape: Vec<usize>, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| cst(rng.random_range(-1.0..1.0)))
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
    }
    let err = "cbam".parse::<Variant>().unwrap_err();
    assert_eq!(err.class(), crate::error::ErrorClass::Usage);
}

#[test]
fn parameter_counts() {
    let base = Network::<f32>::new(ModelConfig { variant: Variant::Base, ..Default::default() }).unwrap();
    // conv1 + conv2..5 + deconv1..4 + deconv5
    let expect = (96 * 25 + 96) + 8 * (96 * 96 * 25 + 96) + (96 * 25 + 1);
    assert_eq!(expect, 1_848_865);
    assert_eq!(base.num_parameters(), expect);
    assert_eq!(base.num_attention_parameters(), 0);

    let bio = Network::<f32>::new(ModelConfig::default()).unwrap();
    assert_eq!(bio.num_attention_parameters(), 2 * (2 * 49 * 17 + 17));
    assert_eq!(bio.num_parameters(), expect + 2 * 1_683);

    let se = Network::<f32>::new(ModelConfig { variant: Variant::Channel, ..Default::default() }).unwrap();
    assert_eq!(se.num_attention_parameters(), 2 * ((6 * 96 + 6) + (96 * 6 + 96)));
    let sp = Network::<f32>::new(ModelConfig { variant: Variant::Spatial, ..Default::default() }).unwrap();
    assert_eq!(sp.num_attention_parameters(), 2 * (2 * 49 + 1));
}

#[test]
fn construction_is_seeded() {
    let a = Network::<f32>::new(small(Variant::BioAtt)).unwrap();
    let b = Network::<f32>::new(small(Variant::BioAtt)).unwrap();
    assert_eq!(a, b);
    let c = Network::<f32>::new(ModelConfig { seed: 8, ..small(Variant::BioAtt) }).unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig { patch_size: 20, ..Default::default() };
    assert!(Network::<f32>::new(cfg.clone()).is_err());
    cfg.patch_size = 21;
    assert!(Network::<f32>::new(ModelConfig { channels: 4, ..cfg.clone() }).is_ok());
    assert!(cfg.validate().is_ok());
    assert!(ModelConfig { attention_kernel: 6, ..Default::default() }.validate().is_err());
    assert!(ModelConfig { se_reduction: 0, ..Default::default() }.validate().is_err());
    let json = serde_json::to_string(&ModelConfig::default()).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), ModelConfig::default());
    assert!(serde_json::from_str::<ModelConfig>(r#"{"depth": 3}"#).is_err());
}

#[test]
fn extent_trace_of_default_patch() {
    assert_eq!(
        ModelConfig::default().extent_trace(55),
        vec![55, 51, 47, 43, 39, 35, 39, 43, 47, 51, 55]
    );
}

#[test]
fn forward_shapes_and_errors() {
    let cfg = ModelConfig { channels: 4, ..Default::default() };
    let net = Network::<f32>::new(cfg).unwrap();
    let p = uniform_priors_n(17).unwrap();
    let y = net.predict(&noise(vec![2, 1, 55, 55], 1), std::slice::from_ref(&p)).unwrap();
    assert_eq!(y.shape(), &[2, 1, 55, 55]);
    let y = net.predict(&noise(vec![1, 1, 21, 30], 1), std::slice::from_ref(&p)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 21, 30]);
    assert!(net.predict(&noise(vec![1, 1, 20, 30], 1), std::slice::from_ref(&p)).is_err());
    assert!(net.predict(&noise(vec![1, 2, 30, 30], 1), std::slice::from_ref(&p)).is_err());
    let missing = net.predict(&noise(vec![1, 1, 30, 30], 1), &[]).unwrap_err();
    assert!(matches!(missing, Error::Prior(_)));
    assert!(net.predict(&noise(vec![1, 1, 30, 30], 1), &[uniform_priors_n(3).unwrap()]).is_err());
}

#[test]
fn prior_reaches_the_output() {
    let net = Network::<f32>::new(small(Variant::BioAtt)).unwrap();
    let x = noise::<f32>(vec![1, 1, 13, 13], 3);
    let a = net.predict(&x, &[uniform_priors_n(3).unwrap()]).unwrap();
    let b = net.predict(&x, &[one_hot(3, 1)]).unwrap();
    let diff = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f32::max);
    assert!(diff > 0.0);
}

#[test]
fn prior_free_variants_ignore_priors() {
    for v in [Variant::Base, Variant::Channel, Variant::Spatial] {
        let net = Network::<f32>::new(small(v)).unwrap();
        let x = noise::<f32>(vec![2, 1, 12, 12], 4);
        let a = net.predict(&x, &[uniform_priors_n(3).unwrap()]).unwrap();
        let b = net.predict(&x, &[one_hot(3, 0), one_hot(3, 2)]).unwrap();
        let c = net.predict(&x, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}

#[test]
fn batch_equals_independent_items() {
    let cfg = ModelConfig { channels: 6, ..Default::default() };
    for variant in Variant::ALL {
        let net = Network::<f32>::new(ModelConfig { variant, ..cfg.clone() }).unwrap();
        let x = noise::<f32>(vec![16, 1, 25, 25], 5);
        let priors: Vec<_> = (0..16).map(|i| one_hot(17, i)).collect();
        let batched = net.predict(&x, &priors).unwrap();
        for b in 0..16 {
            let single = net.predict(&x.batch_item(b).unwrap(), &priors[b..b + 1]).unwrap();
            let got = batched.batch_item(b).unwrap();
            for (u, v) in got.data().iter().zip(single.data()) {
                assert!((u - v).abs() <= 1e-6, "{variant}: {u} vs {v}");
            }
        }
    }
}

/// The RED-CNN wiring written out layer by layer, with optional fixed
/// scaling at the two attention points.
fn reference_forward(net: &Network<f64>, x: &Tensor<f64>, gate: f64) -> Tensor<f64> {
    let p = net.params();
    let t = |name: &str| p.by_name(name).unwrap().clone();
    let mut tape = Tape::<f64>::new();
    let conv = |tape: &mut Tape<f64>, v: Var, i: usize| {
        let w = tape.constant(t(&format!("conv{i}.weight")));
        let b = tape.constant(t(&format!("conv{i}.bias")));
        let y = tape.conv2d(v, w, b, 0).unwrap();
        tape.relu(y).unwrap()
    };
    let x0 = tape.constant(x.clone());
    let e1 = conv(&mut tape, x0, 1);
    let e2 = conv(&mut tape, e1, 2);
    let e3 = conv(&mut tape, e2, 3);
    let e3 = tape.scale(e3, gate).unwrap();
    let e4 = conv(&mut tape, e3, 4);
    let e5 = conv(&mut tape, e4, 5);
    let e5 = tape.scale(e5, gate).unwrap();
    let de = |tape: &mut Tape<f64>, v: Var, i: usize| {
        let w = tape.constant(t(&format!("deconv{i}.weight")));
        let b = tape.constant(t(&format!("deconv{i}.bias")));
        tape.conv_transpose2d(v, w, b).unwrap()
    };
    let d = de(&mut tape, e5, 1);
    let d = tape.add(d, e4).unwrap();
    let d = tape.relu(d).unwrap();
    let d = de(&mut tape, d, 2);
    let d = tape.relu(d).unwrap();
    let d = de(&mut tape, d, 3);
    let d = tape.add(d, e2).unwrap();
    let d = tape.relu(d).unwrap();
    let d = de(&mut tape, d, 4);
    let d = tape.relu(d).unwrap();
    let d = de(&mut tape, d, 5);
    let y = tape.add(d, x0).unwrap();
    tape.value(y).clone()
}

#[test]
fn base_matches_reference_wiring() {
    let net = Network::<f64>::new(small(Variant::Base)).unwrap();
    let x = noise(vec![2, 1, 12, 14], 6);
    let y = net.predict(&x, &[]).unwrap();
    assert_eq!(y, reference_forward(&net, &x, 1.0));
}

#[test]
fn zeroed_attention_halves_features() {
    for variant in [Variant::BioAtt, Variant::Spatial, Variant::Channel] {
        let mut net = Network::<f64>::new(small(variant)).unwrap();
        let ids: Vec<_> = net
            .params()
            .ids()
            .filter(|&id| net.params().name(id).starts_with("att_"))
            .collect();
        for id in ids {
            net.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        let x = noise(vec![1, 1, 13, 13], 7);
        let y = net.predict(&x, &[one_hot(3, 2)]).unwrap();
        let r = reference_forward(&net, &x, 0.5);
        for (u, v) in y.data().iter().zip(r.data()) {
            assert!((u - v).abs() <= 1e-12, "{variant}: {u} vs {v}");
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for variant in Variant::ALL {
        let net = Network::<f32>::new(ModelConfig { variant, ..Default::default() }).unwrap();
        let x = noise::<f32>(vec![2, 1, 23, 23], 8);
        let target = noise::<f32>(vec![2, 1, 23, 23], 9);
        let mut tape = Tape::new();
        let bound = net.params().attach(&mut tape, true);
        let xv = tape.constant(x);
        let tv = tape.constant(target);
        let (y, _) = net
            .forward_on_tape(&mut tape, &bound, xv, &[uniform_priors_n(17).unwrap()], false)
            .unwrap();
        let loss = tape.mse_loss(y, tv).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let all = bound.collect_grads(net.params(), &mut grads);
        for (id, g) in net.params().ids().zip(&all) {
            let norm: f32 = g.data().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "{variant}: no gradient for {}", net.params().name(id));
        }
    }
}

#[test]
fn full_forward_matches_finite_differences() {
    let opts = GradCheckOptions {
        max_coords_per_input: 12,
        ..Default::default()
    };
    for variant in Variant::ALL {
        let net = Network::<f64>::new(small(variant)).unwrap();
        let x = noise::<f64>(vec![2, 1, 11, 12], 10);
        let target = noise::<f64>(vec![2, 1, 11, 12], 11);
        let mut inputs = vec![x, target];
        inputs.extend(net.params().iter().map(|(_, t)| t.clone()));
        let prior = [uniform_priors_n(3).unwrap(), one_hot(3, 1)];
        let report = check(&inputs, &opts, |tape, v| {
            let bound = Bound::from_vars(v[2..].to_vec());
            let (y, _) = net.forward_on_tape(tape, &bound, v[0], &prior, false)?;
            tape.mse_loss(y, v[1])
        })
        .unwrap();
        assert!(report.checked >= 100, "{variant}: {report:?}");
        assert!(report.max_rel_error < 1e-4, "{variant}: {report:?}");
    }
}

#[test]
fn captured_maps_have_feature_extents() {
    let net = Network::<f32>::new(small(Variant::BioAtt)).unwrap();
    let x = noise::<f32>(vec![1, 1, 15, 15], 12);
    let (_, diag) = net.predict_with_maps(&x, &[uniform_priors_n(3).unwrap()], true).unwrap();
    assert_eq!(diag.middle.unwrap().maps.shape(), &[1, 3, 9, 9]);
    assert_eq!(diag.last.unwrap().fused.shape(), &[1, 1, 5, 5]);
}

#[test]
fn output_layer_starts_small() {
    let net = Network::<f64>::new(ModelConfig::default()).unwrap();
    let bound = OUTPUT_INIT_SCALE / 25f64.sqrt();
    let w = net.params().by_name("deconv5.weight").unwrap();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
    assert!(w.data().iter().any(|v| v.abs() > bound / 2.0));
    assert!(net.params().by_name("deconv5.bias").unwrap().data().iter().all(|&v| v == 0.0));
    let inner = 1.0 / (96.0 * 25.0f64).sqrt();
    assert!(net.params().by_name("conv2.weight").unwrap().data().iter().any(|v| v.abs() > inner / 2.0));
}
