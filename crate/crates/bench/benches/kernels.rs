use bioatt_bench::{image, noise};
use bioatt_core::attention::BioAttBlock;
use bioatt_core::data::PatchGrid;
use bioatt_core::metrics::{ssim, SsimParams};
use bioatt_core::network::{ModelConfig, Network, Variant};
use bioatt_core::params::ParamSet;
use bioatt_core::priors::{uniform_priors, DescriptorSet};
use bioatt_core::Tape;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let x = noise(&[16, 96, 35, 35], 1);
    let w = noise(&[96, 96, 5, 5], 2);
    let b = noise(&[96], 3);
    c.bench_function("conv2d_valid 16x96x35x35 k5", |bench| {
        bench.iter(|| {
            let mut t = Tape::<f32>::new();
            let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
            black_box(t.conv2d(xv, wv, bv, 0).unwrap());
        })
    });
    c.bench_function("conv2d_valid forward+backward", |bench| {
        bench.iter(|| {
            let mut t = Tape::<f32>::new();
            let (xv, wv, bv) = (t.leaf(x.clone(), true), t.leaf(w.clone(), true), t.leaf(b.clone(), true));
            let y = t.conv2d(xv, wv, bv, 0).unwrap();
            let s = t.sum(y).unwrap();
            black_box(t.backward(s).unwrap());
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut params = ParamSet::<f32>::new();
    let block = BioAttBlock::new(&mut params, "ba", 17, 7, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = noise(&[16, 96, 35, 35], 4);
    let priors = vec![uniform_priors(&DescriptorSet::default()); 16];
    c.bench_function("bioatt block 16x96x35x35", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let bound = params.attach(&mut t, false);
            let xv = t.constant(x.clone());
            black_box(block.forward(&mut t, &bound, xv, &priors, false).unwrap());
        })
    });
}

fn network(c: &mut Criterion) {
    let net = Network::<f32>::new(ModelConfig { variant: Variant::BioAtt, ..Default::default() }).unwrap();
    let x = noise(&[4, 1, 55, 55], 5);
    let priors = vec![uniform_priors(&DescriptorSet::default()); 4];
    c.bench_function("bioatt network 4x55x55 predict", |bench| {
        bench.iter(|| black_box(net.predict(&x, &priors).unwrap()))
    });
}

fn metrics_and_patches(c: &mut Criterion) {
    let a = image(512, 6);
    let b = image(512, 7);
    let params = SsimParams::new(2.0);
    c.bench_function("ssim 512x512", |bench| bench.iter(|| black_box(ssim(&a, &b, 512, 512, &params).unwrap())));

    let grid = PatchGrid::new(512, 512, 55).unwrap();
    let img = noise(&[1, 1, 512, 512], 8);
    c.bench_function("patchify+depatchify 512 p55", |bench| {
        bench.iter(|| {
            let p = grid.patchify(&img).unwrap();
            black_box(grid.depatchify(&p, &img).unwrap())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, attention, network, metrics_and_patches
}
criterion_main!(benches);
