use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use featalign::cam::decompose;
use featalign::config::RunConfig;
use featalign::data::{generate, DatasetSpec};
use featalign::eval::{maxboxaccv2, normalize_map, pxap, tau_grid, BoxProtocol};
use featalign::losses::Stage;
use featalign::model::Model;
use featalign::objective::{sample_objective, Frozen};
use featalign::Tape;
use featalign_bench::{localization_batch, random_tensor, rng};

fn conv(c: &mut Criterion) {
    let mut r = rng(0);
    let x = random_tensor(&[16, 32, 32], &mut r);
    let k = random_tensor(&[32, 16, 3, 3], &mut r);
    c.bench_function("conv2d_fwd_bwd_16x32x32_to_32", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let kv = t.param(k.clone());
            let y = t.conv2d(xv, kv, 2, 1).unwrap();
            let s = t.sum(y).unwrap();
            black_box(t.backward(s).unwrap());
        })
    });
}

fn objective(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let model = Model::init(cfg.model.clone(), 0).unwrap();
    let data = generate(&DatasetSpec {
        train_per_class: 1,
        val_per_class: 0,
        test_per_class: 0,
        ..DatasetSpec::default()
    })
    .unwrap();
    let sample = &data.train[0];
    let weights = cfg.effective_loss();
    let mut group = c.benchmark_group("sample_objective_fwd_bwd");
    for (name, stage) in [("warm", Stage::Warm), ("total", Stage::Total)] {
        group.bench_function(name, |b| {
            let mut dr = rng(1);
            b.iter(|| {
                let mut t = Tape::new();
                let bound = model.bind(&mut t);
                let x = t.constant(sample.image_tensor());
                let terms = sample_objective(
                    &model,
                    &mut t,
                    &bound,
                    x,
                    sample.label,
                    stage,
                    &weights,
                    &mut Frozen::default(),
                    &mut dr,
                )
                .unwrap();
                black_box(t.backward(terms.total).unwrap());
            })
        });
    }
    group.finish();
}

fn cam(c: &mut Criterion) {
    let mut r = rng(2);
    let f = random_tensor(&[64, 8, 8], &mut r);
    let w = random_tensor(&[64], &mut r);
    c.bench_function("decompose_64x8x8", |b| b.iter(|| black_box(decompose(&f, w.data(), 0).unwrap())));
}

fn metrics(c: &mut Criterion) {
    let (gt, maps) = localization_batch(100, 64, &mut rng(3));
    let grid = tau_grid(101);
    c.bench_function("maxboxaccv2_100x64x64", |b| {
        b.iter(|| black_box(maxboxaccv2(&gt, &maps, &[0.3, 0.5, 0.7], &grid, BoxProtocol::default()).unwrap()))
    });
    let scores: Vec<Vec<f64>> = maps.iter().map(|m| normalize_map(&m.values, Default::default())).collect();
    let masks: Vec<Vec<bool>> = scores.iter().map(|s| s.iter().map(|v| *v > 0.5).collect()).collect();
    c.bench_function("pxap_100x64x64", |b| b.iter(|| black_box(pxap(&scores, &masks).unwrap())));
}

criterion_group!(benches, conv, objective, cam, metrics);
criterion_main!(benches);
