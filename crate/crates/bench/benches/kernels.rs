use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use dgfnet_bench::{desk_batch, random_tensor};
use dgfnet_core::data::DataConfig;
use dgfnet_core::dsp::{istft, stft, StftParams, Waveform, SAMPLE_RATE};
use dgfnet_core::fusion::FusionMode;
use dgfnet_core::metrics::bss_eval;
use dgfnet_core::model::{ModelConfig, Prepared};
use dgfnet_core::train::{TrainConfig, Trainer};
use dgfnet_core::{Conv2dAttrs, Graph};

fn matmul(c: &mut Criterion) {
    let (a, b) = (random_tensor(&[256, 256], 1), random_tensor(&[256, 256], 2));
    c.bench_function("matmul 256x256 forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, y) = (g.input(a.clone()), g.input(b.clone()));
            let z = g.matmul(x, y).unwrap();
            let s = g.sum(z).unwrap();
            black_box(g.backward(s).unwrap());
        })
    });
}

fn conv(c: &mut Criterion) {
    let x = random_tensor(&[8, 16, 32, 32], 3);
    let w = random_tensor(&[16, 16, 3, 3], 4);
    let attrs = Conv2dAttrs {
        stride: 1,
        padding: None,
        groups: 1,
    };
    c.bench_function("conv2d 3x3 [8,16,32,32] forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
            let y = g.conv2d(xv, wv, None, attrs).unwrap();
            let s = g.sum(y).unwrap();
            black_box(g.backward(s).unwrap());
        })
    });
}

fn spectral(c: &mut Criterion) {
    for (name, p, len) in [("desk", StftParams::DESK, 4096), ("full", StftParams::FULL, 65_536)] {
        let w = Waveform::new(random_tensor(&[len], 5).data().to_vec(), SAMPLE_RATE).unwrap();
        c.bench_function(&format!("stft+istft {name} grid"), |bench| {
            bench.iter(|| black_box(istft(&stft(&w, &p).unwrap(), &p).unwrap()))
        });
    }
}

fn scoring(c: &mut Criterion) {
    let items = desk_batch(1);
    let ex = &items[0].example;
    c.bench_function("bss_eval 2 sources 4096 samples", |bench| {
        bench.iter(|| black_box(bss_eval(&ex.sources, &ex.sources, 1).unwrap()))
    });
}

fn train_step(c: &mut Criterion) {
    let items = desk_batch(8);
    let refs: Vec<&Prepared> = items.iter().collect();
    let data = DataConfig::default();
    let mut group = c.benchmark_group("desk train step, batch 8");
    group.sample_size(10);
    for fusion in [FusionMode::Mul, FusionMode::DgfmAttention] {
        let cfg = ModelConfig::desk(&data, fusion);
        group.bench_function(fusion.name(), |bench| {
            bench.iter_batched_ref(
                || Trainer::new(cfg.clone(), TrainConfig::default()).unwrap(),
                |t| black_box(t.step(&refs).unwrap()),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, conv, spectral, scoring, train_step);
criterion_main!(benches);
