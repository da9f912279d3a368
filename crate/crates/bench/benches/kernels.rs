use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use facesnap::attribute_mixer::{mix_forward, MixerConfig, MixerWeights};
use facesnap::autograd::Graph;
use facesnap::diffusion::{denoise, gaussian, DenoiserWeights, UNetConfig};
use facesnap::Trainer;
use facesnap_bench::fixture;

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = gaussian(&[64, 64], &mut rng);
    let b = gaussian(&[64, 64], &mut rng);
    c.bench_function("matmul_64", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            g.constant(a.clone()).matmul(g.constant(b.clone())).value().sum()
        })
    });

    let x = gaussian(&[4, 16, 16, 16], &mut rng);
    let w = gaussian(&[32, 16, 3, 3], &mut rng);
    c.bench_function("conv3x3_16to32", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            g.constant(x.clone()).conv2d(g.constant(w.clone()), None, 1, 1).value().sum()
        })
    });
}

fn models(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mixer = MixerWeights::init(MixerConfig::default(), 0).unwrap();
    let f_id = gaussian(&[4, 512], &mut rng);
    let f_clip = gaussian(&[4, 257, 64], &mut rng);
    c.bench_function("mixer_forward_b4", |bench| bench.iter(|| mix_forward(&f_id, &f_clip, &mixer).unwrap()));

    let base = DenoiserWeights::init(UNetConfig::default(), 0).unwrap();
    let z = gaussian(&[4, 4, 16, 16], &mut rng);
    let ctx = gaussian(&[4, 4, 64], &mut rng);
    let ts = [10.0, 30.0, 50.0, 70.0];
    c.bench_function("denoise_b4", |bench| bench.iter(|| denoise(&base, &z, &ts, &ctx, None).unwrap()));

    let (cfg, data) = fixture(4).unwrap();
    let mut trainer = Trainer::new(cfg, &data).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("step_b4", |bench| bench.iter(|| trainer.step().unwrap()));
    group.finish();
}

criterion_group!(benches, kernels, models);
criterion_main!(benches);
