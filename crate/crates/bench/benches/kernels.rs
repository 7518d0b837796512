use criterion::{black_box, criterion_group, criterion_main, Criterion};
use oreo_bench::{desk_env, random_images};
use oreo_core::envsim;
use oreo_core::nn::Param;
use oreo_core::policy::{Policy, PolicyArch};
use oreo_core::regularizers::{oreo_mask, RegularizerConfig, RegularizerKind};
use oreo_core::rng::seeded;
use oreo_core::vqvae::{quantize, CodeGrid, Encoder, FeatureMap};
use rand::Rng as _;

fn encoder_forward(c: &mut Criterion) {
    let env = desk_env();
    let enc = Encoder::<f32>::new(env.image_size, 32, &mut seeded(0)).unwrap();
    let x = random_images(64, env.image_size, 1);
    c.bench_function("encoder_forward_b64", |b| b.iter(|| enc.forward(black_box(&x)).unwrap()));
}

fn policy_step(c: &mut Criterion) {
    let env = desk_env();
    let arch = PolicyArch { image_size: env.image_size, channels: 32, action_count: 3, hidden: 256, frame_stack: 1 };
    let mut p = Policy::<f32>::new(&arch, &mut seeded(0)).unwrap();
    let x = random_images(64, env.image_size, 2);
    let actions: Vec<usize> = (0..64).map(|i| i % 3).collect();
    let grids: Vec<CodeGrid> = (0..64).map(|i| CodeGrid { indices: (0..p.positions()).map(|j| (i + j) % 7).collect(), rows: 0, cols: 0 }).collect();
    let refs: Vec<&CodeGrid> = grids.iter().collect();
    let cfg = RegularizerConfig::for_kind(RegularizerKind::Oreo);
    let mults = p.oreo_multipliers(&refs, 64, &cfg, &mut seeded(3)).unwrap();
    c.bench_function("bc_loss_and_grad_b64", |b| b.iter(|| p.loss_and_grad(&x, &actions, &[]).unwrap()));
    c.bench_function("oreo_loss_and_grad_b64_5masks", |b| b.iter(|| p.loss_and_grad(&x, &actions, &mults).unwrap()));
}

fn quantize_grid(c: &mut Criterion) {
    let mut r = seeded(4);
    let (l, d, k) = (25, 64, 512);
    let h = FeatureMap { values: (0..l * d).map(|_| r.gen_range(-1.0..1.0)).collect(), rows: 5, cols: 5, dim: d };
    let mut book = Param::<f32>::zeros("codebook", &[k, d]);
    book.value.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
    c.bench_function("quantize_25x64_k512", |b| b.iter(|| quantize(black_box(&h), &book)));
}

fn masks(c: &mut Criterion) {
    let grid = CodeGrid { indices: (0..25).map(|i| i * 13 % 512).collect(), rows: 5, cols: 5 };
    let mut r = seeded(5);
    c.bench_function("oreo_mask_k512", |b| b.iter(|| oreo_mask(black_box(&grid), 512, 0.5, &mut r).unwrap()));
}

fn env_step(c: &mut Criterion) {
    let env = desk_env();
    c.bench_function("expert_episode", |b| {
        b.iter(|| envsim::play(&env, black_box(7), |s, _| envsim::expert_action(s)).unwrap())
    });
}

criterion_group!(benches, encoder_forward, policy_step, quantize_grid, masks, env_step);
criterion_main!(benches);
