use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polypdiff::data::{BinaryMask, Provenance};
use polypdiff::denoiser::{init_denoiser, train_denoiser, DenoiserArch, ModelKind, TrainConfig};
use polypdiff::diffusion::{Denoiser, DiffusionConfig};
use polypdiff::experiment::toy::{toy_dataset, toy_masks, ToyCorpus};
use polypdiff::metrics::{extract_features, frechet_distance, gaussian_stats, mask_as_image, set_similarity, FeatureExtractor};
use polypdiff::nn::{Conv2d, Graph, ParamSet, Tensor};
use polypdiff::seg::{micro_imagewise_metrics, micro_metrics, ConfusionCounts};

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps = ParamSet::<f32>::new();
    let layer = Conv2d::new(&mut ps, "c", 16, 16, 3, &mut rng);
    let x = randn(&[16, 16, 32, 32], &mut rng);
    c.bench_function("conv3x3_16ch_32px_b16_fwd_bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = layer.forward(&mut g, &ps, v);
            let target = Tensor::zeros(g.value(y).shape());
            let loss = g.mse(y, &target);
            black_box(g.backward(loss));
        })
    });
}

fn denoiser(c: &mut Criterion) {
    let arch = DenoiserArch {
        base_channels: 8,
        depth: 2,
        in_channels: 1,
        cond_channels: 0,
        embed_dim: 32,
    };
    let model = init_denoiser(arch, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&[16, 1, 32, 32], &mut rng);
    let ts: Vec<usize> = (0..16).map(|i| 10 * i + 1).collect();
    c.bench_function("denoiser_b8_inference_b16_32px", |b| {
        b.iter(|| black_box(model.predict_noise(&x, &ts, None).unwrap()))
    });

    let ds = toy_dataset(&ToyCorpus::default(), 32, 0, "b", Provenance::Real).unwrap();
    let dcfg = DiffusionConfig {
        timesteps: 200,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        total_steps: 5,
        checkpoint_every: 5,
        base_channels: 8,
        ..Default::default()
    };
    let mut group = c.benchmark_group("denoiser_training");
    group.sample_size(10);
    group.bench_function("b8_5_steps_b16_32px", |b| {
        b.iter(|| black_box(train_denoiser(&ds, ModelKind::MaskModel, &dcfg, &tcfg).unwrap()))
    });
    group.finish();
}

fn fid(c: &mut Criterion) {
    let spec = ToyCorpus::default();
    let a: Vec<_> = toy_masks(&spec, 500, 0).unwrap().iter().map(mask_as_image).collect();
    let b: Vec<_> = toy_masks(&spec, 500, 1).unwrap().iter().map(mask_as_image).collect();
    let fx = FeatureExtractor::DownsamplePixels;
    c.bench_function("pixel_features_500x32px", |bch| {
        bch.iter(|| black_box(extract_features(&a, &fx).unwrap()))
    });
    let sa = gaussian_stats(&extract_features(&a, &fx).unwrap()).unwrap();
    let sb = gaussian_stats(&extract_features(&b, &fx).unwrap()).unwrap();
    c.bench_function("frechet_distance_d64", |bch| {
        bch.iter(|| black_box(frechet_distance(&sa, &sb).unwrap()))
    });
}

fn similarity(c: &mut Criterion) {
    let spec = ToyCorpus::default();
    let reals = toy_masks(&spec, 500, 0).unwrap();
    let gen = toy_masks(&spec, 100, 1).unwrap();
    c.bench_function("set_similarity_100_vs_500_32px", |b| {
        b.iter(|| black_box(set_similarity(&reals, &gen).unwrap()))
    });
}

fn seg_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let counts: Vec<_> = (0..1000)
        .map(|_| ConfusionCounts::new(rng.gen_range(0..500), rng.gen_range(0..500), rng.gen_range(0..500), rng.gen_range(0..5000)))
        .collect();
    c.bench_function("micro_and_imagewise_1000", |b| {
        b.iter(|| black_box((micro_metrics(&counts).unwrap(), micro_imagewise_metrics(&counts).unwrap())))
    });
    let masks: Vec<BinaryMask> = toy_masks(&ToyCorpus::default(), 2, 3).unwrap();
    c.bench_function("confusion_counts_32px", |b| {
        b.iter_batched(
            || (masks[0].clone(), masks[1].clone()),
            |(p, t)| black_box(polypdiff::seg::confusion_counts(&p, &t).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, conv, denoiser, fid, similarity, seg_metrics);
criterion_main!(benches);
