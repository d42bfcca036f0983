use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hrfseg::conv::{conv2d, conv2d_backward, conv_transpose2d};
use hrfseg::eval::{pr_curve, roc_auc};
use hrfseg::{build_model, ArchConfig, Architecture, ConvSpec, ForwardOptions, Graph, Padding, Tensor};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv");
    let mut rng = rng();
    for channels in [16, 64] {
        let spec = ConvSpec::new(channels, channels)
            .with_kernel(3, 3)
            .with_padding(Padding::Same);
        let x = Tensor::<f32>::randn(vec![8, channels, 64, 16], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(spec.weight_shape().to_vec(), 0.1, &mut rng);
        let b = Tensor::<f32>::zeros(vec![channels]);
        let y = conv2d(&x, &w, &b, &spec).unwrap();
        group.throughput(Throughput::Elements(x.numel() as u64));
        group.bench_with_input(BenchmarkId::new("forward_3x3", channels), &x, |bench, x| {
            bench.iter(|| conv2d(black_box(x), &w, &b, &spec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("backward_3x3", channels), &x, |bench, x| {
            bench.iter(|| conv2d_backward(black_box(x), &w, &spec, &y).unwrap())
        });

        let up = ConvSpec::new(channels, channels / 2).with_kernel(2, 2).with_stride(2);
        let wt = Tensor::<f32>::randn(up.transposed_weight_shape().to_vec(), 0.1, &mut rng);
        let bt = Tensor::<f32>::zeros(vec![channels / 2]);
        group.bench_with_input(BenchmarkId::new("transposed_2x2", channels), &x, |bench, x| {
            bench.iter(|| conv_transpose2d(black_box(x), &wt, &bt, &up).unwrap())
        });
    }
    group.finish();
}

fn models(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    let mut rng = rng();
    let patches = Tensor::<f32>::randn(vec![8, 1, 128, 32], 1.0, &mut rng);
    let image = Tensor::<f32>::randn(vec![1, 1, 320, 512], 1.0, &mut rng);
    for arch in Architecture::ALL {
        let model = build_model::<f32>(&ArchConfig::new(arch), 0).unwrap();
        group.bench_function(BenchmarkId::new("forward_full_image", arch.tag()), |bench| {
            bench.iter(|| model.forward(black_box(&image)).unwrap())
        });
        group.bench_function(BenchmarkId::new("train_step_8_patches", arch.tag()), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let params = model.bind(&mut g);
                let x = g.frozen(black_box(&patches));
                let y = model
                    .forward_graph(&mut g, &params, x, ForwardOptions::default())
                    .unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut group = c.benchmark_group("metrics");
    let mut rng = rng();
    let n = 320 * 512;
    let scores: Vec<f32> = (0..n).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.01))).collect();
    group.throughput(Throughput::Elements(n as u64));
    group.bench_function("pr_curve_full_image", |bench| {
        bench.iter(|| pr_curve(black_box(&scores), &labels).unwrap().ap)
    });
    group.bench_function("roc_auc_full_image", |bench| {
        bench.iter(|| roc_auc(black_box(&scores), &labels).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, models, metrics);
criterion_main!(benches);
