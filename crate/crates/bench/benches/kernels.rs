use criterion::{black_box, criterion_group, criterion_main, Criterion};
use hdpissa_bench::{gaussian, trainer};
use hdpissa_core::linalg::svd;
use hdpissa_core::Method;

fn linalg(c: &mut Criterion) {
    let a = gaussian(64, 64, 1);
    let b = gaussian(64, 64, 2);
    c.bench_function("matmul 64x64", |bch| bch.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
    c.bench_function("svd 64x64", |bch| bch.iter(|| svd(black_box(&a)).unwrap()));
    let tall = gaussian(256, 32, 3);
    c.bench_function("svd 256x32", |bch| bch.iter(|| svd(black_box(&tall)).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    for (name, method) in [("fft", Method::Fft), ("lora-dp", Method::LoraDp), ("hd-pissa", Method::HdPissa)] {
        for parallel in [false, true] {
            let (mut t, x, y) = trainer(method, 4, 2, parallel);
            let id = format!("{name}/k4/{}", if parallel { "parallel" } else { "serial" });
            group.bench_function(id, |bch| bch.iter(|| t.train_step(&x, &y).unwrap()));
        }
    }
    group.finish();
}

criterion_group!(benches, linalg, train_step);
criterion_main!(benches);
