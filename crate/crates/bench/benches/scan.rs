use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmamba_core::kernels::zoh_scan_forward;
use xmamba_core::Tensor;

const CHANNELS: usize = 64;
const STATE: usize = 16;

fn scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("zoh_scan_forward");
    group.sample_size(20);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::uniform(&[CHANNELS, STATE], -2.0, -0.1, &mut rng);
    let d = Tensor::uniform(&[CHANNELS], -1.0, 1.0, &mut rng);
    for len in [512usize, 1024, 2048, 4096] {
        let u = Tensor::uniform(&[len, CHANNELS], -1.0, 1.0, &mut rng);
        let delta = Tensor::uniform(&[len, CHANNELS], 1e-3, 0.1, &mut rng);
        let b = Tensor::uniform(&[len, STATE], -1.0, 1.0, &mut rng);
        let cm = Tensor::uniform(&[len, STATE], -1.0, 1.0, &mut rng);
        group.throughput(Throughput::Elements(len as u64));
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |bench, &len| {
            bench.iter(|| {
                zoh_scan_forward(
                    u.data(),
                    delta.data(),
                    a.data(),
                    b.data(),
                    cm.data(),
                    d.data(),
                    len,
                    CHANNELS,
                    STATE,
                    None,
                )
            })
        });
    }
    group.finish();
}

criterion_group!(benches, scan);
criterion_main!(benches);
