use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use maskaudit::perturb::{gen_geometric, gen_instance, LabelRules};
use maskaudit::{BinaryMask, Difficulty, GeometricKind};
use maskaudit_bench::blob;

fn generation(c: &mut Criterion) {
    let rules = LabelRules::default();
    let mut g = c.benchmark_group("gen_geometric");
    for &(w, h) in &[(64, 48), (320, 180)] {
        let gt = blob(w, h);
        for kind in GeometricKind::ALL {
            for difficulty in [Difficulty::Hard, Difficulty::Medium] {
                let id = format!("{kind:?}-{difficulty}/{w}x{h}");
                g.bench_with_input(BenchmarkId::from_parameter(id), &gt, |b, gt| {
                    let mut seed = 0u64;
                    b.iter(|| {
                        seed += 1;
                        gen_geometric(black_box(gt), kind, difficulty, &rules, seed)
                    })
                });
            }
        }
    }
    g.finish();

    let gt = blob(160, 90);
    let negatives: Vec<(String, BinaryMask)> = (0..4)
        .map(|i| {
            let m = BinaryMask::rect(160, 90, 2 + i * 10, 2, 6, 6).expect("fits");
            (format!("n{i}"), m)
        })
        .collect();
    c.bench_function("gen_instance/160x90", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            gen_instance(black_box(&gt), &negatives, seed, &rules, 3)
        })
    });
}

criterion_group!(benches, generation);
criterion_main!(benches);
