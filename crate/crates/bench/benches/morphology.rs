use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use maskaudit::mask::{boundary, dilate, erode, jaccard_and_boundary_f, mask_iou};
use maskaudit::StructuringElement;
use maskaudit_bench::blob;

fn morphology(c: &mut Criterion) {
    let mut g = c.benchmark_group("morphology");
    for &(w, h) in &[(320, 180), (1280, 720)] {
        let m = blob(w, h);
        for k in [2usize, 8, 24] {
            let rect = StructuringElement::rect(k, k);
            let ell = StructuringElement::ellipse(k, k);
            let id = format!("{w}x{h}/k{k}");
            g.bench_with_input(BenchmarkId::new("dilate_rect", &id), &m, |b, m| {
                b.iter(|| dilate(black_box(m), &rect))
            });
            g.bench_with_input(BenchmarkId::new("erode_ellipse", &id), &m, |b, m| {
                b.iter(|| erode(black_box(m), &ell))
            });
        }
        let other = dilate(&m, &StructuringElement::rect(3, 3));
        g.bench_with_input(
            BenchmarkId::new("boundary", format!("{w}x{h}")),
            &m,
            |b, m| b.iter(|| boundary(black_box(m))),
        );
        g.bench_with_input(BenchmarkId::new("iou", format!("{w}x{h}")), &m, |b, m| {
            b.iter(|| mask_iou(black_box(m), &other))
        });
        g.bench_with_input(
            BenchmarkId::new("j_and_f", format!("{w}x{h}")),
            &m,
            |b, m| b.iter(|| jaccard_and_boundary_f(black_box(m), &other, 4)),
        );
    }
    g.finish();
}

criterion_group!(benches, morphology);
criterion_main!(benches);
