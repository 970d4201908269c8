use criterion::{black_box, criterion_group, criterion_main, Criterion};
use heteroseg::metrics::surface::{assd, squared_distance_transform};
use heteroseg::metrics::Confusion;

fn sphere(edge: usize, centre: f64, radius: f64) -> Vec<bool> {
    let mut m = Vec::with_capacity(edge * edge * edge);
    for z in 0..edge {
        for y in 0..edge {
            for x in 0..edge {
                let d = [z, y, x]
                    .iter()
                    .map(|&v| (v as f64 - centre).powi(2))
                    .sum::<f64>();
                m.push(d <= radius * radius);
            }
        }
    }
    m
}

fn surface(c: &mut Criterion) {
    let edge = 64;
    let shape = [edge; 3];
    let a = sphere(edge, 30.0, 14.0);
    let b = sphere(edge, 33.0, 12.0);
    c.bench_function("edt_64^3", |bench| {
        bench.iter(|| squared_distance_transform(black_box(&a), shape, [1.0, 1.0, 2.0]))
    });
    c.bench_function("assd_64^3", |bench| {
        bench.iter(|| assd(black_box(&a), &b, shape, [1.0, 1.0, 2.0]).unwrap())
    });
    c.bench_function("confusion_64^3", |bench| {
        bench.iter(|| Confusion::of(black_box(&a), &b).unwrap().dice())
    });
}

criterion_group!(benches, surface);
criterion_main!(benches);
