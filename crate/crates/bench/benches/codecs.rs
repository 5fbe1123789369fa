use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use posediff::geometry::procrustes_align;
use posediff::posemap::{canonical_rays, decode_rotation, encode_rotation, invert_relative_maps, make_relative_maps, PosedCrop};
use posediff_bench::{rotations, samples};
use std::hint::black_box;

fn rotation_codec(c: &mut Criterion) {
    let rs = rotations(64, 0);
    let mut group = c.benchmark_group("rotation_codec");
    for p in [4, 8, 16] {
        let grid = canonical_rays(p, 1.0).unwrap();
        let maps: Vec<_> = rs.iter().map(|r| encode_rotation(r, &grid)).collect();
        group.bench_with_input(BenchmarkId::new("encode", p), &p, |b, _| {
            b.iter(|| rs.iter().for_each(|r| {
                black_box(encode_rotation(black_box(r), &grid));
            }))
        });
        group.bench_with_input(BenchmarkId::new("decode", p), &p, |b, _| {
            b.iter(|| maps.iter().for_each(|m| {
                black_box(decode_rotation(black_box(m), &grid).unwrap());
            }))
        });
    }
    group.finish();
}

fn procrustes(c: &mut Criterion) {
    let grid = canonical_rays(8, 1.0).unwrap();
    let r = rotations(1, 3)[0];
    let src = grid.dirs().to_vec();
    let dst: Vec<_> = src.iter().map(|v| r.apply(v)).collect();
    c.bench_function("procrustes_64", |b| b.iter(|| procrustes_align(black_box(&src), black_box(&dst)).unwrap()));
}

fn relative_maps(c: &mut Criterion) {
    let s = &samples(1)[0];
    let grid = canonical_rays(4, 1.0).unwrap();
    let q = PosedCrop { pose: s.query.pose, crop: s.query.crop };
    let t = PosedCrop { pose: s.templates[0].pose, crop: s.templates[0].crop };
    let (rays, trans) = make_relative_maps(&q, &t, &s.query.k, &grid).unwrap();
    c.bench_function("relative_maps_make", |b| b.iter(|| make_relative_maps(black_box(&q), &t, &s.query.k, &grid).unwrap()));
    c.bench_function("relative_maps_invert", |b| {
        b.iter(|| invert_relative_maps(black_box(&rays), &trans, &t, &q.crop, &s.query.k, &grid).unwrap())
    });
}

criterion_group!(benches, rotation_codec, procrustes, relative_maps);
criterion_main!(benches);
