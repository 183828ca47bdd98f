use std::hint::black_box;

use airground::harness::Input;
use airground::place_index::{brute_force_search, random_descriptors};
use airground::protocol::FramePacket;
use airground::simkit::{render_cloud_increment, render_frame, Agent};
use airground::{ablate, generate, HnswIndex, HnswParams, Mode, NoiseModel, RayCastConfig, RunConfig, SimConfig, VoxelMap};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::Vector2;

fn place_index(c: &mut Criterion) {
    let mut g = c.benchmark_group("place_index");
    for size in [1_000usize, 10_000] {
        let items = random_descriptors(size, 1);
        let queries = random_descriptors(32, 2);
        let mut index = HnswIndex::new(HnswParams::default()).unwrap();
        for (i, d) in items.iter().enumerate() {
            index.insert(i as u64, d.clone()).unwrap();
        }
        let mut q = queries.iter().cycle();
        g.bench_with_input(BenchmarkId::new("hnsw", size), &size, |b, _| {
            b.iter(|| index.search(black_box(q.next().unwrap()), 1).unwrap())
        });
        let mut q = queries.iter().cycle();
        g.bench_with_input(BenchmarkId::new("brute_force", size), &size, |b, _| {
            b.iter(|| {
                brute_force_search(items.iter().enumerate().map(|(i, d)| (i as u64, d)), black_box(q.next().unwrap()), 1)
            })
        });
    }
    g.finish();
}

fn ray_cast(c: &mut Criterion) {
    let s = generate(&SimConfig::default()).unwrap();
    let last = s.frame_count() - 1;
    let mut map = VoxelMap::new(0.1);
    map.insert_cloud(&render_cloud_increment(&s, last).unwrap()).unwrap();
    let pose = s.pose_in_ground_world(Agent::Ground, last).unwrap();
    let pixels: Vec<Vector2<f64>> = render_frame(&s, Agent::Ground, last)
        .unwrap()
        .packet
        .keypoints
        .iter()
        .map(|p| Vector2::new(p[0] as f64, p[1] as f64))
        .collect();
    let cfg = RayCastConfig::default();
    let k = s.intrinsics(Agent::Ground);
    c.bench_function("pixel_to_point/frame", |b| {
        b.iter(|| pixels.iter().filter(|px| map.pixel_to_point(k, &pose, px, &cfg).unwrap().is_some()).count())
    });
}

fn codec(c: &mut Criterion) {
    let s = generate(&SimConfig { keypoint_budget: 1024, ..SimConfig::default() }).unwrap();
    let packet = render_frame(&s, Agent::Aerial, 0).unwrap().packet;
    let bytes = packet.encode();
    c.bench_function("packet/encode", |b| b.iter(|| black_box(&packet).encode()));
    c.bench_function("packet/decode", |b| b.iter(|| FramePacket::decode(black_box(&bytes)).unwrap()));
}

fn pipeline(c: &mut Criterion) {
    let mut cfg = RunConfig { trials: 1, parallel: false, ..RunConfig::default() };
    if let Input::Scenario(s) = &mut cfg.input {
        s.noise = NoiseModel::benchmark();
    }
    let mut g = c.benchmark_group("trial");
    g.sample_size(10);
    for mode in Mode::ALL {
        g.bench_function(format!("{mode:?}"), |b| b.iter(|| ablate(&cfg, mode).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, place_index, ray_cast, codec, pipeline);
criterion_main!(benches);
