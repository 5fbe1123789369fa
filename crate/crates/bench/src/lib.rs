//! Fixtures shared by the benchmarks.

use posediff::datagen::{generate_sample, GenConfig, Sample};
use posediff::diffusion::{MapPair, NoiseSchedule, ScheduleConfig, ScheduleKind};
use posediff::harness::{draw_noise, prepare_item, TrainItem};
use posediff::model::{ModelConfig, PoseNet};
use posediff::posemap::canonical_rays;
use posediff::{CanonicalGrid, Rotation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rotations(n: usize, seed: u64) -> Vec<Rotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Rotation::random(&mut rng)).collect()
}

pub fn samples(n: usize) -> Vec<Sample> {
    let cfg = GenConfig::default();
    (0..n as u64).map(|i| generate_sample(&cfg, i).expect("default generator renders")).collect()
}

/// Desk-sized network with one prepared training item.
pub struct NetFixture {
    pub net: PoseNet<f32>,
    pub item: TrainItem,
    pub sample: Sample,
    pub grid: CanonicalGrid,
    pub sched: NoiseSchedule,
    pub noise: Vec<MapPair>,
}

pub fn desk_fixture() -> NetFixture {
    let cfg = ModelConfig::desk();
    let sample = samples(1).remove(0);
    let grid = canonical_rays(cfg.map_side, cfg.grid_half_extent).expect("valid grid");
    let item = prepare_item(&sample, &cfg, &grid, GenConfig::default().render.canvas).expect("sample converts");
    let sched = ScheduleConfig {
        kind: ScheduleKind::Cosine,
        steps: 20,
        ..ScheduleConfig::default()
    }
    .build()
    .expect("valid schedule");
    let noise = draw_noise(&mut ChaCha8Rng::seed_from_u64(1), cfg.templates, cfg.map_cells());
    NetFixture {
        net: PoseNet::new(cfg, 0).expect("valid config"),
        item,
        sample,
        grid,
        sched,
        noise,
    }
}
