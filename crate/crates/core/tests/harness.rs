use std::fs;
use std::path::Path;

use posediff::datagen::{generate_dataset, write_dataset, GenConfig, RenderSettings};
use posediff::diffusion::{Denoiser, MapPair};
use posediff::harness::{
    evaluate, relative_target_count, train, Checkpoint, InferOptions, LogRow, Predictor, TrainConfig,
};
use posediff::model::{ModelConfig, PoseNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_data(samples: usize) -> GenConfig {
    GenConfig {
        samples,
        templates: 2,
        objects: 2,
        render: RenderSettings {
            out_size: 8,
            ..RenderSettings::default()
        },
        ..GenConfig::default()
    }
}

fn tiny_train(out: &Path, steps: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        lr: 1e-3,
        steps,
        batch: 2,
        data: tiny_data(32),
        out_dir: out.to_path_buf(),
        ..TrainConfig::default()
    }
}

fn mean_loss(rows: &[LogRow]) -> f64 {
    rows.iter().map(|r| r.loss_total).sum::<f64>() / rows.len() as f64
}

#[test]
fn smoke_training_lowers_the_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let gen = tiny_data(32);
    write_dataset(&data, &gen, &generate_dataset(&gen).unwrap()).unwrap();
    let mut cfg = tiny_train(&tmp.path().join("run"), 200);
    cfg.dataset = Some(data);
    let out = train(&cfg).unwrap();
    assert_eq!(out.log.len(), 200);
    let (first, last) = (mean_loss(&out.log[..20]), mean_loss(&out.log[180..]));
    assert!(last < first, "first {first} last {last}");
    let csv = fs::read_to_string(tmp.path().join("run/train_log.csv")).unwrap();
    assert!(csv.starts_with("step,loss_total,loss_rot_recon,loss_rot_cos,loss_rot_reg,loss_trans_recon,loss_trans_xyz,lr"));
    assert_eq!(csv.lines().count(), 201);
}

#[test]
fn training_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(&tiny_train(&tmp.path().join("a"), 15)).unwrap();
    let b = train(&tiny_train(&tmp.path().join("b"), 15)).unwrap();
    assert_eq!(fs::read(&a.checkpoint).unwrap(), fs::read(&b.checkpoint).unwrap());
    assert_eq!(a.log, b.log);
    let mut other = tiny_train(&tmp.path().join("c"), 15);
    other.seed = 1;
    let c = train(&other).unwrap();
    assert_ne!(fs::read(&a.checkpoint).unwrap(), fs::read(&c.checkpoint).unwrap());
}

#[test]
fn periodic_checkpoints_are_written() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_train(&tmp.path().join("run"), 6);
    cfg.checkpoint_every = 3;
    train(&cfg).unwrap();
    for f in ["step_000003.ckpt", "step_000003.json", "final.ckpt", "final.json"] {
        assert!(tmp.path().join("run").join(f).exists(), "{f}");
    }
    assert!(!tmp.path().join("run/step_000006.ckpt").exists());
}

#[test]
fn absolute_pose_never_builds_relative_targets() {
    let tmp = tempfile::tempdir().unwrap();
    let before = relative_target_count();
    let mut cfg = tiny_train(&tmp.path().join("abs"), 4);
    cfg.model.absolute_pose = true;
    train(&cfg).unwrap();
    assert_eq!(relative_target_count(), before);
    train(&tiny_train(&tmp.path().join("rel"), 1)).unwrap();
    assert!(relative_target_count() > before);
}

#[test]
fn fine_predictor_trains_on_local_templates() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_train(&tmp.path().join("fine"), 3);
    cfg.predictor = Predictor::Fine;
    let out = train(&cfg).unwrap();
    let fine = Checkpoint::load(&out.checkpoint).unwrap();
    let coarse = PoseNet::<f32>::new(ModelConfig::tiny(), 0).unwrap();
    assert_eq!(fine.net.params().num_entries(), coarse.params().num_entries());
}

#[test]
fn loaded_checkpoint_gives_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train(&tiny_train(&tmp.path().join("run"), 5)).unwrap();
    let a = Checkpoint::load(&out.checkpoint).unwrap();
    let path = tmp.path().join("copy.ckpt");
    a.save(&path).unwrap();
    let b = Checkpoint::load(&path).unwrap();
    let sample = &generate_dataset(&tiny_data(1)).unwrap()[0];
    let cells = a.config.model.map_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noisy: Vec<MapPair> = (0..2)
        .map(|_| MapPair {
            rays: (0..cells * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            trans: (0..cells * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let canvas = a.config.data.render.canvas;
    use posediff::harness::Stage;
    let ca = a.net.prepare(&sample.query, &sample.templates, canvas).unwrap();
    let cb = b.net.prepare(&sample.query, &sample.templates, canvas).unwrap();
    for t in [1, a.config.schedule.steps / 2, a.config.schedule.steps] {
        assert_eq!(a.net.denoise(&noisy, t, &ca).unwrap(), b.net.denoise(&noisy, t, &cb).unwrap());
    }
}

#[test]
fn ablation_flags_keep_head_shapes() {
    let base = PoseNet::<f64>::new(ModelConfig::tiny(), 0).unwrap();
    let heads = |n: &PoseNet<f64>| {
        let p = n.params();
        (0..p.len())
            .filter(|&i| p.name(i).starts_with("head"))
            .map(|i| (p.name(i).to_string(), p.value(i).dim()))
            .collect::<Vec<_>>()
    };
    let reference = heads(&base);
    assert!(!reference.is_empty());
    for f in 0..3 {
        let mut cfg = ModelConfig::tiny();
        match f {
            0 => cfg.single_view = true,
            1 => cfg.absolute_pose = true,
            _ => cfg.condition_template_pose = false,
        }
        assert_eq!(heads(&PoseNet::new(cfg, 0).unwrap()), reference);
    }
}

#[test]
fn gen_train_eval_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let eval_set = generate_dataset(&GenConfig {
        seed: 77,
        ..tiny_data(6)
    })
    .unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = train(&tiny_train(&tmp.path().join(run), 5)).unwrap();
        let ck = Checkpoint::load(&out.checkpoint).unwrap();
        let sched = ck.config.schedule.build().unwrap();
        let opts = InferOptions {
            hypotheses: 2,
            render: ck.config.data.render,
            ..InferOptions::default()
        };
        let r = evaluate::<_, PoseNet<f32>>((&ck.net, &sched), None, &eval_set, None, &opts).unwrap();
        reports.push(serde_json::to_string(&r).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}
