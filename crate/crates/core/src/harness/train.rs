use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use crate::datagen::{
    generate_for_object, make_object, read_dataset, sample_fine_templates, sample_rng, object_seed, GenConfig, Sample,
    TemplateDistribution, View,
};
use crate::diffusion::{forward_noise, MapPair, NoiseSchedule, ScheduleConfig};
use crate::losses::{loss_rot_g, loss_total_g, loss_trans_g, rot_terms, trans_terms, LossBreakdown, LossWeights, TransTarget};
use crate::model::{optimizer_step, AdamConfig, AdamState, Graph, ModelConfig, PoseNet, Real, ViewInput};
use crate::posemap::{canonical_rays, make_absolute_maps, make_relative_maps, relative_depth_factor, CanonicalGrid, PosedCrop};
use crate::{Error, Result};

thread_local! {
    static RELATIVE_TARGETS: Cell<u64> = const { Cell::new(0) };
}

/// Number of relative supervision targets built on this thread so far.
pub fn relative_target_count() -> u64 {
    RELATIVE_TARGETS.with(|c| c.get())
}

/// Which stage a model is trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    /// Templates at uniformly random poses.
    Coarse,
    /// Templates perturbed around the query pose.
    Fine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    /// Peak learning rate, cosine-decayed to `lr_final`.
    pub lr: f64,
    pub lr_final: f64,
    /// Linear warm-up length in steps.
    pub warmup: usize,
    pub steps: usize,
    /// Samples per step.
    pub batch: usize,
    pub seed: u64,
    pub predictor: Predictor,
    pub fine_rot_deg: f64,
    pub fine_trans_m: f64,
    /// Training set on disk; samples are generated on the fly when absent.
    pub dataset: Option<PathBuf>,
    /// Generator used for on-the-fly samples, and for object models when
    /// fine templates are re-rendered.
    pub data: GenConfig,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            lr: 1e-4,
            lr_final: 0.0,
            warmup: 0,
            steps: 20_000,
            batch: 8,
            seed: 0,
            predictor: Predictor::Coarse,
            fine_rot_deg: 30.0,
            fine_trans_m: 0.05,
            dataset: None,
            data: GenConfig::default(),
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs/train"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.schedule.build()?;
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_final >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.model.image_size != self.data.render.out_size {
            return Err(Error::Config(format!(
                "model image size {} differs from rendered size {}",
                self.model.image_size, self.data.render.out_size
            )));
        }
        if self.data.templates != self.model.templates {
            return Err(Error::Config(format!(
                "{} templates generated for a model expecting {}",
                self.data.templates, self.model.templates
            )));
        }
        if let Some(p) = &self.dataset {
            if !p.exists() {
                return Err(Error::Config(format!("dataset {} does not exist", p.display())));
            }
        }
        self.data.validate()
    }

    /// Template distribution used when generating training samples.
    pub fn distribution(&self) -> TemplateDistribution {
        match self.predictor {
            Predictor::Coarse => self.data.distribution,
            Predictor::Fine => TemplateDistribution::Local {
                max_rot_deg: self.fine_rot_deg,
                max_trans_m: self.fine_trans_m,
            },
        }
    }

    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.steps - self.warmup).max(1) as f64;
        let x = (step - self.warmup) as f64 / span;
        self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + (std::f64::consts::PI * x).cos())
    }
}

/// One sample converted to network inputs and supervision.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub query: ViewInput,
    pub templates: Vec<ViewInput>,
    /// Clean target maps, one per template hypothesis.
    pub targets: Vec<MapPair>,
    pub trans_targets: Vec<TransTarget>,
}

fn posed(v: &View) -> PosedCrop {
    PosedCrop { pose: v.pose, crop: v.crop }
}

/// Network input for a view. Templates carry their absolute pose maps.
pub fn view_input(view: &View, canvas: usize, grid: &CanonicalGrid, with_pose: bool) -> Result<ViewInput> {
    let pose_maps = if with_pose {
        Some(make_absolute_maps(&posed(view), &view.k, grid)?)
    } else {
        None
    };
    Ok(ViewInput {
        image: view.image.clone(),
        pose_maps,
        bbox_norm: view.bbox_norm(canvas),
    })
}

/// Per-template supervision: relative maps, or the query's absolute maps
/// repeated when `absolute_pose` is set.
pub fn supervision(query: &View, templates: &[View], cfg: &ModelConfig, grid: &CanonicalGrid) -> Result<(Vec<MapPair>, Vec<TransTarget>)> {
    let mut maps = Vec::with_capacity(templates.len());
    let mut targets = Vec::with_capacity(templates.len());
    let q = posed(query);
    for tpl in templates {
        let (rays, trans, factor) = if cfg.absolute_pose {
            let (r, t) = make_absolute_maps(&q, &query.k, grid)?;
            (r, t, query.crop.r_z)
        } else {
            RELATIVE_TARGETS.with(|c| c.set(c.get() + 1));
            let (r, t) = make_relative_maps(&q, &posed(tpl), &query.k, grid)?;
            (r, t, relative_depth_factor(&posed(tpl), &query.crop))
        };
        maps.push(MapPair {
            rays: rays.to_flat(),
            trans: trans.to_flat(),
        });
        targets.push(TransTarget {
            k: query.k,
            crop: query.crop,
            depth_factor: factor,
            t_gt: query.pose.t,
        });
    }
    Ok((maps, targets))
}

pub fn prepare_item(sample: &Sample, cfg: &ModelConfig, grid: &CanonicalGrid, canvas: usize) -> Result<TrainItem> {
    let query = view_input(&sample.query, canvas, grid, false)?;
    let templates = sample
        .templates
        .iter()
        .map(|t| view_input(t, canvas, grid, true))
        .collect::<Result<_>>()?;
    let (targets, trans_targets) = supervision(&sample.query, &sample.templates, cfg, grid)?;
    Ok(TrainItem {
        query,
        templates,
        targets,
        trans_targets,
    })
}

/// Gaussian noise for every hypothesis, rays then translation.
pub fn draw_noise<R: Rng>(rng: &mut R, hypotheses: usize, cells: usize) -> Vec<MapPair> {
    let mut v = || (0..cells * 3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    (0..hypotheses)
        .map(|_| MapPair {
            rays: v(),
            trans: v(),
        })
        .collect()
}

fn stack<F: Real>(maps: &[MapPair], pick: impl Fn(&MapPair) -> &Vec<f64>) -> Array2<F> {
    let rows = maps.iter().map(|m| pick(m).len() / 3).sum();
    let data = maps.iter().flat_map(|m| pick(m).iter().map(|v| F::c(*v))).collect();
    Array2::from_shape_vec((rows, 3), data).expect("maps hold whole cells")
}

/// Total loss of one sample at timestep `t` with the given noise, and the
/// gradient of every parameter.
pub fn loss_and_grads<F: Real>(
    net: &PoseNet<F>,
    item: &TrainItem,
    t: usize,
    noise: &[MapPair],
    sched: &NoiseSchedule,
    grid: &CanonicalGrid,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<Array2<F>>)> {
    if noise.len() != item.targets.len() {
        return Err(Error::Contract(format!(
            "{} noise draws for {} hypotheses",
            noise.len(),
            item.targets.len()
        )));
    }
    let noisy = item
        .targets
        .iter()
        .zip(noise)
        .map(|(m, e)| {
            Ok(MapPair {
                rays: forward_noise(&m.rays, t, &e.rays, sched)?,
                trans: forward_noise(&m.trans, t, &e.trans, sched)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new(net.params());
    let cond = net.condition_g(&mut g, &item.query, &item.templates)?;
    let (rays, trans) = net.denoise_g(&mut g, &cond, net.pack_maps(&noisy)?, t)?;
    let tr = g.constant(stack(&item.targets, |m| &m.rays));
    let tt = g.constant(stack(&item.targets, |m| &m.trans));
    let rot = loss_rot_g(&mut g, rays, tr, grid, w)?;
    let tv = loss_trans_g(&mut g, trans, tt, &item.trans_targets, grid.side(), w)?;
    let total = loss_total_g(&mut g, rot.total, tv.total, w)?;
    let breakdown = LossBreakdown {
        rot: rot_terms(&g, &rot),
        trans: trans_terms(&g, &tv),
        total: g.scalar(total).f64(),
    };
    let grads = g.backward(total).dense(net.params());
    Ok((breakdown, grads))
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_rot_recon: f64,
    pub loss_rot_cos: f64,
    pub loss_rot_reg: f64,
    pub loss_trans_recon: f64,
    pub loss_trans_xyz: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: Vec<LogRow>,
}

enum Source {
    Online,
    Stored { samples: Vec<Sample>, k_points: usize },
}

fn draw_sample(cfg: &TrainConfig, source: &Source, rng: &mut ChaCha8Rng, index: u64) -> Result<Sample> {
    match source {
        Source::Online => {
            let gen = GenConfig {
                distribution: cfg.distribution(),
                ..cfg.data.clone()
            };
            let mut r = sample_rng(cfg.seed ^ 0x5EED_DA7A, index);
            let obj = make_object(object_seed(&gen, &mut r), gen.k_points)?;
            generate_for_object(&gen, &obj, &mut r)
        }
        Source::Stored { samples, k_points } => {
            let mut s = samples[rng.random_range(0..samples.len())].clone();
            if cfg.predictor == Predictor::Fine {
                let obj = make_object(s.object_id, *k_points)?;
                s.templates = sample_fine_templates(
                    &obj,
                    &s.query.pose,
                    s.templates.len(),
                    rng.random(),
                    cfg.fine_rot_deg,
                    cfg.fine_trans_m,
                    &cfg.data.render,
                )?;
            }
            Ok(s)
        }
    }
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, offset, format!("{other:?}")),
    }
}

/// Trains a predictor and writes `train_log.csv`, periodic checkpoints and
/// `final.ckpt` (with its JSON config) under `cfg.out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let source = match &cfg.dataset {
        Some(dir) => {
            let ds = read_dataset(dir)?;
            if ds.samples.is_empty() {
                return Err(Error::Config(format!("dataset {} is empty", dir.display())));
            }
            if ds.manifest.templates != cfg.model.templates || ds.manifest.image_size != cfg.model.image_size {
                return Err(Error::Config(format!(
                    "dataset has {} templates of size {}, model expects {} of size {}",
                    ds.manifest.templates, ds.manifest.image_size, cfg.model.templates, cfg.model.image_size
                )));
            }
            Source::Stored {
                k_points: ds.manifest.k_points,
                samples: ds.samples,
            }
        }
        None => Source::Online,
    };
    let canvas = cfg.data.render.canvas;
    let grid = canonical_rays(cfg.model.map_side, cfg.model.grid_half_extent)?;
    let sched = cfg.schedule.build()?;
    let mut net = PoseNet::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(net.params(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let cells = cfg.model.map_cells();
    let inv = 1.0 / cfg.batch as f64;

    for step in 0..cfg.steps {
        let mut sum: Option<Vec<Array2<f32>>> = None;
        let mut row = LogRow {
            step,
            loss_total: 0.0,
            loss_rot_recon: 0.0,
            loss_rot_cos: 0.0,
            loss_rot_reg: 0.0,
            loss_trans_recon: 0.0,
            loss_trans_xyz: 0.0,
            lr: cfg.lr_at(step),
        };
        for b in 0..cfg.batch {
            let sample = draw_sample(cfg, &source, &mut rng, (step * cfg.batch + b) as u64)?;
            let item = prepare_item(&sample, &cfg.model, &grid, canvas)?;
            let t = rng.random_range(1..=sched.steps());
            let noise = draw_noise(&mut rng, item.targets.len(), cells);
            let (l, grads) = loss_and_grads(&net, &item, t, &noise, &sched, &grid, &cfg.weights).map_err(|e| match e {
                Error::Numeric { context } => Error::Numeric {
                    context: format!("step {step}: {context}"),
                },
                other => other,
            })?;
            if !l.total.is_finite() {
                return Err(Error::Numeric {
                    context: format!(
                        "step {step}: loss_total={} rot_recon={} rot_cos={} rot_reg={} trans_recon={} trans_xyz={}",
                        l.total, l.rot.recon, l.rot.cos, l.rot.reg, l.trans.recon, l.trans.xyz
                    ),
                });
            }
            row.loss_total += l.total * inv;
            row.loss_rot_recon += l.rot.recon * inv;
            row.loss_rot_cos += l.rot.cos * inv;
            row.loss_rot_reg += l.rot.reg * inv;
            row.loss_trans_recon += l.trans.recon * inv;
            row.loss_trans_xyz += l.trans.xyz * inv;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| *a += g),
            }
        }
        let mut grads = sum.expect("batch is positive");
        grads.iter_mut().for_each(|g| *g *= inv as f32);
        optimizer_step(net.params_mut(), &grads, &mut adam, row.lr).map_err(|e| match e {
            Error::Numeric { context } => Error::Numeric {
                context: format!("step {step}: {context}"),
            },
            other => other,
        })?;
        if step % 50 == 0 {
            log::info!("step {step} loss {:.5}", row.loss_total);
        }
        log.push(row);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            Checkpoint::new(cfg.clone(), net.clone()).save(&cfg.out_dir.join(format!("step_{:06}.ckpt", step + 1)))?;
        }
    }
    write_log(&cfg.out_dir.join("train_log.csv"), &log)?;
    let path = cfg.out_dir.join("final.ckpt");
    Checkpoint::new(cfg.clone(), net).save(&path)?;
    Ok(TrainOutcome { checkpoint: path, log })
}
