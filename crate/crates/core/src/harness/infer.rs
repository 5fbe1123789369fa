use serde::{Deserialize, Serialize};

use super::train::view_input;
use crate::datagen::{sample_fine_templates, RenderSettings, ToyObject, View};
use crate::diffusion::{sample, Denoiser, MapPair, NoiseSchedule};
use crate::geometry::{chordal_mean, compose_query_pose, median_translation, Pose};
use crate::model::{Conditioning, ModelConfig, PoseNet, Real};
use crate::posemap::{canonical_rays, decode_rotation, decode_translation, invert_relative_maps, CanonicalGrid, CellMap, PosedCrop};
use crate::{Error, Result};

/// A denoiser that can build its own conditioning from views.
pub trait Stage: Denoiser {
    fn model_config(&self) -> &ModelConfig;
    fn prepare(&self, query: &View, templates: &[View], canvas: usize) -> Result<Self::Cond>;
}

impl<F: Real> Stage for PoseNet<F> {
    fn model_config(&self) -> &ModelConfig {
        self.config()
    }

    fn prepare(&self, query: &View, templates: &[View], canvas: usize) -> Result<Conditioning<F>> {
        let c = self.config();
        let grid = canonical_rays(c.map_side, c.grid_half_extent)?;
        let q = view_input(query, canvas, &grid, false)?;
        let t = templates
            .iter()
            .map(|v| view_input(v, canvas, &grid, c.condition_template_pose))
            .collect::<Result<Vec<_>>>()?;
        self.condition(&q, &t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferOptions {
    /// Hypotheses per stage; values above the template count trigger extra
    /// sampling passes with derived seeds.
    pub hypotheses: usize,
    pub seed: u64,
    /// Fine-stage template count and sampling bounds.
    pub fine_templates: usize,
    pub fine_rot_deg: f64,
    pub fine_trans_m: f64,
    pub render: RenderSettings,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            hypotheses: 8,
            seed: 0,
            fine_templates: 8,
            fine_rot_deg: 30.0,
            fine_trans_m: 0.05,
            render: RenderSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageResult {
    pub pose: Pose,
    pub hypotheses: Vec<Pose>,
    /// Hypotheses whose maps could not be decoded.
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub pose: Pose,
    /// Hypotheses of the last stage that ran.
    pub hypotheses: Vec<Pose>,
    pub coarse: StageResult,
    pub fine: Option<StageResult>,
    /// Why the fine stage was skipped, when it was requested but not run.
    pub warning: Option<String>,
}

/// Turns one sampled map pair into a query pose.
pub fn decode_hypothesis(
    maps: &MapPair,
    query: &View,
    template: &View,
    cfg: &ModelConfig,
    grid: &CanonicalGrid,
) -> Result<Pose> {
    let rays = CellMap::from_flat(cfg.map_side, &maps.rays)?;
    let trans = CellMap::from_flat(cfg.map_side, &maps.trans)?;
    if cfg.absolute_pose {
        let r = decode_rotation(&rays, grid)?;
        let t = decode_translation(&trans, &query.k, &query.crop)?;
        return Ok(Pose::new(r, t));
    }
    let tpl = PosedCrop {
        pose: template.pose,
        crop: template.crop,
    };
    let h_rel = invert_relative_maps(&rays, &trans, &tpl, &query.crop, &query.k, grid)?;
    Ok(compose_query_pose(&h_rel, &template.pose))
}

/// Samples `hypotheses` pose hypotheses and aggregates them with a chordal
/// mean and a per-axis median translation.
pub fn run_stage<S: Stage>(
    stage: &S,
    sched: &NoiseSchedule,
    query: &View,
    templates: &[View],
    hypotheses: usize,
    seed: u64,
    canvas: usize,
) -> Result<StageResult> {
    if templates.is_empty() || hypotheses == 0 {
        return Err(Error::Contract("a stage needs templates and at least one hypothesis".into()));
    }
    let cfg = stage.model_config();
    let grid = canonical_rays(cfg.map_side, cfg.grid_half_extent)?;
    let cond = stage.prepare(query, templates, canvas)?;
    let n = templates.len();
    let mut poses = Vec::with_capacity(hypotheses);
    let mut failed = 0;
    let mut pass = 0u64;
    let mut produced = 0;
    while produced < hypotheses {
        let maps = sample(stage, &cond, sched, n, cfg.map_cells(), seed.wrapping_add(pass))?;
        for (j, m) in maps.iter().enumerate().take(hypotheses - produced) {
            match decode_hypothesis(m, query, &templates[j], cfg, &grid) {
                Ok(p) => poses.push(p),
                Err(e @ (Error::Decode(_) | Error::Degenerate(_) | Error::Domain(_))) => {
                    log::debug!("hypothesis {j} of pass {pass} dropped: {e}");
                    failed += 1;
                }
                Err(e) => return Err(e),
            }
            produced += 1;
        }
        pass += 1;
    }
    if poses.is_empty() {
        return Err(Error::Decode(format!("all {hypotheses} hypotheses failed to decode")));
    }
    let rs: Vec<_> = poses.iter().map(|p| p.r).collect();
    let ts: Vec<_> = poses.iter().map(|p| p.t).collect();
    Ok(StageResult {
        pose: Pose::new(chordal_mean(&rs)?, median_translation(&ts)?),
        hypotheses: poses,
        failed,
    })
}

/// Coarse stage on the given templates, then (when `fine` is given and an
/// object model is available) a fine stage on templates rendered around
/// the coarse estimate.
#[allow(clippy::too_many_arguments)]
pub fn infer<C: Stage, G: Stage>(
    coarse: (&C, &NoiseSchedule),
    fine: Option<(&G, &NoiseSchedule)>,
    query: &View,
    templates: &[View],
    object: Option<&ToyObject>,
    opts: &InferOptions,
) -> Result<Inference> {
    let c = run_stage(coarse.0, coarse.1, query, templates, opts.hypotheses, opts.seed, opts.render.canvas)?;
    let mut out = Inference {
        pose: c.pose,
        hypotheses: c.hypotheses.clone(),
        coarse: c,
        fine: None,
        warning: None,
    };
    let Some((stage, sched)) = fine else {
        return Ok(out);
    };
    let Some(obj) = object else {
        log::warn!("no object model for fine templates; returning the coarse estimate");
        out.warning = Some("object model missing; fine stage skipped".into());
        return Ok(out);
    };
    let fine_seed = opts.seed ^ 0xF1E5_7A6E;
    let fine_templates = match sample_fine_templates(
        obj,
        &out.coarse.pose,
        opts.fine_templates,
        fine_seed,
        opts.fine_rot_deg,
        opts.fine_trans_m,
        &opts.render,
    ) {
        Ok(t) => t,
        Err(Error::Rejected(m)) => {
            log::warn!("fine templates could not be rendered ({m}); returning the coarse estimate");
            out.warning = Some(format!("fine templates not renderable: {m}"));
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    let f = run_stage(stage, sched, query, &fine_templates, opts.hypotheses, fine_seed, opts.render.canvas)?;
    out.pose = f.pose;
    out.hypotheses = f.hypotheses.clone();
    out.fine = Some(f);
    Ok(out)
}
