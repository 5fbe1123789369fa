//! Procedural toy objects, a point-splat renderer, template samplers and
//! dataset files.

mod io;

pub use io::{read_dataset, write_dataset, Dataset, Manifest, SampleEntry, SampleFiles, DATASET_VERSION};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{project_centroid, CropSpec, Intrinsics, Pose, Rotation};
use crate::{Error, Result};

/// Object seeds for the unseen-object split start here.
pub const UNSEEN_OBJECT_BASE: u64 = 1 << 32;
/// Attempts before a sampler gives up on unrenderable poses.
pub const MAX_RENDER_RETRIES: usize = 100;

/// A constellation of coloured points inside the unit ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyObject {
    pub id: u64,
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f32; 3]>,
}

/// Seeded object with `k_points` well-separated points. Colours are
/// saturated hues spread evenly around the colour wheel (random phase and
/// jitter) and assigned in random order.
pub fn make_object(seed: u64, k_points: usize) -> Result<ToyObject> {
    if k_points < 12 {
        return Err(Error::Config(format!("objects need at least 12 points, got {k_points}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spacing = 0.35 * (12.0 / k_points as f64).cbrt();
    let mut points: Vec<Vector3<f64>> = Vec::with_capacity(k_points);
    let mut misses = 0;
    while points.len() < k_points {
        let p = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if p.norm() > 1.0 {
            continue;
        }
        if points.iter().all(|q| (q - p).norm() > spacing) {
            points.push(p);
        } else {
            misses += 1;
            if misses % 10_000 == 0 {
                spacing *= 0.8;
            }
        }
    }
    let phase: f64 = rng.random();
    let mut colors: Vec<[f32; 3]> = (0..k_points)
        .map(|i| {
            let h = (phase + (i as f64 + rng.random_range(-0.2..0.2)) / k_points as f64).rem_euclid(1.0);
            let v = rng.random_range(0.75..1.0);
            hsv(h, rng.random_range(0.7..1.0), v)
        })
        .collect();
    for i in (1..k_points).rev() {
        colors.swap(i, rng.random_range(0..=i));
    }
    Ok(ToyObject { id: seed, points, colors })
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        (v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)) as f32
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Camera and renderer settings shared by every view of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    /// Side of the original (uncropped) image in pixels.
    pub canvas: usize,
    /// Side of the rendered crop.
    pub out_size: usize,
    pub k: Intrinsics,
    /// Physical radius of each splatted point, metres.
    pub point_radius: f64,
    /// Template and query depth range, metres.
    pub depth_min: f64,
    pub depth_max: f64,
    /// Range of the projected object centre along each image axis, pixels.
    pub center_min: f64,
    pub center_max: f64,
    /// Padding added to the tight box, as a fraction of its larger side.
    pub bbox_pad: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            canvas: 128,
            out_size: 32,
            k: Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 64.0,
                cy: 64.0,
            },
            point_radius: 0.15,
            depth_min: 1.5,
            depth_max: 3.0,
            center_min: 40.0,
            center_max: 88.0,
            bbox_pad: 0.1,
        }
    }
}

/// One rendered crop with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    /// `out_size x out_size x 3`, row-major HWC, values in [0, 1].
    pub image: Vec<f32>,
    pub pose: Pose,
    pub k: Intrinsics,
    pub crop: CropSpec,
}

impl View {
    /// Crop box divided by the canvas size.
    pub fn bbox_norm(&self, canvas: usize) -> [f64; 4] {
        let c = canvas as f64;
        [self.crop.x / c, self.crop.y / c, self.crop.w / c, self.crop.h / c]
    }
}

/// Splats the object seen from `pose` into a square crop around its tight,
/// padded bounding box. Nearest points are drawn last.
pub fn render(obj: &ToyObject, pose: &Pose, settings: &RenderSettings) -> Result<View> {
    let k = settings.k;
    let cam: Vec<Vector3<f64>> = obj.points.iter().map(|p| pose.transform_point(p)).collect();
    if let Some(bad) = cam.iter().find(|p| !(p.z > 0.0)) {
        return Err(Error::Rejected(format!("point at depth {} is behind the camera", bad.z)));
    }
    let (ou, ov) = project_centroid(&k, &pose.t).map_err(|e| Error::Rejected(e.to_string()))?;
    let canvas = settings.canvas as f64;
    if !(0.0..canvas).contains(&ou) || !(0.0..canvas).contains(&ov) {
        return Err(Error::Rejected(format!("object centre ({ou:.1}, {ov:.1}) outside the image")));
    }
    let uv: Vec<(f64, f64)> = cam
        .iter()
        .map(|p| (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
        .collect();
    let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(u, v) in &uv {
        u0 = u0.min(u);
        u1 = u1.max(u);
        v0 = v0.min(v);
        v1 = v1.max(v);
    }
    let side = (u1 - u0).max(v1 - v0) * (1.0 + settings.bbox_pad);
    if !(side > 1e-9) {
        return Err(Error::Rejected("object projects to a single point".into()));
    }
    let out = settings.out_size;
    let r_z = out as f64 / side;
    let crop = CropSpec::new(0.5 * (u0 + u1) - 0.5 * side, 0.5 * (v0 + v1) - 0.5 * side, side, side, r_z)?;

    let mut order: Vec<usize> = (0..cam.len()).collect();
    order.sort_by(|&a, &b| cam[b].z.total_cmp(&cam[a].z).then(a.cmp(&b)));
    let mut image = vec![0f32; out * out * 3];
    for i in order {
        let (u, v) = uv[i];
        let (px, py) = ((u - crop.x) * r_z, (v - crop.y) * r_z);
        let rad = (settings.point_radius * k.fx / cam[i].z * r_z).max(0.75);
        let x0 = (px - rad).floor().max(0.0) as usize;
        let y0 = (py - rad).floor().max(0.0) as usize;
        let x1 = ((px + rad).ceil().max(0.0) as usize).min(out);
        let y1 = ((py + rad).ceil().max(0.0) as usize).min(out);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - px, y as f64 + 0.5 - py);
                if dx * dx + dy * dy <= rad * rad {
                    image[(y * out + x) * 3..(y * out + x) * 3 + 3].copy_from_slice(&obj.colors[i]);
                }
            }
        }
    }
    Ok(View {
        image,
        pose: *pose,
        k,
        crop,
    })
}

fn random_translation<R: Rng>(rng: &mut R, s: &RenderSettings) -> Vector3<f64> {
    let u = rng.random_range(s.center_min..=s.center_max);
    let v = rng.random_range(s.center_min..=s.center_max);
    let z = rng.random_range(s.depth_min..=s.depth_max);
    s.k.back_project(u, v, z)
}

/// Uniformly random rotation, random depth and centre jitter.
pub fn random_pose<R: Rng>(rng: &mut R, s: &RenderSettings) -> Pose {
    Pose::new(Rotation::random(rng), random_translation(rng, s))
}

fn render_retrying<R: Rng>(
    obj: &ToyObject,
    settings: &RenderSettings,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> Pose,
) -> Result<View> {
    let mut last = None;
    for _ in 0..MAX_RENDER_RETRIES {
        match render(obj, &draw(rng), settings) {
            Ok(v) => return Ok(v),
            Err(Error::Rejected(m)) => last = Some(m),
            Err(e) => return Err(e),
        }
    }
    Err(Error::Rejected(format!(
        "no renderable pose after {MAX_RENDER_RETRIES} attempts: {}",
        last.unwrap_or_default()
    )))
}

/// `n` templates with uniform rotations, depths and centre jitter.
pub fn sample_coarse_templates(obj: &ToyObject, n: usize, seed: u64, settings: &RenderSettings) -> Result<Vec<View>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| render_retrying(obj, settings, &mut rng, |r| random_pose(r, settings)))
        .collect()
}

/// Perturbation of `center`: rotation by a uniform angle in `[0, max_rot]`
/// about a uniform axis (applied on the left) and a translation offset
/// uniform in the `±max_trans` cube.
pub fn perturb_pose<R: Rng>(rng: &mut R, center: &Pose, max_rot_deg: f64, max_trans_m: f64) -> Pose {
    let axis = loop {
        let a = Vector3::new(
            rng.sample::<f64, _>(rand_distr::StandardNormal),
            rng.sample::<f64, _>(rand_distr::StandardNormal),
            rng.sample::<f64, _>(rand_distr::StandardNormal),
        );
        if a.norm() > 1e-9 {
            break a;
        }
    };
    let angle = if max_rot_deg > 0.0 {
        rng.random_range(0.0..=max_rot_deg.to_radians())
    } else {
        0.0
    };
    let mut off = Vector3::zeros();
    if max_trans_m > 0.0 {
        for c in off.iter_mut() {
            *c = rng.random_range(-max_trans_m..=max_trans_m);
        }
    }
    Pose::new(Rotation::from_axis_angle(&axis, angle) * center.r, center.t + off)
}

/// `n` templates perturbed around `center`.
pub fn sample_fine_templates(
    obj: &ToyObject,
    center: &Pose,
    n: usize,
    seed: u64,
    max_rot_deg: f64,
    max_trans_m: f64,
    settings: &RenderSettings,
) -> Result<Vec<View>> {
    if !(max_rot_deg >= 0.0 && max_trans_m >= 0.0) {
        return Err(Error::Config("fine-template bounds must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| render_retrying(obj, settings, &mut rng, |r| perturb_pose(r, center, max_rot_deg, max_trans_m)))
        .collect()
}

/// Camera looking at the object origin from direction `d` (object frame).
fn look_from(d: &Vector3<f64>) -> Rotation {
    let z = -d.normalize();
    let up = if z.y.abs() > 0.99 { Vector3::x() } else { Vector3::y() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    Rotation::from_matrix_unchecked(Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]))
}

/// `n` viewpoints spread over the sphere (Fibonacci lattice), centred in
/// the image at mid depth. Independent of the object and of any seed.
pub fn fixed_template_poses(n: usize, settings: &RenderSettings) -> Vec<Pose> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let z_mid = 0.5 * (settings.depth_min + settings.depth_max);
    let c = 0.5 * settings.canvas as f64;
    let t = settings.k.back_project(c, c, z_mid);
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            Pose::new(look_from(&Vector3::new(r * th.cos(), y, r * th.sin())), t)
        })
        .collect()
}

pub fn fixed_templates(obj: &ToyObject, n: usize, settings: &RenderSettings) -> Result<Vec<View>> {
    fixed_template_poses(n, settings)
        .iter()
        .map(|p| render(obj, p, settings))
        .collect()
}

/// How the templates of a sample are placed relative to the query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemplateDistribution {
    Fixed,
    Random,
    /// Perturbations of the query pose within the given bounds.
    Local { max_rot_deg: f64, max_trans_m: f64 },
}

impl TemplateDistribution {
    pub fn label(&self) -> String {
        match self {
            TemplateDistribution::Fixed => "fixed".into(),
            TemplateDistribution::Random => "random".into(),
            TemplateDistribution::Local { max_rot_deg, max_trans_m } => {
                format!("local_{max_rot_deg}deg_{}cm", max_trans_m * 100.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub object_id: u64,
    pub query: View,
    pub templates: Vec<View>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub samples: usize,
    pub templates: usize,
    /// Number of distinct objects poses are drawn for.
    pub objects: usize,
    pub k_points: usize,
    /// Draw objects from a seed range disjoint from the default one.
    pub unseen_objects: bool,
    pub distribution: TemplateDistribution,
    pub render: RenderSettings,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            samples: 64,
            templates: 8,
            objects: 8,
            k_points: 12,
            unseen_objects: false,
            distribution: TemplateDistribution::Random,
            render: RenderSettings::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.templates == 0 || self.objects == 0 {
            return Err(Error::Config("templates and objects must be positive".into()));
        }
        if self.k_points < 12 {
            return Err(Error::Config("k_points must be at least 12".into()));
        }
        let r = &self.render;
        if !(r.depth_min > 1.0 && r.depth_max >= r.depth_min && r.center_max >= r.center_min) {
            return Err(Error::Config("depth range must lie beyond the unit ball".into()));
        }
        if r.out_size == 0 || r.canvas == 0 {
            return Err(Error::Config("image sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Deterministic per-index generator for sample `index` of `cfg`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Seed of the object shown in sample `index`.
pub fn object_seed(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> u64 {
    let base = if cfg.unseen_objects { UNSEEN_OBJECT_BASE } else { 0 };
    base + rng.random_range(0..cfg.objects as u64)
}

/// Generates sample `index`; a pure function of `(cfg, index)`.
pub fn generate_sample(cfg: &GenConfig, index: u64) -> Result<Sample> {
    let mut rng = sample_rng(cfg.seed, index);
    let obj = make_object(object_seed(cfg, &mut rng), cfg.k_points)?;
    generate_for_object(cfg, &obj, &mut rng)
}

/// A query of `obj` at a random pose and templates from `cfg.distribution`.
pub fn generate_for_object(cfg: &GenConfig, obj: &ToyObject, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let s = &cfg.render;
    let query = render_retrying(obj, s, rng, |r| random_pose(r, s))?;
    let tseed: u64 = rng.random();
    let templates = match cfg.distribution {
        TemplateDistribution::Fixed => fixed_templates(obj, cfg.templates, s)?,
        TemplateDistribution::Random => sample_coarse_templates(obj, cfg.templates, tseed, s)?,
        TemplateDistribution::Local { max_rot_deg, max_trans_m } => {
            sample_fine_templates(obj, &query.pose, cfg.templates, tseed, max_rot_deg, max_trans_m, s)?
        }
    };
    Ok(Sample {
        object_id: obj.id,
        query,
        templates,
    })
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.samples as u64).map(|i| generate_sample(cfg, i)).collect()
}
