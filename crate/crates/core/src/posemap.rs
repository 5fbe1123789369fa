//! Codecs between 6D poses and structured `p x p x 3` pose maps.
//!
//! The rotation map holds, for every cell of a canonical square grid, the
//! canonical ray through that cell rotated by `R`. The translation map holds
//! per-cell offsets from a uniformly sampled crop pixel to the projected
//! object centre (normalised by the crop size) and the zoom-normalised depth
//! `t_z / r_z`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{procrustes_align, project_centroid, CropSpec, Intrinsics, Pose, Rotation};
use crate::{Error, Result};

/// Cells whose norm falls below this are ignored when decoding rays.
pub const MIN_RAY_NORM: f64 = 1e-6;

/// A `side x side` grid of 3-vectors, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMap {
    side: usize,
    cells: Vec<Vector3<f64>>,
}

/// Rotation map: one ray direction per cell.
pub type RayMap = CellMap;
/// Translation map: `(dx, dy, depth)` per cell.
pub type TranslationMap = CellMap;

impl CellMap {
    pub fn new(side: usize, cells: Vec<Vector3<f64>>) -> Result<Self> {
        if cells.len() != side * side {
            return Err(Error::Contract(format!(
                "map of side {side} needs {} cells, got {}",
                side * side,
                cells.len()
            )));
        }
        Ok(CellMap { side, cells })
    }

    pub fn filled(side: usize, v: Vector3<f64>) -> Self {
        CellMap {
            side,
            cells: vec![v; side * side],
        }
    }

    /// Builds a map from `side * side * 3` row-major values.
    pub fn from_flat(side: usize, data: &[f64]) -> Result<Self> {
        if data.len() != side * side * 3 {
            return Err(Error::Contract(format!(
                "flat map of side {side} needs {} values, got {}",
                side * side * 3,
                data.len()
            )));
        }
        let cells = data
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        Ok(CellMap { side, cells })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.cells.iter().flat_map(|c| [c.x, c.y, c.z]).collect()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> &[Vector3<f64>] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [Vector3<f64>] {
        &mut self.cells
    }

    pub fn at(&self, row: usize, col: usize) -> &Vector3<f64> {
        &self.cells[row * self.side + col]
    }

    pub fn is_finite(&self) -> bool {
        self.cells.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

/// Canonical rays of the identity rotation: the object centre viewed as a
/// virtual pinhole camera with a uniform intrinsic of half-extent `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalGrid {
    side: usize,
    half_extent: f64,
    dirs: Vec<Vector3<f64>>,
}

impl CanonicalGrid {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    pub fn dirs(&self) -> &[Vector3<f64>] {
        &self.dirs
    }

    pub fn cell_count(&self) -> usize {
        self.dirs.len()
    }

    /// Index pairs of 4-neighbours (right and down), each pair once.
    pub fn neighbor_pairs(&self) -> Vec<(usize, usize)> {
        let p = self.side;
        let mut pairs = Vec::with_capacity(2 * p * (p - 1));
        for i in 0..p {
            for j in 0..p {
                let a = i * p + j;
                if j + 1 < p {
                    pairs.push((a, a + 1));
                }
                if i + 1 < p {
                    pairs.push((a, a + p));
                }
            }
        }
        pairs
    }

    /// Angles between canonical neighbour rays, aligned with [`Self::neighbor_pairs`].
    pub fn neighbor_angles(&self) -> Vec<f64> {
        self.neighbor_pairs()
            .into_iter()
            .map(|(a, b)| ray_angle(&self.dirs[a], &self.dirs[b]))
            .collect()
    }
}

/// Angle between two unit vectors, `atan2(|a x b|, a . b)`.
pub fn ray_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Cell `(i, j)` centre at `u = -s + (2j+1)s/p`, `v = -s + (2i+1)s/p`;
/// the ray is `normalize([u, v, 1])`.
pub fn canonical_rays(p: usize, half_extent: f64) -> Result<CanonicalGrid> {
    if p < 2 {
        return Err(Error::Config(format!("grid side must be at least 2, got {p}")));
    }
    if !(half_extent > 0.0 && half_extent.is_finite()) {
        return Err(Error::Config(format!(
            "grid half extent must be positive, got {half_extent}"
        )));
    }
    let s = half_extent;
    let pf = p as f64;
    let mut dirs = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            let u = -s + (2 * j + 1) as f64 * s / pf;
            let v = -s + (2 * i + 1) as f64 * s / pf;
            dirs.push(Vector3::new(u, v, 1.0).normalize());
        }
    }
    Ok(CanonicalGrid {
        side: p,
        half_extent,
        dirs,
    })
}

pub fn encode_rotation(r: &Rotation, grid: &CanonicalGrid) -> RayMap {
    CellMap {
        side: grid.side,
        cells: grid.dirs.iter().map(|d| r.apply(d)).collect(),
    }
}

/// Normalises usable cells and aligns the canonical rays onto them.
pub fn decode_rotation(m: &RayMap, grid: &CanonicalGrid) -> Result<Rotation> {
    if m.side != grid.side {
        return Err(Error::Contract(format!(
            "ray map side {} does not match grid side {}",
            m.side, grid.side
        )));
    }
    if !m.is_finite() {
        return Err(Error::Domain("ray map has non-finite cells".into()));
    }
    let (src, dst): (Vec<_>, Vec<_>) = grid
        .dirs
        .iter()
        .zip(&m.cells)
        .filter_map(|(d, c)| {
            let n = c.norm();
            (n >= MIN_RAY_NORM).then(|| (*d, c / n))
        })
        .unzip();
    if src.len() < 3 {
        return Err(Error::Degenerate(format!(
            "only {} usable rays in map",
            src.len()
        )));
    }
    procrustes_align(&src, &dst)
}

/// Pixel centres of the `p x p` sampling grid over the crop.
pub fn crop_sample_points(crop: &CropSpec, p: usize) -> (Vec<f64>, Vec<f64>) {
    let us = (0..p)
        .map(|j| crop.x + (j as f64 + 0.5) * crop.w / p as f64)
        .collect();
    let vs = (0..p)
        .map(|i| crop.y + (i as f64 + 0.5) * crop.h / p as f64)
        .collect();
    (us, vs)
}

/// Dense offset map: cell `(i, j)` holds
/// `((u_j - o_x)/w, (v_i - o_y)/h, t_z/r_z)`.
pub fn encode_translation(
    t: &Vector3<f64>,
    k: &Intrinsics,
    crop: &CropSpec,
    p: usize,
) -> Result<TranslationMap> {
    let (ox, oy) = project_centroid(k, t)?;
    let depth = t.z / crop.r_z;
    let (us, vs) = crop_sample_points(crop, p);
    let mut cells = Vec::with_capacity(p * p);
    for v in &vs {
        for u in &us {
            cells.push(Vector3::new((u - ox) / crop.w, (v - oy) / crop.h, depth));
        }
    }
    Ok(CellMap { side: p, cells })
}

/// Inverse of [`encode_translation`]: averages the per-cell centroid
/// estimates, recovers `t_z = r_z * mean(depth)` and back-projects.
pub fn decode_translation(m: &TranslationMap, k: &Intrinsics, crop: &CropSpec) -> Result<Vector3<f64>> {
    decode_translation_with_depth_factor(m, k, crop, crop.r_z)
}

/// Shared decode where the depth channel is scaled by `depth_factor`
/// (`r_z` for absolute maps; `t_T,z * r_Q,z / r_T,z` for relative maps).
pub fn decode_translation_with_depth_factor(
    m: &TranslationMap,
    k: &Intrinsics,
    crop: &CropSpec,
    depth_factor: f64,
) -> Result<Vector3<f64>> {
    if !m.is_finite() {
        return Err(Error::Domain("translation map has non-finite cells".into()));
    }
    let p = m.side;
    let (us, vs) = crop_sample_points(crop, p);
    let n = (p * p) as f64;
    let (mut ox, mut oy, mut dz) = (0.0, 0.0, 0.0);
    for (i, v) in vs.iter().enumerate() {
        for (j, u) in us.iter().enumerate() {
            let c = m.at(i, j);
            ox += u - crop.w * c.x;
            oy += v - crop.h * c.y;
            dz += c.z;
        }
    }
    let tz = depth_factor * dz / n;
    if !(tz > 0.0) {
        return Err(Error::Decode(format!("recovered depth {tz} is not positive")));
    }
    Ok(k.back_project(ox / n, oy / n, tz))
}

/// Relative depth scale `(t_Q,z r_T,z) / (t_T,z r_Q,z)`.
pub fn relative_depth_scale(tq_z: f64, rq_z: f64, tt_z: f64, rt_z: f64) -> Result<f64> {
    if !(tq_z > 0.0 && rq_z > 0.0 && tt_z > 0.0 && rt_z > 0.0) {
        return Err(Error::Domain(format!(
            "relative depth needs positive inputs (tq={tq_z}, rq={rq_z}, tt={tt_z}, rt={rt_z})"
        )));
    }
    Ok((tq_z * rt_z) / (tt_z * rq_z))
}

/// Inverse of [`relative_depth_scale`] for the query depth.
pub fn recover_query_depth(s: f64, tt_z: f64, rt_z: f64, rq_z: f64) -> Result<f64> {
    if !(tt_z > 0.0 && rt_z > 0.0 && rq_z > 0.0) {
        return Err(Error::Domain("depth recovery needs positive template depth and zooms".into()));
    }
    Ok(s * tt_z * rq_z / rt_z)
}

/// Depth multiplier turning a relative-map depth channel into query depth.
pub fn relative_depth_factor(template: &PosedCrop, query_crop: &CropSpec) -> f64 {
    template.pose.t.z * query_crop.r_z / template.crop.r_z
}

/// A pose together with the crop the object was observed through.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosedCrop {
    pub pose: Pose,
    pub crop: CropSpec,
}

/// Relative supervision maps for one template: the ray map of
/// `R_Q R_T^T` and the query's own offset map whose depth channel is the
/// relative depth scale.
pub fn make_relative_maps(
    query: &PosedCrop,
    template: &PosedCrop,
    k_query: &Intrinsics,
    grid: &CanonicalGrid,
) -> Result<(RayMap, TranslationMap)> {
    let r_rel = query.pose.r * template.pose.r.transpose();
    let rays = encode_rotation(&r_rel, grid);
    let mut trans = encode_translation(&query.pose.t, k_query, &query.crop, grid.side)?;
    let s = relative_depth_scale(
        query.pose.t.z,
        query.crop.r_z,
        template.pose.t.z,
        template.crop.r_z,
    )?;
    for c in trans.cells_mut() {
        c.z = s;
    }
    Ok((rays, trans))
}

/// Recovers `H_rel` from relative maps, so that
/// `compose_query_pose(H_rel, template.pose)` is the query pose.
pub fn invert_relative_maps(
    rays: &RayMap,
    trans: &TranslationMap,
    template: &PosedCrop,
    query_crop: &CropSpec,
    k_query: &Intrinsics,
    grid: &CanonicalGrid,
) -> Result<Pose> {
    let r_rel = decode_rotation(rays, grid)?;
    let t_q = decode_translation_with_depth_factor(
        trans,
        k_query,
        query_crop,
        relative_depth_factor(template, query_crop),
    )?;
    let t_rel = t_q - r_rel.apply(&template.pose.t);
    Ok(Pose::new(r_rel, t_rel))
}

/// Absolute-pose maps for the query (no template involved).
pub fn make_absolute_maps(
    query: &PosedCrop,
    k_query: &Intrinsics,
    grid: &CanonicalGrid,
) -> Result<(RayMap, TranslationMap)> {
    Ok((
        encode_rotation(&query.pose.r, grid),
        encode_translation(&query.pose.t, k_query, &query.crop, grid.side)?,
    ))
}
