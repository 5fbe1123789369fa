//! Training objectives on predicted pose maps.
//!
//! The graph versions work on stacks of `m` maps (`m p² x 3` rows) and
//! average over maps; the plain versions wrap them for a single map pair.

use nalgebra::Vector3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::geometry::{CropSpec, Intrinsics};
use crate::model::{Graph, Real, Var};
use crate::posemap::{crop_sample_points, CanonicalGrid, RayMap, TranslationMap};
use crate::{Error, Result};

/// Half-width of the quadratic zone of the smoothed L1 term.
pub const SMOOTH_L1_DELTA: f64 = 1e-8;
/// Lower bound applied to decoded depth inside the translation loss.
pub const MIN_LOSS_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub recon: f64,
    pub cos: f64,
    pub reg: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub t: f64,
    pub rot: f64,
    pub trans: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            cos: 1.0,
            reg: 0.1,
            x: 1.0,
            y: 1.0,
            z: 1.0,
            t: 0.5,
            rot: 1.0,
            trans: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.recon, self.cos, self.reg, self.x, self.y, self.z, self.t, self.rot, self.trans,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and non-negative".into()))
        }
    }

    /// Multiplies the term weights inside `L^R` and `L^T` by `c`, which
    /// multiplies the total loss by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        LossWeights {
            recon: self.recon * c,
            cos: self.cos * c,
            reg: self.reg * c,
            x: self.x,
            y: self.y,
            z: self.z,
            t: self.t * c,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotTerms {
    pub recon: f64,
    pub cos: f64,
    pub reg: f64,
    pub total: f64,
    /// Cells left out of the cosine and angle terms for zero norm.
    pub skipped_cells: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransTerms {
    pub recon: f64,
    pub xyz: f64,
    pub total: f64,
    /// Some decoded depth fell below [`MIN_LOSS_DEPTH`] and was clamped.
    pub depth_clamped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rot: RotTerms,
    pub trans: TransTerms,
    pub total: f64,
}

/// Graph handles of the rotation terms.
#[derive(Clone, Copy, Debug)]
pub struct RotVars {
    pub recon: Var,
    pub cos: Option<Var>,
    pub reg: Option<Var>,
    pub total: Var,
    pub skipped_cells: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct TransVars {
    pub recon: Var,
    pub xyz: Var,
    pub total: Var,
    /// Decoded translations, `m x 3`.
    pub t_hat: Var,
    pub depth_clamped: bool,
}

/// What is needed to decode one predicted translation map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransTarget {
    pub k: Intrinsics,
    pub crop: CropSpec,
    /// `r_z` for absolute maps, the relative depth factor otherwise.
    pub depth_factor: f64,
    pub t_gt: Vector3<f64>,
}

fn map_count(g: &Graph<impl Real>, pred: Var, target: Var, cells: usize) -> Result<usize> {
    let (n, c) = g.shape(pred);
    if g.shape(target) != (n, c) || c != 3 || cells == 0 || n % cells != 0 || n == 0 {
        return Err(Error::Contract(format!(
            "maps {:?} vs {:?} for {cells} cells per map",
            g.shape(pred),
            g.shape(target)
        )));
    }
    Ok(n / cells)
}

fn recon_g<F: Real>(g: &mut Graph<F>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    let s = g.sum_all(sq);
    let n = g.shape(pred).0;
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Recon, cosine and adjacent-angle terms over `m` stacked ray maps.
pub fn loss_rot_g<F: Real>(
    g: &mut Graph<F>,
    pred: Var,
    target: Var,
    grid: &CanonicalGrid,
    w: &LossWeights,
) -> Result<RotVars> {
    let cells = grid.cell_count();
    let m = map_count(g, pred, target, cells)?;
    let recon = recon_g(g, pred, target)?;

    let pv = g.value(pred);
    let tv = g.value(target);
    let norm_ok = |a: &Array2<F>, r: usize| {
        let row = a.row(r);
        row.iter().map(|x| x.f64() * x.f64()).sum::<f64>() > 0.0
    };
    let valid: Vec<bool> = (0..m * cells).map(|r| norm_ok(pv, r)).collect();
    let cos_rows: Vec<usize> = (0..m * cells).filter(|&r| valid[r] && norm_ok(tv, r)).collect();
    let skipped_cells = valid.iter().filter(|v| !**v).count();

    let cos = if cos_rows.is_empty() {
        None
    } else {
        let a = g.gather_rows(pred, &cos_rows)?;
        let b = g.gather_rows(target, &cos_rows)?;
        let ab = g.row_dot(a, b)?;
        let aa = g.row_dot(a, a)?;
        let bb = g.row_dot(b, b)?;
        let na = g.sqrt(aa);
        let nb = g.sqrt(bb);
        let den = g.mul(na, nb)?;
        let c = g.div(ab, den)?;
        let mean = g.mean_all(c);
        let neg = g.scale(mean, -1.0);
        Some(g.add_scalar(neg, 1.0))
    };

    let base = grid.neighbor_pairs();
    let ref_angles = grid.neighbor_angles();
    let (mut is, mut js, mut alpha) = (Vec::new(), Vec::new(), Vec::new());
    for h in 0..m {
        for ((i, j), a) in base.iter().zip(&ref_angles) {
            let (i, j) = (h * cells + i, h * cells + j);
            if valid[i] && valid[j] {
                is.push(i);
                js.push(j);
                alpha.push(F::c(*a));
            }
        }
    }
    let reg = if is.is_empty() {
        None
    } else {
        let sq = g.row_dot(pred, pred)?;
        let norm = g.sqrt(sq);
        // zero-norm rows never enter a pair, so dividing them is harmless
        let ones = g.constant(Array2::from_shape_fn((m * cells, 1), |(r, _)| {
            if valid[r] {
                F::zero()
            } else {
                F::one()
            }
        }));
        let den = g.add(norm, ones)?;
        let unit = g.div_col(pred, den)?;
        let a = g.gather_rows(unit, &is)?;
        let b = g.gather_rows(unit, &js)?;
        let dots = g.row_dot(a, b)?;
        let ang = g.acos(dots);
        let refs = g.constant(Array2::from_shape_vec((alpha.len(), 1), alpha).expect("len"));
        let diff = g.sub(ang, refs)?;
        let sq = g.square(diff);
        Some(g.mean_all(sq))
    };

    let mut total = g.scale(recon, w.recon);
    for (term, wt) in [(cos, w.cos), (reg, w.reg)] {
        if let Some(t) = term {
            let s = g.scale(t, wt);
            total = g.add(total, s)?;
        }
    }
    Ok(RotVars {
        recon,
        cos,
        reg,
        total,
        skipped_cells,
    })
}

/// Map recon plus the decoded-translation term over `m` stacked maps, one
/// [`TransTarget`] per map.
pub fn loss_trans_g<F: Real>(
    g: &mut Graph<F>,
    pred: Var,
    target: Var,
    targets: &[TransTarget],
    side: usize,
    w: &LossWeights,
) -> Result<TransVars> {
    let cells = side * side;
    let m = map_count(g, pred, target, cells)?;
    if targets.len() != m {
        return Err(Error::Contract(format!("{} translation targets for {m} maps", targets.len())));
    }
    let recon = recon_g(g, pred, target)?;
    let mut rows = Vec::with_capacity(m);
    let mut depth_clamped = false;
    let wrow = g.constant(Array2::from_shape_vec((1, 3), vec![F::c(w.x), F::c(w.y), F::c(w.z)]).expect("3"));
    let mut xyz_terms = Vec::with_capacity(m);
    for (h, tg) in targets.iter().enumerate() {
        let (us, vs) = crop_sample_points(&tg.crop, side);
        let mu = us.iter().sum::<f64>() / side as f64;
        let mv = vs.iter().sum::<f64>() / side as f64;
        let map = g.slice_rows(pred, h * cells, (h + 1) * cells)?;
        let mean = g.col_mean(map);
        let mut a = Array2::zeros((3, 3));
        a[[0, 0]] = F::c(-tg.crop.w);
        a[[1, 1]] = F::c(-tg.crop.h);
        a[[2, 2]] = F::c(tg.depth_factor);
        let a = g.constant(a);
        let b = g.constant(Array2::from_shape_vec((1, 3), vec![F::c(mu), F::c(mv), F::zero()]).expect("3"));
        let o = g.linear(mean, a, Some(b))?;
        let tz_raw = g.slice_cols(o, 2, 3)?;
        if g.scalar(tz_raw).f64() < MIN_LOSS_DEPTH {
            depth_clamped = true;
        }
        let tz = g.clamp_min(tz_raw, MIN_LOSS_DEPTH);
        let ox = g.slice_cols(o, 0, 1)?;
        let oy = g.slice_cols(o, 1, 2)?;
        let ox = g.add_scalar(ox, -tg.k.cx);
        let ox = g.scale(ox, 1.0 / tg.k.fx);
        let tx = g.mul(ox, tz)?;
        let oy = g.add_scalar(oy, -tg.k.cy);
        let oy = g.scale(oy, 1.0 / tg.k.fy);
        let ty = g.mul(oy, tz)?;
        let t = g.concat_cols(&[tx, ty, tz])?;
        rows.push(t);
        let gt = g.constant(Array2::from_shape_vec((1, 3), tg.t_gt.iter().map(|v| F::c(*v)).collect()).expect("3"));
        let d = g.sub(t, gt)?;
        let d = g.smooth_abs(d, SMOOTH_L1_DELTA);
        let d = g.mul(d, wrow)?;
        xyz_terms.push(g.sum_all(d));
    }
    let t_hat = g.concat_rows(&rows)?;
    let all = g.concat_rows(&xyz_terms)?;
    let xyz = g.mean_all(all);
    let a = g.scale(recon, w.recon);
    let b = g.scale(xyz, w.t);
    let total = g.add(a, b)?;
    Ok(TransVars {
        recon,
        xyz,
        total,
        t_hat,
        depth_clamped,
    })
}

/// `λ_rot L^R + λ_trans L^T`.
pub fn loss_total_g<F: Real>(g: &mut Graph<F>, rot: Var, trans: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(rot, w.rot);
    let b = g.scale(trans, w.trans);
    g.add(a, b)
}

pub fn loss_total(rot: f64, trans: f64, w: &LossWeights) -> f64 {
    w.rot * rot + w.trans * trans
}

pub(crate) fn map_array(m: &RayMap) -> Array2<f64> {
    Array2::from_shape_fn((m.cells().len(), 3), |(r, c)| m.cells()[r][c])
}

pub fn rot_terms<F: Real>(g: &Graph<F>, v: &RotVars) -> RotTerms {
    RotTerms {
        recon: g.scalar(v.recon).f64(),
        cos: v.cos.map_or(0.0, |c| g.scalar(c).f64()),
        reg: v.reg.map_or(0.0, |c| g.scalar(c).f64()),
        total: g.scalar(v.total).f64(),
        skipped_cells: v.skipped_cells,
    }
}

pub fn trans_terms<F: Real>(g: &Graph<F>, v: &TransVars) -> TransTerms {
    TransTerms {
        recon: g.scalar(v.recon).f64(),
        xyz: g.scalar(v.xyz).f64(),
        total: g.scalar(v.total).f64(),
        depth_clamped: v.depth_clamped,
    }
}

pub fn loss_rot(pred: &RayMap, target: &RayMap, grid: &CanonicalGrid, w: &LossWeights) -> Result<RotTerms> {
    let mut g = Graph::<f64>::standalone();
    let p = g.constant(map_array(pred));
    let t = g.constant(map_array(target));
    let v = loss_rot_g(&mut g, p, t, grid, w)?;
    Ok(rot_terms(&g, &v))
}

/// Translation terms for an absolute map (depth factor `r_z`). Also returns
/// the decoded translation used by the xyz term.
pub fn loss_trans(
    pred: &TranslationMap,
    target: &TranslationMap,
    k: &Intrinsics,
    crop: &CropSpec,
    t_gt: &Vector3<f64>,
    w: &LossWeights,
) -> Result<(TransTerms, Vector3<f64>)> {
    let mut g = Graph::<f64>::standalone();
    let p = g.constant(map_array(pred));
    let t = g.constant(map_array(target));
    let tg = TransTarget {
        k: *k,
        crop: *crop,
        depth_factor: crop.r_z,
        t_gt: *t_gt,
    };
    let v = loss_trans_g(&mut g, p, t, &[tg], pred.side(), w)?;
    let th = g.value(v.t_hat);
    Ok((trans_terms(&g, &v), Vector3::new(th[[0, 0]], th[[0, 1]], th[[0, 2]])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Rotation};
    use crate::posemap::{canonical_rays, encode_rotation, encode_translation, CellMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 16.0, 16.0).unwrap()
    }

    #[test]
    fn rotation_examples() {
        let grid = canonical_rays(2, 1.0).unwrap();
        let w = LossWeights::default();
        let r = encode_rotation(&Rotation::rz(0.4), &grid);
        let t = loss_rot(&r, &r, &grid, &w).unwrap();
        assert!(t.recon == 0.0 && t.cos.abs() < 1e-15 && t.reg < 1e-24);

        let mut p = r.clone();
        p.cells_mut()[1] += Vector3::new(0.1, 0.1, 0.1);
        let t = loss_rot(&p, &r, &grid, &w).unwrap();
        assert!((t.recon - 0.0075).abs() < 1e-15, "{}", t.recon);
    }

    #[test]
    fn angle_term_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = LossWeights::default();
        for p in [4, 8] {
            let grid = canonical_rays(p, 1.0).unwrap();
            for _ in 0..200 {
                let a = encode_rotation(&Rotation::random(&mut rng), &grid);
                let b = encode_rotation(&Rotation::random(&mut rng), &grid);
                let t = loss_rot(&a, &b, &grid, &w).unwrap();
                assert!(t.reg < 1e-12, "{}", t.reg);
                assert!(t.cos >= 0.0 && t.recon >= 0.0);
            }
        }
    }

    #[test]
    fn zero_norm_cells_are_skipped() {
        let grid = canonical_rays(4, 1.0).unwrap();
        let r = encode_rotation(&Rotation::identity(), &grid);
        let mut p = r.clone();
        p.cells_mut()[5] = Vector3::zeros();
        let t = loss_rot(&p, &r, &grid, &LossWeights::default()).unwrap();
        assert_eq!(t.skipped_cells, 1);
        assert!(t.cos.abs() < 1e-15 && t.reg < 1e-24 && t.recon > 0.0);
        let zero = CellMap::filled(4, Vector3::zeros());
        let t = loss_rot(&zero, &r, &grid, &LossWeights::default()).unwrap();
        assert_eq!(t.skipped_cells, 16);
        assert!(t.total.is_finite());
    }

    #[test]
    fn translation_examples() {
        let w = LossWeights::default();
        let crop = CropSpec::new(2.0, 3.0, 20.0, 20.0, 1.6).unwrap();
        let t = Vector3::new(0.1, -0.05, 2.0);
        let m = encode_translation(&t, &k(), &crop, 4).unwrap();
        let (terms, th) = loss_trans(&m, &m, &k(), &crop, &t, &w).unwrap();
        assert!(terms.total < 1e-12 && (th - t).norm() < 1e-12);

        let delta = 0.01;
        let mut p = m.clone();
        for c in p.cells_mut() {
            c.z += delta;
        }
        let (_, th) = loss_trans(&p, &m, &k(), &crop, &t, &w).unwrap();
        assert!(((th.z - t.z).abs() - crop.r_z * delta).abs() < 1e-12);

        let mut neg = m.clone();
        for c in neg.cells_mut() {
            c.z = -1.0;
        }
        let (terms, th) = loss_trans(&neg, &m, &k(), &crop, &t, &w).unwrap();
        assert!(terms.depth_clamped);
        assert!((th.z - MIN_LOSS_DEPTH).abs() < 1e-15);
        assert!(terms.total.is_finite());
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(loss_total(0.0, 0.0, &w), 0.0);
        let w2 = LossWeights { rot: 1.0, trans: 2.0, ..w };
        assert_eq!(loss_total(0.5, 0.25, &w2), 1.0);
        let w0 = LossWeights { rot: 0.0, ..w };
        assert_eq!(loss_total(3.0, 0.25, &w0), 0.25);
        assert!(LossWeights { reg: -1.0, ..w }.validate().is_err());
    }

    fn full_loss(pr: &Array2<f64>, pt: &Array2<f64>, rt: &Array2<f64>, tt: &Array2<f64>, tgs: &[TransTarget], grid: &CanonicalGrid, w: &LossWeights) -> (f64, Array2<f64>, Array2<f64>) {
        let mut g = Graph::<f64>::standalone();
        let a = g.variable(pr.clone());
        let b = g.variable(pt.clone());
        let ra = g.constant(rt.clone());
        let tb = g.constant(tt.clone());
        let rv = loss_rot_g(&mut g, a, ra, grid, w).unwrap();
        let tv = loss_trans_g(&mut g, b, tb, tgs, grid.side(), w).unwrap();
        let l = loss_total_g(&mut g, rv.total, tv.total, w).unwrap();
        let gr = g.backward(l);
        (g.scalar(l), gr.wrt(a).unwrap().clone(), gr.wrt(b).unwrap().clone())
    }

    type Scene = (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>, Vec<TransTarget>);

    fn scene(rng: &mut ChaCha8Rng, grid: &CanonicalGrid, m: usize) -> Scene {
        let cells = grid.cell_count();
        let mut rt = Array2::zeros((m * cells, 3));
        let mut tt = Array2::zeros((m * cells, 3));
        let mut tgs = Vec::new();
        for h in 0..m {
            let pose = Pose::new(
                Rotation::random(rng),
                Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(1.5..3.0)),
            );
            let crop = CropSpec::new(rng.random_range(0.0..8.0), rng.random_range(0.0..8.0), 20.0, 20.0, 1.6).unwrap();
            let r = encode_rotation(&pose.r, grid);
            let t = encode_translation(&pose.t, &k(), &crop, grid.side()).unwrap();
            for c in 0..cells {
                for ch in 0..3 {
                    rt[[h * cells + c, ch]] = r.cells()[c][ch];
                    tt[[h * cells + c, ch]] = t.cells()[c][ch];
                }
            }
            tgs.push(TransTarget { k: k(), crop, depth_factor: crop.r_z, t_gt: pose.t });
        }
        let pr = &rt + &Array2::from_shape_fn(rt.dim(), |_| rng.random_range(-0.2..0.2));
        let pt = &tt + &Array2::from_shape_fn(tt.dim(), |_| rng.random_range(-0.2..0.2));
        (pr, pt, rt, tt, tgs)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let grid = canonical_rays(4, 1.0).unwrap();
        let w = LossWeights::default();
        for _ in 0..3 {
            let (pr, pt, rt, tt, tgs) = scene(&mut rng, &grid, 2);
            let (_, ga, gb) = full_loss(&pr, &pt, &rt, &tt, &tgs, &grid, &w);
            let eps = 1e-5;
            let mut worst: f64 = 0.0;
            for which in 0..2 {
                let base = if which == 0 { &pr } else { &pt };
                let an = if which == 0 { &ga } else { &gb };
                for idx in 0..base.len() {
                    let mut plus = base.clone();
                    let mut minus = base.clone();
                    plus.as_slice_mut().unwrap()[idx] += eps;
                    minus.as_slice_mut().unwrap()[idx] -= eps;
                    let f = |x: &Array2<f64>| {
                        if which == 0 {
                            full_loss(x, &pt, &rt, &tt, &tgs, &grid, &w).0
                        } else {
                            full_loss(&pr, x, &rt, &tt, &tgs, &grid, &w).0
                        }
                    };
                    let num = (f(&plus) - f(&minus)) / (2.0 * eps);
                    let a = an.as_slice().unwrap()[idx];
                    let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                    worst = worst.max(err);
                }
            }
            assert!(worst < 1e-6, "worst relative error {worst}");
        }
    }

    #[test]
    fn scaling_weights_scales_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let grid = canonical_rays(4, 1.0).unwrap();
        let (pr, pt, rt, tt, tgs) = scene(&mut rng, &grid, 1);
        let w = LossWeights::default();
        let (l1, _, _) = full_loss(&pr, &pt, &rt, &tt, &tgs, &grid, &w);
        let (l3, _, _) = full_loss(&pr, &pt, &rt, &tt, &tgs, &grid, &w.scaled(3.0));
        assert!((l3 - 3.0 * l1).abs() < 1e-12 * l1.abs().max(1.0));
        let outer = LossWeights { rot: 3.0 * w.rot, trans: 3.0 * w.trans, ..w };
        let (l3, _, _) = full_loss(&pr, &pt, &rt, &tt, &tgs, &grid, &outer);
        assert!((l3 - 3.0 * l1).abs() < 1e-12 * l1.abs().max(1.0));
    }
}
