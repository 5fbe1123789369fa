//! Rigid-body types, pinhole projection, SVD rotation alignment and
//! rotation metrics.

use nalgebra::{Matrix3, Matrix4, Vector3, SVD};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

/// A proper rotation matrix (element of SO(3)).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[[f64; 3]; 3]", try_from = "[[f64; 3]; 3]")]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates `m^T m = I` and `det(m) = 1` to within 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("rotation matrix has non-finite entries".into()));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Domain(format!(
                "matrix is not a rotation (orthogonality error {ortho:.3e}, det {det})"
            )));
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix the caller already knows to be in SO(3).
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let k = axis / n;
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        let m = Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos());
        Rotation(m)
    }

    pub fn rx(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn ry(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rz(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    /// Haar-uniform sample on SO(3) via a normalised Gaussian quaternion.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let q: [f64; 4] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                return Self::from_quaternion(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
            }
        }
    }

    /// Unit quaternion `(w, x, y, z)` to matrix.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let m = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Angle of this rotation, in radians.
    pub fn angle(&self) -> f64 {
        geodesic_distance(&Rotation::identity(), self)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl From<Rotation> for [[f64; 3]; 3] {
    fn from(r: Rotation) -> Self {
        let m = r.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }
}

impl TryFrom<[[f64; 3]; 3]> for Rotation {
    type Error = Error;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        let m = Matrix3::from_fn(|i, j| rows[i][j]);
        // Serialised rotations pass through decimal text, so re-project
        // instead of demanding 1e-9 orthogonality.
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        if !ortho.is_finite() || ortho > 1e-6 {
            return Err(Error::Domain("serialised matrix is not a rotation".into()));
        }
        Ok(Rotation(m))
    }
}

/// Rigid transform from the object frame to the camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub r: Rotation,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn new(r: Rotation, t: Vector3<f64>) -> Self {
        Pose { r, t }
    }

    pub fn identity() -> Self {
        Pose {
            r: Rotation::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.r.transpose();
        Pose {
            r: rt,
            t: -(rt.apply(&self.t)),
        }
    }

    /// `self * other` as 4x4 homogeneous transforms.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: self.r * other.r,
            t: self.r.apply(&other.t) + self.t,
        }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r.apply(x) + self.t
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(self.r.matrix());
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        h
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Config(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    /// Pixel `(u, v)` at depth `z` back to a camera-frame point.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new(z * (u - self.cx) / self.fx, z * (v - self.cy) / self.fy, z)
    }
}

/// Square (or rectangular) crop window and the zoom applied to reach the
/// network input resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub r_z: f64,
}

impl CropSpec {
    pub fn new(x: f64, y: f64, w: f64, h: f64, r_z: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0 && r_z > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(Error::Config(format!(
                "crop needs positive size and zoom (w={w}, h={h}, r_z={r_z})"
            )));
        }
        Ok(CropSpec { x, y, w, h, r_z })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }
}

/// Image location of the object origin: `K t / t_z`.
pub fn project_centroid(k: &Intrinsics, t: &Vector3<f64>) -> Result<(f64, f64)> {
    if !(t.z > 0.0) {
        return Err(Error::Domain(format!(
            "object centre has non-positive depth {}",
            t.z
        )));
    }
    Ok((k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy))
}

/// Projects `m` onto SO(3): `U V^T` from the SVD of `m`, with the last
/// column of `U` negated when that product would be a reflection.
///
/// Fails when the second singular value vanishes relative to the first,
/// since the rotation is then not determined.
fn project_to_so3(m: &Matrix3<f64>, what: &str) -> Result<Rotation> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain(format!("{what}: non-finite input")));
    }
    let svd = SVD::new(*m, true, true);
    let s = svd.singular_values;
    if !(s[0] > 0.0) || s[1] <= 1e-10 * s[0] {
        return Err(Error::Degenerate(format!(
            "{what}: rank-deficient matrix (singular values {:.3e}, {:.3e}, {:.3e})",
            s[0], s[1], s[2]
        )));
    }
    let mut u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    if (u * v_t).determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    Ok(Rotation(u * v_t))
}

/// Least-squares rotation taking `src[i]` onto `dst[i]`.
pub fn procrustes_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Rotation> {
    if src.len() != dst.len() {
        return Err(Error::Contract(format!(
            "procrustes: {} source vs {} target vectors",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!(
            "procrustes needs at least 3 vectors, got {}",
            src.len()
        )));
    }
    let cov: Matrix3<f64> = src
        .iter()
        .zip(dst)
        .map(|(a, b)| b * a.transpose())
        .sum();
    project_to_so3(&cov, "procrustes")
}

/// The alignment objective `sum ||R src_i - dst_i||^2`.
pub fn alignment_objective(r: &Rotation, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(a, b)| (r.apply(a) - b).norm_squared())
        .sum()
}

/// `H_Q = H_rel * H_gt`.
pub fn compose_query_pose(h_rel: &Pose, h_gt: &Pose) -> Pose {
    h_rel.compose(h_gt)
}

/// Angle of `r1^T r2` in radians, in `[0, pi]`.
///
/// Evaluated as `atan2(sin, cos)` of the relative rotation, which equals the
/// clamped-arccos form but keeps full precision near 0 and pi.
pub fn geodesic_distance(r1: &Rotation, r2: &Rotation) -> f64 {
    let q = r1.0.transpose() * r2.0;
    let cos = ((q.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sin = 0.5
        * Vector3::new(
            q[(2, 1)] - q[(1, 2)],
            q[(0, 2)] - q[(2, 0)],
            q[(1, 0)] - q[(0, 1)],
        )
        .norm();
    sin.atan2(cos)
}

/// Rotation closest in Frobenius norm to the arithmetic mean of `rs`.
pub fn chordal_mean(rs: &[Rotation]) -> Result<Rotation> {
    if rs.is_empty() {
        return Err(Error::Contract("chordal mean of an empty list".into()));
    }
    let mean: Matrix3<f64> = rs.iter().map(|r| r.0).sum::<Matrix3<f64>>() / rs.len() as f64;
    project_to_so3(&mean, "chordal mean")
}

/// Component-wise median; the mean of the two middle values for even counts.
pub fn median_translation(ts: &[Vector3<f64>]) -> Result<Vector3<f64>> {
    if ts.is_empty() {
        return Err(Error::Contract("median of an empty list".into()));
    }
    let mut out = Vector3::zeros();
    for axis in 0..3 {
        let mut vals: Vec<f64> = ts.iter().map(|t| t[axis]).collect();
        out[axis] = median(&mut vals);
    }
    Ok(out)
}

/// Median of a slice (sorted in place). NaN-free input expected.
pub fn median(vals: &mut [f64]) -> f64 {
    assert!(!vals.is_empty(), "median of empty slice");
    vals.sort_by(|a, b| a.total_cmp(b));
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            if v.norm() > 1e-6 {
                return v.normalize();
            }
        }
    }

    fn assert_so3(r: &Rotation) {
        let m = r.matrix();
        assert!((m.transpose() * m - Matrix3::identity()).abs().max() < 1e-9);
        assert!((m.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn centroid_projection() {
        let k = Intrinsics::new(100.0, 100.0, 16.0, 16.0).unwrap();
        assert_eq!(project_centroid(&k, &Vector3::new(0.0, 0.0, 2.0)).unwrap(), (16.0, 16.0));
        let (u, v) = project_centroid(&k, &Vector3::new(0.02, 0.0, 2.0)).unwrap();
        assert!((u - 17.0).abs() < 1e-12 && (v - 16.0).abs() < 1e-12);
        assert!(matches!(
            project_centroid(&k, &Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn procrustes_identity_and_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src: Vec<_> = (0..10).map(|_| unit(&mut rng)).collect();
        let r = procrustes_align(&src, &src).unwrap();
        assert!(geodesic_distance(&r, &Rotation::identity()) < 1e-12);

        let rz = Rotation::rz(FRAC_PI_2);
        let dst: Vec<_> = src.iter().map(|v| rz.apply(v)).collect();
        let r = procrustes_align(&src, &dst).unwrap();
        assert!((r.matrix() - rz.matrix()).abs().max() < 1e-9);
    }

    #[test]
    fn procrustes_beats_random_rotations_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rz = Rotation::rz(FRAC_PI_2);
        let src: Vec<_> = (0..16).map(|_| unit(&mut rng)).collect();
        let dst: Vec<_> = src
            .iter()
            .map(|v| {
                let n = Vector3::new(
                    0.01 * rng.sample::<f64, _>(StandardNormal),
                    0.01 * rng.sample::<f64, _>(StandardNormal),
                    0.01 * rng.sample::<f64, _>(StandardNormal),
                );
                (rz.apply(v) + n).normalize()
            })
            .collect();
        let r = procrustes_align(&src, &dst).unwrap();
        assert_so3(&r);
        let best = alignment_objective(&r, &src, &dst);
        for _ in 0..10_000 {
            let cand = Rotation::random(&mut rng);
            assert!(best <= alignment_objective(&cand, &src, &dst));
        }
    }

    #[test]
    fn procrustes_rejects_collinear() {
        let src = vec![Vector3::z(); 5];
        let dst = vec![Vector3::x(); 5];
        assert!(matches!(procrustes_align(&src, &dst), Err(Error::Degenerate(_))));
        assert!(matches!(
            procrustes_align(&src[..2], &dst[..2]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn procrustes_handles_reflection_case() {
        // A mirrored target set: the unconstrained optimum is a reflection.
        let src = vec![Vector3::x(), Vector3::y(), Vector3::z()];
        let dst = vec![Vector3::x(), Vector3::y(), -Vector3::z()];
        let r = procrustes_align(&src, &dst).unwrap();
        assert_so3(&r);
    }

    #[test]
    fn compose_examples() {
        let h_gt = Pose::new(Rotation::identity(), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(compose_query_pose(&Pose::identity(), &h_gt), h_gt);

        let h_rel = Pose::new(Rotation::rz(FRAC_PI_2), Vector3::zeros());
        let q = compose_query_pose(&h_rel, &h_gt);
        assert!((q.r.matrix() - Rotation::rz(FRAC_PI_2).matrix()).abs().max() < 1e-12);
        assert!((q.t - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn compose_inverts_relative_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let hq = Pose::new(Rotation::random(&mut rng), unit(&mut rng) * 3.0);
            let hg = Pose::new(Rotation::random(&mut rng), unit(&mut rng) * 3.0);
            let rel = hq.compose(&hg.inverse());
            let back = compose_query_pose(&rel, &hg);
            assert!(geodesic_distance(&back.r, &hq.r) < 1e-9);
            assert!((back.t - hq.t).norm() < 1e-9);
        }
    }

    #[test]
    fn geodesic_examples() {
        let i = Rotation::identity();
        assert_eq!(geodesic_distance(&i, &i), 0.0);
        assert!((geodesic_distance(&i, &Rotation::rz(FRAC_PI_2)) - FRAC_PI_2).abs() < 1e-12);
        let d = geodesic_distance(&Rotation::rx(30f64.to_radians()), &Rotation::rx(75f64.to_radians()));
        assert!((d - 45f64.to_radians()).abs() < 1e-12);
        assert!((geodesic_distance(&i, &Rotation::ry(PI)) - PI).abs() < 1e-12);
    }

    #[test]
    fn geodesic_metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let a = Rotation::random(&mut rng);
            let b = Rotation::random(&mut rng);
            let c = Rotation::random(&mut rng);
            let ab = geodesic_distance(&a, &b);
            assert!((ab - geodesic_distance(&b, &a)).abs() < 1e-12);
            assert!(geodesic_distance(&a, &a) < 1e-9);
            assert!(ab <= geodesic_distance(&a, &c) + geodesic_distance(&c, &b) + 1e-12);
        }
    }

    #[test]
    fn chordal_mean_examples() {
        let r = Rotation::rx(0.3) * Rotation::ry(-1.1);
        let m = chordal_mean(&[r, r, r]).unwrap();
        assert!(geodesic_distance(&m, &r) < 1e-12);

        let m = chordal_mean(&[Rotation::rz(10f64.to_radians()), Rotation::rz(-10f64.to_radians())])
            .unwrap();
        assert!(geodesic_distance(&m, &Rotation::identity()) < 1e-9);

        let rs: Vec<_> = [0.0, 30.0, 60.0]
            .iter()
            .map(|d: &f64| Rotation::rz(d.to_radians()))
            .collect();
        let m = chordal_mean(&rs).unwrap();
        assert!(geodesic_distance(&m, &Rotation::rz(30f64.to_radians())) < 1e-9);

        // Antipodal pair about z: mean matrix is diag(0, 0, 1), rank 1.
        assert!(matches!(
            chordal_mean(&[Rotation::identity(), Rotation::rz(PI)]),
            Err(Error::Degenerate(_))
        ));
        assert!(chordal_mean(&[]).is_err());
    }

    #[test]
    fn chordal_mean_is_frobenius_minimiser() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = Rotation::random(&mut rng);
        let rs: Vec<_> = (0..6)
            .map(|_| base * Rotation::from_axis_angle(&unit(&mut rng), 0.4 * rng.random::<f64>()))
            .collect();
        let m = chordal_mean(&rs).unwrap();
        assert_so3(&m);
        let cost = |r: &Rotation| -> f64 {
            rs.iter().map(|x| (r.matrix() - x.matrix()).norm_squared()).sum()
        };
        let c = cost(&m);
        for _ in 0..2000 {
            let cand = m * Rotation::from_axis_angle(&unit(&mut rng), 0.2 * rng.random::<f64>());
            assert!(c <= cost(&cand) + 1e-12);
        }
    }

    #[test]
    fn median_translation_componentwise() {
        let ts = vec![
            Vector3::new(1.0, 5.0, -1.0),
            Vector3::new(3.0, 4.0, 0.0),
            Vector3::new(2.0, 100.0, 7.0),
        ];
        assert_eq!(median_translation(&ts).unwrap(), Vector3::new(2.0, 5.0, 0.0));
    }

    #[test]
    fn rotation_serde_roundtrip() {
        let r = Rotation::rx(0.7) * Rotation::rz(-0.2);
        let json = serde_json::to_string(&r).unwrap();
        let back: Rotation = serde_json::from_str(&json).unwrap();
        assert!((back.matrix() - r.matrix()).abs().max() < 1e-15);
        assert!(serde_json::from_str::<Rotation>("[[1,0,0],[0,1,0],[0,0,2]]").is_err());
    }
}
