//! Rigid-motion and pinhole-camera primitives.
//!
//! Rotations that are optimized are stored in the continuous 6D form (the
//! first two columns of a rotation matrix, orthonormalized on use). Rigid
//! motions act on points as `p -> R p + t`; `compose(a, b)` applies `b`
//! first. Twists are ordered `[v; w]` (translational part first).

use nalgebra::{Matrix3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;
pub type Pixel = Vector2<f64>;
pub type Twist = Vector6<f64>;

const DEGENERATE_EPS: f64 = 1e-12;
/// Minimum camera-space depth accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-6;
/// Rotation angles at or above `PI - NEAR_PI_MARGIN` have no unique logarithm.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// Skew-symmetric matrix such that `hat(w) * x == w.cross(&x)`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Two columns of a rotation matrix before Gram-Schmidt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D {
    pub a1: Vector3<f64>,
    pub a2: Vector3<f64>,
}

impl Default for Rotation6D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation6D {
    pub fn new(a1: Vector3<f64>, a2: Vector3<f64>) -> Self {
        Self { a1, a2 }
    }

    pub fn identity() -> Self {
        Self {
            a1: Vector3::x(),
            a2: Vector3::y(),
        }
    }

    /// Reads the first two columns of `r`.
    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        Self {
            a1: r.column(0).into_owned(),
            a2: r.column(1).into_owned(),
        }
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            a1: Vector3::new(v[0], v[1], v[2]),
            a2: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.a1.x, self.a1.y, self.a1.z, self.a2.x, self.a2.y, self.a2.z,
        ]
    }

    pub fn to_matrix(&self) -> Result<Matrix3<f64>> {
        rot6d_to_matrix(self)
    }

    /// Gram-Schmidt normalizes and re-reads the two columns.
    pub fn normalized(&self) -> Result<Self> {
        Ok(Self::from_matrix(&self.to_matrix()?))
    }
}

/// Gram-Schmidt: `b1 = a1/|a1|`, `b2 = normalize(a2 - (b1.a2) b1)`, `b3 = b1 x b2`.
pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<Matrix3<f64>> {
    let n1 = r.a1.norm();
    if !(n1 > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotation);
    }
    let b1 = r.a1 / n1;
    let u2 = r.a2 - b1 * b1.dot(&r.a2);
    let n2 = u2.norm();
    if !(n2 > DEGENERATE_EPS * r.a2.norm().max(1.0)) {
        return Err(Error::DegenerateRotation);
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Pulls a gradient with respect to the rotation matrix back onto the two
/// raw 6D columns.
pub fn rot6d_backward(r: &Rotation6D, grad_matrix: &Matrix3<f64>) -> Result<[f64; 6]> {
    let n1 = r.a1.norm();
    if !(n1 > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotation);
    }
    let b1 = r.a1 / n1;
    let proj = b1.dot(&r.a2);
    let u2 = r.a2 - b1 * proj;
    let n2 = u2.norm();
    if !(n2 > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotation);
    }
    let b2 = u2 / n2;

    let g1: Vector3<f64> = grad_matrix.column(0).into_owned();
    let g2: Vector3<f64> = grad_matrix.column(1).into_owned();
    let g3: Vector3<f64> = grad_matrix.column(2).into_owned();

    // b3 = b1 x b2
    let mut gb1 = g1 + b2.cross(&g3);
    let gb2 = g2 + g3.cross(&b1);

    let gu2 = (gb2 - b2 * b2.dot(&gb2)) / n2;
    let ga2 = gu2 - b1 * b1.dot(&gu2);
    gb1 -= gu2 * proj + r.a2 * b1.dot(&gu2);

    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;
    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}

/// Rigid motion `p -> R p + t` with a 6D-parameterized rotation.
///
/// The orthonormalized matrix is cached next to the raw 6D columns so that
/// repeated application does not redo Gram-Schmidt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Transform {
    rotation: Rotation6D,
    matrix: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for SE3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Transform {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation6D::identity(),
            matrix: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation6D, translation: Vector3<f64>) -> Result<Self> {
        let matrix = rotation.to_matrix()?;
        Ok(Self {
            rotation,
            matrix,
            translation,
        })
    }

    /// `r` is assumed orthonormal; its first two columns become the 6D form.
    pub fn from_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = Rotation6D::from_matrix(r);
        let matrix = rotation.to_matrix().unwrap_or_else(|_| Matrix3::identity());
        Self {
            rotation,
            matrix,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Packs as `[a1; a2; t]`, the layout used by the optimizers.
    pub fn to_params(&self) -> [f64; 9] {
        let r = self.rotation.to_array();
        [
            r[0], r[1], r[2], r[3], r[4], r[5], self.translation.x, self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_params(p: &[f64]) -> Result<Self> {
        if p.len() != 9 {
            return Err(Error::InvalidParameter(format!(
                "SE3 parameter block has {} entries, expected 9",
                p.len()
            )));
        }
        Self::new(
            Rotation6D::from_array([p[0], p[1], p[2], p[3], p[4], p[5]]),
            Vector3::new(p[6], p[7], p[8]),
        )
    }

    pub fn rotation6d(&self) -> &Rotation6D {
        &self.rotation
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.matrix * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.matrix.transpose();
        Self::from_matrix(&rt, -(rt * self.translation))
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self::from_matrix(
            &(self.matrix * other.matrix),
            self.matrix * other.translation + self.translation,
        )
    }

    /// Geodesic rotation angle in radians.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.matrix)
    }

    pub fn log(&self) -> Result<Twist> {
        se3_log(self)
    }

    pub fn exp(xi: &Twist) -> Self {
        se3_exp(xi)
    }

    pub fn interpolate(&self, ratio: f64) -> Result<Self> {
        se3_interpolate(self, ratio)
    }
}

pub fn se3_compose(a: &SE3Transform, b: &SE3Transform) -> SE3Transform {
    a.compose(b)
}

pub fn se3_inverse(a: &SE3Transform) -> SE3Transform {
    a.inverse()
}

pub fn se3_apply(a: &SE3Transform, p: &Point3) -> Point3 {
    a.apply(p)
}

/// Angle of a rotation matrix, robust near zero.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let w = vee_antisym(r);
    let cos = 0.5 * (r.trace() - 1.0);
    w.norm().atan2(cos)
}

/// Angle of `a^T b`, the geodesic distance between two rotations.
pub fn rotation_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    rotation_angle(&(a.transpose() * b))
}

fn vee_antisym(r: &Matrix3<f64>) -> Vector3<f64> {
    0.5 * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)])
}

/// Rotation vector of `r` on the principal branch.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let s = vee_antisym(r);
    let sin = s.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    let theta = sin.atan2(cos);
    if theta >= std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(Error::NearPiRotation { angle: theta });
    }
    let k = if sin < 1e-10 {
        1.0 + theta * theta / 6.0
    } else {
        theta / sin
    };
    Ok(s * k)
}

/// Returns `(R, V)` for the rotation vector `w`: `R = exp(w^)` and the left
/// Jacobian `V` that maps twist translation to group translation.
fn so3_exp_and_v(w: &Vector3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (a, b, c) = if theta < 1e-5 {
        (
            1.0 - theta2 / 6.0,
            0.5 - theta2 / 24.0,
            1.0 / 6.0 - theta2 / 120.0,
        )
    } else {
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let w_hat = hat(w);
    let w_hat2 = w_hat * w_hat;
    let r = Matrix3::identity() + w_hat * a + w_hat2 * b;
    let v = Matrix3::identity() + w_hat * b + w_hat2 * c;
    (r, v)
}

pub fn se3_exp(xi: &Twist) -> SE3Transform {
    let v = Vector3::new(xi[0], xi[1], xi[2]);
    let w = Vector3::new(xi[3], xi[4], xi[5]);
    let (r, jac) = so3_exp_and_v(&w);
    SE3Transform::from_matrix(&r, jac * v)
}

pub fn se3_log(t: &SE3Transform) -> Result<Twist> {
    let w = so3_log(t.rotation())?;
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let w_hat = hat(&w);
    // V^-1 = I - w^/2 + k w^2
    let k = if theta < 1e-5 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    let v_inv = Matrix3::identity() - w_hat * 0.5 + w_hat * w_hat * k;
    let v = v_inv * t.translation();
    Ok(Twist::new(v.x, v.y, v.z, w.x, w.y, w.z))
}

/// Screw interpolation `exp(ratio * log(T))` between identity and `T`.
pub fn se3_interpolate(t: &SE3Transform, ratio: f64) -> Result<SE3Transform> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidParameter(format!(
            "interpolation ratio {ratio} outside [0, 1]"
        )));
    }
    let xi = se3_log(t)?;
    Ok(se3_exp(&(xi * ratio)))
}

/// Pinhole intrinsics. Pixel centers sit at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidParameter(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Bearing `K^-1 (u, v, 1)`.
    pub fn bearing(&self, p: &Pixel) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    pub fn in_bounds(&self, p: &Pixel) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width - 1) as f64
            && p.y <= (self.height - 1) as f64
    }
}

pub fn project(k: &CameraIntrinsics, p: &Point3) -> Result<Pixel> {
    if !(p.z > MIN_DEPTH) {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok(Pixel::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// `P = d K^-1 (u, v, 1)`.
pub fn unproject(k: &CameraIntrinsics, p: &Pixel, depth: f64) -> Result<Point3> {
    if !(depth > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "unproject needs positive depth, got {depth}"
        )));
    }
    Ok(k.bearing(p) * depth)
}

/// Jacobian of [`project`] with respect to the camera-space point.
pub fn project_jacobian(k: &CameraIntrinsics, p: &Point3) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz2,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn random_rot6(rng: &mut ChaCha8Rng) -> Rotation6D {
        let mut v = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Rotation6D::new(v(), v())
    }

    #[test]
    fn canonical_basis_is_identity() {
        let r = rot6d_to_matrix(&Rotation6D::identity()).unwrap();
        assert_eq!(r, Matrix3::identity());
        let r = rot6d_to_matrix(&Rotation6D::new(Vector3::new(2.0, 0.0, 0.0), Vector3::new(0.0, 3.0, 0.0))).unwrap();
        assert!((r - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rot6d_to_matrix(&Rotation6D::new(Vector3::y(), -Vector3::x())).unwrap();
        let moved = r * Vector3::x();
        assert!((moved - Vector3::y()).norm() < 1e-15);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_columns_are_rejected() {
        let zero = Rotation6D::new(Vector3::zeros(), Vector3::y());
        assert!(matches!(rot6d_to_matrix(&zero), Err(Error::DegenerateRotation)));
        let parallel = Rotation6D::new(Vector3::x(), Vector3::x() * 2.0);
        assert!(matches!(rot6d_to_matrix(&parallel), Err(Error::DegenerateRotation)));
    }

    #[test]
    fn rot6d_output_is_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let r = rot6d_to_matrix(&random_rot6(&mut rng)).unwrap();
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rot6d_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let r = random_rot6(&mut rng);
            let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let f = |a: [f64; 6]| {
                let m = rot6d_to_matrix(&Rotation6D::from_array(a)).unwrap();
                m.component_mul(&g).sum()
            };
            let analytic = rot6d_backward(&r, &g).unwrap();
            let base = r.to_array();
            for i in 0..6 {
                let h = 1e-6;
                let mut p = base;
                let mut m = base;
                p[i] += h;
                m[i] -= h;
                let fd = (f(p) - f(m)) / (2.0 * h);
                assert!((fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn translate_after_quarter_turn() {
        let t = SE3Transform::new(Rotation6D::new(Vector3::y(), -Vector3::x()), Vector3::x()).unwrap();
        let p = t.apply(&Vector3::x());
        assert!((p - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn identity_and_inverse_laws() {
        let t = SE3Transform::exp(&Twist::new(0.3, -0.2, 0.5, 0.1, 0.4, -0.3));
        let c = SE3Transform::identity().compose(&t);
        assert!((c.rotation() - t.rotation()).abs().max() < 1e-15);
        let p = Vector3::new(0.2, 1.0, -3.0);
        assert!((t.inverse().apply(&t.apply(&p)) - p).norm() < 1e-12);
    }

    #[test]
    fn log_exp_of_identity() {
        assert_eq!(se3_log(&SE3Transform::identity()).unwrap(), Twist::zeros());
        let e = se3_exp(&Twist::zeros());
        assert_eq!(*e.rotation(), Matrix3::identity());
        assert_eq!(*e.translation(), Vector3::zeros());
    }

    #[test]
    fn near_pi_is_rejected() {
        let t = se3_exp(&Twist::new(0.0, 0.0, 0.0, 0.0, 0.0, std::f64::consts::PI - 1e-9));
        assert!(matches!(se3_log(&t), Err(Error::NearPiRotation { .. })));
        assert!(matches!(se3_interpolate(&t, 0.5), Err(Error::NearPiRotation { .. })));
    }

    #[test]
    fn interpolation_endpoints() {
        let t = se3_exp(&Twist::new(0.3, -0.2, 0.5, 0.1, 0.4, -0.3));
        let z = se3_interpolate(&t, 0.0).unwrap();
        assert_eq!(*z.rotation(), Matrix3::identity());
        assert_eq!(*z.translation(), Vector3::zeros());
        let one = se3_interpolate(&t, 1.0).unwrap();
        assert!((one.rotation() - t.rotation()).abs().max() < 1e-8);
        assert!((one.translation() - t.translation()).abs().max() < 1e-8);
        let half = se3_interpolate(&SE3Transform::from_translation(Vector3::new(2.0, 0.0, 0.0)), 0.5).unwrap();
        assert!((half.translation() - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!(se3_interpolate(&t, 1.5).is_err());
    }

    #[test]
    fn projection_examples() {
        let k = k100();
        assert_eq!(project(&k, &Vector3::new(0.0, 0.0, 2.0)).unwrap(), Pixel::new(50.0, 50.0));
        assert_eq!(unproject(&k, &Pixel::new(50.0, 50.0), 2.0).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(project(&k, &Vector3::new(1.0, 0.0, 2.0)).unwrap(), Pixel::new(100.0, 50.0));
        assert!(matches!(project(&k, &Vector3::new(0.0, 0.0, 0.0)), Err(Error::BehindCamera { .. })));
        assert!(unproject(&k, &Pixel::new(1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }
}
