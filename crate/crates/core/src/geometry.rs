//! Frames, rotations and the small amount of vector algebra the sensing and
//! control code shares.

use nalgebra::{Matrix3, Rotation3, Vector3};
use thiserror::Error;

/// Generic 3-vector. Units depend on context (m, m/s, N, µT, rad/s).
pub type Vec3 = Vector3<f64>;

/// Orthonormality defect below which a matrix is accepted unchanged.
pub const ORTHO_TOLERANCE: f64 = 1e-9;
/// Orthonormality defect above which a matrix is rejected instead of projected.
pub const ORTHO_REJECT: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not a rotation: orthonormality defect {defect:.3e}")]
    NotOrthonormal { defect: f64 },
    #[error("matrix is a reflection (det = {det:.6})")]
    Reflection { det: f64 },
    #[error("matrix has non-finite entries")]
    NonFinite,
}

/// Coordinate frames used across the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FrameTag {
    World,
    Body,
    /// Tactile sensor `i`, 1-based.
    Sensor(u8),
    ReferenceSensor,
}

/// A proper rotation matrix (`RᵀR = I`, `det R = +1`).
///
/// `Rotation` values are always valid: raw matrices pass through
/// [`Rotation::from_matrix`], which re-projects small defects onto SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates `m`, projecting it onto SO(3) when the defect is small.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let det = m.determinant();
        if det <= 0.0 {
            return Err(GeometryError::Reflection { det });
        }
        let defect = orthonormality_defect(&m);
        if defect <= ORTHO_TOLERANCE && (det - 1.0).abs() <= ORTHO_TOLERANCE {
            return Ok(Self(m));
        }
        if defect > ORTHO_REJECT {
            return Err(GeometryError::NotOrthonormal { defect });
        }
        Ok(Self(polar_project(&m)))
    }

    /// Builds a rotation from 9 reals in row-major order.
    pub fn from_row_slice(values: &[f64; 9]) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix3::from_row_slice(values))
    }

    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn rx(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn ry(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rz(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// ZYX Euler angles: `R = Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::rz(yaw).compose(&Self::ry(pitch)).compose(&Self::rx(roll))
    }

    /// Inverse of [`Rotation::from_euler`], returning `(roll, pitch, yaw)`.
    pub fn to_euler(&self) -> (f64, f64, f64) {
        let m = &self.0;
        let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        (roll, pitch, yaw)
    }

    /// Rotation by `|v|` radians about `v / |v|`.
    pub fn exp(v: &Vec3) -> Self {
        Self(*Rotation3::new(*v).matrix())
    }

    /// Composition `self · other`: maps frame c to frame a when
    /// `self` maps b→a and `other` maps c→b.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Rotation {
        self.transpose()
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Returns column `i` (the image of basis vector `i`).
    pub fn axis(&self, i: usize) -> Vec3 {
        self.0.column(i).into_owned()
    }

    /// Re-projects onto SO(3). Used after integration steps.
    pub fn renormalized(&self) -> Rotation {
        if orthonormality_defect(&self.0) <= ORTHO_TOLERANCE {
            *self
        } else {
            Rotation(polar_project(&self.0))
        }
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let rel = self.0.transpose() * other.0;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

pub fn compose(r_ab: &Rotation, r_bc: &Rotation) -> Rotation {
    r_ab.compose(r_bc)
}

pub fn rotate(r: &Rotation, v: &Vec3) -> Vec3 {
    r.rotate(v)
}

/// Skew-symmetric matrix such that `hat(a) b = a × b`.
pub fn hat(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] for (approximately) skew-symmetric input.
pub fn vee(m: &Matrix3<f64>) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Attitude error `vee(½(RᵀR_ref − R_refᵀR))`.
///
/// Zero at alignment. The sign is chosen so that a positive-gain rate
/// command `ω_d = K_R·e` rotates the body toward `r_ref`: for
/// `r_meas = Rx(θ)` and `r_ref = I` the error is `(−sin θ, 0, 0)`.
pub fn attitude_error(r_ref: &Rotation, r_meas: &Rotation) -> Vec3 {
    let r = r_meas.matrix();
    let rd = r_ref.matrix();
    let skew = (r.transpose() * rd - rd.transpose() * r) * 0.5;
    vee(&skew)
}

/// Largest entry of `|MᵀM − I|`.
pub fn orthonormality_defect(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).amax()
}

fn polar_project(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // flip the axis of the smallest singular value
        let mut u2 = u;
        let idx = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(2);
        u2.column_mut(idx).neg_mut();
        r = u2 * v_t;
    }
    r
}

pub fn is_finite(v: &Vec3) -> bool {
    v.iter().all(|c| c.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn assert_rot_eq(a: &Rotation, b: &Rotation, tol: f64) {
        assert!((a.matrix() - b.matrix()).amax() < tol, "{a:?} != {b:?}");
    }

    #[test]
    fn compose_identity_and_inverse_pairs() {
        let i = Rotation::identity();
        assert_rot_eq(&compose(&i, &i), &i, 1e-15);
        assert_rot_eq(&compose(&Rotation::rz(FRAC_PI_2), &Rotation::rz(-FRAC_PI_2)), &i, 1e-15);
    }

    #[test]
    fn compose_z_rotations_matches_closed_form() {
        // Rz(90°) written out explicitly.
        let expected = Rotation::from_row_slice(&[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let got = compose(&Rotation::rz(PI / 6.0), &Rotation::rz(PI / 3.0));
        assert_rot_eq(&got, &expected, 1e-12);
    }

    #[test]
    fn rotate_examples() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(rotate(&Rotation::identity(), &v), v);
        let r = rotate(&Rotation::rz(FRAC_PI_2), &Vec3::x());
        assert_relative_eq!(r, Vec3::y(), epsilon = 1e-15);
        let h = 2f64.sqrt() / 2.0;
        let r = rotate(&Rotation::rx(FRAC_PI_4), &Vec3::y());
        assert_relative_eq!(r, Vec3::new(0.0, h, h), epsilon = 1e-15);
    }

    #[test]
    fn attitude_error_examples() {
        let r = Rotation::from_euler(0.3, -0.2, 1.1);
        assert_eq!(attitude_error(&r, &r), Vec3::zeros());

        let eps = 1e-4;
        let e = attitude_error(&Rotation::identity(), &Rotation::rz(eps));
        assert_relative_eq!(e, Vec3::new(0.0, 0.0, -eps), epsilon = 1e-12);

        let e = attitude_error(&Rotation::identity(), &Rotation::rx(0.1));
        assert_relative_eq!(e, Vec3::new(-(0.1f64).sin(), 0.0, 0.0), epsilon = 1e-15);
        assert!((e.x + 0.0998).abs() < 1e-4);
    }

    #[test]
    fn rate_command_reduces_error() {
        // ω_d = K e integrated for a short time must shrink the angle.
        let target = Rotation::from_euler(0.2, -0.1, 0.4);
        let mut r = Rotation::identity();
        let start = r.angle_to(&target);
        for _ in 0..200 {
            // e is expressed in the body frame, integrate on the right.
            let w = attitude_error(&target, &r) * 2.0;
            r = r.compose(&Rotation::exp(&(w * 0.01))).renormalized();
        }
        assert!(r.angle_to(&target) < 0.1 * start);
    }

    #[test]
    fn from_matrix_projects_small_defects_and_rejects_large() {
        let mut m = *Rotation::rx(0.4).matrix();
        m[(0, 1)] += 1e-6;
        let r = Rotation::from_matrix(m).unwrap();
        assert!(orthonormality_defect(r.matrix()) < 1e-12);
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);

        m[(0, 1)] += 0.1;
        assert!(matches!(Rotation::from_matrix(m), Err(GeometryError::NotOrthonormal { .. })));

        let reflect = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(matches!(Rotation::from_matrix(reflect), Err(GeometryError::Reflection { .. })));
    }

    #[test]
    fn euler_round_trip() {
        let (r, p, y) = (0.3, -0.4, 2.0);
        let (r2, p2, y2) = Rotation::from_euler(r, p, y).to_euler();
        assert_relative_eq!(r, r2, epsilon = 1e-12);
        assert_relative_eq!(p, p2, epsilon = 1e-12);
        assert_relative_eq!(y, y2, epsilon = 1e-12);
    }

    fn arb_rotation() -> impl Strategy<Value = Rotation> {
        (-PI..PI, -1.5..1.5f64, -PI..PI).prop_map(|(a, b, c)| Rotation::from_euler(a, b, c))
    }

    fn arb_vec() -> impl Strategy<Value = Vec3> {
        (-100.0..100.0f64, -100.0..100.0f64, -100.0..100.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn rotate_preserves_norms_and_inner_products(r in arb_rotation(), a in arb_vec(), b in arb_vec()) {
            let ra = r.rotate(&a);
            let rb = r.rotate(&b);
            prop_assert!((ra.norm() - a.norm()).abs() < 1e-9);
            prop_assert!((ra.dot(&rb) - a.dot(&b)).abs() < 1e-9 * (1.0 + a.norm() * b.norm()));
        }

        #[test]
        fn compose_is_associative(a in arb_rotation(), b in arb_rotation(), c in arb_rotation()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!((left.matrix() - right.matrix()).amax() < 1e-9);
        }

        #[test]
        fn attitude_error_vanishes_only_at_alignment(r in arb_rotation(), axis in arb_vec(), angle in 1e-3..1.5f64) {
            prop_assume!(axis.norm() > 1e-3);
            let d = r.compose(&Rotation::exp(&(axis.normalize() * angle)));
            prop_assert!(attitude_error(&r, &r).norm() < 1e-12);
            // |e| = sin(angle) for the chosen vee-map
            prop_assert!((attitude_error(&r, &d).norm() - angle.sin()).abs() < 1e-9);
        }
    }
}
