//! SE(3)/SE(2) value types and the Cartesian error law.
//!
//! Every pose in the stack is a [`Pose`]: a translation plus a unit
//! quaternion kept in the `w >= 0` hemisphere. Composition is written
//! `a.compose(&b)` and reads as "b expressed in a", i.e. `a ∘ b`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpatialError {
    #[error("interpolation parameter {0} outside [0, 1]")]
    ParameterOutOfRange(f64),
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Unit quaternion stored in the `w >= 0` hemisphere.
#[derive(Clone, Copy, PartialEq)]
pub struct Quaternion(UnitQuaternion<f64>);

impl Quaternion {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Builds a normalized, canonicalized quaternion from raw components.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, SpatialError> {
        let q = nalgebra::Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(SpatialError::DegenerateQuaternion);
        }
        Ok(Self::from_unit(UnitQuaternion::new_unchecked(q)))
    }

    pub fn from_unit(q: UnitQuaternion<f64>) -> Self {
        let raw = q.into_inner();
        // renormalizing an already-unit quaternion can flip low bits and
        // break serialization round trips
        let mut q = if (raw.norm_squared() - 1.0).abs() > 4.0 * f64::EPSILON {
            UnitQuaternion::new_normalize(raw)
        } else {
            UnitQuaternion::new_unchecked(raw)
        };
        if q.w < 0.0 {
            q = UnitQuaternion::new_unchecked(-q.into_inner());
        }
        // adding +0.0 turns negative zeros positive
        let c = q.into_inner();
        Self(UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(
            c.w + 0.0,
            c.i + 0.0,
            c.j + 0.0,
            c.k + 0.0,
        )))
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        match nalgebra::Unit::try_new(*axis, 1e-15) {
            Some(unit) => Self::from_unit(UnitQuaternion::from_axis_angle(&unit, angle)),
            None => Self::identity(),
        }
    }

    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::from_unit(UnitQuaternion::from_euler_angles(roll, pitch, yaw))
    }

    pub fn from_yaw(yaw: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), yaw)
    }

    /// Exponential map of a rotation vector.
    pub fn from_rotation_vector(v: &Vector3<f64>) -> Self {
        Self::from_unit(UnitQuaternion::from_scaled_axis(*v))
    }

    /// Logarithm: the rotation vector of the shortest-arc rotation.
    pub fn to_rotation_vector(&self) -> Vector3<f64> {
        self.0.scaled_axis()
    }

    pub fn w(&self) -> f64 {
        self.0.w
    }
    pub fn x(&self) -> f64 {
        self.0.i
    }
    pub fn y(&self) -> f64 {
        self.0.j
    }
    pub fn z(&self) -> f64 {
        self.0.k
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w(), self.x(), self.y(), self.z()]
    }

    pub fn vector_part(&self) -> Vector3<f64> {
        Vector3::new(self.x(), self.y(), self.z())
    }

    pub fn as_unit(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self::from_unit(self.0.inverse())
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn mul(&self, rhs: &Quaternion) -> Self {
        Self::from_unit(self.0 * rhs.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn angle(&self) -> f64 {
        self.0.angle()
    }

    /// Yaw of the rotated x axis projected onto the ground plane.
    pub fn heading(&self) -> f64 {
        let x = self.rotate(&Vector3::x());
        x.y.atan2(x.x)
    }

    /// Shortest-arc spherical interpolation.
    pub fn slerp(&self, other: &Quaternion, s: f64) -> Self {
        let a = self.0.into_inner();
        let mut b = other.0.into_inner();
        let mut dot = a.dot(&b);
        if dot < 0.0 {
            b = -b;
            dot = -dot;
        }
        if dot > 0.9995 {
            let q = a * (1.0 - s) + b * s;
            return Self::from_unit(UnitQuaternion::new_normalize(q));
        }
        let theta = dot.clamp(-1.0, 1.0).acos();
        let sin_theta = theta.sin();
        let wa = ((1.0 - s) * theta).sin() / sin_theta;
        let wb = (s * theta).sin() / sin_theta;
        Self::from_unit(UnitQuaternion::new_normalize(a * wa + b * wb))
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for Quaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Quaternion({}, {}, {}, {})", self.w(), self.x(), self.y(), self.z())
    }
}

/// Rigid transform. Serialized as `{"t": [x, y, z], "q": [w, x, y, z]}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub translation: Vector3<f64>,
    pub rotation: Quaternion,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    t: [f64; 3],
    q: [f64; 4],
}

impl TryFrom<PoseRepr> for Pose {
    type Error = SpatialError;

    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        if r.t.iter().any(|v| !v.is_finite()) {
            return Err(SpatialError::NonFinite("pose translation"));
        }
        let rotation = Quaternion::new(r.q[0], r.q[1], r.q[2], r.q[3])?;
        Ok(Pose {
            translation: Vector3::from(r.t),
            rotation,
        })
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr {
            t: p.translation.into(),
            q: p.rotation.to_array(),
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: Quaternion::identity(),
        }
    }

    pub fn new(translation: Vector3<f64>, rotation: Quaternion) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector3::new(x, y, z), Quaternion::identity())
    }

    pub fn from_rotation(rotation: Quaternion) -> Self {
        Self::new(Vector3::zeros(), rotation)
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            translation: self.translation + self.rotation.rotate(&other.translation),
            rotation: self.rotation.mul(&other.rotation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            translation: -inv.rotate(&self.translation),
            rotation: inv,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.translation + self.rotation.rotate(p)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.to_rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Projects onto the ground plane: (x, y, heading).
    pub fn to_planar(&self) -> PlanarPose {
        PlanarPose::new(self.translation.x, self.translation.y, self.rotation.heading())
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.to_array().iter().all(|v| v.is_finite())
    }
}

/// Spatial velocity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            linear: v.fixed_rows::<3>(0).into_owned(),
            angular: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.linear);
        v.fixed_rows_mut::<3>(3).copy_from(&self.angular);
        v
    }

    /// Planar base velocity (vx, vy, ω) lifted to a full twist.
    pub fn from_planar(vx: f64, vy: f64, omega: f64) -> Self {
        Self {
            linear: Vector3::new(vx, vy, 0.0),
            angular: Vector3::new(0.0, 0.0, omega),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|v| v.is_finite())
    }
}

/// Ground-plane pose of the mobile base.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn to_pose(&self) -> Pose {
        Pose::new(
            Vector3::new(self.x, self.y, 0.0),
            Quaternion::from_yaw(self.theta),
        )
    }
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Cartesian error `[p_ref - p_cur; 2·vec(q_ref ⊗ q_cur⁻¹)]` with the error
/// quaternion taken in the `w >= 0` hemisphere.
pub fn pose_error(current: &Pose, reference: &Pose) -> Vector6<f64> {
    let dp = reference.translation - current.translation;
    // q_ref ⊗ q_cur⁻¹ written out so that equal inputs cancel exactly
    let (w1, v1) = (reference.rotation.w(), reference.rotation.vector_part());
    let (w2, v2) = (current.rotation.w(), current.rotation.vector_part());
    let scalar = w1 * w2 + v1.dot(&v2);
    let mut vector = w2 * v1 - w1 * v2 - v1.cross(&v2);
    if scalar < 0.0 {
        vector = -vector;
    }
    let eo = 2.0 * vector;
    Vector6::new(dp.x, dp.y, dp.z, eo.x, eo.y, eo.z)
}

/// Integrates a body-frame planar twist `(vx, vy, ω)` with the SE(2)
/// exponential map.
pub fn integrate_planar(p: &PlanarPose, twist: &Vector3<f64>, dt: f64) -> PlanarPose {
    let (vx, vy, w) = (twist.x * dt, twist.y * dt, twist.z * dt);
    let (dx, dy) = if w.abs() < 1e-9 {
        // second-order series of the exact arc
        let half = 0.5 * w;
        (vx - half * vy, vy + half * vx)
    } else {
        let (s, c) = w.sin_cos();
        ((s * vx - (1.0 - c) * vy) / w, ((1.0 - c) * vx + s * vy) / w)
    };
    let (st, ct) = p.theta.sin_cos();
    PlanarPose::new(
        p.x + ct * dx - st * dy,
        p.y + st * dx + ct * dy,
        p.theta + w,
    )
}

/// Linear translation and shortest-arc slerp rotation between `a` and `b`.
pub fn interpolate(a: &Pose, b: &Pose, s: f64) -> Result<Pose, SpatialError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(SpatialError::ParameterOutOfRange(s));
    }
    if s == 0.0 {
        return Ok(*a);
    }
    if s == 1.0 {
        return Ok(*b);
    }
    Ok(Pose {
        translation: a.translation + (b.translation - a.translation) * s,
        rotation: a.rotation.slerp(&b.rotation, s),
    })
}

/// Finite-difference twist taking `from` to `to` over `dt`, world frame.
pub fn twist_between(from: &Pose, to: &Pose, dt: f64) -> Twist {
    let dq = to.rotation.mul(&from.rotation.inverse());
    Twist {
        linear: (to.translation - from.translation) / dt,
        angular: dq.to_rotation_vector() / dt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rand_pose(t: [f64; 3], rv: [f64; 3]) -> Pose {
        Pose::new(
            Vector3::from(t),
            Quaternion::from_rotation_vector(&Vector3::from(rv)),
        )
    }

    fn close(a: &Pose, b: &Pose, tol: f64) -> bool {
        (a.translation - b.translation).norm() <= tol
            && (a.to_matrix() - b.to_matrix()).abs().max() <= tol
    }

    #[test]
    fn identity_composition() {
        let p = rand_pose([0.3, -1.0, 2.0], [0.2, 0.4, -0.1]);
        assert!(close(&Pose::identity().compose(&p), &p, 0.0));
        assert!(close(&p.compose(&p.inverse()), &Pose::identity(), 1e-12));
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let a = rand_pose([0.1, 0.2, 0.3], [0.5, -0.3, 1.2]);
        let b = rand_pose([-1.0, 0.5, 0.25], [-0.7, 0.1, 0.4]);
        let oracle = a.to_matrix() * b.to_matrix();
        assert_abs_diff_eq!(a.compose(&b).to_matrix(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn inverse_matches_matrix_inverse() {
        assert_eq!(Pose::identity().inverse(), Pose::identity());
        let t = Pose::from_translation(1.0, 2.0, 3.0).inverse();
        assert_eq!(t.translation, Vector3::new(-1.0, -2.0, -3.0));
        let p = rand_pose([0.4, -0.2, 0.9], [1.0, 2.0, -0.5]);
        let oracle = p.to_matrix().try_inverse().unwrap();
        assert_abs_diff_eq!(p.inverse().to_matrix(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn pose_error_quarter_turn_about_z() {
        let cur = Pose::identity();
        let reference = Pose::from_rotation(Quaternion::from_yaw(PI / 2.0));
        let e = pose_error(&cur, &reference);
        assert_abs_diff_eq!(e[5], 2.0f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(e[3], 0.0);
        assert_abs_diff_eq!(e[4], 0.0);
        // points the same way as the rotation-log of R_ref R_curᵀ
        let log = reference.rotation.mul(&cur.rotation.inverse()).to_rotation_vector();
        assert!(log.dot(&e.fixed_rows::<3>(3).into_owned()) > 0.0);
    }

    #[test]
    fn pose_error_small_angle_matches_rotation_vector() {
        let cur = rand_pose([0.0, 0.0, 0.0], [0.3, -0.2, 0.5]);
        let delta = Quaternion::from_axis_angle(&Vector3::x(), 0.01);
        let reference = Pose::from_rotation(delta.mul(&cur.rotation));
        let e = pose_error(&cur, &reference);
        assert_abs_diff_eq!(e[3], 0.01, epsilon = 1e-5);
        assert_abs_diff_eq!(e[4], 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(e[5], 0.0, epsilon = 1e-5);
    }

    #[test]
    fn pose_error_takes_shortest_path() {
        let cur = Pose::identity();
        let reference = Pose::from_rotation(Quaternion::from_yaw(-3.0));
        let e = pose_error(&cur, &reference);
        assert!(e[5] < 0.0);
    }

    #[test]
    fn planar_integration_closed_forms() {
        let p = PlanarPose::new(0.3, -0.2, 0.7);
        assert_eq!(integrate_planar(&p, &Vector3::zeros(), 0.1), p);
        let f = integrate_planar(&PlanarPose::default(), &Vector3::new(1.0, 0.0, 0.0), 0.1);
        assert_abs_diff_eq!(f.x, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(f.y, 0.0);
        let r = integrate_planar(&p, &Vector3::new(0.0, 0.0, 2.0), 0.25);
        assert_abs_diff_eq!(r.x, p.x, epsilon = 1e-15);
        assert_abs_diff_eq!(r.theta, 1.2, epsilon = 1e-15);
    }

    #[test]
    fn planar_integration_matches_substepped_euler() {
        let twist = Vector3::new(1.0, 0.0, 1.0);
        let exact = integrate_planar(&PlanarPose::default(), &twist, 0.5);
        let (mut x, mut y, mut th) = (0.0f64, 0.0f64, 0.0f64);
        let h: f64 = 1e-5;
        let steps = (0.5 / h).round() as usize;
        for _ in 0..steps {
            x += h * th.cos();
            y += h * th.sin();
            th += h;
        }
        assert_abs_diff_eq!(exact.x, x, epsilon = 1e-5);
        assert_abs_diff_eq!(exact.y, y, epsilon = 1e-5);
        assert_abs_diff_eq!(exact.theta, th, epsilon = 1e-9);
        // closed form of the arc
        assert_abs_diff_eq!(exact.x, 0.5f64.sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(exact.y, 1.0 - 0.5f64.cos(), epsilon = 1e-12);
    }

    #[test]
    fn theta_wraps() {
        let p = integrate_planar(&PlanarPose::new(0.0, 0.0, 3.0), &Vector3::new(0.0, 0.0, 1.0), 0.5);
        assert!(p.theta > -PI && p.theta <= PI);
        assert_abs_diff_eq!(p.theta, 3.5 - 2.0 * PI, epsilon = 1e-12);
        assert_eq!(wrap_angle(-PI), PI);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = Pose::identity();
        let b = Pose::new(Vector3::new(1.0, 0.0, 0.0), Quaternion::from_yaw(PI / 2.0));
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let m = interpolate(&a, &b, 0.5).unwrap();
        let oracle = Quaternion::from_yaw(PI / 4.0);
        assert_abs_diff_eq!(m.translation.x, 0.5);
        for (u, v) in m.rotation.to_array().iter().zip(oracle.to_array()) {
            assert_abs_diff_eq!(*u, v, epsilon = 1e-12);
        }
        assert_eq!(
            interpolate(&a, &b, 1.5),
            Err(SpatialError::ParameterOutOfRange(1.5))
        );
    }

    #[test]
    fn serde_format() {
        let p = Pose::new(Vector3::new(1.0, 2.0, 3.0), Quaternion::new(-1.0, 0.0, 0.0, 0.0).unwrap());
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"t":[1.0,2.0,3.0],"q":[1.0,0.0,0.0,0.0]}"#);
        let back: Pose = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<Pose>(r#"{"t":[0,0,0],"q":[0,0,0,0]}"#).is_err());
    }

    prop_compose! {
        fn any_pose()(t in prop::array::uniform3(-3.0f64..3.0),
                      rv in prop::array::uniform3(-2.0f64..2.0)) -> Pose {
            rand_pose(t, rv)
        }
    }

    proptest! {
        #[test]
        fn inverse_then_compose_is_identity(p in any_pose()) {
            prop_assert!(close(&p.inverse().compose(&p), &Pose::identity(), 1e-9));
            let n = p.rotation.as_unit().into_inner().norm();
            prop_assert!((n - 1.0).abs() <= 1e-9);
            prop_assert!(p.rotation.w() >= 0.0);
        }

        #[test]
        fn composition_is_associative(a in any_pose(), b in any_pose(), c in any_pose()) {
            prop_assert!(close(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c)), 1e-9));
        }

        #[test]
        fn error_of_equal_poses_is_zero(p in any_pose()) {
            prop_assert_eq!(pose_error(&p, &p), Vector6::zeros());
        }

        #[test]
        fn small_angle_error_tracks_rotation_vector(
            axis in prop::array::uniform3(-1.0f64..1.0),
            theta in 1e-4f64..0.1,
            base in any_pose(),
        ) {
            let axis = Vector3::from(axis);
            prop_assume!(axis.norm() > 0.1);
            let rv = axis.normalize() * theta;
            let reference = Pose::from_rotation(Quaternion::from_rotation_vector(&rv).mul(&base.rotation));
            let e = pose_error(&Pose::from_rotation(base.rotation), &reference);
            let eo = Vector3::new(e[3], e[4], e[5]);
            prop_assert!((eo - rv).norm() <= 1e-3 * theta);
        }
    }
}
