//! Vector and quaternion algebra.
//!
//! Quaternions follow the Hamilton convention (`i * j = k`), with the scalar
//! part stored first. Attitude quaternions map body-frame vectors into the
//! world frame. Euler angles use the Z-Y-X (yaw, pitch, roll) intrinsic order.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Tolerance on `|q| = 1` for unit quaternions and on `|axis| = 1`.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Below this angular rate the rotation increment is the identity.
pub const SMALL_OMEGA: f64 = 1e-12;

/// Band around `|pitch| = pi/2` treated as gimbal lock.
pub const GIMBAL_LOCK_BAND: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeomError {
    #[error("rotation axis is not unit length (|axis| = {0})")]
    NonUnitAxis(f64),
    #[error("quaternion is not unit length (|q| = {0})")]
    NonUnitQuaternion(f64),
    #[error("quaternion has zero norm")]
    ZeroNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Length of the (x, y) part, i.e. the horizontal N/E extent in NED.
    pub fn horizontal_norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn component_mul(self, other: Vec3) -> Vec3 {
        Vec3::new(self.x * other.x, self.y * other.y, self.z * other.z)
    }

    pub fn component_div(self, other: Vec3) -> Vec3 {
        Vec3::new(self.x / other.x, self.y / other.y, self.z / other.z)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Serialize for Vec3 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vec3 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        <[f64; 3]>::deserialize(d).map(Vec3::from)
    }
}

/// A general (not necessarily unit) quaternion `q0 + q1 i + q2 j + q3 k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub q0: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);

    pub const fn new(q0: f64, q1: f64, q2: f64, q3: f64) -> Self {
        Self { q0, q1, q2, q3 }
    }

    pub fn from_scalar_vector(scalar: f64, v: Vec3) -> Self {
        Self::new(scalar, v.x, v.y, v.z)
    }

    pub fn vector(self) -> Vec3 {
        Vec3::new(self.q1, self.q2, self.q3)
    }

    pub fn conj(self) -> Self {
        Self::new(self.q0, -self.q1, -self.q2, -self.q3)
    }

    pub fn norm_squared(self) -> f64 {
        self.q0 * self.q0 + self.q1 * self.q1 + self.q2 * self.q2 + self.q3 * self.q3
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.q0.is_finite() && self.q1.is_finite() && self.q2.is_finite() && self.q3.is_finite()
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.q0 * s, self.q1 * s, self.q2 * s, self.q3 * s)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.q0, self.q1, self.q2, self.q3]
    }

    /// Rotates `v` by this quaternion, which must be unit within
    /// [`UNIT_TOLERANCE`].
    pub fn rotate_vector(self, v: Vec3) -> Result<Vec3, GeomError> {
        UnitQuaternion::try_new(self).map(|q| q.rotate(v))
    }
}

/// Hamilton product.
impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.q0 * b.q0 - a.q1 * b.q1 - a.q2 * b.q2 - a.q3 * b.q3,
            a.q0 * b.q1 + a.q1 * b.q0 + a.q2 * b.q3 - a.q3 * b.q2,
            a.q0 * b.q2 - a.q1 * b.q3 + a.q2 * b.q0 + a.q3 * b.q1,
            a.q0 * b.q3 + a.q1 * b.q2 - a.q2 * b.q1 + a.q3 * b.q0,
        )
    }
}

pub fn quat_mul(a: Quaternion, b: Quaternion) -> Quaternion {
    a * b
}

/// Quaternion known to satisfy `|q| = 1` within [`UNIT_TOLERANCE`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion(Quaternion);

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Roll, pitch and yaw in radians (Z-Y-X order).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    /// Set when pitch is within [`GIMBAL_LOCK_BAND`] of +-pi/2. Roll is then
    /// reported as zero and the whole heading is folded into yaw.
    pub degenerate: bool,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion(Quaternion::IDENTITY);

    pub fn try_new(q: Quaternion) -> Result<Self, GeomError> {
        let n = q.norm();
        if !q.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(GeomError::NonUnitQuaternion(n));
        }
        Ok(Self(q))
    }

    pub fn new_normalize(q: Quaternion) -> Result<Self, GeomError> {
        let n = q.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(GeomError::ZeroNorm);
        }
        Ok(Self(q.scale(1.0 / n)))
    }

    /// Rotation of `angle` radians about the unit vector `axis`.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self, GeomError> {
        let n = axis.norm();
        if !axis.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(GeomError::NonUnitAxis(n));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Ok(Self(Quaternion::from_scalar_vector(c, axis * s)))
    }

    /// Rotation accumulated over `dt` at constant body rate `omega`: the
    /// instantaneous axis `omega / |omega|` swept through `|omega| * dt`.
    pub fn from_angular_velocity(omega: Vec3, dt: f64) -> Self {
        let rate = omega.norm();
        if rate < SMALL_OMEGA {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * rate * dt).sin_cos();
        Self(Quaternion::from_scalar_vector(c, omega * (s / rate)))
    }

    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        let (sr, cr) = (0.5 * roll).sin_cos();
        let (sp, cp) = (0.5 * pitch).sin_cos();
        let (sy, cy) = (0.5 * yaw).sin_cos();
        Self(Quaternion::new(
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        ))
    }

    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = (0.5 * yaw).sin_cos();
        Self(Quaternion::new(c, 0.0, 0.0, s))
    }

    pub fn quaternion(self) -> Quaternion {
        self.0
    }

    pub fn conj(self) -> Self {
        Self(self.0.conj())
    }

    /// Image of `v` under this rotation, `q (0, v) q*`.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let p = Quaternion::from_scalar_vector(0.0, v);
        (self.0 * p * self.0.conj()).vector()
    }

    /// Image of `v` under the inverse rotation (world to body for attitudes).
    pub fn inverse_rotate(self, v: Vec3) -> Vec3 {
        self.conj().rotate(v)
    }

    /// Product renormalized back onto the unit sphere.
    pub fn compose(self, other: UnitQuaternion) -> Self {
        let q = self.0 * other.0;
        Self(q.scale(1.0 / q.norm()))
    }

    pub fn to_euler(self) -> EulerAngles {
        let Quaternion { q0, q1, q2, q3 } = self.0;
        let sin_pitch = (2.0 * (q0 * q2 - q3 * q1)).clamp(-1.0, 1.0);
        if sin_pitch.abs() >= GIMBAL_LOCK_BAND.cos() {
            // Only yaw - roll (or yaw + roll) is observable here.
            let pitch = std::f64::consts::FRAC_PI_2.copysign(sin_pitch);
            let yaw = if sin_pitch > 0.0 {
                -2.0 * q1.atan2(q0)
            } else {
                2.0 * q1.atan2(q0)
            };
            return EulerAngles {
                roll: 0.0,
                pitch,
                yaw: wrap_angle(yaw),
                degenerate: true,
            };
        }
        EulerAngles {
            roll: (2.0 * (q0 * q1 + q2 * q3)).atan2(1.0 - 2.0 * (q1 * q1 + q2 * q2)),
            pitch: sin_pitch.asin(),
            yaw: (2.0 * (q0 * q3 + q1 * q2)).atan2(1.0 - 2.0 * (q2 * q2 + q3 * q3)),
            degenerate: false,
        }
    }

    pub fn yaw(self) -> f64 {
        let Quaternion { q0, q1, q2, q3 } = self.0;
        (2.0 * (q0 * q3 + q1 * q2)).atan2(1.0 - 2.0 * (q2 * q2 + q3 * q3))
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;
    fn mul(self, other: UnitQuaternion) -> UnitQuaternion {
        self.compose(other)
    }
}

impl Serialize for UnitQuaternion {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for UnitQuaternion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [q0, q1, q2, q3] = <[f64; 4]>::deserialize(d)?;
        let q = Quaternion::new(q0, q1, q2, q3);
        // Stored values already satisfy the unit tolerance; keep them bit-exact.
        if (q.norm() - 1.0).abs() <= 1e-6 {
            Ok(UnitQuaternion(q))
        } else {
            Err(serde::de::Error::custom(GeomError::NonUnitQuaternion(q.norm())))
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}
