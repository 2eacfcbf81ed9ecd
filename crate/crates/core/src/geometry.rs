//! Small fixed-size linear algebra: 3-vectors, 3×3 matrices, rigid transforms
//! and pinhole intrinsics.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3<T>(pub [T; 3]);

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Vec3([x, y, z])
    }

    pub fn zero() -> Self {
        Vec3([T::zero(); 3])
    }

    pub fn x(&self) -> T {
        self.0[0]
    }
    pub fn y(&self) -> T {
        self.0[1]
    }
    pub fn z(&self) -> T {
        self.0[2]
    }

    pub fn dot(&self, o: &Self) -> T {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn norm_squared(&self) -> T {
        self.dot(self)
    }

    pub fn norm(&self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn scale(&self, s: T) -> Self {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Vec3<U> {
        Vec3(self.0.map(|v| U::lit(v.to_f64_lossy())))
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Vec3(self.0.map(|v| -v))
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Mat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn determinant(&self) -> T {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Rotation about the camera's optical (z) axis.
    pub fn rotation_z(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Mat3([[c, -s, z], [s, c, z], [z, z, o]])
    }

    pub fn mul_vec(&self, v: &Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        Vec3([
            m[0][0] * v.0[0] + m[0][1] * v.0[1] + m[0][2] * v.0[2],
            m[1][0] * v.0[0] + m[1][1] * v.0[1] + m[1][2] * v.0[2],
            m[2][0] * v.0[0] + m[2][1] * v.0[1] + m[2][2] * v.0[2],
        ])
    }

    /// Maximum deviation of `RᵀR` from identity.
    pub fn orthonormality_error(&self) -> T {
        let p = self.transpose() * *self;
        let id = Self::identity();
        let mut e = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                e = e.max((p.0[i][j] - id.0[i][j]).abs());
            }
        }
        e
    }
}

impl<T: Real> Mul for Mat3<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut out = [[T::zero(); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }
}

/// Element of SE(3): `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zero(),
        }
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    /// Builds from a row-major homogeneous 4×4 matrix; the bottom row is ignored.
    pub fn from_row_major(m: &[T; 16]) -> Self {
        Self {
            rotation: Mat3([[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]),
            translation: Vec3([m[3], m[7], m[11]]),
        }
    }

    pub fn to_row_major(&self) -> [T; 16] {
        let r = &self.rotation.0;
        let t = &self.translation.0;
        let (z, o) = (T::zero(), T::one());
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2], z, z, z, o,
        ]
    }

    pub fn apply(&self, p: &Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -rt.mul_vec(&self.translation),
        }
    }

    /// `self ∘ other`, i.e. apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.mul_vec(&other.translation) + self.translation,
        }
    }

    pub fn is_proper_rigid(&self, tol: T) -> bool {
        self.rotation.orthonormality_error() <= tol
            && (self.rotation.determinant() - T::one()).abs() <= tol
            && self.translation.is_finite()
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        let r = self.rotation.0.map(|row| row.map(|v| U::lit(v.to_f64_lossy())));
        RigidTransform {
            rotation: Mat3(r),
            translation: self.translation.cast(),
        }
    }
}

/// Pinhole projection matrix with zero skew.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Self {
        Self { fx, fy, cx, cy }
    }

    pub fn cast<U: Real>(&self) -> Intrinsics<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        Intrinsics::new(c(self.fx), c(self.fy), c(self.cx), c(self.cy))
    }

    pub fn to_row_major(&self) -> [T; 9] {
        let (z, o) = (T::zero(), T::one());
        [self.fx, z, self.cx, z, self.fy, self.cy, z, z, o]
    }

    /// Accepts a row-major K; rejects skew or a non-canonical last row.
    pub fn from_row_major(k: &[T; 9]) -> Option<Self> {
        let tol = T::lit(1e-12);
        let zero_ok = |v: T| v.abs() <= tol;
        if !(zero_ok(k[1]) && zero_ok(k[3]) && zero_ok(k[6]) && zero_ok(k[7]))
            || (k[8] - T::one()).abs() > tol
            || k[0] <= T::zero()
            || k[4] <= T::zero()
        {
            return None;
        }
        Some(Self::new(k[0], k[4], k[2], k[5]))
    }

    /// Projects a camera-frame point; returns pixel coordinates.
    pub fn project(&self, p: &Vec3<T>) -> [T; 2] {
        [
            self.fx * p.x() / p.z() + self.cx,
            self.fy * p.y() / p.z() + self.cy,
        ]
    }

    /// Back-projects pixel `(u, v)` at camera-frame depth `z`.
    pub fn unproject(&self, u: T, v: T, z: T) -> Vec3<T> {
        Vec3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_composes_to_identity() {
        let r = Mat3::rotation_z(0.3f64);
        let t = RigidTransform {
            rotation: r,
            translation: Vec3::new(1.0, -2.0, 0.5),
        };
        let id = t.compose(&t.inverse());
        assert!(id.rotation.orthonormality_error() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
        assert!(t.is_proper_rigid(1e-9));
    }

    #[test]
    fn row_major_round_trip() {
        let t = RigidTransform {
            rotation: Mat3::rotation_z(1.1f64),
            translation: Vec3::new(0.1, 0.2, 0.3),
        };
        assert_eq!(RigidTransform::from_row_major(&t.to_row_major()), t);
    }

    #[test]
    fn projection_round_trip() {
        let k = Intrinsics::new(100.0f64, 90.0, 64.0, 48.0);
        let p = k.unproject(10.5, 20.25, 3.0);
        let [u, v] = k.project(&p);
        assert!((u - 10.5).abs() < 1e-12 && (v - 20.25).abs() < 1e-12);
    }

    #[test]
    fn reflection_is_not_rigid() {
        let mut t = RigidTransform::<f64>::identity();
        t.rotation.0[0][0] = -1.0;
        assert!(!t.is_proper_rigid(1e-9));
    }
}
