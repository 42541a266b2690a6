//! Rigid transformations in SE(3).
//!
//! A transform is stored as a rotation matrix and a translation vector and
//! acts on column vectors: `p' = R p + t`. Composition is plain matrix
//! multiplication of the homogeneous 4×4 forms, with the increment on the
//! left: `compose(delta, prev) = delta · prev`.
//!
//! Euler angles follow the extrinsic X-then-Y-then-Z convention,
//! `R = Rz(rz) · Ry(ry) · Rx(rx)`.

use nalgebra::{Matrix3, Matrix4, Vector3, SVD};
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Orthogonality drift above which a rotation is projected back onto SO(3).
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

/// Six-parameter pose increment: three Euler angles (radians) and a
/// translation (scene units).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, serde::Deserialize)]
pub struct Twist {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl Twist {
    pub fn new(rx: f64, ry: f64, rz: f64, tx: f64, ty: f64, tz: f64) -> Self {
        Twist {
            rx,
            ry,
            rz,
            tx,
            ty,
            tz,
        }
    }

    pub fn zero() -> Self {
        Twist::default()
    }

    pub fn translation(tx: f64, ty: f64, tz: f64) -> Self {
        Twist::new(0.0, 0.0, 0.0, tx, ty, tz)
    }

    /// Layout `[rx, ry, rz, tx, ty, tz]`.
    pub fn from_array(a: [f64; 6]) -> Self {
        Twist::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.rx, self.ry, self.rz, self.tx, self.ty, self.tz]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Checks the increment invariants: finite, and every angle strictly
    /// inside (-π, π).
    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::invalid(format!("non-finite twist {self:?}")));
        }
        let pi = std::f64::consts::PI;
        if [self.rx, self.ry, self.rz].iter().any(|a| a.abs() >= pi) {
            return Err(Error::invalid(format!("twist angle out of (-pi, pi): {self:?}")));
        }
        Ok(())
    }

    pub fn rotation_norm(&self) -> f64 {
        (self.rx * self.rx + self.ry * self.ry + self.rz * self.rz).sqrt()
    }

    pub fn translation_norm(&self) -> f64 {
        (self.tx * self.tx + self.ty * self.ty + self.tz * self.tz).sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Twist::from_array(self.to_array().map(|v| v * s))
    }

    /// Shrinks the rotation and translation parts independently so that
    /// neither exceeds its bound.
    pub fn clamped(&self, max_rotation: f64, max_translation: f64) -> Self {
        let mut out = *self;
        let rn = self.rotation_norm();
        if rn > max_rotation {
            let s = max_rotation / rn;
            out.rx *= s;
            out.ry *= s;
            out.rz *= s;
        }
        let tn = self.translation_norm();
        if tn > max_translation {
            let s = max_translation / tn;
            out.tx *= s;
            out.ty *= s;
            out.tz *= s;
        }
        out
    }
}

/// Rigid-body transform with an orthonormal, right-handed rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for SE3 {
    fn default() -> Self {
        SE3::identity()
    }
}

impl SE3 {
    pub fn identity() -> Self {
        SE3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        SE3 {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Builds a transform from raw parts, accepting rotations whose
    /// orthogonality drift (max-abs of `RᵀR − I`) is at most `tolerance`.
    /// Accepted rotations are re-orthonormalized when the drift exceeds
    /// [`ORTHONORMAL_TOLERANCE`].
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>, tolerance: f64) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite transform entries"));
        }
        let drift = orthogonality_drift(&rotation);
        if drift > tolerance {
            return Err(Error::Data(format!(
                "rotation block is not orthonormal (drift {drift:.3e} > {tolerance:.1e})"
            )));
        }
        if rotation.determinant() <= 0.0 {
            return Err(Error::Data("rotation block has non-positive determinant".into()));
        }
        Ok(SE3::normalized(rotation, translation))
    }

    /// Builds a transform from a 4×4 homogeneous matrix.
    pub fn from_matrix(m: &Matrix4<f64>, tolerance: f64) -> Result<Self> {
        let bottom = m.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(Error::Data("homogeneous matrix bottom row must be (0, 0, 0, 1)".into()));
        }
        SE3::from_parts(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
            tolerance,
        )
    }

    fn normalized(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = if orthogonality_drift(&rotation) > ORTHONORMAL_TOLERANCE {
            nearest_rotation(&rotation)
        } else {
            rotation
        };
        SE3 {
            rotation,
            translation,
        }
    }

    /// `R = Rz(rz)·Ry(ry)·Rx(rx)`, `t = (tx, ty, tz)`.
    pub fn from_twist(tw: &Twist) -> Result<Self> {
        if !tw.is_finite() {
            return Err(Error::invalid(format!("non-finite twist {tw:?}")));
        }
        Ok(SE3 {
            rotation: euler_zyx(tw.rx, tw.ry, tw.rz),
            translation: Vector3::new(tw.tx, tw.ty, tw.tz),
        })
    }

    /// Inverse of [`SE3::from_twist`]. Angles are recovered in
    /// `rx, rz ∈ (-π, π]`, `ry ∈ [-π/2, π/2]`.
    pub fn to_twist(&self) -> Twist {
        let r = &self.rotation;
        let ry = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        let (rx, rz) = if r[(2, 0)].abs() < 1.0 - 1e-12 {
            (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
        } else {
            // gimbal lock: only rx - rz (or rx + rz) is observable
            (0.0, (-r[(0, 1)]).atan2(r[(1, 1)]))
        };
        Twist::new(
            rx,
            ry,
            rz,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major `[R | t]`, the KITTI pose-line layout.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        SE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Returns `delta · prev`: `prev` is applied first, then `delta`.
pub fn compose(delta: &SE3, prev: &SE3) -> SE3 {
    SE3::normalized(
        delta.rotation * prev.rotation,
        delta.rotation * prev.translation + delta.translation,
    )
}

impl std::ops::Mul for SE3 {
    type Output = SE3;

    fn mul(self, rhs: SE3) -> SE3 {
        compose(&self, &rhs)
    }
}

impl std::ops::Mul<&SE3> for &SE3 {
    type Output = SE3;

    fn mul(self, rhs: &SE3) -> SE3 {
        compose(self, rhs)
    }
}

impl Serialize for SE3 {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let m = self.to_row_major_3x4();
        let rows = [
            [m[0], m[1], m[2], m[3]],
            [m[4], m[5], m[6], m[7]],
            [m[8], m[9], m[10], m[11]],
        ];
        rows.serialize(serializer)
    }
}

fn euler_zyx(rx: f64, ry: f64, rz: f64) -> Matrix3<f64> {
    let (sx, cx) = rx.sin_cos();
    let (sy, cy) = ry.sin_cos();
    let (sz, cz) = rz.sin_cos();
    let rot_x = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let rot_y = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rot_z = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rot_z * rot_y * rot_x
}

/// Max-abs entry of `RᵀR − I`.
pub fn orthogonality_drift(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

/// Projection onto SO(3) in the Frobenius sense.
fn nearest_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*r, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// Skew-symmetric cross-product matrix `[v]×`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
