//! SE(3)/se(3) kernel: hat/vee maps, exponential and logarithm, group
//! operations, and the adjoint / co-adjoint operators.
//!
//! Twists are flat 6-vectors with the rotational part first: `(omega, v)`.
//! Every module in this crate inherits that ordering, and all increments are
//! body-frame (right) increments `X * exp(eta^)`.

use nalgebra::{Matrix3, Matrix4, Matrix6, RealField, Vector3, Vector6};
use num_traits::{FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Scalar types the kernel is generic over (f32, f64).
pub trait Real: RealField + FromPrimitive + ToPrimitive + Copy {}
impl<T: RealField + FromPrimitive + ToPrimitive + Copy> Real for T {}

#[inline]
fn c<S: Real>(x: f64) -> S {
    S::from_f64(x).expect("constant conversion")
}

/// Skew-symmetry defect tolerance accepted by [`vee`].
pub const SKEW_TOL: f64 = 1e-9;
/// Rotation angles within this distance of pi make the logarithm fail loudly.
pub const NEAR_PI_TOL: f64 = 1e-6;
/// Switch to Taylor series for the sinc-type coefficients below this angle.
/// The closed forms lose digits to cancellation well before 1e-4; the series
/// carries enough terms that truncation stays below machine epsilon.
pub const TAYLOR_EPS: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum LieError {
    #[error("rotation angle {angle} within {tol} of pi: logarithm is ill-conditioned")]
    NearPiRotation { angle: f64, tol: f64 },
    #[error("not a valid se(3) matrix: defect {defect} exceeds {tol}")]
    NotSe3 { defect: f64, tol: f64 },
    #[error("not a valid rotation: orthogonality/determinant defect {defect}")]
    NotRotation { defect: f64 },
}

/// Element of SE(3): rotation matrix plus translation vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseT<S: Real> {
    pub rotation: Matrix3<S>,
    pub translation: Vector3<S>,
}

impl<S: Real> PoseT<S> {
    pub fn new(rotation: Matrix3<S>, translation: Vector3<S>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Build from a (not necessarily normalized) quaternion `(qx, qy, qz, qw)`.
    pub fn from_quaternion(t: Vector3<S>, qx: S, qy: S, qz: S, qw: S) -> Self {
        let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        let uq = nalgebra::UnitQuaternion::from_quaternion(q);
        Self {
            rotation: uq.to_rotation_matrix().into_inner(),
            translation: t,
        }
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<S> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<S>) -> Self {
        Self {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Check R^T R = I and det(R) = +1 within `tol` (Frobenius).
    pub fn validate(&self, tol: f64) -> Result<(), LieError> {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        let det = self.rotation.determinant() - S::one();
        let defect = ortho.to_f64().unwrap().max(det.to_f64().unwrap().abs());
        if defect > tol {
            return Err(LieError::NotRotation { defect });
        }
        Ok(())
    }

    /// Project the rotation block back onto SO(3) via SVD. Applied only at
    /// ingestion and on demand, never inside the integrator.
    pub fn orthonormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut r = u * vt;
        if r.determinant() < S::zero() {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Self {
            rotation: r,
            translation: self.translation,
        }
    }
}

/// Skew-symmetric matrix of a 3-vector.
pub fn hat3<S: Real>(w: &Vector3<S>) -> Matrix3<S> {
    Matrix3::new(
        S::zero(),
        -w[2],
        w[1],
        w[2],
        S::zero(),
        -w[0],
        -w[1],
        w[0],
        S::zero(),
    )
}

fn vee3<S: Real>(m: &Matrix3<S>) -> Vector3<S> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// se(3) hat: 6-vector `(omega, v)` to a 4x4 Lie-algebra matrix.
pub fn hat<S: Real>(x: &Vector6<S>) -> Matrix4<S> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&hat3(&x.fixed_rows::<3>(0).into_owned()));
    m.fixed_view_mut::<3, 1>(0, 3)
        .copy_from(&x.fixed_rows::<3>(3).into_owned());
    m
}

/// se(3) vee: inverse of [`hat`]. Rejects matrices whose rotational block is
/// not skew within [`SKEW_TOL`] or whose bottom row is nonzero; defects inside
/// tolerance are projected onto the nearest skew matrix.
pub fn vee<S: Real>(m: &Matrix4<S>) -> Result<Vector6<S>, LieError> {
    let a = m.fixed_view::<3, 3>(0, 0).into_owned();
    let skew_defect = (a + a.transpose()).norm().to_f64().unwrap();
    let bottom = m.fixed_view::<1, 4>(3, 0).norm().to_f64().unwrap();
    let defect = skew_defect.max(bottom);
    if defect > SKEW_TOL {
        return Err(LieError::NotSe3 {
            defect,
            tol: SKEW_TOL,
        });
    }
    let skew = (a - a.transpose()) * c::<S>(0.5);
    let mut x = Vector6::zeros();
    x.fixed_rows_mut::<3>(0).copy_from(&vee3(&skew));
    x.fixed_rows_mut::<3>(3)
        .copy_from(&m.fixed_view::<3, 1>(0, 3).into_owned());
    Ok(x)
}

/// sinc-type coefficients a = sin(t)/t, b = (1-cos(t))/t^2, c = (t-sin(t))/t^3.
fn abc<S: Real>(theta: S) -> (S, S, S) {
    let t2 = theta * theta;
    if theta.to_f64().unwrap() < TAYLOR_EPS {
        (
            S::one() - t2 * c(1.0 / 6.0) + t2 * t2 * c(1.0 / 120.0),
            c::<S>(0.5) - t2 * c(1.0 / 24.0) + t2 * t2 * c(1.0 / 720.0),
            c::<S>(1.0 / 6.0) - t2 * c(1.0 / 120.0) + t2 * t2 * c(1.0 / 5040.0),
        )
    } else {
        let (s, co) = (theta.sin(), theta.cos());
        (s / theta, (S::one() - co) / t2, (theta - s) / (t2 * theta))
    }
}

fn so3_exp<S: Real>(w: &Vector3<S>) -> Matrix3<S> {
    let theta = w.norm();
    let (a, b, _) = abc(theta);
    let wh = hat3(w);
    Matrix3::identity() + wh * a + wh * wh * b
}

fn so3_log<S: Real>(r: &Matrix3<S>) -> Result<Vector3<S>, LieError> {
    let tr = r.trace();
    let cos = ((tr - S::one()) * c::<S>(0.5)).clamp(-S::one(), S::one());
    let theta = cos.acos();
    let theta_f = theta.to_f64().unwrap();
    if std::f64::consts::PI - theta_f < NEAR_PI_TOL {
        return Err(LieError::NearPiRotation {
            angle: theta_f,
            tol: NEAR_PI_TOL,
        });
    }
    let skew = (r - r.transpose()) * c::<S>(0.5);
    if theta_f < TAYLOR_EPS {
        // theta/sin(theta) ~ 1 + theta^2/6
        let scale = S::one() + theta * theta * c(1.0 / 6.0);
        return Ok(vee3(&skew) * scale);
    }
    Ok(vee3(&skew) * (theta / theta.sin()))
}

/// Left Jacobian of SO(3): V(w) with exp translation t = V v.
pub fn rot_left_jacobian<S: Real>(w: &Vector3<S>) -> Matrix3<S> {
    let theta = w.norm();
    let (_, b, cc) = abc(theta);
    let wh = hat3(w);
    Matrix3::identity() + wh * b + wh * wh * cc
}

/// Inverse of the SO(3) left Jacobian, with Taylor fallback for the
/// cancellation-prone coefficient.
pub fn rot_left_jacobian_inv<S: Real>(w: &Vector3<S>) -> Matrix3<S> {
    let theta = w.norm();
    let t2 = theta * theta;
    let e = if theta.to_f64().unwrap() < TAYLOR_EPS {
        c::<S>(1.0 / 12.0) + t2 * c(1.0 / 720.0) + t2 * t2 * c(1.0 / 30240.0)
    } else {
        let half = theta * c::<S>(0.5);
        (S::one() - half * half.cos() / half.sin()) / t2
    };
    let wh = hat3(w);
    Matrix3::identity() - wh * c::<S>(0.5) + wh * wh * e
}

/// SE(3) exponential: closed-form Rodrigues rotation with t = V(omega) v.
pub fn exp_se3<S: Real>(x: &Vector6<S>) -> PoseT<S> {
    let w = x.fixed_rows::<3>(0).into_owned();
    let v = x.fixed_rows::<3>(3).into_owned();
    PoseT {
        rotation: so3_exp(&w),
        translation: rot_left_jacobian(&w) * v,
    }
}

/// SE(3) logarithm. Errors when the rotation angle is within
/// [`NEAR_PI_TOL`] of pi.
pub fn log_se3<S: Real>(x: &PoseT<S>) -> Result<Vector6<S>, LieError> {
    let w = so3_log(&x.rotation)?;
    let v = rot_left_jacobian_inv(&w) * x.translation;
    let mut out = Vector6::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&w);
    out.fixed_rows_mut::<3>(3).copy_from(&v);
    Ok(out)
}

/// Big adjoint Ad_X as a 6x6 matrix in the (omega, v) ordering.
pub fn adjoint<S: Real>(x: &PoseT<S>) -> Matrix6<S> {
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&x.rotation);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&x.rotation);
    m.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(hat3(&x.translation) * x.rotation));
    m
}

/// Matrix of the Lie bracket action eta -> [xi, eta] in (omega, v) ordering.
pub fn little_ad<S: Real>(xi: &Vector6<S>) -> Matrix6<S> {
    let wh = hat3(&xi.fixed_rows::<3>(0).into_owned());
    let vh = hat3(&xi.fixed_rows::<3>(3).into_owned());
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&wh);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&wh);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&vh);
    m
}

/// ad*_xi mu = ad(xi)^T mu, the co-adjoint action on momenta.
pub fn coadjoint_apply<S: Real>(xi: &Vector6<S>, mu: &Vector6<S>) -> Vector6<S> {
    little_ad(xi).transpose() * mu
}

/// Off-diagonal block of the SE(3) left Jacobian (Barfoot's Q matrix,
/// adapted to the (omega, v) ordering).
fn q_matrix<S: Real>(w: &Vector3<S>, v: &Vector3<S>) -> Matrix3<S> {
    let theta = w.norm();
    let t2 = theta * theta;
    let wh = hat3(w);
    let vh = hat3(v);
    let (c1, c2, c3);
    if theta.to_f64().unwrap() < TAYLOR_EPS {
        c1 = c::<S>(1.0 / 6.0) - t2 * c(1.0 / 120.0);
        c2 = c::<S>(1.0 / 24.0) - t2 * c(1.0 / 720.0);
        c3 = c::<S>(-1.0 / 120.0) + t2 * c(1.0 / 5040.0);
    } else {
        let (s, co) = (theta.sin(), theta.cos());
        let t4 = t2 * t2;
        c1 = (theta - s) / (t2 * theta);
        c2 = (S::one() - t2 * c::<S>(0.5) - co) / t4;
        c3 = (theta - s - t2 * theta * c::<S>(1.0 / 6.0)) / (t4 * theta);
    }
    vh * c::<S>(0.5) + (wh * vh + vh * wh + wh * vh * wh) * c1
        - (wh * wh * vh + vh * wh * wh - wh * vh * wh * c::<S>(3.0)) * c2
        - (wh * vh * wh * wh + wh * wh * vh * wh) * ((c2 - c3 * c::<S>(3.0)) * c::<S>(0.5))
}

/// SE(3) left Jacobian as a 6x6 matrix in (omega, v) ordering.
pub fn se3_left_jacobian<S: Real>(xi: &Vector6<S>) -> Matrix6<S> {
    let w = xi.fixed_rows::<3>(0).into_owned();
    let v = xi.fixed_rows::<3>(3).into_owned();
    let j3 = rot_left_jacobian(&w);
    let q = q_matrix(&w, &v);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j3);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j3);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    m
}

/// Inverse of the SE(3) right Jacobian, used by the geodesic edge Jacobians.
pub fn se3_right_jacobian_inv<S: Real>(xi: &Vector6<S>) -> Matrix6<S> {
    // Jr(xi) = Jl(-xi); invert blockwise.
    let w = -xi.fixed_rows::<3>(0).into_owned();
    let v = -xi.fixed_rows::<3>(3).into_owned();
    let j3_inv = rot_left_jacobian_inv(&w);
    let q = q_matrix(&w, &v);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j3_inv);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j3_inv);
    m.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-(j3_inv * q * j3_inv)));
    m
}
