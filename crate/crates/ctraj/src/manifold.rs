//! Composite Lie-group algebra for vector spaces, SO(2), SE(2), and products.
//!
//! All conventions are right-handed: perturbations act on the right,
//! `boxplus(x, tau) = x ∘ Exp(tau)` and `boxminus(y, x) = Log(x⁻¹ ∘ y)`.
//! SO(2) is stored as an angle wrapped to (−π, π], SE(2) as `(x, y, θ)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Wraps an angle to the half-open interval (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a.rem_euclid(two_pi); // [0, 2π)
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

/// Shape of a (possibly composite) Lie group.
///
/// Product descriptors are flattened in declaration order: both the ambient
/// storage and the tangent coordinates of a product are the concatenation of
/// the parts' blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupDescriptor {
    VectorSpace(usize),
    So2,
    Se2,
    Product(Vec<GroupDescriptor>),
}

/// Point on a Lie group described by a [`GroupDescriptor`].
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldElement {
    pub descriptor: GroupDescriptor,
    pub data: DVector<f64>,
}

/// Local (tangent-space) coordinates of length `descriptor.dof()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub descriptor: GroupDescriptor,
    pub data: DVector<f64>,
}

impl GroupDescriptor {
    pub fn dof(&self) -> usize {
        match self {
            GroupDescriptor::VectorSpace(n) => *n,
            GroupDescriptor::So2 => 1,
            GroupDescriptor::Se2 => 3,
            GroupDescriptor::Product(parts) => parts.iter().map(|p| p.dof()).sum(),
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            GroupDescriptor::VectorSpace(n) => *n,
            GroupDescriptor::So2 => 1,
            GroupDescriptor::Se2 => 3,
            GroupDescriptor::Product(parts) => parts.iter().map(|p| p.ambient_dim()).sum(),
        }
    }

    pub fn identity(&self) -> ManifoldElement {
        ManifoldElement {
            descriptor: self.clone(),
            data: DVector::zeros(self.ambient_dim()),
        }
    }

    /// Builds an element from raw coordinates, wrapping any angle components.
    pub fn element(&self, data: &[f64]) -> Result<ManifoldElement> {
        if data.len() != self.ambient_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.ambient_dim(),
                got: data.len(),
            });
        }
        let mut v = DVector::from_column_slice(data);
        wrap_element_angles(self, v.as_mut_slice(), 0);
        Ok(ManifoldElement {
            descriptor: self.clone(),
            data: v,
        })
    }

    pub fn tangent(&self, data: &[f64]) -> Result<TangentVector> {
        if data.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                got: data.len(),
            });
        }
        Ok(TangentVector {
            descriptor: self.clone(),
            data: DVector::from_column_slice(data),
        })
    }

    pub fn zero_tangent(&self) -> TangentVector {
        TangentVector {
            descriptor: self.clone(),
            data: DVector::zeros(self.dof()),
        }
    }

    /// Exponential map. `exp(0)` is the identity; for vector spaces the
    /// tangent is returned verbatim.
    pub fn exp(&self, tau: &TangentVector) -> Result<ManifoldElement> {
        self.check_tangent(tau)?;
        let mut out = DVector::zeros(self.ambient_dim());
        exp_into(self, tau.data.as_slice(), out.as_mut_slice());
        Ok(ManifoldElement {
            descriptor: self.clone(),
            data: out,
        })
    }

    /// Right Jacobian of the exponential map, `∂ boxminus(exp(τ+δ), exp(τ)) / ∂δ`.
    pub fn right_jacobian(&self, tau: &TangentVector) -> DMatrix<f64> {
        let d = self.dof();
        let mut out = DMatrix::zeros(d, d);
        jr_into(self, tau.data.as_slice(), &mut out, 0, false);
        out
    }

    pub fn right_jacobian_inv(&self, tau: &TangentVector) -> DMatrix<f64> {
        let d = self.dof();
        let mut out = DMatrix::zeros(d, d);
        jr_into(self, tau.data.as_slice(), &mut out, 0, true);
        out
    }

    /// Time derivative of `J_r(ξ(t))⁻¹` along `ξ(t) = τ + t·τ̇`, evaluated at
    /// `t = 0`. A closed form exists only for special cases (e.g. SO(2),
    /// where it vanishes); SE(2) uses a 5-point central-difference stencil.
    pub fn djr_inv_dt(&self, tau: &TangentVector, tau_dot: &TangentVector) -> DMatrix<f64> {
        let d = self.dof();
        let mut out = DMatrix::zeros(d, d);
        djr_inv_dt_into(
            self,
            tau.data.as_slice(),
            tau_dot.data.as_slice(),
            &mut out,
            0,
        );
        out
    }

    /// Adjoint of a group element: `x ∘ Exp(τ) ∘ x⁻¹ = Exp(Ad(x)·τ)`.
    pub fn adjoint(&self, x: &ManifoldElement) -> DMatrix<f64> {
        let d = self.dof();
        let mut out = DMatrix::zeros(d, d);
        adjoint_into(self, x.data.as_slice(), &mut out, 0);
        out
    }

    /// Adjoint of a tangent vector (the `ad` operator): `ad(τ₁)τ₂ = [τ₁, τ₂]`.
    pub fn ad_small(&self, tau: &TangentVector) -> DMatrix<f64> {
        let d = self.dof();
        let mut out = DMatrix::zeros(d, d);
        ad_into(self, tau.data.as_slice(), &mut out, 0);
        out
    }

    /// `∂[J_r(τ)·v]/∂τ` for fixed `v`.
    pub fn jr_times_dtau(&self, tau: &TangentVector, v: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dof();
        let mut out = DMatrix::zeros(d, d);
        jr_times_dtau_into(self, tau.data.as_slice(), v.as_slice(), &mut out, 0, false);
        out
    }

    /// `∂[J_r(τ)⁻¹·v]/∂τ` for fixed `v`.
    pub fn jrinv_times_dtau(&self, tau: &TangentVector, v: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dof();
        let mut out = DMatrix::zeros(d, d);
        jr_times_dtau_into(self, tau.data.as_slice(), v.as_slice(), &mut out, 0, true);
        out
    }

    /// Partial derivatives of `djr_inv_dt(τ, τ̇)·v` with respect to `τ` and `τ̇`.
    pub fn djr_inv_dt_partials(
        &self,
        tau: &TangentVector,
        tau_dot: &TangentVector,
        v: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.dof();
        let mut dtau = DMatrix::zeros(d, d);
        let mut dtaudot = DMatrix::zeros(d, d);
        djr_inv_dt_partials_into(
            self,
            tau.data.as_slice(),
            tau_dot.data.as_slice(),
            v.as_slice(),
            &mut dtau,
            &mut dtaudot,
            0,
        );
        (dtau, dtaudot)
    }

    fn check_tangent(&self, tau: &TangentVector) -> Result<()> {
        if &tau.descriptor != self {
            return Err(Error::DescriptorMismatch {
                expected: format!("{self:?}"),
                got: format!("{:?}", tau.descriptor),
            });
        }
        Ok(())
    }
}

impl ManifoldElement {
    pub fn log(&self) -> TangentVector {
        let mut out = DVector::zeros(self.descriptor.dof());
        log_into(&self.descriptor, self.data.as_slice(), out.as_mut_slice());
        TangentVector {
            descriptor: self.descriptor.clone(),
            data: out,
        }
    }

    pub fn compose(&self, rhs: &ManifoldElement) -> Result<ManifoldElement> {
        self.check_same(rhs)?;
        let mut out = DVector::zeros(self.descriptor.ambient_dim());
        compose_into(
            &self.descriptor,
            self.data.as_slice(),
            rhs.data.as_slice(),
            out.as_mut_slice(),
        );
        Ok(ManifoldElement {
            descriptor: self.descriptor.clone(),
            data: out,
        })
    }

    pub fn inverse(&self) -> ManifoldElement {
        let mut out = DVector::zeros(self.descriptor.ambient_dim());
        inverse_into(&self.descriptor, self.data.as_slice(), out.as_mut_slice());
        ManifoldElement {
            descriptor: self.descriptor.clone(),
            data: out,
        }
    }

    /// `self ∘ Exp(tau)`.
    pub fn boxplus(&self, tau: &TangentVector) -> Result<ManifoldElement> {
        self.descriptor.check_tangent(tau)?;
        let e = self.descriptor.exp(tau)?;
        self.compose(&e)
    }

    /// `Log(base⁻¹ ∘ self)`.
    pub fn boxminus(&self, base: &ManifoldElement) -> Result<TangentVector> {
        self.check_same(base)?;
        Ok(base.inverse().compose(self)?.log())
    }

    /// Generalized linear interpolation: `self ⊞ (α · (other ⊟ self))`.
    ///
    /// `alpha` outside [0, 1] extrapolates.
    pub fn glerp(&self, other: &ManifoldElement, alpha: f64) -> Result<ManifoldElement> {
        let d = other.boxminus(self)?;
        let scaled = TangentVector {
            descriptor: d.descriptor,
            data: d.data * alpha,
        };
        self.boxplus(&scaled)
    }

    fn check_same(&self, rhs: &ManifoldElement) -> Result<()> {
        if self.descriptor != rhs.descriptor {
            return Err(Error::DescriptorMismatch {
                expected: format!("{:?}", self.descriptor),
                got: format!("{:?}", rhs.descriptor),
            });
        }
        Ok(())
    }
}

fn wrap_element_angles(desc: &GroupDescriptor, data: &mut [f64], off: usize) {
    match desc {
        GroupDescriptor::VectorSpace(_) => {}
        GroupDescriptor::So2 => data[off] = wrap_angle(data[off]),
        GroupDescriptor::Se2 => data[off + 2] = wrap_angle(data[off + 2]),
        GroupDescriptor::Product(parts) => {
            let mut o = off;
            for p in parts {
                wrap_element_angles(p, data, o);
                o += p.ambient_dim();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Per-block kernels. Product groups recurse with ambient/tangent offsets; the
// two offsets coincide for every supported primitive group.
// ---------------------------------------------------------------------------

fn exp_into(desc: &GroupDescriptor, tau: &[f64], out: &mut [f64]) {
    match desc {
        GroupDescriptor::VectorSpace(_) => out.copy_from_slice(tau),
        GroupDescriptor::So2 => out[0] = wrap_angle(tau[0]),
        GroupDescriptor::Se2 => se2::exp(tau, out),
        GroupDescriptor::Product(parts) => {
            let mut o = 0;
            for p in parts {
                let n = p.ambient_dim();
                exp_into(p, &tau[o..o + n], &mut out[o..o + n]);
                o += n;
            }
        }
    }
}

fn log_into(desc: &GroupDescriptor, x: &[f64], out: &mut [f64]) {
    match desc {
        GroupDescriptor::VectorSpace(_) => out.copy_from_slice(x),
        GroupDescriptor::So2 => out[0] = x[0],
        GroupDescriptor::Se2 => se2::log(x, out),
        GroupDescriptor::Product(parts) => {
            let mut o = 0;
            for p in parts {
                let n = p.ambient_dim();
                log_into(p, &x[o..o + n], &mut out[o..o + n]);
                o += n;
            }
        }
    }
}

fn compose_into(desc: &GroupDescriptor, a: &[f64], b: &[f64], out: &mut [f64]) {
    match desc {
        GroupDescriptor::VectorSpace(_) => {
            for i in 0..a.len() {
                out[i] = a[i] + b[i];
            }
        }
        GroupDescriptor::So2 => out[0] = wrap_angle(a[0] + b[0]),
        GroupDescriptor::Se2 => se2::compose(a, b, out),
        GroupDescriptor::Product(parts) => {
            let mut o = 0;
            for p in parts {
                let n = p.ambient_dim();
                compose_into(p, &a[o..o + n], &b[o..o + n], &mut out[o..o + n]);
                o += n;
            }
        }
    }
}

fn inverse_into(desc: &GroupDescriptor, a: &[f64], out: &mut [f64]) {
    match desc {
        GroupDescriptor::VectorSpace(_) => {
            for i in 0..a.len() {
                out[i] = -a[i];
            }
        }
        GroupDescriptor::So2 => out[0] = wrap_angle(-a[0]),
        GroupDescriptor::Se2 => se2::inverse(a, out),
        GroupDescriptor::Product(parts) => {
            let mut o = 0;
            for p in parts {
                let n = p.ambient_dim();
                inverse_into(p, &a[o..o + n], &mut out[o..o + n]);
                o += n;
            }
        }
    }
}

fn jr_into(desc: &GroupDescriptor, tau: &[f64], out: &mut DMatrix<f64>, off: usize, inv: bool) {
    match desc {
        GroupDescriptor::VectorSpace(n) => {
            for i in 0..*n {
                out[(off + i, off + i)] = 1.0;
            }
        }
        GroupDescriptor::So2 => out[(off, off)] = 1.0,
        GroupDescriptor::Se2 => {
            let j = if inv { se2::jr_inv(tau) } else { se2::jr(tau) };
            for r in 0..3 {
                for c in 0..3 {
                    out[(off + r, off + c)] = j[(r, c)];
                }
            }
        }
        GroupDescriptor::Product(parts) => {
            let mut o = off;
            for p in parts {
                jr_into(p, &tau[o - off..o - off + p.dof()], out, o, inv);
                o += p.dof();
            }
        }
    }
}

fn adjoint_into(desc: &GroupDescriptor, x: &[f64], out: &mut DMatrix<f64>, off: usize) {
    match desc {
        GroupDescriptor::VectorSpace(n) => {
            for i in 0..*n {
                out[(off + i, off + i)] = 1.0;
            }
        }
        GroupDescriptor::So2 => out[(off, off)] = 1.0,
        GroupDescriptor::Se2 => {
            let a = se2::adjoint(x);
            for r in 0..3 {
                for c in 0..3 {
                    out[(off + r, off + c)] = a[(r, c)];
                }
            }
        }
        GroupDescriptor::Product(parts) => {
            let mut o = off;
            let mut amb = 0;
            for p in parts {
                adjoint_into(p, &x[amb..amb + p.ambient_dim()], out, o);
                o += p.dof();
                amb += p.ambient_dim();
            }
        }
    }
}

fn ad_into(desc: &GroupDescriptor, tau: &[f64], out: &mut DMatrix<f64>, off: usize) {
    match desc {
        GroupDescriptor::VectorSpace(_) | GroupDescriptor::So2 => {}
        GroupDescriptor::Se2 => {
            let a = se2::ad(tau);
            for r in 0..3 {
                for c in 0..3 {
                    out[(off + r, off + c)] = a[(r, c)];
                }
            }
        }
        GroupDescriptor::Product(parts) => {
            let mut o = off;
            for p in parts {
                ad_into(p, &tau[o - off..o - off + p.dof()], out, o);
                o += p.dof();
            }
        }
    }
}

fn djr_inv_dt_into(
    desc: &GroupDescriptor,
    tau: &[f64],
    tau_dot: &[f64],
    out: &mut DMatrix<f64>,
    off: usize,
) {
    match desc {
        // J_r is constant on abelian groups, so the derivative vanishes.
        GroupDescriptor::VectorSpace(_) | GroupDescriptor::So2 => {}
        GroupDescriptor::Se2 => {
            let d = se2::djr_inv_dt(tau, tau_dot);
            for r in 0..3 {
                for c in 0..3 {
                    out[(off + r, off + c)] = d[(r, c)];
                }
            }
        }
        GroupDescriptor::Product(parts) => {
            let mut o = off;
            for p in parts {
                let rng = o - off..o - off + p.dof();
                djr_inv_dt_into(p, &tau[rng.clone()], &tau_dot[rng], out, o);
                o += p.dof();
            }
        }
    }
}

fn jr_times_dtau_into(
    desc: &GroupDescriptor,
    tau: &[f64],
    v: &[f64],
    out: &mut DMatrix<f64>,
    off: usize,
    inv: bool,
) {
    match desc {
        GroupDescriptor::VectorSpace(_) | GroupDescriptor::So2 => {}
        GroupDescriptor::Se2 => {
            let m = if inv {
                se2::jrinv_times_dtau(tau, v)
            } else {
                se2::jr_times_dtau(tau, v)
            };
            for r in 0..3 {
                for c in 0..3 {
                    out[(off + r, off + c)] = m[(r, c)];
                }
            }
        }
        GroupDescriptor::Product(parts) => {
            let mut o = off;
            for p in parts {
                let rng = o - off..o - off + p.dof();
                jr_times_dtau_into(p, &tau[rng.clone()], &v[rng], out, o, inv);
                o += p.dof();
            }
        }
    }
}

fn djr_inv_dt_partials_into(
    desc: &GroupDescriptor,
    tau: &[f64],
    tau_dot: &[f64],
    v: &[f64],
    dtau: &mut DMatrix<f64>,
    dtaudot: &mut DMatrix<f64>,
    off: usize,
) {
    match desc {
        GroupDescriptor::VectorSpace(_) | GroupDescriptor::So2 => {}
        GroupDescriptor::Se2 => {
            let (a, b) = se2::djr_inv_dt_partials(tau, tau_dot, v);
            for r in 0..3 {
                for c in 0..3 {
                    dtau[(off + r, off + c)] = a[(r, c)];
                    dtaudot[(off + r, off + c)] = b[(r, c)];
                }
            }
        }
        GroupDescriptor::Product(parts) => {
            let mut o = off;
            for p in parts {
                let rng = o - off..o - off + p.dof();
                djr_inv_dt_partials_into(
                    p,
                    &tau[rng.clone()],
                    &tau_dot[rng.clone()],
                    &v[rng],
                    dtau,
                    dtaudot,
                    o,
                );
                o += p.dof();
            }
        }
    }
}

/// SE(2) kernels on `(x, y, θ)` storage with tangent ordering `(ρx, ρy, φ)`.
pub mod se2 {
    use super::wrap_angle;
    use nalgebra::Matrix3;

    // The exact expressions below divide differences of nearly equal terms by
    // θ² or θ³; below this threshold the truncated series are more accurate.
    const SMALL: f64 = 1e-2;

    /// `A = sin θ / θ` and `B = (1 − cos θ) / θ` with series fallbacks.
    fn sincu(theta: f64) -> (f64, f64) {
        if theta.abs() < SMALL {
            let t2 = theta * theta;
            (
                1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2 * t2 * t2 / 5040.0,
                theta * (0.5 - t2 / 24.0 + t2 * t2 / 720.0),
            )
        } else {
            ((theta.sin()) / theta, (1.0 - theta.cos()) / theta)
        }
    }

    pub fn exp(tau: &[f64], out: &mut [f64]) {
        let (a, b) = sincu(tau[2]);
        out[0] = a * tau[0] - b * tau[1];
        out[1] = b * tau[0] + a * tau[1];
        out[2] = wrap_angle(tau[2]);
    }

    pub fn log(x: &[f64], out: &mut [f64]) {
        let theta = x[2];
        let (a, b) = sincu(theta);
        let den = a * a + b * b;
        out[0] = (a * x[0] + b * x[1]) / den;
        out[1] = (-b * x[0] + a * x[1]) / den;
        out[2] = theta;
    }

    pub fn compose(p: &[f64], q: &[f64], out: &mut [f64]) {
        let (s, c) = p[2].sin_cos();
        out[0] = p[0] + c * q[0] - s * q[1];
        out[1] = p[1] + s * q[0] + c * q[1];
        out[2] = wrap_angle(p[2] + q[2]);
    }

    pub fn inverse(p: &[f64], out: &mut [f64]) {
        let (s, c) = p[2].sin_cos();
        out[0] = -(c * p[0] + s * p[1]);
        out[1] = -(-s * p[0] + c * p[1]);
        out[2] = wrap_angle(-p[2]);
    }

    /// Right Jacobian of Exp at `tau`.
    pub fn jr(tau: &[f64]) -> Matrix3<f64> {
        let (x, y, theta) = (tau[0], tau[1], tau[2]);
        let (a, b) = sincu(theta);
        let (c1, c2) = if theta.abs() < SMALL {
            let t2 = theta * theta;
            (
                -y / 2.0 + x * theta / 6.0 + y * t2 / 24.0
                    - x * t2 * theta / 120.0
                    - y * t2 * t2 / 720.0,
                x / 2.0 + y * theta / 6.0 - x * t2 / 24.0 - y * t2 * theta / 120.0
                    + x * t2 * t2 / 720.0,
            )
        } else {
            let (s, c) = theta.sin_cos();
            let t2 = theta * theta;
            (
                (theta * x - y + y * c - x * s) / t2,
                (x + theta * y - x * c - y * s) / t2,
            )
        };
        Matrix3::new(a, b, c1, -b, a, c2, 0.0, 0.0, 1.0)
    }

    pub fn jr_inv(tau: &[f64]) -> Matrix3<f64> {
        let j = jr(tau);
        let (a, b) = (j[(0, 0)], j[(0, 1)]);
        let den = a * a + b * b;
        // The 2x2 block is a scaled rotation; invert it directly and use the
        // unit bottom row for the third column.
        let (ia, ib) = (a / den, b / den);
        let c1 = -(ia * j[(0, 2)] - ib * j[(1, 2)]);
        let c2 = -(ib * j[(0, 2)] + ia * j[(1, 2)]);
        Matrix3::new(ia, -ib, c1, ib, ia, c2, 0.0, 0.0, 1.0)
    }

    pub fn adjoint(x: &[f64]) -> Matrix3<f64> {
        let (s, c) = x[2].sin_cos();
        Matrix3::new(c, -s, x[1], s, c, -x[0], 0.0, 0.0, 1.0)
    }

    pub fn ad(tau: &[f64]) -> Matrix3<f64> {
        Matrix3::new(0.0, -tau[2], tau[1], tau[2], 0.0, -tau[0], 0.0, 0.0, 0.0)
    }

    /// Partial derivatives of J_r with respect to each tangent component.
    fn jr_partials(tau: &[f64]) -> [Matrix3<f64>; 3] {
        let (x, y, theta) = (tau[0], tau[1], tau[2]);
        let small = theta.abs() < SMALL;
        let t2 = theta * theta;
        let (s, c) = theta.sin_cos();

        // dA/dθ, dB/dθ
        let (da, db) = if small {
            (
                -theta / 3.0 + t2 * theta / 30.0 - t2 * t2 * theta / 840.0,
                0.5 - t2 / 8.0 + t2 * t2 / 144.0,
            )
        } else {
            ((theta * c - s) / t2, (theta * s - 1.0 + c) / t2)
        };
        // ∂C1/∂x = ∂C2/∂y, ∂C1/∂y = −∂C2/∂x
        let (dc_dx, dc_dy) = if small {
            (
                theta / 6.0 - t2 * theta / 120.0 + t2 * t2 * theta / 5040.0,
                -0.5 + t2 / 24.0 - t2 * t2 / 720.0,
            )
        } else {
            ((theta - s) / t2, (-1.0 + c) / t2)
        };
        let (dc1_dt, dc2_dt) = if small {
            (
                x / 6.0 + y * theta / 12.0 - x * t2 / 40.0 - y * t2 * theta / 180.0,
                y / 6.0 - x * theta / 12.0 - y * t2 / 40.0 + x * t2 * theta / 180.0,
            )
        } else {
            let t3 = t2 * theta;
            (
                ((x - y * s - x * c) * theta - 2.0 * (theta * x - y + y * c - x * s)) / t3,
                ((y + x * s - y * c) * theta - 2.0 * (x + theta * y - x * c - y * s)) / t3,
            )
        };

        let mut dx = Matrix3::zeros();
        dx[(0, 2)] = dc_dx;
        dx[(1, 2)] = -dc_dy;
        let mut dy = Matrix3::zeros();
        dy[(0, 2)] = dc_dy;
        dy[(1, 2)] = dc_dx;
        let mut dt = Matrix3::zeros();
        dt[(0, 0)] = da;
        dt[(0, 1)] = db;
        dt[(1, 0)] = -db;
        dt[(1, 1)] = da;
        dt[(0, 2)] = dc1_dt;
        dt[(1, 2)] = dc2_dt;
        [dx, dy, dt]
    }

    /// `∂[J_r(τ)·v]/∂τ`.
    pub fn jr_times_dtau(tau: &[f64], v: &[f64]) -> Matrix3<f64> {
        let parts = jr_partials(tau);
        let vv = nalgebra::Vector3::new(v[0], v[1], v[2]);
        Matrix3::from_columns(&[parts[0] * vv, parts[1] * vv, parts[2] * vv])
    }

    /// `∂[J_r(τ)⁻¹·v]/∂τ` via `d(M⁻¹) = −M⁻¹ dM M⁻¹`.
    pub fn jrinv_times_dtau(tau: &[f64], v: &[f64]) -> Matrix3<f64> {
        let parts = jr_partials(tau);
        let jinv = jr_inv(tau);
        let w = jinv * nalgebra::Vector3::new(v[0], v[1], v[2]);
        Matrix3::from_columns(&[
            -jinv * (parts[0] * w),
            -jinv * (parts[1] * w),
            -jinv * (parts[2] * w),
        ])
    }

    // 5-point central-difference stencil along ξ(t) = τ + t·τ̇.
    const STENCIL_H: f64 = 1e-3;
    const STENCIL: [(f64, f64); 4] = [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)];

    pub fn djr_inv_dt(tau: &[f64], tau_dot: &[f64]) -> Matrix3<f64> {
        let mut out = Matrix3::zeros();
        if tau_dot.iter().all(|&v| v == 0.0) {
            return out;
        }
        for (step, w) in STENCIL {
            let h = step * STENCIL_H;
            let p = [
                tau[0] + h * tau_dot[0],
                tau[1] + h * tau_dot[1],
                tau[2] + h * tau_dot[2],
            ];
            out += jr_inv(&p) * (w / (12.0 * STENCIL_H));
        }
        out
    }

    /// Exact partials of the stencil-defined `djr_inv_dt(τ, τ̇)·v`.
    pub fn djr_inv_dt_partials(
        tau: &[f64],
        tau_dot: &[f64],
        v: &[f64],
    ) -> (Matrix3<f64>, Matrix3<f64>) {
        let mut dtau = Matrix3::zeros();
        let mut dtaudot = Matrix3::zeros();
        for (step, w) in STENCIL {
            let h = step * STENCIL_H;
            let p = [
                tau[0] + h * tau_dot[0],
                tau[1] + h * tau_dot[1],
                tau[2] + h * tau_dot[2],
            ];
            let g = jrinv_times_dtau(&p, v) * (w / (12.0 * STENCIL_H));
            dtau += g;
            dtaudot += g * h;
        }
        (dtau, dtaudot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn se2() -> GroupDescriptor {
        GroupDescriptor::Se2
    }

    fn sample_tangent(desc: &GroupDescriptor, rng: &mut ChaCha8Rng, scale: f64) -> TangentVector {
        let data: Vec<f64> = (0..desc.dof())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        desc.tangent(&data).unwrap()
    }

    #[test]
    fn exp_zero_is_identity() {
        let d = se2();
        let e = d.exp(&d.zero_tangent()).unwrap();
        assert_eq!(e, d.identity());
    }

    #[test]
    fn exp_so2_is_angle() {
        let d = GroupDescriptor::So2;
        let e = d.exp(&d.tangent(&[FRAC_PI_2]).unwrap()).unwrap();
        assert_relative_eq!(e.data[0], FRAC_PI_2);
    }

    #[test]
    fn exp_se2_pure_translation() {
        let d = se2();
        let e = d.exp(&d.tangent(&[1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert_relative_eq!(e.data[0], 1.0);
        assert_relative_eq!(e.data[1], 0.0);
        assert_relative_eq!(e.data[2], 0.0);
    }

    #[test]
    fn log_exp_round_trip_seeded() {
        let d = se2();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let mut tau = sample_tangent(&d, &mut rng, 2.0);
            // keep the rotation inside the principal interval
            tau.data[2] = rng.random_range(-PI + 0.01..PI - 0.01);
            let x = d.exp(&tau).unwrap();
            let back = x.log();
            for i in 0..3 {
                assert_relative_eq!(back.data[i], tau.data[i], epsilon = 1e-12);
            }
            let x2 = d.exp(&back).unwrap();
            for i in 0..3 {
                assert_relative_eq!(x2.data[i], x.data[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn compose_axioms() {
        let d = se2();
        let a = d.element(&[1.0, 0.0, FRAC_PI_2]).unwrap();
        let id = d.identity();
        assert_eq!(a.compose(&id).unwrap(), a);
        let prod = a.compose(&a.inverse()).unwrap();
        for i in 0..3 {
            assert_relative_eq!(prod.data[i], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn compose_rigid_transform_chain() {
        let d = se2();
        let a = d.element(&[1.0, 0.0, FRAC_PI_2]).unwrap();
        let b = d.element(&[1.0, 0.0, 0.0]).unwrap();
        let c = a.compose(&b).unwrap();
        assert_relative_eq!(c.data[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.data[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.data[2], FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn boxplus_boxminus_inverse_property() {
        let d = se2();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = d.exp(&sample_tangent(&d, &mut rng, 1.5)).unwrap();
            let tau = sample_tangent(&d, &mut rng, 0.9);
            let y = x.boxplus(&tau).unwrap();
            let back = y.boxminus(&x).unwrap();
            for i in 0..3 {
                assert_relative_eq!(back.data[i], tau.data[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn boxplus_vector_space_is_addition() {
        let d = GroupDescriptor::VectorSpace(3);
        let x = d.element(&[1.0, 2.0, 3.0]).unwrap();
        let tau = d.tangent(&[0.5, -0.5, 1.0]).unwrap();
        let y = x.boxplus(&tau).unwrap();
        assert_eq!(y.data.as_slice(), &[1.5, 1.5, 4.0]);
    }

    #[test]
    fn product_group_is_blockwise() {
        let d =
            GroupDescriptor::Product(vec![GroupDescriptor::So2, GroupDescriptor::VectorSpace(2)]);
        let x = d.element(&[0.3, 1.0, 2.0]).unwrap();
        let tau = d.tangent(&[0.2, 0.5, -0.5]).unwrap();
        let y = x.boxplus(&tau).unwrap();
        assert_relative_eq!(y.data[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(y.data[1], 1.5, epsilon = 1e-15);
        assert_relative_eq!(y.data[2], 1.5, epsilon = 1e-15);

        // blockwise equality against the factor groups
        let so2 = GroupDescriptor::So2;
        let y0 = so2
            .element(&[0.3])
            .unwrap()
            .boxplus(&so2.tangent(&[0.2]).unwrap())
            .unwrap();
        assert_eq!(y.data[0], y0.data[0]);
    }

    fn numeric_right_jacobian(desc: &GroupDescriptor, tau: &TangentVector) -> DMatrix<f64> {
        let d = desc.dof();
        let h = 1e-6;
        let x0 = desc.exp(tau).unwrap();
        let mut out = DMatrix::zeros(d, d);
        for c in 0..d {
            let mut tp = tau.clone();
            let mut tm = tau.clone();
            tp.data[c] += h;
            tm.data[c] -= h;
            let dp = desc.exp(&tp).unwrap().boxminus(&x0).unwrap();
            let dm = desc.exp(&tm).unwrap().boxminus(&x0).unwrap();
            for r in 0..d {
                out[(r, c)] = (dp.data[r] - dm.data[r]) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn right_jacobian_identity_cases() {
        let d = se2();
        let j = d.right_jacobian(&d.zero_tangent());
        assert!(j.is_identity(1e-14));
        let v = GroupDescriptor::VectorSpace(3);
        let j = v.right_jacobian(&v.tangent(&[0.4, -2.0, 3.0]).unwrap());
        assert!(j.is_identity(0.0));
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        let d = se2();
        let tau = d.tangent(&[0.3, -0.1, 0.7]).unwrap();
        let j = d.right_jacobian(&tau);
        let jn = numeric_right_jacobian(&d, &tau);
        assert_relative_eq!(j, jn, epsilon = 1e-6);
    }

    #[test]
    fn right_jacobian_fd_suite_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for desc in [GroupDescriptor::Se2, GroupDescriptor::So2] {
            for _ in 0..100 {
                let tau = sample_tangent(&desc, &mut rng, 1.2);
                let j = desc.right_jacobian(&tau);
                let jn = numeric_right_jacobian(&desc, &tau);
                let scale = j.norm().max(1.0);
                assert!((&j - &jn).norm() / scale < 1e-6, "J_r mismatch for {tau:?}");
                let jinv = desc.right_jacobian_inv(&tau);
                assert!((j * jinv).is_identity(1e-10));
            }
        }
    }

    #[test]
    fn djr_inv_dt_zero_rate_is_zero() {
        let d = se2();
        let tau = d.tangent(&[0.3, 0.2, 0.4]).unwrap();
        let m = d.djr_inv_dt(&tau, &d.zero_tangent());
        assert_relative_eq!(m.norm(), 0.0, epsilon = 1e-14);
        let v = GroupDescriptor::VectorSpace(2);
        let m = v.djr_inv_dt(
            &v.tangent(&[1.0, 2.0]).unwrap(),
            &v.tangent(&[3.0, 4.0]).unwrap(),
        );
        assert_eq!(m.norm(), 0.0);
    }

    #[test]
    fn djr_inv_dt_matches_central_difference() {
        let d = se2();
        let tau = d.tangent(&[0.25, -0.4, 0.6]).unwrap();
        let rate = d.tangent(&[0.8, 0.3, -0.5]).unwrap();
        let m = d.djr_inv_dt(&tau, &rate);
        let h = 1e-5;
        let plus = d
            .tangent(&[
                tau.data[0] + h * rate.data[0],
                tau.data[1] + h * rate.data[1],
                tau.data[2] + h * rate.data[2],
            ])
            .unwrap();
        let minus = d
            .tangent(&[
                tau.data[0] - h * rate.data[0],
                tau.data[1] - h * rate.data[1],
                tau.data[2] - h * rate.data[2],
            ])
            .unwrap();
        let num = (d.right_jacobian_inv(&plus) - d.right_jacobian_inv(&minus)) / (2.0 * h);
        assert_relative_eq!(m, num, epsilon = 1e-5);
    }

    #[test]
    fn glerp_endpoints_and_midpoint() {
        let d = se2();
        let a = d.element(&[0.0, 0.0, 0.0]).unwrap();
        let b = d.element(&[2.0, 1.0, 0.8]).unwrap();
        assert_eq!(a.glerp(&b, 0.0).unwrap(), a);
        let one = a.glerp(&b, 1.0).unwrap();
        for i in 0..3 {
            assert_relative_eq!(one.data[i], b.data[i], epsilon = 1e-12);
        }

        let so2 = GroupDescriptor::So2;
        let p = so2.element(&[0.0]).unwrap();
        let q = so2.element(&[FRAC_PI_2]).unwrap();
        assert_relative_eq!(
            p.glerp(&q, 0.5).unwrap().data[0],
            FRAC_PI_4,
            epsilon = 1e-14
        );
    }

    #[test]
    fn glerp_vector_space_is_lerp() {
        let d = GroupDescriptor::VectorSpace(2);
        let a = d.element(&[1.0, 4.0]).unwrap();
        let b = d.element(&[3.0, 0.0]).unwrap();
        let g = a.glerp(&b, 0.25).unwrap();
        assert_relative_eq!(g.data[0], 1.5, epsilon = 1e-15);
        assert_relative_eq!(g.data[1], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn glerp_constant_rate_property() {
        let d = se2();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            // keep |α·step_θ| below π so extrapolated angles stay principal
            let mut a = d.exp(&sample_tangent(&d, &mut rng, 1.0)).unwrap();
            let mut b = d.exp(&sample_tangent(&d, &mut rng, 1.0)).unwrap();
            a.data[2] = rng.random_range(-0.7..0.7);
            b.data[2] = rng.random_range(-0.7..0.7);
            let step = b.boxminus(&a).unwrap();
            for alpha in [-1.0, -0.3, 0.0, 0.4, 1.0, 1.7, 2.0] {
                let g = a.glerp(&b, alpha).unwrap();
                let got = g.boxminus(&a).unwrap();
                for i in 0..3 {
                    assert_relative_eq!(got.data[i], alpha * step.data[i], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn adjoint_consistency() {
        // x ∘ Exp(τ) ∘ x⁻¹ = Exp(Ad(x) τ)
        let d = se2();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = d.exp(&sample_tangent(&d, &mut rng, 1.0)).unwrap();
            let tau = sample_tangent(&d, &mut rng, 0.5);
            let lhs = x
                .compose(&d.exp(&tau).unwrap())
                .unwrap()
                .compose(&x.inverse())
                .unwrap();
            let ad = d.adjoint(&x);
            let mapped = &ad * &tau.data;
            let rhs = d.exp(&d.tangent(mapped.as_slice()).unwrap()).unwrap();
            for i in 0..3 {
                assert_relative_eq!(lhs.data[i], rhs.data[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn jr_partials_match_finite_differences() {
        let d = se2();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let tau = sample_tangent(&d, &mut rng, 1.2);
            let v = DVector::from_vec(vec![
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            let h = 1e-6;

            let analytic = d.jr_times_dtau(&tau, &v);
            let analytic_inv = d.jrinv_times_dtau(&tau, &v);
            for c in 0..3 {
                let mut tp = tau.clone();
                let mut tm = tau.clone();
                tp.data[c] += h;
                tm.data[c] -= h;
                let fd = (d.right_jacobian(&tp) * &v - d.right_jacobian(&tm) * &v) / (2.0 * h);
                let fd_inv =
                    (d.right_jacobian_inv(&tp) * &v - d.right_jacobian_inv(&tm) * &v) / (2.0 * h);
                for r in 0..3 {
                    assert_relative_eq!(analytic[(r, c)], fd[r], epsilon = 1e-6);
                    assert_relative_eq!(analytic_inv[(r, c)], fd_inv[r], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn djr_inv_dt_partials_match_finite_differences() {
        let d = se2();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let tau = sample_tangent(&d, &mut rng, 1.0);
            let rate = sample_tangent(&d, &mut rng, 1.0);
            let v = DVector::from_vec(vec![
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            let (dtau, dtaudot) = d.djr_inv_dt_partials(&tau, &rate, &v);
            let h = 1e-6;
            for c in 0..3 {
                let mut tp = tau.clone();
                let mut tm = tau.clone();
                tp.data[c] += h;
                tm.data[c] -= h;
                let fd =
                    (d.djr_inv_dt(&tp, &rate) * &v - d.djr_inv_dt(&tm, &rate) * &v) / (2.0 * h);
                let mut rp = rate.clone();
                let mut rm = rate.clone();
                rp.data[c] += h;
                rm.data[c] -= h;
                let fd_dot =
                    (d.djr_inv_dt(&tau, &rp) * &v - d.djr_inv_dt(&tau, &rm) * &v) / (2.0 * h);
                for r in 0..3 {
                    assert_relative_eq!(dtau[(r, c)], fd[r], epsilon = 5e-5, max_relative = 1e-4);
                    assert_relative_eq!(
                        dtaudot[(r, c)],
                        fd_dot[r],
                        epsilon = 5e-5,
                        max_relative = 1e-4
                    );
                }
            }
        }
    }

    #[test]
    fn small_angle_branch_consistency() {
        // jr must agree on both sides of the series threshold
        for theta in [0.9e-4, 1.1e-4] {
            let tau = [0.4, -0.7, theta];
            let j = se2::jr(&tau);
            let jn = numeric_right_jacobian(&se2(), &se2().tangent(&tau).unwrap());
            assert_relative_eq!(j[(0, 2)], jn[(0, 2)], epsilon = 1e-8);
            assert_relative_eq!(j[(1, 2)], jn[(1, 2)], epsilon = 1e-8);
        }
    }

    #[test]
    fn wrap_angle_boundary() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(PI + 0.1), -PI + 0.1, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-3.1 - 3.1), 2.0 * PI - 6.2, epsilon = 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let d = se2();
        assert!(d.tangent(&[1.0, 2.0]).is_err());
        let v2 = GroupDescriptor::VectorSpace(2);
        let x = v2.element(&[1.0, 2.0]).unwrap();
        let y = d.identity();
        assert!(x.compose(&y).is_err());
    }
}
