//! Temporal B-splines of arbitrary order on vector spaces and Lie groups.
//!
//! A spline of order `k` with `C` control points stores the `C + k − 2` knots
//! `t_0 … t_{C+k−3}`. Segment `i` (for `i = 0 … C−k`) blends control points
//! `x_i … x_{i+k−1}` over the half-open interval `[t_{i+k−2}, t_{i+k−1})`, so
//! the queryable domain is `[t_{k−2}, t_{C−1})`. Lie-group evaluation uses the
//! cumulative formulation `x(t) = x_i ∘ Exp(λ̃_1 d_1) ∘ … ∘ Exp(λ̃_{k−1} d_{k−1})`.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::manifold::{GroupDescriptor, ManifoldElement, TangentVector};

/// Strictly increasing knot times (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    times: Vec<f64>,
}

impl KnotVector {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "knots must be strictly increasing".into(),
            ));
        }
        Ok(KnotVector { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Polynomial blending coefficients for one spline segment.
///
/// Row `j` holds the coefficients of `λ_j(u)` by increasing power of the
/// normalized segment time `u`, i.e. `λ_j(u) = Σ_n entries[(j, n)]·uⁿ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendingMatrix {
    entries: DMatrix<f64>,
}

impl BlendingMatrix {
    pub fn order(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Evaluates the `deriv`-th u-derivative of every blending coefficient.
    pub fn weights(&self, u: f64, deriv: u32) -> Vec<f64> {
        let k = self.order();
        let mut out = vec![0.0; k];
        for j in 0..k {
            let mut acc = 0.0;
            for n in (deriv as usize)..k {
                let mut factor = 1.0;
                for d in 0..deriv as usize {
                    factor *= (n - d) as f64;
                }
                acc += self.entries[(j, n)] * factor * u.powi((n - deriv as usize) as i32);
            }
            out[j] = acc;
        }
        out
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Uniform B-spline blending matrix of order `k` (cached per order).
///
/// Entry `(s, n)` is `C(k−1,n)/(k−1)! · Σ_{l=s}^{k−1} (−1)^{l−s} C(k, l−s)
/// (k−1−l)^{k−1−n}` with the convention `0⁰ = 1`.
pub fn uniform_blending_matrix(k: usize) -> Result<BlendingMatrix> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "spline order must be at least 1".into(),
        ));
    }
    static CACHE: OnceLock<Mutex<HashMap<usize, DMatrix<f64>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    let entries = guard
        .entry(k)
        .or_insert_with(|| {
            let mut m = DMatrix::zeros(k, k);
            let mut fact = 1.0;
            for i in 1..k {
                fact *= i as f64;
            }
            for s in 0..k {
                for n in 0..k {
                    let mut sum = 0.0;
                    for l in s..k {
                        let sign = if (l - s) % 2 == 0 { 1.0 } else { -1.0 };
                        sum += sign
                            * binomial(k, l - s)
                            * ((k - 1 - l) as f64).powi((k - 1 - n) as i32);
                    }
                    m[(s, n)] = binomial(k - 1, n) / fact * sum;
                }
            }
            m
        })
        .clone();
    Ok(BlendingMatrix { entries })
}

/// Non-uniform B-spline blending matrix from the `2(k−1)` knots surrounding a
/// segment; the segment interval is `[window[k−2], window[k−1])`.
///
/// Computed by running the Cox–de Boor recursion with polynomial coefficients
/// in the normalized segment time, which reproduces the transpose of Qin's
/// recursive basis matrix.
pub fn nonuniform_blending_matrix(k: usize, window: &[f64]) -> Result<BlendingMatrix> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "spline order must be at least 1".into(),
        ));
    }
    if window.len() != 2 * (k - 1) {
        return Err(Error::DimensionMismatch {
            expected: 2 * (k - 1),
            got: window.len(),
        });
    }
    if window.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "knot window must be strictly increasing".into(),
        ));
    }
    if k == 1 {
        return Ok(BlendingMatrix {
            entries: DMatrix::from_element(1, 1, 1.0),
        });
    }

    // Pad one knot on each side; the basis restricted to the central span does
    // not depend on them.
    let mut tau = Vec::with_capacity(2 * k);
    tau.push(window[0] - (window[1] - window[0]));
    tau.extend_from_slice(window);
    tau.push(window[2 * k - 3] + (window[2 * k - 3] - window[2 * k - 4]));

    // Central span [tau[k-1], tau[k]); t = tau[k-1] + u·delta.
    let t0 = tau[k - 1];
    let delta = tau[k] - tau[k - 1];

    // Basis polynomials in u, indexed by control point; order-1 seed.
    let mut basis: Vec<Vec<f64>> = vec![vec![0.0; k]; 2 * k - 1];
    basis[k - 1][0] = 1.0;

    for q in 2..=k {
        let mut next: Vec<Vec<f64>> = vec![vec![0.0; k]; 2 * k - q];
        for (j, out) in next.iter_mut().enumerate() {
            // left term: (t − τ_j) / (τ_{j+q−1} − τ_j) · N_{j,q−1}
            let d1 = tau[j + q - 1] - tau[j];
            if d1 > 0.0 {
                let a = (t0 - tau[j]) / d1;
                let b = delta / d1;
                accumulate_affine(out, &basis[j], a, b);
            }
            // right term: (τ_{j+q} − t) / (τ_{j+q} − τ_{j+1}) · N_{j+1,q−1}
            let d2 = tau[j + q] - tau[j + 1];
            if d2 > 0.0 {
                let a = (tau[j + q] - t0) / d2;
                let b = -delta / d2;
                accumulate_affine(out, &basis[j + 1], a, b);
            }
        }
        basis = next;
    }

    let mut entries = DMatrix::zeros(k, k);
    for s in 0..k {
        for n in 0..k {
            entries[(s, n)] = basis[s][n];
        }
    }
    Ok(BlendingMatrix { entries })
}

// out += (a + b·u) · poly
fn accumulate_affine(out: &mut [f64], poly: &[f64], a: f64, b: f64) {
    for n in 0..poly.len() {
        out[n] += a * poly[n];
        if n + 1 < out.len() {
            out[n + 1] += b * poly[n];
        }
    }
}

/// Cumulative variant: row `j` is the sum of rows `j..k` of `m`.
pub fn cumulative_matrix(m: &BlendingMatrix) -> BlendingMatrix {
    let k = m.order();
    let mut entries = DMatrix::zeros(k, k);
    for n in 0..k {
        let mut acc = 0.0;
        for j in (0..k).rev() {
            acc += m.entries[(j, n)];
            entries[(j, n)] = acc;
        }
    }
    BlendingMatrix { entries }
}

/// Result of evaluating a Lie-group spline (or any cumulative chain).
#[derive(Debug, Clone)]
pub struct LieEval {
    pub value: ManifoldElement,
    /// Body-frame (right) velocity.
    pub velocity: Option<TangentVector>,
    /// Time derivative of the body-frame velocity.
    pub acceleration: Option<TangentVector>,
}

/// Per-control-point Jacobians of a cumulative-chain evaluation, one
/// `dof × dof` block per involved control point.
#[derive(Debug, Clone)]
pub struct LieJacobians {
    pub value: Vec<DMatrix<f64>>,
    pub velocity: Option<Vec<DMatrix<f64>>>,
    pub acceleration: Option<Vec<DMatrix<f64>>>,
}

/// Evaluates the cumulative interpolation chain over `k` control points with
/// cumulative weights `lambda` and their first/second time derivatives.
pub fn cumulative_chain(
    cps: &[ManifoldElement],
    lambda: &[f64],
    dlambda: &[f64],
    ddlambda: &[f64],
    deriv: u32,
) -> Result<LieEval> {
    let (eval, _) = chain_impl(cps, lambda, dlambda, ddlambda, deriv, false)?;
    Ok(eval)
}

/// Same as [`cumulative_chain`] but also returns analytic Jacobians with
/// respect to right perturbations of each control point.
pub fn cumulative_chain_jacobians(
    cps: &[ManifoldElement],
    lambda: &[f64],
    dlambda: &[f64],
    ddlambda: &[f64],
    deriv: u32,
) -> Result<(LieEval, LieJacobians)> {
    let (eval, jac) = chain_impl(cps, lambda, dlambda, ddlambda, deriv, true)?;
    Ok((eval, jac.expect("jacobians requested")))
}

fn chain_impl(
    cps: &[ManifoldElement],
    lambda: &[f64],
    dlambda: &[f64],
    ddlambda: &[f64],
    deriv: u32,
    with_jacobians: bool,
) -> Result<(LieEval, Option<LieJacobians>)> {
    if deriv > 2 {
        return Err(Error::UnsupportedDerivative(deriv));
    }
    let k = cps.len();
    let desc = cps[0].descriptor.clone();
    let dof = desc.dof();

    let mut value = cps[0].clone();
    let mut vel = DVector::zeros(dof);
    let mut acc = DVector::zeros(dof);

    // Pose/velocity/acceleration Jacobians per control point.
    let mut jp: Vec<DMatrix<f64>> = Vec::new();
    let mut jv: Vec<DMatrix<f64>> = Vec::new();
    let mut ja: Vec<DMatrix<f64>> = Vec::new();
    if with_jacobians {
        jp = (0..k)
            .map(|m| {
                if m == 0 {
                    DMatrix::identity(dof, dof)
                } else {
                    DMatrix::zeros(dof, dof)
                }
            })
            .collect();
        if deriv >= 1 {
            jv = (0..k).map(|_| DMatrix::zeros(dof, dof)).collect();
        }
        if deriv >= 2 {
            ja = (0..k).map(|_| DMatrix::zeros(dof, dof)).collect();
        }
    }

    for j in 1..k {
        let d_j = cps[j].boxminus(&cps[j - 1])?;
        let s_j = TangentVector {
            descriptor: desc.clone(),
            data: &d_j.data * lambda[j],
        };
        let a_j = desc.exp(&s_j)?;
        let ad_inv = desc.adjoint(&a_j.inverse());

        // d_j sensitivities: G w.r.t. cps[j-1] and cps[j].
        let (g_prev, g_curr) = if with_jacobians {
            let neg = TangentVector {
                descriptor: desc.clone(),
                data: -&d_j.data,
            };
            (
                -desc.right_jacobian_inv(&neg),
                desc.right_jacobian_inv(&d_j),
            )
        } else {
            (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
        };

        if deriv >= 2 {
            let ad_d = desc.ad_small(&d_j);
            let q = &acc - (&ad_d * &vel) * dlambda[j];
            if with_jacobians {
                let jr_neg = desc.right_jacobian(&TangentVector {
                    descriptor: desc.clone(),
                    data: -&s_j.data,
                });
                let curve =
                    &ad_inv * desc.ad_small(&desc.tangent(q.as_slice())?) * &jr_neg * lambda[j];
                let ad_vel = desc.ad_small(&desc.tangent(vel.as_slice())?);
                for m in 0..k {
                    let mut dq = &ja[m] - (&ad_d * &jv[m]) * dlambda[j];
                    if m == j - 1 {
                        dq += (&ad_vel * &g_prev) * dlambda[j];
                    } else if m == j {
                        dq += (&ad_vel * &g_curr) * dlambda[j];
                    }
                    let mut next = &ad_inv * dq;
                    if m == j - 1 {
                        next += &curve * &g_prev + &g_prev * ddlambda[j];
                    } else if m == j {
                        next += &curve * &g_curr + &g_curr * ddlambda[j];
                    }
                    ja[m] = next;
                }
            }
            acc = &ad_inv * q + &d_j.data * ddlambda[j];
        }

        if deriv >= 1 {
            if with_jacobians {
                let jr_neg = desc.right_jacobian(&TangentVector {
                    descriptor: desc.clone(),
                    data: -&s_j.data,
                });
                let curve =
                    &ad_inv * desc.ad_small(&desc.tangent(vel.as_slice())?) * &jr_neg * lambda[j];
                for m in 0..k {
                    let mut next = &ad_inv * &jv[m];
                    if m == j - 1 {
                        next += &curve * &g_prev + &g_prev * dlambda[j];
                    } else if m == j {
                        next += &curve * &g_curr + &g_curr * dlambda[j];
                    }
                    jv[m] = next;
                }
            }
            vel = &ad_inv * vel + &d_j.data * dlambda[j];
        }

        if with_jacobians {
            let jr_s = desc.right_jacobian(&s_j);
            for m in 0..k {
                let mut next = &ad_inv * &jp[m];
                if m == j - 1 {
                    next += (&jr_s * &g_prev) * lambda[j];
                } else if m == j {
                    next += (&jr_s * &g_curr) * lambda[j];
                }
                jp[m] = next;
            }
        }

        value = value.compose(&a_j)?;
    }

    let eval = LieEval {
        value,
        velocity: if deriv >= 1 {
            Some(TangentVector {
                descriptor: desc.clone(),
                data: vel,
            })
        } else {
            None
        },
        acceleration: if deriv >= 2 {
            Some(TangentVector {
                descriptor: desc.clone(),
                data: acc,
            })
        } else {
            None
        },
    };
    let jacs = with_jacobians.then(|| LieJacobians {
        value: jp,
        velocity: (deriv >= 1).then_some(jv),
        acceleration: (deriv >= 2).then_some(ja),
    });
    Ok((eval, jacs))
}

/// Temporal B-spline over a manifold.
#[derive(Debug, Clone)]
pub struct SplineTrajectory {
    descriptor: GroupDescriptor,
    order: usize,
    knots: KnotVector,
    control_points: Vec<ManifoldElement>,
    uniform: bool,
    /// Per-segment plain and cumulative blending matrices.
    blend: Vec<(BlendingMatrix, BlendingMatrix)>,
}

impl SplineTrajectory {
    /// Uniform spline whose domain starts at `start` with knot spacing `dt`.
    pub fn uniform(
        descriptor: GroupDescriptor,
        order: usize,
        start: f64,
        dt: f64,
        control_points: Vec<ManifoldElement>,
    ) -> Result<Self> {
        if dt <= 0.0 {
            return Err(Error::InvalidArgument(
                "knot spacing must be positive".into(),
            ));
        }
        let c = control_points.len();
        if order == 0 || c < order {
            return Err(Error::InvalidArgument(format!(
                "order-{order} spline needs at least {order} control points, got {c}"
            )));
        }
        let count = c + order - 2;
        let times = (0..count)
            .map(|j| start + (j as f64 - (order as f64 - 2.0)) * dt)
            .collect();
        Self::build(
            descriptor,
            order,
            KnotVector::new(times)?,
            control_points,
            true,
        )
    }

    /// Non-uniform spline from an explicit knot list of length `C + k − 2`.
    pub fn non_uniform(
        descriptor: GroupDescriptor,
        order: usize,
        knots: KnotVector,
        control_points: Vec<ManifoldElement>,
    ) -> Result<Self> {
        let c = control_points.len();
        if order == 0 || c < order {
            return Err(Error::InvalidArgument(format!(
                "order-{order} spline needs at least {order} control points, got {c}"
            )));
        }
        if knots.len() != c + order - 2 {
            return Err(Error::DimensionMismatch {
                expected: c + order - 2,
                got: knots.len(),
            });
        }
        Self::build(descriptor, order, knots, control_points, false)
    }

    fn build(
        descriptor: GroupDescriptor,
        order: usize,
        knots: KnotVector,
        control_points: Vec<ManifoldElement>,
        uniform: bool,
    ) -> Result<Self> {
        for cp in &control_points {
            if cp.descriptor != descriptor {
                return Err(Error::DescriptorMismatch {
                    expected: format!("{descriptor:?}"),
                    got: format!("{:?}", cp.descriptor),
                });
            }
        }
        let segments = control_points.len() + 1 - order;
        let mut blend = Vec::with_capacity(segments);
        for i in 0..segments {
            let m = if uniform || order == 1 {
                uniform_blending_matrix(order)?
            } else {
                nonuniform_blending_matrix(order, &knots.times()[i..i + 2 * (order - 1)])?
            };
            let mc = cumulative_matrix(&m);
            blend.push((m, mc));
        }
        Ok(SplineTrajectory {
            descriptor,
            order,
            knots,
            control_points,
            uniform,
            blend,
        })
    }

    pub fn descriptor(&self) -> &GroupDescriptor {
        &self.descriptor
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn control_points(&self) -> &[ManifoldElement] {
        &self.control_points
    }

    pub fn control_points_mut(&mut self) -> &mut [ManifoldElement] {
        &mut self.control_points
    }

    pub fn num_segments(&self) -> usize {
        self.control_points.len() + 1 - self.order
    }

    /// Half-open time domain `[t_{k−2}, t_{C−1})`.
    pub fn domain(&self) -> (f64, f64) {
        let t = self.knots.times();
        if self.order == 1 {
            return (f64::NEG_INFINITY, f64::INFINITY);
        }
        (t[self.order - 2], t[self.control_points.len() - 1])
    }

    /// Segment index and normalized time for `t`.
    pub fn segment_for_time(&self, t: f64) -> Result<(usize, f64)> {
        let (start, end) = self.domain();
        if !(t >= start && t < end) {
            return Err(Error::OutOfDomain { t, start, end });
        }
        let times = self.knots.times();
        if self.order == 1 {
            let j = times.partition_point(|&x| x <= t);
            return Ok((j, 0.0));
        }
        // largest knot index with times[j] <= t, then segment i = j - (k-2)
        let j = times.partition_point(|&x| x <= t) - 1;
        let i = j + 2 - self.order;
        let u = (t - times[j]) / (times[j + 1] - times[j]);
        Ok((i, u))
    }

    fn segment_dt(&self, i: usize) -> f64 {
        if self.order == 1 {
            return 1.0;
        }
        let t = self.knots.times();
        t[i + self.order - 1] - t[i + self.order - 2]
    }

    /// Cumulative weights and their first two time derivatives on segment `i`.
    fn chain_weights(&self, i: usize, u: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let dt = self.segment_dt(i);
        let mc = &self.blend[i].1;
        let lambda = mc.weights(u, 0);
        let mut dl = mc.weights(u, 1);
        let mut ddl = mc.weights(u, 2);
        for v in &mut dl {
            *v /= dt;
        }
        for v in &mut ddl {
            *v /= dt * dt;
        }
        (lambda, dl, ddl)
    }

    /// Vector-space evaluation of the value (`deriv = 0`) or a temporal
    /// derivative (`deriv = 1 | 2`).
    pub fn eval_vector(&self, t: f64, deriv: u32) -> Result<DVector<f64>> {
        if !matches!(self.descriptor, GroupDescriptor::VectorSpace(_)) {
            return Err(Error::InvalidArgument(
                "eval_vector requires a vector-space spline".into(),
            ));
        }
        if deriv > 2 {
            return Err(Error::UnsupportedDerivative(deriv));
        }
        let (i, u) = self.segment_for_time(t)?;
        let dt = self.segment_dt(i);
        let w = self.blend[i].0.weights(u, deriv);
        let scale = dt.powi(-(deriv as i32));
        let mut out = DVector::zeros(self.descriptor.dof());
        for (j, wj) in w.iter().enumerate() {
            out += &self.control_points[i + j].data * (wj * scale);
        }
        Ok(out)
    }

    /// Lie-group evaluation; returns the element and, when requested,
    /// body-frame velocity and acceleration.
    pub fn eval_lie(&self, t: f64, deriv: u32) -> Result<LieEval> {
        let (i, u) = self.segment_for_time(t)?;
        let (lambda, dl, ddl) = self.chain_weights(i, u);
        cumulative_chain(
            &self.control_points[i..i + self.order],
            &lambda,
            &dl,
            &ddl,
            deriv,
        )
    }

    /// Analytic Jacobians of the interpolated value (and derivatives up to
    /// `deriv`) with respect to the `k` control points of the segment
    /// containing `t`. Returns the segment index alongside.
    pub fn eval_lie_jacobians(&self, t: f64, deriv: u32) -> Result<(usize, LieEval, LieJacobians)> {
        let (i, u) = self.segment_for_time(t)?;
        let (lambda, dl, ddl) = self.chain_weights(i, u);
        let (eval, jac) = cumulative_chain_jacobians(
            &self.control_points[i..i + self.order],
            &lambda,
            &dl,
            &ddl,
            deriv,
        )?;
        Ok((i, eval, jac))
    }

    /// Jacobians of the requested derivative level with respect to the `k`
    /// involved control points.
    pub fn control_point_jacobians(&self, t: f64, deriv: u32) -> Result<Vec<DMatrix<f64>>> {
        let (_, _, jac) = self.eval_lie_jacobians(t, deriv)?;
        Ok(match deriv {
            0 => jac.value,
            1 => jac.velocity.unwrap(),
            _ => jac.acceleration.unwrap(),
        })
    }

    /// Representative time for a control point: the midpoint of its influence
    /// interval, clamped into the valid domain. Used for initialization and
    /// reporting.
    pub fn control_point_time(&self, j: usize) -> f64 {
        let (start, end) = self.domain();
        let times = self.knots.times();
        let knot_or = |idx: isize, fallback: f64| -> f64 {
            if idx < 0 || idx as usize >= times.len() {
                fallback
            } else {
                times[idx as usize]
            }
        };
        let lo = knot_or(j as isize - 1, start);
        let hi = knot_or((j + self.order - 1) as isize, end);
        (0.5 * (lo + hi)).clamp(start, end)
    }
}
