//! Residual models binding trajectories to measurements.
//!
//! A measurement factor pairs a *head* (the sensor model: range-bearing,
//! gyroscope, accelerometer, pose prior) with a *binding* that produces the
//! interpolated pose and body-frame derivatives at the stamp from the bound
//! optimization variables, composing the measurement Jacobians with the
//! interpolation Jacobians.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::gp::{self, GpInterp, GpPriorModel, SupportState};
use crate::manifold::{wrap_angle, GroupDescriptor, ManifoldElement, TangentVector};
use crate::solver::FactorEval;
use crate::spline;

/// Known landmark in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub position: Vector2<f64>,
}

// ---------------------------------------------------------------------------
// Measurement heads: residuals of the interpolated pose / body derivatives.
// ---------------------------------------------------------------------------

/// Range-bearing residual of an SE(2) pose to a known landmark.
///
/// Returns the residual `(r − z_r, wrap(b − z_b))` and its Jacobian with
/// respect to a right perturbation of the pose. The wrap is applied to the
/// residual, not the prediction, so the Jacobian is that of the unwrapped
/// expression.
pub fn range_bearing_residual(
    pose: &ManifoldElement,
    landmark: &Vector2<f64>,
    z: &Vector2<f64>,
) -> Result<(Vector2<f64>, DMatrix<f64>)> {
    let p = Vector2::new(pose.data[0], pose.data[1]);
    let theta = pose.data[2];
    let delta = landmark - p;
    let r = delta.norm();
    if r < 1e-9 {
        return Err(Error::DegenerateGeometry(format!(
            "landmark coincides with the pose position ({}, {})",
            p.x, p.y
        )));
    }
    let bearing = delta.y.atan2(delta.x) - theta;
    let e = Vector2::new(r - z.x, wrap_angle(bearing - z.y));

    let (s, c) = theta.sin_cos();
    let rot = Matrix2::new(c, -s, s, c);
    let mut j = DMatrix::zeros(2, 3);
    let dr_dp = -delta.transpose() / r * rot;
    j[(0, 0)] = dr_dp[(0, 0)];
    j[(0, 1)] = dr_dp[(0, 1)];
    let db_dp = nalgebra::RowVector2::new(delta.y / (r * r), -delta.x / (r * r)) * rot;
    j[(1, 0)] = db_dp[(0, 0)];
    j[(1, 1)] = db_dp[(0, 1)];
    j[(1, 2)] = -1.0;
    Ok((e, j))
}

/// Gyroscope residual `θ̇ − z` from a body-frame velocity.
pub fn gyro_residual(velocity: &DVector<f64>, z: f64) -> (f64, DMatrix<f64>) {
    let mut j = DMatrix::zeros(1, 3);
    j[(0, 2)] = 1.0;
    (velocity[2] - z, j)
}

/// Planar accelerometer residual `R(θ)ᵀ p̈_world − z` expressed through body
/// quantities: `(v̇_b + θ̇ S v_b) − z`.
///
/// Returns the residual and its Jacobians with respect to the body velocity
/// and body acceleration vectors.
pub fn accel_residual(
    velocity: &DVector<f64>,
    acceleration: &DVector<f64>,
    z: &Vector2<f64>,
) -> (Vector2<f64>, DMatrix<f64>, DMatrix<f64>) {
    let v = Vector2::new(velocity[0], velocity[1]);
    let omega = velocity[2];
    let s_v = Vector2::new(-v.y, v.x); // S·v with S = [[0,-1],[1,0]]
    let e = Vector2::new(
        acceleration[0] + omega * s_v.x - z.x,
        acceleration[1] + omega * s_v.y - z.y,
    );
    let mut d_vel = DMatrix::zeros(2, 3);
    // ∂(ω S v)/∂v = ω S, ∂/∂ω = S v
    d_vel[(0, 1)] = -omega;
    d_vel[(1, 0)] = omega;
    d_vel[(0, 2)] = s_v.x;
    d_vel[(1, 2)] = s_v.y;
    let mut d_acc = DMatrix::zeros(2, 3);
    d_acc[(0, 0)] = 1.0;
    d_acc[(1, 1)] = 1.0;
    (e, d_vel, d_acc)
}

/// Pose-prior residual `pose ⊖ mean` with its pose Jacobian.
pub fn pose_prior_residual(
    pose: &ManifoldElement,
    mean: &ManifoldElement,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let e = pose.boxminus(mean)?;
    let j = pose.descriptor.right_jacobian_inv(&e);
    Ok((e.data, j))
}

// ---------------------------------------------------------------------------
// Bindings: interpolated trajectory point + Jacobians from bound variables.
// ---------------------------------------------------------------------------

/// Interpolated trajectory point at a stamp: pose and body derivatives, with
/// stacked Jacobians `∂[pose; vel; acc]/∂var` per bound variable.
pub struct PointEval {
    pub pose: ManifoldElement,
    pub vel: Option<DVector<f64>>,
    pub acc: Option<DVector<f64>>,
    pub jacs: Vec<DMatrix<f64>>,
}

/// How a measurement stamp is tied to optimization variables.
pub enum Binding {
    /// The variable is the queried state itself (a GP support state at the
    /// stamp, or a bare pose variable).
    Direct {
        var: usize,
        base: GroupDescriptor,
        blocks: usize,
    },
    /// Two bracketing GP support states with cached Λ/Ψ weights.
    GpPair {
        vars: [usize; 2],
        base: GroupDescriptor,
        blocks: usize,
        times: (f64, f64),
        interp: GpInterp,
    },
    /// The `k` control points of the spline segment containing the stamp,
    /// with cached cumulative weights and their time derivatives.
    Spline {
        vars: Vec<usize>,
        lambda: Vec<f64>,
        dlambda: Vec<f64>,
        ddlambda: Vec<f64>,
    },
    /// Two bracketing pose states, linearly interpolated on the manifold.
    Glerp {
        vars: [usize; 2],
        alpha: f64,
        dt: f64,
    },
}

impl Binding {
    pub fn gp(
        prior: &GpPriorModel,
        left: usize,
        vars: [usize; 2],
        s_i: &SupportState,
        s_ip1: &SupportState,
        t: f64,
    ) -> Result<Self> {
        let interp = GpInterp::new(prior, s_i, s_ip1, t, left)?;
        Ok(Binding::GpPair {
            vars,
            base: s_i.element.descriptor.clone(),
            blocks: prior.blocks(),
            times: (s_i.time, s_ip1.time),
            interp,
        })
    }

    pub fn variables(&self) -> Vec<usize> {
        match self {
            Binding::Direct { var, .. } => vec![*var],
            Binding::GpPair { vars, .. } | Binding::Glerp { vars, .. } => vars.to_vec(),
            Binding::Spline { vars, .. } => vars.clone(),
        }
    }

    /// Highest derivative this binding can produce.
    pub fn max_derivative(&self) -> u32 {
        match self {
            Binding::Direct { blocks, .. } => (*blocks as u32) - 1,
            Binding::GpPair { blocks, .. } => (*blocks as u32) - 1,
            Binding::Spline { .. } => 2,
            Binding::Glerp { .. } => 1,
        }
    }

    /// Evaluates the bound point at the current variable values, with
    /// Jacobians through the interpolation chain.
    pub fn eval(&self, vars: &[&ManifoldElement], deriv: u32) -> Result<PointEval> {
        if deriv > self.max_derivative() {
            return Err(Error::UnsupportedFactor(format!(
                "binding provides derivatives up to {}, factor needs {deriv}",
                self.max_derivative()
            )));
        }
        match self {
            Binding::Direct { base, blocks, .. } => {
                let d = base.dof();
                let amb = base.ambient_dim();
                let v = vars[0];
                let pose = ManifoldElement {
                    descriptor: base.clone(),
                    data: v.data.rows(0, amb).into_owned(),
                };
                let vel = (*blocks >= 2).then(|| v.data.rows(amb, d).into_owned());
                let acc = (*blocks >= 3).then(|| v.data.rows(amb + d, d).into_owned());
                // stacked selector of the state blocks
                let rows = d * (1 + deriv as usize).min(*blocks);
                let mut j = DMatrix::zeros(rows, d * *blocks);
                for r in 0..rows {
                    j[(r, r)] = 1.0;
                }
                Ok(PointEval {
                    pose,
                    vel,
                    acc,
                    jacs: vec![j],
                })
            }
            Binding::GpPair {
                base,
                blocks,
                times,
                interp,
                ..
            } => {
                if *base == GroupDescriptor::Se2 {
                    // composite-variable storage is already packed [pose, vel, (acc)]
                    let (p, j_left, j_right, _) = gp::se2_chain::mean_with_jacobians(
                        interp,
                        *blocks,
                        vars[0].data.as_slice(),
                        vars[1].data.as_slice(),
                    );
                    let rows = 3 * (1 + deriv as usize);
                    let take = |m: DMatrix<f64>| m.view((0, 0), (rows, 3 * *blocks)).into_owned();
                    return Ok(PointEval {
                        pose: ManifoldElement {
                            descriptor: GroupDescriptor::Se2,
                            data: DVector::from_column_slice(&p.pose),
                        },
                        vel: Some(DVector::from_column_slice(&[
                            p.blocks[1].x,
                            p.blocks[1].y,
                            p.blocks[1].z,
                        ])),
                        acc: (*blocks >= 3).then(|| {
                            DVector::from_column_slice(&[
                                p.blocks[2].x,
                                p.blocks[2].y,
                                p.blocks[2].z,
                            ])
                        }),
                        jacs: vec![take(j_left), take(j_right)],
                    });
                }
                let s_i = gp::state_from_element(base, *blocks, times.0, vars[0]);
                let s_j = gp::state_from_element(base, *blocks, times.1, vars[1]);
                let (out, j_left, j_right, _) = interp.mean_with_jacobians(&s_i, &s_j)?;
                let d = base.dof();
                let rows = d * (1 + deriv as usize);
                let take = |m: &DMatrix<f64>| m.view((0, 0), (rows, d * *blocks)).into_owned();
                Ok(PointEval {
                    pose: out.element,
                    vel: Some(out.derivatives[0].data.clone()),
                    acc: out.derivatives.get(1).map(|t| t.data.clone()),
                    jacs: vec![take(&j_left), take(&j_right)],
                })
            }
            Binding::Spline {
                lambda,
                dlambda,
                ddlambda,
                ..
            } => {
                let cps: Vec<ManifoldElement> = vars.iter().map(|v| (*v).clone()).collect();
                let (eval, jac) =
                    spline::cumulative_chain_jacobians(&cps, lambda, dlambda, ddlambda, deriv)?;
                let d = eval.value.descriptor.dof();
                let k = cps.len();
                let rows = d * (1 + deriv as usize);
                let mut jacs = Vec::with_capacity(k);
                for m in 0..k {
                    let mut j = DMatrix::zeros(rows, d);
                    j.view_mut((0, 0), (d, d)).copy_from(&jac.value[m]);
                    if deriv >= 1 {
                        j.view_mut((d, 0), (d, d))
                            .copy_from(&jac.velocity.as_ref().unwrap()[m]);
                    }
                    if deriv >= 2 {
                        j.view_mut((2 * d, 0), (d, d))
                            .copy_from(&jac.acceleration.as_ref().unwrap()[m]);
                    }
                    jacs.push(j);
                }
                Ok(PointEval {
                    pose: eval.value,
                    vel: eval.velocity.map(|t| t.data),
                    acc: eval.acceleration.map(|t| t.data),
                    jacs,
                })
            }
            Binding::Glerp { alpha, dt, .. } => {
                let (x_i, x_j) = (vars[0], vars[1]);
                let desc = x_i.descriptor.clone();
                let d = desc.dof();
                let xi = x_j.boxminus(x_i)?;
                let s = TangentVector {
                    descriptor: desc.clone(),
                    data: &xi.data * *alpha,
                };
                let pose = x_i.boxplus(&s)?;
                let vel = &xi.data / *dt;

                let neg_xi = TangentVector {
                    descriptor: desc.clone(),
                    data: -&xi.data,
                };
                let g_left = -desc.right_jacobian_inv(&neg_xi);
                let g_right = desc.right_jacobian_inv(&xi);
                let jr_s = desc.right_jacobian(&s);
                let ad = desc.adjoint(&desc.exp(&s)?.inverse());

                let rows = d * (1 + deriv as usize);
                let mut j_i = DMatrix::zeros(rows, d);
                let mut j_j = DMatrix::zeros(rows, d);
                j_i.view_mut((0, 0), (d, d))
                    .copy_from(&(&ad + &jr_s * &g_left * *alpha));
                j_j.view_mut((0, 0), (d, d))
                    .copy_from(&(&jr_s * &g_right * *alpha));
                if deriv >= 1 {
                    j_i.view_mut((d, 0), (d, d)).copy_from(&(&g_left / *dt));
                    j_j.view_mut((d, 0), (d, d)).copy_from(&(&g_right / *dt));
                }
                Ok(PointEval {
                    pose,
                    vel: Some(vel),
                    acc: None,
                    jacs: vec![j_i, j_j],
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Factors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Head {
    RangeBearing {
        landmark: Vector2<f64>,
        z: Vector2<f64>,
    },
    Gyro {
        z: f64,
    },
    Accel {
        z: Vector2<f64>,
    },
    PosePrior {
        mean: ManifoldElement,
    },
}

impl Head {
    pub fn dim(&self, pose_dof: usize) -> usize {
        match self {
            Head::RangeBearing { .. } | Head::Accel { .. } => 2,
            Head::Gyro { .. } => 1,
            Head::PosePrior { .. } => pose_dof,
        }
    }

    pub fn deriv_needed(&self) -> u32 {
        match self {
            Head::RangeBearing { .. } | Head::PosePrior { .. } => 0,
            Head::Gyro { .. } => 1,
            Head::Accel { .. } => 2,
        }
    }
}

/// Measurement factor: one or more heads sharing a stamp, evaluated at the
/// same interpolated trajectory point. Stacking measurements taken at the
/// same instant lets the interpolation chain be evaluated once for all of
/// them.
pub struct MeasurementFactor {
    pub stamp: f64,
    heads: Vec<Head>,
    binding: Binding,
    bindings: Vec<usize>,
    dim: usize,
    deriv: u32,
}

impl MeasurementFactor {
    pub fn new(stamp: f64, head: Head, binding: Binding, pose_dof: usize) -> Result<Self> {
        Self::stacked(stamp, vec![head], binding, pose_dof)
    }

    pub fn stacked(
        stamp: f64,
        heads: Vec<Head>,
        binding: Binding,
        pose_dof: usize,
    ) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::InvalidArgument(
                "a measurement factor needs at least one head".into(),
            ));
        }
        let deriv = heads.iter().map(|h| h.deriv_needed()).max().unwrap();
        if deriv > binding.max_derivative() {
            let blocking = heads.iter().find(|h| h.deriv_needed() == deriv).unwrap();
            return Err(Error::UnsupportedFactor(format!(
                "{blocking:?} needs derivative {deriv} but the trajectory representation provides {}",
                binding.max_derivative()
            )));
        }
        let bindings = binding.variables();
        let dim = heads.iter().map(|h| h.dim(pose_dof)).sum();
        Ok(MeasurementFactor {
            stamp,
            heads,
            binding,
            bindings,
            dim,
            deriv,
        })
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }
}

impl FactorEval for MeasurementFactor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn bindings(&self) -> &[usize] {
        &self.bindings
    }

    fn eval(&self, vars: &[&ManifoldElement]) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let point = self.binding.eval(vars, self.deriv)?;
        let d = point.pose.descriptor.dof();
        let rows = d * (1 + self.deriv as usize);

        let mut e = DVector::zeros(self.dim);
        let mut de_dpoint = DMatrix::zeros(self.dim, rows);
        let mut row = 0;
        for head in &self.heads {
            match head {
                Head::RangeBearing { landmark, z } => {
                    let (eh, j) = range_bearing_residual(&point.pose, landmark, z)?;
                    e[row] = eh.x;
                    e[row + 1] = eh.y;
                    de_dpoint.view_mut((row, 0), (2, d)).copy_from(&j);
                    row += 2;
                }
                Head::Gyro { z } => {
                    let vel = point.vel.as_ref().expect("gyro needs velocity");
                    let (eh, j) = gyro_residual(vel, *z);
                    e[row] = eh;
                    de_dpoint.view_mut((row, d), (1, d)).copy_from(&j);
                    row += 1;
                }
                Head::Accel { z } => {
                    let vel = point.vel.as_ref().expect("accel needs velocity");
                    let acc = point.acc.as_ref().expect("accel needs acceleration");
                    let (eh, d_vel, d_acc) = accel_residual(vel, acc, z);
                    e[row] = eh.x;
                    e[row + 1] = eh.y;
                    de_dpoint.view_mut((row, d), (2, d)).copy_from(&d_vel);
                    de_dpoint.view_mut((row, 2 * d), (2, d)).copy_from(&d_acc);
                    row += 2;
                }
                Head::PosePrior { mean } => {
                    let (eh, j) = pose_prior_residual(&point.pose, mean)?;
                    e.rows_mut(row, d).copy_from(&eh);
                    de_dpoint.view_mut((row, 0), (d, d)).copy_from(&j);
                    row += d;
                }
            }
        }

        let jacs = point.jacs.iter().map(|jp| &de_dpoint * jp).collect();
        Ok((e, jacs))
    }
}

/// Initial full-state prior for a GP support-state variable.
pub struct StatePriorFactor {
    bindings: Vec<usize>,
    base: GroupDescriptor,
    blocks: usize,
    mean: SupportState,
}

impl StatePriorFactor {
    pub fn new(var: usize, mean: SupportState, blocks: usize) -> Self {
        StatePriorFactor {
            bindings: vec![var],
            base: mean.element.descriptor.clone(),
            blocks,
            mean,
        }
    }
}

impl FactorEval for StatePriorFactor {
    fn dim(&self) -> usize {
        self.base.dof() * self.blocks
    }

    fn bindings(&self) -> &[usize] {
        &self.bindings
    }

    fn eval(&self, vars: &[&ManifoldElement]) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let d = self.base.dof();
        let s = gp::state_from_element(&self.base, self.blocks, self.mean.time, vars[0]);
        let mut e = DVector::zeros(self.dim());
        let (ep, jp) = pose_prior_residual(&s.element, &self.mean.element)?;
        e.rows_mut(0, d).copy_from(&ep);
        for (k, dv) in s.derivatives.iter().enumerate() {
            e.rows_mut(d * (k + 1), d)
                .copy_from(&(&dv.data - &self.mean.derivatives[k].data));
        }
        let mut j = DMatrix::identity(self.dim(), self.dim());
        j.view_mut((0, 0), (d, d)).copy_from(&jp);
        Ok((e, vec![j]))
    }
}

/// Binary GP motion-prior factor between consecutive support states.
pub struct GpPriorFactor {
    bindings: Vec<usize>,
    base: GroupDescriptor,
    prior: GpPriorModel,
    times: (f64, f64),
}

impl GpPriorFactor {
    pub fn new(
        vars: [usize; 2],
        base: GroupDescriptor,
        prior: GpPriorModel,
        times: (f64, f64),
    ) -> Self {
        GpPriorFactor {
            bindings: vars.to_vec(),
            base,
            prior,
            times,
        }
    }
}

impl FactorEval for GpPriorFactor {
    fn dim(&self) -> usize {
        self.base.dof() * self.prior.blocks()
    }

    fn bindings(&self) -> &[usize] {
        &self.bindings
    }

    fn eval(&self, vars: &[&ManifoldElement]) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let b = self.prior.blocks();
        let s_i = gp::state_from_element(&self.base, b, self.times.0, vars[0]);
        let s_j = gp::state_from_element(&self.base, b, self.times.1, vars[1]);
        let r = gp::prior_residual(&self.prior, &s_i, &s_j)?;
        Ok((r.residual, vec![r.j_left, r.j_right]))
    }
}
