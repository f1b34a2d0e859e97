//! Exactly-sparse temporal Gaussian-process trajectories.
//!
//! Support states carry a manifold element plus body-frame derivatives; the
//! evolution between adjacent states follows a white-noise-on-acceleration
//! (WNOA, 'constant-velocity') or white-noise-on-jerk (WNOJ,
//! 'constant-acceleration') LTV-SDE prior. Lie-group states are handled
//! through a local linearization anchored at the left support state of each
//! interval, with global body velocities mapped through `J_r(ξ)` and its
//! stencil-differentiated inverse rate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::manifold::{GroupDescriptor, ManifoldElement, TangentVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    /// White noise on acceleration ('constant velocity'); 2 derivative blocks.
    Wnoa,
    /// White noise on jerk ('constant acceleration'); 3 derivative blocks.
    Wnoj,
}

/// LTV-SDE prior with power-spectral density `qc`.
#[derive(Debug, Clone)]
pub struct GpPriorModel {
    kind: PriorKind,
    qc: DMatrix<f64>,
}

impl GpPriorModel {
    pub fn new(kind: PriorKind, qc: DMatrix<f64>) -> Result<Self> {
        if qc.nrows() != qc.ncols() {
            return Err(Error::InvalidArgument("qc must be square".into()));
        }
        if (&qc - qc.transpose()).amax() > 1e-12 * qc.amax().max(1.0) {
            return Err(Error::InvalidArgument("qc must be symmetric".into()));
        }
        if qc.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument(
                "qc must be positive-definite".into(),
            ));
        }
        Ok(GpPriorModel { kind, qc })
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    /// Number of state blocks (element + derivatives): 2 for WNOA, 3 for WNOJ.
    pub fn blocks(&self) -> usize {
        match self.kind {
            PriorKind::Wnoa => 2,
            PriorKind::Wnoj => 3,
        }
    }

    pub fn qc(&self) -> &DMatrix<f64> {
        &self.qc
    }

    pub fn dof(&self) -> usize {
        self.qc.nrows()
    }

    fn kernel_phi(&self, dt: f64) -> DMatrix<f64> {
        let b = self.blocks();
        let mut f = DMatrix::identity(b, b);
        if b >= 2 {
            f[(0, 1)] = dt;
        }
        if b >= 3 {
            f[(0, 2)] = dt * dt / 2.0;
            f[(1, 2)] = dt;
        }
        f
    }

    pub(crate) fn kernel_q(&self, dt: f64) -> DMatrix<f64> {
        match self.kind {
            PriorKind::Wnoa => {
                DMatrix::from_row_slice(2, 2, &[dt.powi(3) / 3.0, dt * dt / 2.0, dt * dt / 2.0, dt])
            }
            PriorKind::Wnoj => DMatrix::from_row_slice(
                3,
                3,
                &[
                    dt.powi(5) / 20.0,
                    dt.powi(4) / 8.0,
                    dt.powi(3) / 6.0,
                    dt.powi(4) / 8.0,
                    dt.powi(3) / 3.0,
                    dt * dt / 2.0,
                    dt.powi(3) / 6.0,
                    dt * dt / 2.0,
                    dt,
                ],
            ),
        }
    }

    fn kernel_q_inv(&self, dt: f64) -> DMatrix<f64> {
        match self.kind {
            PriorKind::Wnoa => DMatrix::from_row_slice(
                2,
                2,
                &[
                    12.0 * dt.powi(-3),
                    -6.0 * dt.powi(-2),
                    -6.0 * dt.powi(-2),
                    4.0 / dt,
                ],
            ),
            PriorKind::Wnoj => DMatrix::from_row_slice(
                3,
                3,
                &[
                    720.0 * dt.powi(-5),
                    -360.0 * dt.powi(-4),
                    60.0 * dt.powi(-3),
                    -360.0 * dt.powi(-4),
                    192.0 * dt.powi(-3),
                    -36.0 * dt.powi(-2),
                    60.0 * dt.powi(-3),
                    -36.0 * dt.powi(-2),
                    9.0 / dt,
                ],
            ),
        }
    }

    pub(crate) fn kron(&self, kernel: &DMatrix<f64>, block: &DMatrix<f64>) -> DMatrix<f64> {
        let b = kernel.nrows();
        let d = block.nrows();
        let mut out = DMatrix::zeros(b * d, b * d);
        for i in 0..b {
            for j in 0..b {
                if kernel[(i, j)] != 0.0 {
                    out.view_mut((i * d, j * d), (d, d))
                        .copy_from(&(block * kernel[(i, j)]));
                }
            }
        }
        out
    }

    /// State transition matrix `Φ(dt)` (size `B·dof`). Satisfies `Φ(0) = I`
    /// and the semigroup property `Φ(a+b) = Φ(a)Φ(b)`.
    pub fn transition(&self, dt: f64) -> Result<DMatrix<f64>> {
        if dt < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "transition requires dt >= 0, got {dt}"
            )));
        }
        Ok(self.kron(
            &self.kernel_phi(dt),
            &DMatrix::identity(self.dof(), self.dof()),
        ))
    }

    /// Accumulated process-noise covariance `Q(dt) = ∫ Φ L Q_C Lᵀ Φᵀ`.
    pub fn process_noise(&self, dt: f64) -> Result<DMatrix<f64>> {
        if dt <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "process noise is singular for dt <= 0, got {dt}"
            )));
        }
        Ok(self.kron(&self.kernel_q(dt), &self.qc))
    }

    /// Closed-form inverse of [`Self::process_noise`].
    pub fn process_noise_inv(&self, dt: f64) -> Result<DMatrix<f64>> {
        if dt <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "process noise is singular for dt <= 0, got {dt}"
            )));
        }
        let qc_inv = self
            .qc
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("qc not positive-definite".into()))?
            .inverse();
        Ok(self.kron(&self.kernel_q_inv(dt), &qc_inv))
    }

    /// Scalar `B×B` interpolation kernels; `Λ` and `Ψ` are these kernels
    /// Kronecker-extended by `I_dof` (the `Q_C` factors cancel in `Ψ`).
    pub fn kernel_lambda_psi(
        &self,
        t_i: f64,
        t_ip1: f64,
        t: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if !(t >= t_i && t < t_ip1) {
            return Err(Error::OutOfDomain {
                t,
                start: t_i,
                end: t_ip1,
            });
        }
        let tau = t - t_i;
        let b = self.blocks();
        if tau == 0.0 {
            return Ok((DMatrix::identity(b, b), DMatrix::zeros(b, b)));
        }
        let rhs = (self.kernel_q(tau) * self.kernel_phi(t_ip1 - t).transpose()).transpose();
        let chol = self.kernel_q(t_ip1 - t_i).cholesky().ok_or_else(|| {
            Error::InvalidArgument("process-noise kernel not positive-definite".into())
        })?;
        let psi = chol.solve(&rhs).transpose();
        let lambda = self.kernel_phi(tau) - &psi * self.kernel_phi(t_ip1 - t_i);
        Ok((lambda, psi))
    }

    /// Posterior interpolation weights for `t ∈ [t_i, t_{i+1})`:
    /// `Ψ = Q(t−t_i) Φ(t_{i+1}−t)ᵀ Q(Δt)⁻¹` and `Λ = Φ(t−t_i) − Ψ Φ(Δt)`.
    pub fn lambda_psi(&self, t_i: f64, t_ip1: f64, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if !(t >= t_i && t < t_ip1) {
            return Err(Error::OutOfDomain {
                t,
                start: t_i,
                end: t_ip1,
            });
        }
        let tau = t - t_i;
        let n = self.blocks() * self.dof();
        if tau == 0.0 {
            return Ok((DMatrix::identity(n, n), DMatrix::zeros(n, n)));
        }
        let q_tau = self.process_noise(tau)?;
        let phi_rest_t = self.transition(t_ip1 - t)?.transpose();
        let q_full = self.process_noise(t_ip1 - t_i)?;
        // Solve Ψ Q(Δt) = Q(τ) Φ(t_{i+1}−t)ᵀ against the SPD Q rather than
        // forming Q⁻¹, for robustness at small Δt.
        let rhs = (q_tau * phi_rest_t).transpose();
        let chol = q_full
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("process noise not positive-definite".into()))?;
        let psi = chol.solve(&rhs).transpose();
        let lambda = self.transition(tau)? - &psi * self.transition(t_ip1 - t_i)?;
        Ok((lambda, psi))
    }
}

/// Explicitly estimated Markov state: element plus body-frame derivatives.
#[derive(Debug, Clone)]
pub struct SupportState {
    pub time: f64,
    pub element: ManifoldElement,
    /// Velocity, then (for WNOJ) acceleration; each of length `dof`.
    pub derivatives: Vec<TangentVector>,
}

impl SupportState {
    pub fn new(time: f64, element: ManifoldElement, derivatives: Vec<TangentVector>) -> Self {
        SupportState {
            time,
            element,
            derivatives,
        }
    }

    pub fn velocity(&self) -> &TangentVector {
        &self.derivatives[0]
    }

    pub fn acceleration(&self) -> Option<&TangentVector> {
        self.derivatives.get(1)
    }
}

/// Descriptor of the composite optimization variable for one support state:
/// the base group times one vector-space block per derivative.
pub fn state_descriptor(base: &GroupDescriptor, blocks: usize) -> GroupDescriptor {
    let d = base.dof();
    let mut parts = vec![base.clone()];
    for _ in 1..blocks {
        parts.push(GroupDescriptor::VectorSpace(d));
    }
    GroupDescriptor::Product(parts)
}

/// Packs a support state into a composite-variable element.
pub fn state_to_element(s: &SupportState, blocks: usize) -> ManifoldElement {
    let desc = state_descriptor(&s.element.descriptor, blocks);
    let d = s.element.descriptor.dof();
    let amb = s.element.descriptor.ambient_dim();
    let mut data = DVector::zeros(amb + (blocks - 1) * d);
    data.rows_mut(0, amb).copy_from(&s.element.data);
    for (b, dv) in s.derivatives.iter().enumerate() {
        data.rows_mut(amb + b * d, d).copy_from(&dv.data);
    }
    ManifoldElement {
        descriptor: desc,
        data,
    }
}

/// Unpacks a composite-variable element into a support state.
pub fn state_from_element(
    base: &GroupDescriptor,
    blocks: usize,
    time: f64,
    e: &ManifoldElement,
) -> SupportState {
    let d = base.dof();
    let amb = base.ambient_dim();
    let element = ManifoldElement {
        descriptor: base.clone(),
        data: e.data.rows(0, amb).into_owned(),
    };
    let derivatives = (0..blocks - 1)
        .map(|b| TangentVector {
            descriptor: GroupDescriptor::VectorSpace(d),
            data: e.data.rows(amb + b * d, d).into_owned(),
        })
        .collect();
    SupportState {
        time,
        element,
        derivatives,
    }
}

/// Maps a global state into the local chart anchored at `s_ref`, stacking
/// `[ξ; ξ̇; (ξ̈)]`.
pub fn local_from_global(
    s_ref: &SupportState,
    s: &SupportState,
    blocks: usize,
) -> Result<DVector<f64>> {
    let desc = &s_ref.element.descriptor;
    if desc != &s.element.descriptor {
        return Err(Error::DescriptorMismatch {
            expected: format!("{desc:?}"),
            got: format!("{:?}", s.element.descriptor),
        });
    }
    let d = desc.dof();
    let xi = s.element.boxminus(&s_ref.element)?;
    let jr_inv = desc.right_jacobian_inv(&xi);
    let mut out = DVector::zeros(blocks * d);
    out.rows_mut(0, d).copy_from(&xi.data);
    let xi_dot = &jr_inv * &s.derivatives[0].data;
    out.rows_mut(d, d).copy_from(&xi_dot);
    if blocks >= 3 {
        let xi_dot_t = TangentVector {
            descriptor: desc.clone(),
            data: xi_dot.clone(),
        };
        let djr = desc.djr_inv_dt(&xi, &xi_dot_t);
        let xi_ddot = &djr * &s.derivatives[0].data + &jr_inv * &s.derivatives[1].data;
        out.rows_mut(2 * d, d).copy_from(&xi_ddot);
    }
    Ok(out)
}

/// Inverse of [`local_from_global`].
pub fn global_from_local(
    s_ref: &SupportState,
    local: &DVector<f64>,
    blocks: usize,
    time: f64,
) -> Result<SupportState> {
    let desc = s_ref.element.descriptor.clone();
    let d = desc.dof();
    if local.len() != blocks * d {
        return Err(Error::DimensionMismatch {
            expected: blocks * d,
            got: local.len(),
        });
    }
    let xi = TangentVector {
        descriptor: desc.clone(),
        data: local.rows(0, d).into_owned(),
    };
    let element = s_ref.element.boxplus(&xi)?;
    let jr = desc.right_jacobian(&xi);
    let vel = &jr * local.rows(d, d);
    let mut derivatives = vec![TangentVector {
        descriptor: GroupDescriptor::VectorSpace(d),
        data: vel.clone(),
    }];
    if blocks >= 3 {
        let xi_dot = TangentVector {
            descriptor: desc.clone(),
            data: local.rows(d, d).into_owned(),
        };
        let djr = desc.djr_inv_dt(&xi, &xi_dot);
        let acc = &jr * (local.rows(2 * d, d) - &djr * &vel);
        derivatives.push(TangentVector {
            descriptor: GroupDescriptor::VectorSpace(d),
            data: acc,
        });
    }
    Ok(SupportState {
        time,
        element,
        derivatives,
    })
}

/// Result of a motion-prior residual evaluation.
pub struct PriorResidual {
    pub residual: DVector<f64>,
    /// Jacobian with respect to the stacked tangent of the left state.
    pub j_left: DMatrix<f64>,
    /// Jacobian with respect to the stacked tangent of the right state.
    pub j_right: DMatrix<f64>,
}

/// Motion-prior residual between consecutive support states.
///
/// In a vector space this is `Φ(Δt)·x_i − x_{i+1}`; on a Lie group the local
/// chart anchored at `s_i` is used, which for WNOA reduces to
/// `(Δt·ẋ_i − ξ, ẋ_i − J_r(ξ)⁻¹ ẋ_{i+1})` with `ξ = x_{i+1} ⊖ x_i`.
pub fn prior_residual(
    prior: &GpPriorModel,
    s_i: &SupportState,
    s_ip1: &SupportState,
) -> Result<PriorResidual> {
    if s_ip1.time <= s_i.time {
        return Err(Error::InvalidArgument(format!(
            "support times must increase: {} then {}",
            s_i.time, s_ip1.time
        )));
    }
    let desc = s_i.element.descriptor.clone();
    let d = desc.dof();
    let b = prior.blocks();
    let n = b * d;
    let dt = s_ip1.time - s_i.time;

    let xi = s_ip1.element.boxminus(&s_i.element)?;
    let neg_xi = TangentVector {
        descriptor: desc.clone(),
        data: -&xi.data,
    };
    let g_left = -desc.right_jacobian_inv(&neg_xi);
    let g_right = desc.right_jacobian_inv(&xi);
    let a = desc.right_jacobian_inv(&xi); // same as g_right; alias for clarity

    let v_i = &s_i.derivatives[0].data;
    let v_j = &s_ip1.derivatives[0].data;

    let mut e = DVector::zeros(n);
    let mut j_left = DMatrix::zeros(n, n);
    let mut j_right = DMatrix::zeros(n, n);

    // e1 = Δt·v_i (+ Δt²/2·a_i) − ξ
    let mut e1 = v_i * dt - &xi.data;
    if b >= 3 {
        e1 += &s_i.derivatives[1].data * (dt * dt / 2.0);
    }
    e.rows_mut(0, d).copy_from(&e1);
    j_left.view_mut((0, 0), (d, d)).copy_from(&(-&g_left));
    j_left
        .view_mut((0, d), (d, d))
        .copy_from(&(DMatrix::identity(d, d) * dt));
    if b >= 3 {
        j_left
            .view_mut((0, 2 * d), (d, d))
            .copy_from(&(DMatrix::identity(d, d) * (dt * dt / 2.0)));
    }
    j_right.view_mut((0, 0), (d, d)).copy_from(&(-&g_right));

    // e2 = v_i (+ Δt·a_i) − A·v_{i+1}
    let p_av = desc.jrinv_times_dtau(&xi, v_j);
    let mut e2 = v_i - &a * v_j;
    if b >= 3 {
        e2 += &s_i.derivatives[1].data * dt;
    }
    e.rows_mut(d, d).copy_from(&e2);
    j_left
        .view_mut((d, 0), (d, d))
        .copy_from(&(-&p_av * &g_left));
    j_left
        .view_mut((d, d), (d, d))
        .copy_from(&DMatrix::identity(d, d));
    if b >= 3 {
        j_left
            .view_mut((d, 2 * d), (d, d))
            .copy_from(&(DMatrix::identity(d, d) * dt));
    }
    j_right
        .view_mut((d, 0), (d, d))
        .copy_from(&(-&p_av * &g_right));
    j_right.view_mut((d, d), (d, d)).copy_from(&(-&a));

    if b >= 3 {
        // e3 = a_i − D·v_{i+1} − A·a_{i+1}
        let a_j = &s_ip1.derivatives[1].data;
        let xi_dot = TangentVector {
            descriptor: desc.clone(),
            data: &a * v_j,
        };
        let dmat = desc.djr_inv_dt(&xi, &xi_dot);
        let (dm_tau, dm_dot) = desc.djr_inv_dt_partials(&xi, &xi_dot, v_j);
        let p_aa = desc.jrinv_times_dtau(&xi, a_j);

        let e3 = &s_i.derivatives[1].data - &dmat * v_j - &a * a_j;
        e.rows_mut(2 * d, d).copy_from(&e3);

        let via_xi = dm_tau + &dm_dot * &p_av + p_aa;
        j_left
            .view_mut((2 * d, 0), (d, d))
            .copy_from(&(-&via_xi * &g_left));
        j_left
            .view_mut((2 * d, 2 * d), (d, d))
            .copy_from(&DMatrix::identity(d, d));
        j_right
            .view_mut((2 * d, 0), (d, d))
            .copy_from(&(-&via_xi * &g_right));
        j_right
            .view_mut((2 * d, d), (d, d))
            .copy_from(&(-(&dmat + &dm_dot * &a)));
        j_right.view_mut((2 * d, 2 * d), (d, d)).copy_from(&(-&a));
    }

    Ok(PriorResidual {
        residual: e,
        j_left,
        j_right,
    })
}

/// Ordered support states with a shared prior model.
#[derive(Debug, Clone)]
pub struct GpTrajectory {
    descriptor: GroupDescriptor,
    prior: GpPriorModel,
    states: Vec<SupportState>,
}

impl GpTrajectory {
    pub fn new(
        descriptor: GroupDescriptor,
        prior: GpPriorModel,
        states: Vec<SupportState>,
    ) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::InvalidArgument(
                "a GP trajectory needs at least 2 support states".into(),
            ));
        }
        if prior.dof() != descriptor.dof() {
            return Err(Error::DimensionMismatch {
                expected: descriptor.dof(),
                got: prior.dof(),
            });
        }
        for w in states.windows(2) {
            if w[1].time <= w[0].time {
                return Err(Error::InvalidArgument(
                    "support times must be strictly increasing".into(),
                ));
            }
        }
        for s in &states {
            if s.element.descriptor != descriptor {
                return Err(Error::DescriptorMismatch {
                    expected: format!("{descriptor:?}"),
                    got: format!("{:?}", s.element.descriptor),
                });
            }
            if s.derivatives.len() != prior.blocks() - 1 {
                return Err(Error::DimensionMismatch {
                    expected: prior.blocks() - 1,
                    got: s.derivatives.len(),
                });
            }
        }
        Ok(GpTrajectory {
            descriptor,
            prior,
            states,
        })
    }

    pub fn descriptor(&self) -> &GroupDescriptor {
        &self.descriptor
    }

    pub fn prior(&self) -> &GpPriorModel {
        &self.prior
    }

    pub fn states(&self) -> &[SupportState] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [SupportState] {
        &mut self.states
    }

    /// Closed time domain `[t_first, t_last]`; queries at the final support
    /// time return that state.
    pub fn domain(&self) -> (f64, f64) {
        (self.states[0].time, self.states[self.states.len() - 1].time)
    }

    /// Left index of the support pair whose joint covariance
    /// [`Self::interpolate_covariance`] expects for a query at `t`; exact
    /// support times use the pair starting there (or ending there, for the
    /// final state).
    pub fn bracketing_pair(&self, t: f64) -> Result<usize> {
        Ok(match self.locate(t)? {
            Location::Between(i) => i,
            Location::At(j) => j.min(self.states.len() - 2),
        })
    }

    /// Locates `t`: either exactly a support state or a bracketing interval.
    pub fn locate(&self, t: f64) -> Result<Location> {
        let (start, end) = self.domain();
        if !(t >= start && t <= end) {
            return Err(Error::OutOfDomain { t, start, end });
        }
        let times: Vec<f64> = self.states.iter().map(|s| s.time).collect();
        let j = times.partition_point(|&x| x <= t) - 1;
        if times[j] == t {
            return Ok(Location::At(j));
        }
        Ok(Location::Between(j))
    }

    /// Posterior-mean interpolation. Support times reproduce the stored state.
    pub fn interpolate_mean(&self, t: f64) -> Result<SupportState> {
        match self.locate(t)? {
            Location::At(j) => Ok(self.states[j].clone()),
            Location::Between(i) => {
                let interp =
                    GpInterp::new(&self.prior, &self.states[i], &self.states[i + 1], t, i)?;
                interp.mean(&self.states[i], &self.states[i + 1])
            }
        }
    }

    /// Posterior-covariance interpolation from the joint covariance of the
    /// bracketing support states (size `2B·dof`, symmetric).
    pub fn interpolate_covariance(
        &self,
        t: f64,
        posterior_blocks: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        let n = self.prior.blocks() * self.descriptor.dof();
        if posterior_blocks.nrows() != 2 * n || posterior_blocks.ncols() != 2 * n {
            return Err(Error::DimensionMismatch {
                expected: 2 * n,
                got: posterior_blocks.nrows(),
            });
        }
        if (posterior_blocks - posterior_blocks.transpose()).amax()
            > 1e-9 * posterior_blocks.amax().max(1.0)
        {
            return Err(Error::InvalidArgument(
                "posterior blocks must be symmetric".into(),
            ));
        }
        match self.locate(t)? {
            Location::At(j) => {
                // exact support time: the corresponding diagonal block of the
                // left-biased bracketing pair (see [`Self::bracketing_pair`])
                let off = if j + 1 < self.states.len() { 0 } else { n };
                Ok(posterior_blocks.view((off, off), (n, n)).into_owned())
            }
            Location::Between(i) => {
                let interp =
                    GpInterp::new(&self.prior, &self.states[i], &self.states[i + 1], t, i)?;
                let (_, j_left, j_right, g) =
                    interp.mean_with_jacobians(&self.states[i], &self.states[i + 1])?;
                let mut f = DMatrix::zeros(n, 2 * n);
                f.view_mut((0, 0), (n, n)).copy_from(&j_left);
                f.view_mut((0, n), (n, n)).copy_from(&j_right);
                let p = &f * posterior_blocks * f.transpose() + &g * &interp.noise * g.transpose();
                // symmetrize against roundoff
                Ok((&p + p.transpose()) * 0.5)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    /// Exactly at support state `i`.
    At(usize),
    /// Strictly inside `(t_i, t_{i+1})`.
    Between(usize),
}

/// Cached interpolation weights for one query time inside one interval.
///
/// `Λ` and `Ψ` depend only on the support times and the prior, so they are
/// computed once per stamp and reused across solver iterations.
#[derive(Debug, Clone)]
pub struct GpInterp {
    pub left: usize,
    pub t: f64,
    pub lambda: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    /// Scalar `B×B` versions of `lambda` / `psi`.
    pub lambda_k: DMatrix<f64>,
    pub psi_k: DMatrix<f64>,
    /// Interpolation noise `Q(t−t_i) − Ψ Q(Δt) Ψᵀ`.
    pub noise: DMatrix<f64>,
}

impl GpInterp {
    pub fn new(
        prior: &GpPriorModel,
        s_i: &SupportState,
        s_ip1: &SupportState,
        t: f64,
        left: usize,
    ) -> Result<Self> {
        let (lambda_k, psi_k) = prior.kernel_lambda_psi(s_i.time, s_ip1.time, t)?;
        // Λ and Ψ are the kernels Kronecker-extended by the identity, and the
        // Q_C factor re-enters only in the noise term.
        let d = prior.dof();
        let expand = |k: &DMatrix<f64>| {
            let b = k.nrows();
            let mut out = DMatrix::zeros(b * d, b * d);
            for i in 0..b {
                for j in 0..b {
                    let w = k[(i, j)];
                    if w != 0.0 {
                        for r in 0..d {
                            out[(i * d + r, j * d + r)] = w;
                        }
                    }
                }
            }
            out
        };
        let lambda = expand(&lambda_k);
        let psi = expand(&psi_k);
        let noise = if t == s_i.time {
            DMatrix::zeros(lambda.nrows(), lambda.ncols())
        } else {
            let kq_tau = prior.kernel_q(t - s_i.time);
            let kq_full = prior.kernel_q(s_ip1.time - s_i.time);
            let kw = &kq_tau - &psi_k * kq_full * psi_k.transpose();
            let kw = (&kw + kw.transpose()) * 0.5;
            prior.kron(&kw, prior.qc())
        };
        Ok(GpInterp {
            left,
            t,
            lambda,
            psi,
            lambda_k,
            psi_k,
            noise,
        })
    }

    fn blocks(&self, dof: usize) -> usize {
        self.lambda.nrows() / dof
    }

    /// Interpolated local state `Ξ(t) = Λ Ξ(t_i) + Ψ Ξ(t_{i+1})`, mapped back
    /// to a global support state.
    pub fn mean(&self, s_i: &SupportState, s_ip1: &SupportState) -> Result<SupportState> {
        if s_i.element.descriptor == GroupDescriptor::Se2 {
            let b = self.blocks(3);
            let (l, r) = (pack_se2(s_i, b), pack_se2(s_ip1, b));
            let p = se2_chain::mean(self, b, &l[..3 * b], &r[..3 * b]);
            return Ok(unpack_se2(&p, b, self.t));
        }
        self.mean_generic(s_i, s_ip1)
    }

    /// Generic-descriptor implementation of [`Self::mean`].
    pub fn mean_generic(&self, s_i: &SupportState, s_ip1: &SupportState) -> Result<SupportState> {
        let desc = &s_i.element.descriptor;
        let d = desc.dof();
        let b = self.blocks(d);
        let xi_i = local_at_reference(s_i, b);
        let xi_j = local_from_global(s_i, s_ip1, b)?;
        let xi_t = &self.lambda * xi_i + &self.psi * xi_j;
        global_from_local(s_i, &xi_t, b, self.t)
    }

    /// Mean plus Jacobians of the stacked output `[pose; v; (a)]` with respect
    /// to the stacked tangents of both support states, and the output-map
    /// Jacobian `G = ∂output/∂Ξ(t)` used for covariance interpolation.
    pub fn mean_with_jacobians(
        &self,
        s_i: &SupportState,
        s_ip1: &SupportState,
    ) -> Result<(SupportState, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        if s_i.element.descriptor == GroupDescriptor::Se2 {
            let b = self.blocks(3);
            let (l, r) = (pack_se2(s_i, b), pack_se2(s_ip1, b));
            let (p, jl, jr, g) = se2_chain::mean_with_jacobians(self, b, &l[..3 * b], &r[..3 * b]);
            return Ok((unpack_se2(&p, b, self.t), jl, jr, g));
        }
        self.mean_with_jacobians_generic(s_i, s_ip1)
    }

    /// Generic-descriptor implementation of [`Self::mean_with_jacobians`].
    pub fn mean_with_jacobians_generic(
        &self,
        s_i: &SupportState,
        s_ip1: &SupportState,
    ) -> Result<(SupportState, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let desc = s_i.element.descriptor.clone();
        let d = desc.dof();
        let b = self.blocks(d);
        let n = b * d;

        // --- local states and their Jacobians ---
        let xi_i = local_at_reference(s_i, b);
        let xi_j = local_from_global(s_i, s_ip1, b)?;

        // Ξ(t_i) = [0; v_i; a_i]: sensitivity is identity on derivative blocks.
        let mut dxi_i_dleft = DMatrix::zeros(n, n);
        for r in d..n {
            dxi_i_dleft[(r, r)] = 1.0;
        }

        // Ξ(t_{i+1}) pieces (shared with the prior residual).
        let xi = s_ip1.element.boxminus(&s_i.element)?;
        let neg_xi = TangentVector {
            descriptor: desc.clone(),
            data: -&xi.data,
        };
        let g_left = -desc.right_jacobian_inv(&neg_xi);
        let g_right = desc.right_jacobian_inv(&xi);
        let a = desc.right_jacobian_inv(&xi);
        let v_j = &s_ip1.derivatives[0].data;
        let p_av = desc.jrinv_times_dtau(&xi, v_j);

        let mut dxi_j_dleft = DMatrix::zeros(n, n);
        let mut dxi_j_dright = DMatrix::zeros(n, n);
        dxi_j_dleft.view_mut((0, 0), (d, d)).copy_from(&g_left);
        dxi_j_dright.view_mut((0, 0), (d, d)).copy_from(&g_right);
        dxi_j_dleft
            .view_mut((d, 0), (d, d))
            .copy_from(&(&p_av * &g_left));
        dxi_j_dright
            .view_mut((d, 0), (d, d))
            .copy_from(&(&p_av * &g_right));
        dxi_j_dright.view_mut((d, d), (d, d)).copy_from(&a);
        if b >= 3 {
            let a_j = &s_ip1.derivatives[1].data;
            let xi_dot = TangentVector {
                descriptor: desc.clone(),
                data: &a * v_j,
            };
            let dmat = desc.djr_inv_dt(&xi, &xi_dot);
            let (dm_tau, dm_dot) = desc.djr_inv_dt_partials(&xi, &xi_dot, v_j);
            let p_aa = desc.jrinv_times_dtau(&xi, a_j);
            let via_xi = dm_tau + &dm_dot * &p_av + p_aa;
            dxi_j_dleft
                .view_mut((2 * d, 0), (d, d))
                .copy_from(&(&via_xi * &g_left));
            dxi_j_dright
                .view_mut((2 * d, 0), (d, d))
                .copy_from(&(&via_xi * &g_right));
            dxi_j_dright
                .view_mut((2 * d, d), (d, d))
                .copy_from(&(&dmat + &dm_dot * &a));
            dxi_j_dright.view_mut((2 * d, 2 * d), (d, d)).copy_from(&a);
        }

        // --- interpolate the local state ---
        let xi_t = &self.lambda * &xi_i + &self.psi * &xi_j;
        let dxi_t_dleft = &self.lambda * dxi_i_dleft + &self.psi * &dxi_j_dleft;
        let dxi_t_dright = &self.psi * &dxi_j_dright;

        // --- map back to a global state, with output-map Jacobian G ---
        let out = global_from_local(s_i, &xi_t, b, self.t)?;
        let xi_out = TangentVector {
            descriptor: desc.clone(),
            data: xi_t.rows(0, d).into_owned(),
        };
        let xi_dot_out = TangentVector {
            descriptor: desc.clone(),
            data: xi_t.rows(d, d).into_owned(),
        };
        let jr = desc.right_jacobian(&xi_out);

        let mut g = DMatrix::zeros(n, n);
        g.view_mut((0, 0), (d, d)).copy_from(&jr);
        g.view_mut((d, 0), (d, d))
            .copy_from(&desc.jr_times_dtau(&xi_out, &xi_dot_out.data));
        g.view_mut((d, d), (d, d)).copy_from(&jr);
        if b >= 3 {
            let vel = &out.derivatives[0].data;
            let d2 = desc.djr_inv_dt(&xi_out, &xi_dot_out);
            let inner = xi_t.rows(2 * d, d) - &d2 * vel;
            let (e_tau, e_dot) = desc.djr_inv_dt_partials(&xi_out, &xi_dot_out, vel);
            let g_acc_xi = desc.jr_times_dtau(&xi_out, &inner.clone_owned())
                - &jr * (&e_tau + &d2 * desc.jr_times_dtau(&xi_out, &xi_dot_out.data));
            let g_acc_xidot = -&jr * (&e_dot + &d2 * &jr);
            g.view_mut((2 * d, 0), (d, d)).copy_from(&g_acc_xi);
            g.view_mut((2 * d, d), (d, d)).copy_from(&g_acc_xidot);
            g.view_mut((2 * d, 2 * d), (d, d)).copy_from(&jr);
        }

        let mut j_left = &g * dxi_t_dleft;
        let j_right = &g * dxi_t_dright;
        // direct dependence of x(t) = x_i ⊕ ξ(t) on the reference pose
        let ad = desc.adjoint(&desc.exp(&xi_out)?.inverse());
        for r in 0..d {
            for c in 0..d {
                j_left[(r, c)] += ad[(r, c)];
            }
        }

        Ok((out, j_left, j_right, g))
    }
}

/// SE(2)-specialized interpolation on stack-allocated 3×3 blocks.
///
/// `Λ` and `Ψ` act as scalar kernels per Kronecker structure, so the chain
/// never forms `B·d`-sized products. States are packed `[pose, vel, (acc)]`.
/// Must agree with the generic [`GpInterp::mean_with_jacobians`] path, which
/// the test suite enforces.
pub mod se2_chain {
    use super::GpInterp;
    use crate::manifold::se2;
    use nalgebra::{DMatrix, Matrix3, Vector3};

    pub struct Se2Point {
        pub pose: [f64; 3],
        pub blocks: [Vector3<f64>; 3],
    }

    fn local_states(
        b: usize,
        left: &[f64],
        right: &[f64],
    ) -> ([Vector3<f64>; 3], [Vector3<f64>; 3], [f64; 3], Matrix3<f64>) {
        let v = |s: &[f64], k: usize| Vector3::new(s[3 * k], s[3 * k + 1], s[3 * k + 2]);
        let mut xi_i = [Vector3::zeros(); 3];
        for k in 1..b {
            xi_i[k] = v(left, k);
        }

        let mut inv_l = [0.0; 3];
        let mut rel = [0.0; 3];
        se2::inverse(&left[0..3], &mut inv_l);
        se2::compose(&inv_l, &right[0..3], &mut rel);
        let mut xi = [0.0; 3];
        se2::log(&rel, &mut xi);
        let jr_inv = se2::jr_inv(&xi);

        let mut xi_j = [Vector3::zeros(); 3];
        xi_j[0] = Vector3::new(xi[0], xi[1], xi[2]);
        xi_j[1] = jr_inv * v(right, 1);
        if b >= 3 {
            let xi_dot = [xi_j[1].x, xi_j[1].y, xi_j[1].z];
            let d = se2::djr_inv_dt(&xi, &xi_dot);
            xi_j[2] = d * v(right, 1) + jr_inv * v(right, 2);
        }
        (xi_i, xi_j, xi, jr_inv)
    }

    fn interpolate(
        interp: &GpInterp,
        b: usize,
        xi_i: &[Vector3<f64>; 3],
        xi_j: &[Vector3<f64>; 3],
    ) -> [Vector3<f64>; 3] {
        let mut xi_t = [Vector3::zeros(); 3];
        for r in 0..b {
            let mut acc = Vector3::zeros();
            for c in 0..b {
                acc += xi_i[c] * interp.lambda_k[(r, c)] + xi_j[c] * interp.psi_k[(r, c)];
            }
            xi_t[r] = acc;
        }
        xi_t
    }

    fn outputs(
        b: usize,
        left: &[f64],
        xi_t: &[Vector3<f64>; 3],
    ) -> (Se2Point, Matrix3<f64>, [f64; 3]) {
        let xi0 = [xi_t[0].x, xi_t[0].y, xi_t[0].z];
        let mut step = [0.0; 3];
        se2::exp(&xi0, &mut step);
        let mut pose = [0.0; 3];
        se2::compose(&left[0..3], &step, &mut pose);
        let jr_t = se2::jr(&xi0);

        let mut blocks = [Vector3::zeros(); 3];
        blocks[1] = jr_t * xi_t[1];
        if b >= 3 {
            let xi_dot = [xi_t[1].x, xi_t[1].y, xi_t[1].z];
            let d2 = se2::djr_inv_dt(&xi0, &xi_dot);
            blocks[2] = jr_t * (xi_t[2] - d2 * blocks[1]);
        }
        (Se2Point { pose, blocks }, jr_t, xi0)
    }

    /// Interpolated point without Jacobians (cost evaluations).
    pub fn mean(interp: &GpInterp, b: usize, left: &[f64], right: &[f64]) -> Se2Point {
        let (xi_i, xi_j, _, _) = local_states(b, left, right);
        let xi_t = interpolate(interp, b, &xi_i, &xi_j);
        outputs(b, left, &xi_t).0
    }

    /// Interpolated point with stacked Jacobians (rows `[pose; vel; (acc)]`)
    /// per side, and the output-map Jacobian `G` for covariance propagation.
    pub fn mean_with_jacobians(
        interp: &GpInterp,
        b: usize,
        left: &[f64],
        right: &[f64],
    ) -> (Se2Point, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (xi_i, xi_j, xi, jr_inv) = local_states(b, left, right);
        let v = |s: &[f64], k: usize| Vector3::new(s[3 * k], s[3 * k + 1], s[3 * k + 2]);

        // sensitivities of the right local state
        let neg_xi = [-xi[0], -xi[1], -xi[2]];
        let g_left = -se2::jr_inv(&neg_xi);
        let g_right = jr_inv;
        let v_j = v(right, 1);
        let p_av = se2::jrinv_times_dtau(&xi, &[v_j.x, v_j.y, v_j.z]);

        // per-block pose sensitivity of Ξ_{i+1}, shared shape across sides
        let mut pose_sens = [Matrix3::zeros(); 3];
        pose_sens[0] = Matrix3::identity();
        pose_sens[1] = p_av;
        let mut dxi_j_right_vel = [Matrix3::zeros(); 3];
        dxi_j_right_vel[1] = jr_inv;
        let mut dxi_j_right_acc = [Matrix3::zeros(); 3];
        let mut d_big = Matrix3::zeros();
        if b >= 3 {
            let xi_dot = xi_j[1];
            let xd = [xi_dot.x, xi_dot.y, xi_dot.z];
            d_big = se2::djr_inv_dt(&xi, &xd);
            let (dm_tau, dm_dot) = se2::djr_inv_dt_partials(&xi, &xd, &[v_j.x, v_j.y, v_j.z]);
            let a_j = v(right, 2);
            let p_aa = se2::jrinv_times_dtau(&xi, &[a_j.x, a_j.y, a_j.z]);
            pose_sens[2] = dm_tau + dm_dot * p_av + p_aa;
            dxi_j_right_vel[2] = d_big + dm_dot * jr_inv;
            dxi_j_right_acc[2] = jr_inv;
        }

        let xi_t = interpolate(interp, b, &xi_i, &xi_j);

        // dΞ(t)/d(side) as b×b grids of 3×3 blocks
        let mut dt_left = [[Matrix3::zeros(); 3]; 3];
        let mut dt_right = [[Matrix3::zeros(); 3]; 3];
        for r in 0..b {
            for bp in 0..b {
                let w = interp.psi_k[(r, bp)];
                if w != 0.0 {
                    dt_left[r][0] += pose_sens[bp] * g_left * w;
                    dt_right[r][0] += pose_sens[bp] * g_right * w;
                    dt_right[r][1] += dxi_j_right_vel[bp] * w;
                    if b >= 3 {
                        dt_right[r][2] += dxi_j_right_acc[bp] * w;
                    }
                }
            }
            // Ξ(t_i) contributes identity on its derivative blocks
            for c in 1..b {
                let w = interp.lambda_k[(r, c)];
                if w != 0.0 {
                    dt_left[r][c] += Matrix3::identity() * w;
                }
            }
        }

        let (point, jr_t, xi0) = outputs(b, left, &xi_t);

        // output-map blocks G[r][c] = ∂out_r/∂Ξ(t)_c
        let mut g = [[Matrix3::zeros(); 3]; 3];
        g[0][0] = jr_t;
        let xt1 = [xi_t[1].x, xi_t[1].y, xi_t[1].z];
        g[1][0] = se2::jr_times_dtau(&xi0, &xt1);
        g[1][1] = jr_t;
        if b >= 3 {
            let vel = point.blocks[1];
            let d2 = se2::djr_inv_dt(&xi0, &xt1);
            let inner = xi_t[2] - d2 * vel;
            let (e_tau, e_dot) = se2::djr_inv_dt_partials(&xi0, &xt1, &[vel.x, vel.y, vel.z]);
            g[2][0] = se2::jr_times_dtau(&xi0, &[inner.x, inner.y, inner.z])
                - jr_t * (e_tau + d2 * se2::jr_times_dtau(&xi0, &xt1));
            g[2][1] = -jr_t * (e_dot + d2 * jr_t);
            g[2][2] = jr_t;
        }
        let _ = d_big;

        // compose and pack
        let n = 3 * b;
        let mut j_left = DMatrix::zeros(n, n);
        let mut j_right = DMatrix::zeros(n, n);
        let mut g_out = DMatrix::zeros(n, n);
        let mut step_inv = [0.0; 3];
        let mut step = [0.0; 3];
        se2::exp(&xi0, &mut step);
        se2::inverse(&step, &mut step_inv);
        let ad = se2::adjoint(&step_inv);
        for r in 0..b {
            for c in 0..b {
                let mut bl = Matrix3::zeros();
                let mut br = Matrix3::zeros();
                for k in 0..b {
                    bl += g[r][k] * dt_left[k][c];
                    br += g[r][k] * dt_right[k][c];
                }
                if r == 0 && c == 0 {
                    bl += ad;
                }
                for rr in 0..3 {
                    for cc in 0..3 {
                        j_left[(3 * r + rr, 3 * c + cc)] = bl[(rr, cc)];
                        j_right[(3 * r + rr, 3 * c + cc)] = br[(rr, cc)];
                        g_out[(3 * r + rr, 3 * c + cc)] = g[r][c][(rr, cc)];
                    }
                }
            }
        }
        (point, j_left, j_right, g_out)
    }
}

fn pack_se2(s: &SupportState, blocks: usize) -> [f64; 9] {
    let mut out = [0.0; 9];
    out[..3].copy_from_slice(s.element.data.as_slice());
    for (k, dv) in s.derivatives.iter().take(blocks - 1).enumerate() {
        out[3 + 3 * k..6 + 3 * k].copy_from_slice(dv.data.as_slice());
    }
    out
}

fn unpack_se2(p: &se2_chain::Se2Point, blocks: usize, time: f64) -> SupportState {
    let derivatives = (1..blocks)
        .map(|k| TangentVector {
            descriptor: GroupDescriptor::VectorSpace(3),
            data: DVector::from_column_slice(&[p.blocks[k].x, p.blocks[k].y, p.blocks[k].z]),
        })
        .collect();
    SupportState {
        time,
        element: ManifoldElement {
            descriptor: GroupDescriptor::Se2,
            data: DVector::from_column_slice(&p.pose),
        },
        derivatives,
    }
}

/// Local state at the reference itself: `[0; v; (a)]`.
fn local_at_reference(s: &SupportState, blocks: usize) -> DVector<f64> {
    let d = s.element.descriptor.dof();
    let mut out = DVector::zeros(blocks * d);
    out.rows_mut(d, d).copy_from(&s.derivatives[0].data);
    if blocks >= 3 {
        out.rows_mut(2 * d, d).copy_from(&s.derivatives[1].data);
    }
    out
}
