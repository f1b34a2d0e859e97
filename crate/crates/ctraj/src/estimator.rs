//! Backend assembly: builds the factor graph for the chosen continuous-time
//! representation, initializes it by dead reckoning, runs the solver, and
//! exposes the optimized trajectory for queries and export.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{Error, Result};
use crate::factors::{Binding, GpPriorFactor, Head, Landmark, MeasurementFactor, StatePriorFactor};
use crate::gp::{self, GpPriorModel, GpTrajectory, SupportState};
use crate::manifold::{GroupDescriptor, ManifoldElement, TangentVector};
use crate::sim::{BackendKind, Measurement, MeasurementKind, QueryableTrajectory, ScenarioConfig};
use crate::solver::{whitener_from_covariance, BoundFactor, OptimizeConfig, Problem, SolveReport};
use crate::spline::SplineTrajectory;

/// Sensors to include when building the problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorSet {
    pub gyro: bool,
    pub accel: bool,
    pub rb: bool,
}

impl Default for SensorSet {
    fn default() -> Self {
        SensorSet {
            gyro: true,
            accel: true,
            rb: true,
        }
    }
}

impl SensorSet {
    pub fn parse(spec: &str) -> Result<Self> {
        let mut set = SensorSet {
            gyro: false,
            accel: false,
            rb: false,
        };
        for part in spec.split(',') {
            match part.trim() {
                "gyro" => set.gyro = true,
                "accel" => set.accel = true,
                "rb" => set.rb = true,
                "all" => return Ok(SensorSet::default()),
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown sensor `{other}` (expected gyro, accel, rb, or all)"
                    )))
                }
            }
        }
        Ok(set)
    }

    fn admits(&self, kind: &MeasurementKind) -> bool {
        match kind {
            MeasurementKind::Gyro { .. } => self.gyro,
            MeasurementKind::Accel { .. } => self.accel,
            MeasurementKind::RangeBearing { .. } => self.rb,
        }
    }
}

/// Forward-Euler dead reckoning of the gyro/accel stream from the prior mean,
/// used to initialize all backends.
pub struct DeadReckoning {
    times: Vec<f64>,
    poses: Vec<ManifoldElement>,
    /// Body velocity (vx, vy, ω) at each sample.
    vels: Vec<[f64; 3]>,
}

impl DeadReckoning {
    pub fn run(measurements: &[Measurement], start: &SupportState, duration: f64) -> Self {
        let desc = GroupDescriptor::Se2;
        let mut pose = start.element.clone();
        let v0 = &start.derivatives[0].data;
        let mut vel = [v0[0], v0[1], v0[2]];
        let mut accel = [0.0f64, 0.0];
        let mut omega = v0[2];

        let mut times = vec![0.0];
        let mut poses = vec![pose.clone()];
        let mut vels = vec![vel];
        let mut t_last = 0.0;

        for m in measurements {
            match m.kind {
                MeasurementKind::Gyro { w } => omega = w,
                MeasurementKind::Accel { a } => accel = a,
                MeasurementKind::RangeBearing { .. } => continue,
            }
            let dt = m.t - t_last;
            if dt > 0.0 {
                // body-frame forward Euler: advance with held rates
                let step = desc
                    .tangent(&[vel[0] * dt, vel[1] * dt, vel[2] * dt])
                    .and_then(|tau| pose.boxplus(&tau));
                if let Ok(p) = step {
                    pose = p;
                }
                // a_meas = v̇_b + ω S v_b  →  v̇_b = a_meas − ω S v_b
                vel[0] += (accel[0] + vel[2] * vel[1]) * dt;
                vel[1] += (accel[1] - vel[2] * vel[0]) * dt;
                vel[2] = omega;
                t_last = m.t;
                times.push(t_last);
                poses.push(pose.clone());
                vels.push(vel);
            } else {
                vel[2] = omega;
                if let Some(last) = vels.last_mut() {
                    *last = vel;
                }
            }
        }
        if t_last < duration {
            times.push(duration);
            poses.push(pose.clone());
            vels.push(vel);
        }
        DeadReckoning { times, poses, vels }
    }

    /// Nearest-sample pose at `t`.
    pub fn pose_at(&self, t: f64) -> ManifoldElement {
        let i = self.index_at(t);
        self.poses[i].clone()
    }

    pub fn velocity_at(&self, t: f64) -> [f64; 3] {
        self.vels[self.index_at(t)]
    }

    fn index_at(&self, t: f64) -> usize {
        let j = self.times.partition_point(|&x| x <= t);
        j.saturating_sub(1).min(self.poses.len() - 1)
    }
}

/// Per-measurement noise covariances from the config, with unit fallbacks on
/// zero-noise scenarios so whitening stays defined.
fn sigma_of(kind: &MeasurementKind, cfg: &ScenarioConfig) -> DMatrix<f64> {
    let eff = |s: f64| if s > 0.0 { s } else { 1.0 };
    match kind {
        MeasurementKind::Gyro { .. } => DMatrix::from_element(1, 1, eff(cfg.gyro_std).powi(2)),
        MeasurementKind::Accel { .. } => DMatrix::identity(2, 2) * eff(cfg.accel_std).powi(2),
        MeasurementKind::RangeBearing { .. } => {
            let mut m = DMatrix::zeros(2, 2);
            m[(0, 0)] = eff(cfg.range_std).powi(2);
            m[(1, 1)] = eff(cfg.bearing_std).powi(2);
            m
        }
    }
}

/// Groups a time-ordered stream by exact stamp so measurements taken at the
/// same instant share one interpolation chain.
fn group_by_stamp<'a>(used: &[&'a Measurement]) -> Vec<(f64, Vec<&'a Measurement>)> {
    let mut groups: Vec<(f64, Vec<&Measurement>)> = Vec::new();
    for m in used {
        match groups.last_mut() {
            Some((t, g)) if *t == m.t => g.push(m),
            _ => groups.push((m.t, vec![m])),
        }
    }
    groups
}

fn stacked_sigma(group: &[&Measurement], cfg: &ScenarioConfig) -> DMatrix<f64> {
    let dims: Vec<DMatrix<f64>> = group.iter().map(|m| sigma_of(&m.kind, cfg)).collect();
    let n: usize = dims.iter().map(|d| d.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for d in dims {
        out.view_mut((off, off), (d.nrows(), d.ncols()))
            .copy_from(&d);
        off += d.nrows();
    }
    out
}

fn head_of(kind: &MeasurementKind, landmarks: &[Landmark]) -> Result<Head> {
    Ok(match kind {
        MeasurementKind::Gyro { w } => Head::Gyro { z: *w },
        MeasurementKind::Accel { a } => Head::Accel {
            z: Vector2::new(a[0], a[1]),
        },
        MeasurementKind::RangeBearing {
            landmark_id,
            range,
            bearing,
        } => {
            let lm = landmarks
                .iter()
                .find(|l| l.id == *landmark_id)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("unknown landmark id {landmark_id}"))
                })?;
            Head::RangeBearing {
                landmark: lm.position,
                z: Vector2::new(*range, *bearing),
            }
        }
    })
}

/// Optimized trajectory of any backend, queryable for export and metrics.
pub enum EstimatedTrajectory {
    Spline(SplineTrajectory),
    Gp {
        traj: GpTrajectory,
        /// Joint covariance of each adjacent support-state pair.
        pair_covs: Option<Vec<DMatrix<f64>>>,
    },
    Li {
        times: Vec<f64>,
        poses: Vec<ManifoldElement>,
    },
}

impl EstimatedTrajectory {
    pub fn backend(&self) -> BackendKind {
        match self {
            EstimatedTrajectory::Spline(_) => BackendKind::Spline,
            EstimatedTrajectory::Gp { .. } => BackendKind::Gp,
            EstimatedTrajectory::Li { .. } => BackendKind::Li,
        }
    }

    pub fn domain(&self) -> (f64, f64) {
        match self {
            EstimatedTrajectory::Spline(s) => s.domain(),
            EstimatedTrajectory::Gp { traj, .. } => traj.domain(),
            EstimatedTrajectory::Li { times, .. } => (times[0], times[times.len() - 1]),
        }
    }

    fn li_locate(times: &[f64], t: f64) -> Result<(usize, f64)> {
        let (start, end) = (times[0], times[times.len() - 1]);
        if !(t >= start && t <= end) {
            return Err(Error::OutOfDomain { t, start, end });
        }
        let j = times
            .partition_point(|&x| x <= t)
            .saturating_sub(1)
            .min(times.len() - 2);
        let alpha = (t - times[j]) / (times[j + 1] - times[j]);
        Ok((j, alpha))
    }

    /// Full-state covariance of the interpolated state at `t` (GP only).
    pub fn state_cov_at(&self, t: f64) -> Result<Option<DMatrix<f64>>> {
        match self {
            EstimatedTrajectory::Gp {
                traj,
                pair_covs: Some(covs),
            } => {
                let pair = traj.bracketing_pair(t)?;
                Ok(Some(traj.interpolate_covariance(t, &covs[pair])?))
            }
            _ => Ok(None),
        }
    }
}

impl QueryableTrajectory for EstimatedTrajectory {
    fn pose_at(&self, t: f64) -> Result<ManifoldElement> {
        match self {
            EstimatedTrajectory::Spline(s) => Ok(s.eval_lie(t, 0)?.value),
            EstimatedTrajectory::Gp { traj, .. } => Ok(traj.interpolate_mean(t)?.element),
            EstimatedTrajectory::Li { times, poses } => {
                let (j, alpha) = Self::li_locate(times, t)?;
                poses[j].glerp(&poses[j + 1], alpha)
            }
        }
    }

    fn pose_cov_at(&self, t: f64) -> Result<Option<DMatrix<f64>>> {
        Ok(self
            .state_cov_at(t)?
            .map(|m| m.view((0, 0), (3, 3)).into_owned()))
    }
}

pub struct EstimateOutput {
    pub trajectory: EstimatedTrajectory,
    pub report: SolveReport,
}

/// Builds and solves the factor graph for the configured backend.
pub fn run_estimator(
    config: &ScenarioConfig,
    measurements: &[Measurement],
    landmarks: &[Landmark],
    prior_mean: &SupportState,
    sensors: &SensorSet,
    threads: usize,
) -> Result<EstimateOutput> {
    let used: Vec<&Measurement> = measurements
        .iter()
        .filter(|m| sensors.admits(&m.kind))
        .collect();
    let dr = DeadReckoning::run(measurements, prior_mean, config.duration);
    let opt = OptimizeConfig {
        threads,
        ..OptimizeConfig::default()
    };

    match config.estimator.backend {
        BackendKind::Spline => build_spline(config, &used, landmarks, prior_mean, &dr, &opt),
        BackendKind::Gp => build_gp(config, &used, landmarks, prior_mean, &dr, &opt),
        BackendKind::Li => build_li(config, &used, landmarks, prior_mean, &dr, &opt),
    }
}

fn pose_prior_sigma(cfg: &ScenarioConfig) -> DMatrix<f64> {
    let s = &cfg.initial_prior.pose_std;
    DMatrix::from_diagonal(&DVector::from_vec(vec![
        s[0] * s[0],
        s[1] * s[1],
        s[2] * s[2],
    ]))
}

fn build_spline(
    config: &ScenarioConfig,
    used: &[&Measurement],
    landmarks: &[Landmark],
    prior_mean: &SupportState,
    dr: &DeadReckoning,
    opt: &OptimizeConfig,
) -> Result<EstimateOutput> {
    let desc = GroupDescriptor::Se2;
    let k = config.estimator.order;
    let dt = 1.0 / config.estimator.knot_hz;
    // Offset the knot grid by half a knot so the data interval [0, duration]
    // lies strictly inside the domain; measurements at a segment's left edge
    // carry zero weight for its last control point and would leave a
    // boundary-aligned grid rank-deficient.
    let start = -dt / 2.0;
    let segments = (config.duration * config.estimator.knot_hz).ceil() as usize + 1;
    let count = segments + k - 1;

    // seed control points from dead reckoning at their dominant times
    let layout =
        SplineTrajectory::uniform(desc.clone(), k, start, dt, vec![desc.identity(); count])?;
    let cps: Vec<ManifoldElement> = (0..count)
        .map(|j| dr.pose_at(layout.control_point_time(j).clamp(0.0, config.duration)))
        .collect();
    let mut spline = SplineTrajectory::uniform(desc.clone(), k, start, dt, cps)?;

    let mut problem = Problem::new();
    for cp in spline.control_points() {
        problem.add_variable(cp.clone());
    }

    let mc = crate::spline::cumulative_matrix(&crate::spline::uniform_blending_matrix(k)?);
    let spline_binding = |spline: &SplineTrajectory, t: f64| -> Result<Binding> {
        let (i, u) = spline.segment_for_time(t)?;
        let lambda = mc.weights(u, 0);
        let dlambda: Vec<f64> = mc.weights(u, 1).iter().map(|w| w / dt).collect();
        let ddlambda: Vec<f64> = mc.weights(u, 2).iter().map(|w| w / (dt * dt)).collect();
        Ok(Binding::Spline {
            vars: (i..i + k).collect(),
            lambda,
            dlambda,
            ddlambda,
        })
    };

    // initial pose prior anchors the gauge
    problem.add_factor(BoundFactor::new(
        "initial pose prior",
        whitener_from_covariance(&pose_prior_sigma(config))?,
        Box::new(MeasurementFactor::new(
            0.0,
            Head::PosePrior {
                mean: prior_mean.element.clone(),
            },
            spline_binding(&spline, 0.0)?,
            3,
        )?),
    ))?;

    for (t, group) in group_by_stamp(used) {
        let heads = group
            .iter()
            .map(|m| head_of(&m.kind, landmarks))
            .collect::<Result<Vec<_>>>()?;
        let binding = spline_binding(&spline, t)?;
        problem.add_factor(BoundFactor::new(
            format!("measurements @ {t:.4}s"),
            whitener_from_covariance(&stacked_sigma(&group, config))?,
            Box::new(MeasurementFactor::stacked(t, heads, binding, 3)?),
        ))?;
    }

    let report = problem.optimize(opt)?;
    for (cp, var) in spline
        .control_points_mut()
        .iter_mut()
        .zip(problem.variables())
    {
        *cp = var.clone();
    }
    Ok(EstimateOutput {
        trajectory: EstimatedTrajectory::Spline(spline),
        report,
    })
}

fn gp_state_times(config: &ScenarioConfig) -> Vec<f64> {
    let dt = 1.0 / config.estimator.state_hz;
    let n = (config.duration * config.estimator.state_hz).floor() as usize + 1;
    (0..=n).map(|i| i as f64 * dt).collect()
}

fn build_gp(
    config: &ScenarioConfig,
    used: &[&Measurement],
    landmarks: &[Landmark],
    prior_mean: &SupportState,
    dr: &DeadReckoning,
    opt: &OptimizeConfig,
) -> Result<EstimateOutput> {
    let desc = GroupDescriptor::Se2;
    let kind = config.estimator.prior.into();
    let qc = DMatrix::from_diagonal(&DVector::from_vec(config.estimator.qc.clone()));
    let prior = GpPriorModel::new(kind, qc)?;
    let blocks = prior.blocks();
    let v3 = GroupDescriptor::VectorSpace(3);

    let times = gp_state_times(config);
    let states: Vec<SupportState> = times
        .iter()
        .map(|&t| {
            let vel = dr.velocity_at(t);
            let mut derivs = vec![v3.tangent(&vel).unwrap()];
            if blocks >= 3 {
                derivs.push(v3.zero_tangent());
            }
            SupportState::new(t, dr.pose_at(t), derivs)
        })
        .collect();

    let mut problem = Problem::new();
    for s in &states {
        problem.add_variable(gp::state_to_element(s, blocks));
    }

    // full-state prior on the first support state
    let mut prior_state = prior_mean.clone();
    prior_state.derivatives.truncate(blocks - 1);
    let stds = &config.initial_prior;
    let mut diag = Vec::new();
    diag.extend(stds.pose_std.iter().map(|s| s * s));
    diag.extend(stds.vel_std.iter().map(|s| s * s));
    if blocks >= 3 {
        diag.extend(stds.acc_std.iter().map(|s| s * s));
    }
    problem.add_factor(BoundFactor::new(
        "initial state prior",
        whitener_from_covariance(&DMatrix::from_diagonal(&DVector::from_vec(diag)))?,
        Box::new(StatePriorFactor::new(0, prior_state, blocks)),
    ))?;

    // binary motion priors
    for i in 0..states.len() - 1 {
        let dt = states[i + 1].time - states[i].time;
        problem.add_factor(BoundFactor::new(
            format!("motion prior {i}"),
            whitener_from_covariance(&prior.process_noise(dt)?)?,
            Box::new(GpPriorFactor::new(
                [i, i + 1],
                desc.clone(),
                prior.clone(),
                (states[i].time, states[i + 1].time),
            )),
        ))?;
    }

    // interpolated measurement factors, one chain per distinct stamp
    for (t, group) in group_by_stamp(used) {
        let heads = group
            .iter()
            .map(|m| head_of(&m.kind, landmarks))
            .collect::<Result<Vec<_>>>()?;
        let j = times.partition_point(|&x| x <= t).saturating_sub(1);
        let binding = if times[j] == t {
            Binding::Direct {
                var: j,
                base: desc.clone(),
                blocks,
            }
        } else {
            Binding::gp(&prior, j, [j, j + 1], &states[j], &states[j + 1], t)?
        };
        problem.add_factor(BoundFactor::new(
            format!("measurements @ {t:.4}s"),
            whitener_from_covariance(&stacked_sigma(&group, config))?,
            Box::new(MeasurementFactor::stacked(t, heads, binding, 3)?),
        ))?;
    }

    let report = problem.optimize(opt)?;
    let solved: Vec<SupportState> = problem
        .variables()
        .iter()
        .zip(&times)
        .map(|(v, &t)| gp::state_from_element(&desc, blocks, t, v))
        .collect();

    // joint covariance of each adjacent pair, for interpolation and export
    let pair_covs = problem.covariance_factorization()?.adjacent_pairs()?;

    let traj = GpTrajectory::new(desc, prior, solved)?;
    Ok(EstimateOutput {
        trajectory: EstimatedTrajectory::Gp {
            traj,
            pair_covs: Some(pair_covs),
        },
        report,
    })
}

fn build_li(
    config: &ScenarioConfig,
    used: &[&Measurement],
    landmarks: &[Landmark],
    prior_mean: &SupportState,
    dr: &DeadReckoning,
    opt: &OptimizeConfig,
) -> Result<EstimateOutput> {
    let dt = 1.0 / config.estimator.knot_hz;
    // half-knot offset for the same boundary reason as the spline grid; the
    // last pose sits at the first grid time at or beyond the duration
    let n = ((config.duration + dt / 2.0) / dt).ceil() as usize;
    let times: Vec<f64> = (0..=n).map(|i| -dt / 2.0 + i as f64 * dt).collect();

    let mut problem = Problem::new();
    for &t in &times {
        problem.add_variable(dr.pose_at(t.clamp(0.0, config.duration)));
    }

    problem.add_factor(BoundFactor::new(
        "initial pose prior",
        whitener_from_covariance(&pose_prior_sigma(config))?,
        Box::new(MeasurementFactor::new(
            0.0,
            Head::PosePrior {
                mean: prior_mean.element.clone(),
            },
            Binding::Glerp {
                vars: [0, 1],
                alpha: (0.0 - times[0]) / dt,
                dt,
            },
            3,
        )?),
    ))?;

    for (t, group) in group_by_stamp(used) {
        let heads = group
            .iter()
            .map(|m| head_of(&m.kind, landmarks))
            .collect::<Result<Vec<_>>>()?;
        let mut j = times
            .partition_point(|&x| x <= t)
            .saturating_sub(1)
            .min(times.len() - 2);
        // a stamp exactly on a grid time carries zero weight for the pair's
        // right pose; bind it as the end of the previous segment instead
        if j > 0 && times[j] == t {
            j -= 1;
        }
        let alpha = (t - times[j]) / dt;
        let binding = Binding::Glerp {
            vars: [j, j + 1],
            alpha,
            dt,
        };
        problem.add_factor(BoundFactor::new(
            format!("measurements @ {t:.4}s"),
            whitener_from_covariance(&stacked_sigma(&group, config))?,
            Box::new(MeasurementFactor::stacked(t, heads, binding, 3)?),
        ))?;
    }

    let report = problem.optimize(opt)?;
    let poses = problem.variables().to_vec();
    Ok(EstimateOutput {
        trajectory: EstimatedTrajectory::Li { times, poses },
        report,
    })
}

/// Variables exported to `variables.csv`: representative time, pose, and (for
/// GP states) body derivatives.
pub struct VariableRow {
    pub index: usize,
    pub t: f64,
    pub pose: ManifoldElement,
    pub vel: Option<TangentVector>,
    pub acc: Option<TangentVector>,
}

pub fn variable_rows(traj: &EstimatedTrajectory) -> Vec<VariableRow> {
    match traj {
        EstimatedTrajectory::Spline(s) => s
            .control_points()
            .iter()
            .enumerate()
            .map(|(i, cp)| VariableRow {
                index: i,
                t: s.control_point_time(i),
                pose: cp.clone(),
                vel: None,
                acc: None,
            })
            .collect(),
        EstimatedTrajectory::Gp { traj, .. } => traj
            .states()
            .iter()
            .enumerate()
            .map(|(i, s)| VariableRow {
                index: i,
                t: s.time,
                pose: s.element.clone(),
                vel: Some(s.derivatives[0].clone()),
                acc: s.derivatives.get(1).cloned(),
            })
            .collect(),
        EstimatedTrajectory::Li { times, poses } => times
            .iter()
            .zip(poses)
            .enumerate()
            .map(|(i, (&t, p))| VariableRow {
                index: i,
                t,
                pose: p.clone(),
                vel: None,
                acc: None,
            })
            .collect(),
    }
}

/// Landmark ids referenced by a measurement stream (sanity check for loads).
pub fn referenced_landmarks(measurements: &[Measurement]) -> HashSet<u64> {
    measurements
        .iter()
        .filter_map(|m| match m.kind {
            MeasurementKind::RangeBearing { landmark_id, .. } => Some(landmark_id),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{evaluate, generate_scenario, sample_measurements};
    use approx::assert_relative_eq;

    fn zero_noise_config() -> ScenarioConfig {
        ScenarioConfig {
            duration: 6.0,
            seed: 11,
            landmark_count: 12,
            gyro_rate: 50.0,
            accel_rate: 50.0,
            rb_rate: 5.0,
            gyro_std: 0.0,
            accel_std: 0.0,
            range_std: 0.0,
            bearing_std: 0.0,
            truth_order: 4,
            truth_knot_hz: 1.0,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn dead_reckoning_tracks_zero_noise_truth() {
        let cfg = zero_noise_config();
        let truth = generate_scenario(&cfg).unwrap();
        let meas = sample_measurements(&truth, &cfg).unwrap();
        let dr = DeadReckoning::run(&meas, &truth.prior_mean, cfg.duration);
        let p = dr.pose_at(cfg.duration);
        let t = truth.spline.eval_lie(cfg.duration, 0).unwrap().value;
        let err = ((p.data[0] - t.data[0]).powi(2) + (p.data[1] - t.data[1]).powi(2)).sqrt();
        // forward Euler at 50 Hz drifts, but stays in the neighborhood
        assert!(err < 1.0, "dead reckoning drifted {err} m");
    }

    #[test]
    fn spline_backend_zero_noise_exactness() {
        // estimator matches the truth's order and knots: cost must vanish
        let mut cfg = zero_noise_config();
        cfg.estimator.backend = BackendKind::Spline;
        cfg.estimator.order = cfg.truth_order;
        cfg.estimator.knot_hz = cfg.truth_knot_hz;
        let truth = generate_scenario(&cfg).unwrap();
        let meas = sample_measurements(&truth, &cfg).unwrap();
        let out = run_estimator(
            &cfg,
            &meas,
            &truth.landmarks,
            &truth.prior_mean,
            &SensorSet::default(),
            1,
        )
        .unwrap();
        assert!(
            out.report.final_cost < 1e-8,
            "final cost {}",
            out.report.final_cost
        );
        let m = evaluate(&out.trajectory, &truth, cfg.duration, 50.0).unwrap();
        assert!(m.position_rmse < 1e-6, "rmse {}", m.position_rmse);
    }

    #[test]
    fn gp_backend_produces_covariance() {
        let mut cfg = zero_noise_config();
        cfg.gyro_std = 0.01;
        cfg.accel_std = 0.05;
        cfg.range_std = 0.1;
        cfg.bearing_std = 0.01;
        cfg.estimator.backend = BackendKind::Gp;
        cfg.estimator.state_hz = 2.0;
        let truth = generate_scenario(&cfg).unwrap();
        let meas = sample_measurements(&truth, &cfg).unwrap();
        let out = run_estimator(
            &cfg,
            &meas,
            &truth.landmarks,
            &truth.prior_mean,
            &SensorSet::default(),
            1,
        )
        .unwrap();
        let cov = out.trajectory.pose_cov_at(1.23).unwrap().unwrap();
        assert_eq!(cov.nrows(), 3);
        assert!(cov[(0, 0)] > 0.0);
        let m = evaluate(&out.trajectory, &truth, cfg.duration, 20.0).unwrap();
        assert!(m.mean_nees.is_some());
        assert!(m.position_rmse < 0.5, "rmse {}", m.position_rmse);
    }

    #[test]
    fn wnoa_gp_rejects_accel_factors() {
        let mut cfg = zero_noise_config();
        cfg.estimator.backend = BackendKind::Gp;
        cfg.estimator.prior = crate::sim::GpPriorConfig::Wnoa;
        let truth = generate_scenario(&cfg).unwrap();
        let meas = sample_measurements(&truth, &cfg).unwrap();
        let err = run_estimator(
            &cfg,
            &meas,
            &truth.landmarks,
            &truth.prior_mean,
            &SensorSet::default(),
            1,
        );
        assert!(matches!(err, Err(Error::UnsupportedFactor(_))));

        // dropping accel makes it solvable (the truth is a spline, not a GP
        // flow, so the fit is close but not exact)
        let sensors = SensorSet {
            accel: false,
            ..SensorSet::default()
        };
        let out = run_estimator(
            &cfg,
            &meas,
            &truth.landmarks,
            &truth.prior_mean,
            &sensors,
            1,
        )
        .unwrap();
        assert!(out.report.final_cost.is_finite());
        assert!(out.report.iterations < 50);
    }

    #[test]
    fn li_backend_estimate_is_glerp_of_variables() {
        let mut cfg = zero_noise_config();
        cfg.estimator.backend = BackendKind::Li;
        cfg.estimator.knot_hz = 5.0;
        let truth = generate_scenario(&cfg).unwrap();
        let meas = sample_measurements(&truth, &cfg).unwrap();
        let sensors = SensorSet {
            accel: false,
            ..SensorSet::default()
        };
        let out = run_estimator(
            &cfg,
            &meas,
            &truth.landmarks,
            &truth.prior_mean,
            &sensors,
            1,
        )
        .unwrap();
        let rows = variable_rows(&out.trajectory);
        for q in 0..40 {
            let t = q as f64 * 0.14;
            let pose = out.trajectory.pose_at(t).unwrap();
            let j = rows
                .partition_point(|r| r.t <= t)
                .saturating_sub(1)
                .min(rows.len() - 2);
            let alpha = (t - rows[j].t) / (rows[j + 1].t - rows[j].t);
            let g = rows[j].pose.glerp(&rows[j + 1].pose, alpha).unwrap();
            for c in 0..3 {
                assert_relative_eq!(pose.data[c], g.data[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn li_rejects_accel() {
        let mut cfg = zero_noise_config();
        cfg.estimator.backend = BackendKind::Li;
        let truth = generate_scenario(&cfg).unwrap();
        let meas = sample_measurements(&truth, &cfg).unwrap();
        let err = run_estimator(
            &cfg,
            &meas,
            &truth.landmarks,
            &truth.prior_mean,
            &SensorSet::default(),
            1,
        );
        assert!(matches!(err, Err(Error::UnsupportedFactor(_))));
    }

    #[test]
    fn knot_frequency_monotonically_improves_zero_noise_fit() {
        // truth is order 6; an order-4 estimator approximates it better as
        // the knot density grows
        let cfg0 = ScenarioConfig {
            duration: 6.0,
            seed: 3,
            landmark_count: 12,
            gyro_rate: 50.0,
            accel_rate: 50.0,
            rb_rate: 5.0,
            gyro_std: 0.0,
            accel_std: 0.0,
            range_std: 0.0,
            bearing_std: 0.0,
            ..ScenarioConfig::default()
        };
        let truth = generate_scenario(&cfg0).unwrap();
        let meas = sample_measurements(&truth, &cfg0).unwrap();
        let mut rmses = Vec::new();
        for knot_hz in [1.0, 2.0, 4.0] {
            let mut cfg = cfg0.clone();
            cfg.estimator.backend = BackendKind::Spline;
            cfg.estimator.order = 4;
            cfg.estimator.knot_hz = knot_hz;
            let out = run_estimator(
                &cfg,
                &meas,
                &truth.landmarks,
                &truth.prior_mean,
                &SensorSet::default(),
                1,
            )
            .unwrap();
            let m = evaluate(&out.trajectory, &truth, cfg.duration, 50.0).unwrap();
            rmses.push(m.position_rmse);
        }
        assert!(rmses[1] < rmses[0], "rmse did not improve: {rmses:?}");
        assert!(rmses[2] < rmses[1], "rmse did not improve: {rmses:?}");
    }

    #[test]
    fn threads_do_not_change_results() {
        let mut cfg = zero_noise_config();
        cfg.gyro_std = 0.01;
        cfg.accel_std = 0.05;
        cfg.range_std = 0.1;
        cfg.bearing_std = 0.01;
        cfg.estimator.backend = BackendKind::Spline;
        let truth = generate_scenario(&cfg).unwrap();
        let meas = sample_measurements(&truth, &cfg).unwrap();
        let out1 = run_estimator(
            &cfg,
            &meas,
            &truth.landmarks,
            &truth.prior_mean,
            &SensorSet::default(),
            1,
        )
        .unwrap();
        let out2 = run_estimator(
            &cfg,
            &meas,
            &truth.landmarks,
            &truth.prior_mean,
            &SensorSet::default(),
            2,
        )
        .unwrap();
        let (r1, r2) = match (&out1.trajectory, &out2.trajectory) {
            (EstimatedTrajectory::Spline(a), EstimatedTrajectory::Spline(b)) => (a, b),
            _ => unreachable!(),
        };
        for (a, b) in r1.control_points().iter().zip(r2.control_points()) {
            for c in 0..3 {
                assert_eq!(
                    a.data[c].to_bits(),
                    b.data[c].to_bits(),
                    "thread count changed the result"
                );
            }
        }
    }
}
