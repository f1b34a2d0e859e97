//! Exact equivalence of the batch GP smoother with a Kalman filter +
//! RTS smoother on linear 1D problems, for means, covariances, and
//! interpolation at off-support times.

mod common;

use common::{rts_smooth, PositionFactor};
use ctraj::gp::{self, GpPriorModel, GpTrajectory, PriorKind, SupportState};
use ctraj::manifold::GroupDescriptor;
use ctraj::solver::{whitener_from_covariance, BoundFactor, OptimizeConfig, Problem};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Chain {
    problem: Problem,
    prior: GpPriorModel,
    times: Vec<f64>,
    measurements: Vec<f64>,
}

/// Builds the MAP problem for a 1D WNOA chain with a position measurement at
/// every support time and an initial full-state prior.
fn build_chain(seed: u64, n: usize, qc: f64, r: f64) -> Chain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = GroupDescriptor::VectorSpace(1);
    let v1 = GroupDescriptor::VectorSpace(1);
    let prior = GpPriorModel::new(PriorKind::Wnoa, DMatrix::from_element(1, 1, qc)).unwrap();

    let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
    // simulate a WNOA sample path for ground truth
    let mut truth = Vector2::new(0.0, 0.4);
    let mut zs = Vec::with_capacity(n);
    let mut truths = vec![truth];
    for k in 0..n {
        if k > 0 {
            let dt = times[k] - times[k - 1];
            let q = common::q_wnoa(dt, qc);
            let chol = q.cholesky().unwrap();
            let w =
                chol.l() * Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            truth = common::phi(dt) * truth + w;
            truths.push(truth);
        }
        zs.push(truth.x + r * rng.random_range(-1.0..1.0));
    }

    let mut problem = Problem::new();
    let mk_state = |t: f64, x: f64, v: f64| {
        SupportState::new(
            t,
            base.element(&[x]).unwrap(),
            vec![v1.tangent(&[v]).unwrap()],
        )
    };
    let states: Vec<SupportState> = times.iter().map(|&t| mk_state(t, 0.0, 0.0)).collect();
    for s in &states {
        problem.add_variable(gp::state_to_element(s, 2));
    }

    let p0 = Matrix2::new(0.25, 0.05, 0.05, 0.5);
    problem
        .add_factor(BoundFactor::new(
            "initial prior",
            whitener_from_covariance(&DMatrix::from_fn(2, 2, |i, j| p0[(i, j)])).unwrap(),
            Box::new(ctraj::factors::StatePriorFactor::new(
                0,
                mk_state(0.0, 0.0, 0.4),
                2,
            )),
        ))
        .unwrap();
    for i in 0..n - 1 {
        let dt = times[i + 1] - times[i];
        problem
            .add_factor(BoundFactor::new(
                format!("motion {i}"),
                whitener_from_covariance(&prior.process_noise(dt).unwrap()).unwrap(),
                Box::new(ctraj::factors::GpPriorFactor::new(
                    [i, i + 1],
                    base.clone(),
                    prior.clone(),
                    (times[i], times[i + 1]),
                )),
            ))
            .unwrap();
    }
    for (i, &z) in zs.iter().enumerate() {
        problem
            .add_factor(BoundFactor::new(
                format!("z{i}"),
                DMatrix::from_element(1, 1, 1.0 / r),
                Box::new(PositionFactor {
                    bindings: vec![i],
                    z,
                }),
            ))
            .unwrap();
    }
    Chain {
        problem,
        prior,
        times,
        measurements: zs,
    }
}

const QC: f64 = 0.3;
const R: f64 = 0.15;
const MU0: Vector2<f64> = Vector2::new(0.0, 0.4);

fn p0() -> Matrix2<f64> {
    Matrix2::new(0.25, 0.05, 0.05, 0.5)
}

#[test]
fn map_solution_matches_kalman_rts_oracle() {
    let n = 20;
    let mut chain = build_chain(7, n, QC, R);
    let report = chain.problem.optimize(&OptimizeConfig::default()).unwrap();
    assert_eq!(
        report.iterations, 1,
        "linear problem must converge in one step"
    );

    let zs: Vec<Option<f64>> = chain.measurements.iter().map(|&z| Some(z)).collect();
    let oracle = rts_smooth(&chain.times, &zs, MU0, p0(), QC, R);

    for i in 0..n {
        let v = &chain.problem.variables()[i];
        assert!(
            (v.data[0] - oracle.means[i].x).abs() < 1e-9,
            "state {i} position: {} vs {}",
            v.data[0],
            oracle.means[i].x
        );
        assert!((v.data[1] - oracle.means[i].y).abs() < 1e-9);

        let cov = chain.problem.recover_covariance(&[i]).unwrap();
        for r_ in 0..2 {
            for c in 0..2 {
                assert!(
                    (cov[(r_, c)] - oracle.covs[i][(r_, c)]).abs() < 1e-9,
                    "state {i} covariance ({r_},{c}): {} vs {}",
                    cov[(r_, c)],
                    oracle.covs[i][(r_, c)]
                );
            }
        }
    }
}

#[test]
fn interpolation_matches_rts_on_finer_grid() {
    let n = 12;
    let mut chain = build_chain(21, n, QC, R);
    chain.problem.optimize(&OptimizeConfig::default()).unwrap();

    // solved trajectory
    let base = GroupDescriptor::VectorSpace(1);
    let solved: Vec<SupportState> = chain
        .problem
        .variables()
        .iter()
        .zip(&chain.times)
        .map(|(v, &t)| gp::state_from_element(&base, 2, t, v))
        .collect();
    let traj = GpTrajectory::new(base, chain.prior.clone(), solved).unwrap();

    // oracle on a finer grid: queries become prediction-only steps
    let mut fine_times = Vec::new();
    let mut fine_meas = Vec::new();
    let queries_per_gap = 4;
    for i in 0..n {
        fine_times.push(chain.times[i]);
        fine_meas.push(Some(chain.measurements[i]));
        if i + 1 < n {
            for q in 1..=queries_per_gap {
                let t = chain.times[i]
                    + (chain.times[i + 1] - chain.times[i]) * q as f64
                        / (queries_per_gap + 1) as f64;
                fine_times.push(t);
                fine_meas.push(None);
            }
        }
    }
    let oracle = rts_smooth(&fine_times, &fine_meas, MU0, p0(), QC, R);

    let fact = chain.problem.covariance_factorization().unwrap();
    let pair_covs = fact.adjacent_pairs().unwrap();

    for (k, &t) in fine_times.iter().enumerate() {
        let s = traj.interpolate_mean(t).unwrap();
        assert!(
            (s.element.data[0] - oracle.means[k].x).abs() < 1e-8,
            "mean at t={t}: {} vs {}",
            s.element.data[0],
            oracle.means[k].x
        );
        assert!((s.derivatives[0].data[0] - oracle.means[k].y).abs() < 1e-8);

        // covariance interpolation from the bracketing joint blocks
        let pair = traj.bracketing_pair(t).unwrap();
        let p = traj.interpolate_covariance(t, &pair_covs[pair]).unwrap();
        for r_ in 0..2 {
            for c in 0..2 {
                assert!(
                    (p[(r_, c)] - oracle.covs[k][(r_, c)]).abs() < 1e-8,
                    "cov at t={t} ({r_},{c}): {} vs {}",
                    p[(r_, c)],
                    oracle.covs[k][(r_, c)]
                );
            }
        }
    }
}

#[test]
fn prior_only_chain_covariance_propagates_q() {
    // no measurements: the posterior equals the propagated prior, so the
    // interpolated covariance must reproduce Φ P Φᵀ + Q(t − t₀)
    let base = GroupDescriptor::VectorSpace(1);
    let v1 = GroupDescriptor::VectorSpace(1);
    let prior = GpPriorModel::new(PriorKind::Wnoa, DMatrix::from_element(1, 1, QC)).unwrap();
    let mk = |t: f64| {
        SupportState::new(
            t,
            base.element(&[0.0]).unwrap(),
            vec![v1.tangent(&[0.0]).unwrap()],
        )
    };

    let mut problem = Problem::new();
    problem.add_variable(gp::state_to_element(&mk(0.0), 2));
    problem.add_variable(gp::state_to_element(&mk(1.0), 2));
    let p0 = DMatrix::from_row_slice(2, 2, &[0.04, 0.0, 0.0, 0.09]);
    problem
        .add_factor(BoundFactor::new(
            "initial prior",
            whitener_from_covariance(&p0).unwrap(),
            Box::new(ctraj::factors::StatePriorFactor::new(0, mk(0.0), 2)),
        ))
        .unwrap();
    problem
        .add_factor(BoundFactor::new(
            "motion",
            whitener_from_covariance(&prior.process_noise(1.0).unwrap()).unwrap(),
            Box::new(ctraj::factors::GpPriorFactor::new(
                [0, 1],
                base.clone(),
                prior.clone(),
                (0.0, 1.0),
            )),
        ))
        .unwrap();
    problem.optimize(&OptimizeConfig::default()).unwrap();

    let joint = problem.recover_covariance(&[0, 1]).unwrap();
    let traj = GpTrajectory::new(base.clone(), prior.clone(), vec![mk(0.0), mk(1.0)]).unwrap();
    for &t in &[0.0, 0.25, 0.5, 0.75] {
        let p = traj.interpolate_covariance(t, &joint).unwrap();
        let f = common::phi(t);
        let expected = f * Matrix2::new(0.04, 0.0, 0.0, 0.09) * f.transpose()
            + if t > 0.0 {
                common::q_wnoa(t, QC)
            } else {
                Matrix2::zeros()
            };
        for r in 0..2 {
            for c in 0..2 {
                assert!(
                    (p[(r, c)] - expected[(r, c)]).abs() < 1e-8,
                    "t={t} ({r},{c}): {} vs {}",
                    p[(r, c)],
                    expected[(r, c)]
                );
            }
        }
    }
}

#[test]
fn gp_nees_consistency_on_linear_chain() {
    // chi-square consistency of the posterior over seeded runs: the mean NEES
    // of the full state (dof = 2) must sit inside [0.8·dof, 1.25·dof]
    let n = 15;
    let mut nees_acc = 0.0;
    let mut count = 0usize;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let base = GroupDescriptor::VectorSpace(1);
        let v1 = GroupDescriptor::VectorSpace(1);
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();

        // ground truth drawn from the joint prior: initial state ~ N(MU0, P0)
        let p0m = p0();
        let chol0 = p0m.cholesky().unwrap();
        let normal = rand_distr::StandardNormal;
        let draw1 =
            |rng: &mut ChaCha8Rng| -> f64 { rand_distr::Distribution::sample(&normal, rng) };
        let draw2 = |rng: &mut ChaCha8Rng| Vector2::new(draw1(rng), draw1(rng));
        let mut truth = MU0 + chol0.l() * draw2(&mut rng);
        let mut truths = vec![truth];
        for k in 1..n {
            let dt = times[k] - times[k - 1];
            let q = common::q_wnoa(dt, QC);
            truth = common::phi(dt) * truth + q.cholesky().unwrap().l() * draw2(&mut rng);
            truths.push(truth);
        }
        let mut zs = Vec::with_capacity(n);
        for s in &truths {
            zs.push(s.x + R * draw1(&mut rng));
        }

        let mut problem = Problem::new();
        let prior = GpPriorModel::new(PriorKind::Wnoa, DMatrix::from_element(1, 1, QC)).unwrap();
        let mk = |t: f64, x: f64, v: f64| {
            SupportState::new(
                t,
                base.element(&[x]).unwrap(),
                vec![v1.tangent(&[v]).unwrap()],
            )
        };
        for &t in &times {
            problem.add_variable(gp::state_to_element(&mk(t, 0.0, 0.0), 2));
        }
        problem
            .add_factor(BoundFactor::new(
                "initial prior",
                whitener_from_covariance(&DMatrix::from_fn(2, 2, |i, j| p0m[(i, j)])).unwrap(),
                Box::new(ctraj::factors::StatePriorFactor::new(
                    0,
                    mk(0.0, MU0.x, MU0.y),
                    2,
                )),
            ))
            .unwrap();
        for i in 0..n - 1 {
            problem
                .add_factor(BoundFactor::new(
                    format!("motion {i}"),
                    whitener_from_covariance(&prior.process_noise(0.5).unwrap()).unwrap(),
                    Box::new(ctraj::factors::GpPriorFactor::new(
                        [i, i + 1],
                        base.clone(),
                        prior.clone(),
                        (times[i], times[i + 1]),
                    )),
                ))
                .unwrap();
        }
        for (i, &z) in zs.iter().enumerate() {
            problem
                .add_factor(BoundFactor::new(
                    format!("z{i}"),
                    DMatrix::from_element(1, 1, 1.0 / R),
                    Box::new(PositionFactor {
                        bindings: vec![i],
                        z,
                    }),
                ))
                .unwrap();
        }
        problem.optimize(&OptimizeConfig::default()).unwrap();

        for i in 0..n {
            let v = &problem.variables()[i];
            let err = DVector::from_vec(vec![truths[i].x - v.data[0], truths[i].y - v.data[1]]);
            let cov = problem.recover_covariance(&[i]).unwrap();
            let sol = cov.cholesky().unwrap().solve(&err);
            nees_acc += err.dot(&sol);
            count += 1;
        }
    }
    let mean_nees = nees_acc / count as f64;
    assert!(
        (1.6..=2.5).contains(&mean_nees),
        "mean NEES {mean_nees} outside [0.8·dof, 1.25·dof] for dof = 2"
    );
}
