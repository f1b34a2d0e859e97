//! Command-line front end: simulate scenarios, run estimators, interpolate
//! trajectories, and evaluate metrics, emitting CSV/JSON for offline plotting.
//!
//! Exit codes: 0 success, 2 usage/config errors, 3 numerical failures.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estimator::{run_estimator, variable_rows, EstimatedTrajectory, SensorSet};
use crate::gp::{GpPriorModel, GpTrajectory};
use crate::io::{self, EstimateRow, Manifest, Timings, TruthRow};
use crate::manifold::GroupDescriptor;
use crate::sim::{
    evaluate, generate_scenario, sample_measurements, BackendKind, GpPriorConfig, GroundTruth,
    QueryableTrajectory, ScenarioConfig,
};
use crate::spline::{KnotVector, SplineTrajectory};

#[derive(Parser)]
#[command(
    name = "ctraj",
    version,
    about = "Continuous-time trajectory estimation on SE(2)"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a seeded scenario: ground truth, landmarks, and measurements.
    Simulate(SimulateArgs),
    /// Run an estimator backend on a simulated scenario.
    Estimate(EstimateArgs),
    /// Compute metrics from a scenario directory and an estimate directory.
    Evaluate(EvaluateArgs),
    /// Query an estimated trajectory at explicit times.
    Interpolate(InterpolateArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    /// JSON scenario config (see README for the schema).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Sampling rate of truth.csv (Hz).
    #[arg(long, default_value_t = 100.0)]
    pub truth_hz: f64,
}

#[derive(Args)]
pub struct EstimateArgs {
    /// Scenario directory produced by `simulate`.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Trajectory representation.
    #[arg(long)]
    pub backend: Option<String>,
    /// Spline order (spline backend).
    #[arg(long)]
    pub order: Option<usize>,
    /// Knot frequency in Hz (spline and li backends).
    #[arg(long)]
    pub knot_hz: Option<f64>,
    /// GP prior model: wnoa or wnoj.
    #[arg(long)]
    pub prior: Option<String>,
    /// Support-state frequency in Hz (gp backend).
    #[arg(long)]
    pub state_hz: Option<f64>,
    /// Power-spectral density diagonal, one value or three comma-separated.
    #[arg(long)]
    pub qc: Option<String>,
    /// Sampling rate of estimate.csv (Hz).
    #[arg(long, default_value_t = 100.0)]
    pub query_hz: f64,
    /// Sensors to use: comma list of gyro, accel, rb, or `all`.
    #[arg(long, default_value = "all")]
    pub sensors: String,
    /// Solver linearization threads (results are identical for any value).
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Scenario directory (for truth.csv).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Estimate directory (for estimate.csv and manifest.json).
    #[arg(long)]
    pub estimate: PathBuf,
}

#[derive(Args)]
pub struct InterpolateArgs {
    /// Estimate directory produced by `estimate`.
    #[arg(long)]
    pub estimate: PathBuf,
    /// Comma-separated query times in seconds.
    #[arg(long)]
    pub times: String,
}

/// Maps an error to the documented process exit code.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NoConvergence { .. } | Error::RankDeficient(_) => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Estimate(args) => cmd_estimate(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Interpolate(args) => cmd_interpolate(&args),
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let started = Instant::now();
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        Error::config(
            "config",
            format!("cannot read {}: {e}", args.config.display()),
        )
    })?;
    let config: ScenarioConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config("config", format!("invalid JSON: {e}")))?;
    config.validate()?;

    let truth = generate_scenario(&config)?;
    let measurements = sample_measurements(&truth, &config)?;

    std::fs::create_dir_all(&args.out)?;
    io::write_measurements_csv(&args.out.join("measurements.csv"), &measurements)?;
    io::write_landmarks_csv(&args.out.join("landmarks.csv"), &truth.landmarks)?;
    io::write_truth_csv(
        &args.out.join("truth.csv"),
        &truth_rows(&truth, &config, args.truth_hz)?,
    )?;
    io::write_manifest(
        &args.out.join("manifest.json"),
        &Manifest {
            version: io::artifact_version(),
            command: "simulate".into(),
            seed: config.seed,
            config,
            backend: None,
            query_hz: Some(args.truth_hz),
            sensors: None,
            threads: None,
            metrics: None,
            solve_report: None,
            timings: Timings {
                total_s: started.elapsed().as_secs_f64(),
                solve_s: None,
            },
            error: None,
        },
    )?;
    Ok(())
}

fn truth_rows(truth: &GroundTruth, config: &ScenarioConfig, rate: f64) -> Result<Vec<TruthRow>> {
    let n = (config.duration * rate).floor() as usize + 1;
    let mut rows = Vec::with_capacity(n);
    for j in 0..n {
        let t = j as f64 / rate;
        let e = truth.spline.eval_lie(t, 1)?;
        let v = e.velocity.unwrap().data;
        let (s, c) = e.value.data[2].sin_cos();
        rows.push(TruthRow {
            t,
            x: e.value.data[0],
            y: e.value.data[1],
            theta: e.value.data[2],
            vx: c * v[0] - s * v[1],
            vy: s * v[0] + c * v[1],
            omega: v[2],
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

fn apply_overrides(config: &mut ScenarioConfig, args: &EstimateArgs) -> Result<()> {
    if let Some(b) = &args.backend {
        config.estimator.backend = match b.as_str() {
            "li" => BackendKind::Li,
            "spline" => BackendKind::Spline,
            "gp" => BackendKind::Gp,
            other => {
                return Err(Error::config(
                    "backend",
                    format!("unknown backend `{other}`"),
                ))
            }
        };
    }
    if let Some(k) = args.order {
        config.estimator.order = k;
    }
    if let Some(hz) = args.knot_hz {
        config.estimator.knot_hz = hz;
    }
    if let Some(p) = &args.prior {
        config.estimator.prior = match p.as_str() {
            "wnoa" => GpPriorConfig::Wnoa,
            "wnoj" => GpPriorConfig::Wnoj,
            other => return Err(Error::config("prior", format!("unknown prior `{other}`"))),
        };
    }
    if let Some(hz) = args.state_hz {
        config.estimator.state_hz = hz;
    }
    if let Some(qc) = &args.qc {
        let parts: Vec<f64> = qc
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config("qc", format!("invalid qc `{qc}`")))?;
        config.estimator.qc = match parts.len() {
            1 => vec![parts[0]; 3],
            3 => parts,
            n => {
                return Err(Error::config(
                    "qc",
                    format!("expected 1 or 3 values, got {n}"),
                ))
            }
        };
    }
    config.validate()
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let started = Instant::now();
    let scenario_manifest = io::read_manifest(&args.scenario.join("manifest.json"))?;
    let mut config = scenario_manifest.config;
    apply_overrides(&mut config, args)?;
    let sensors = SensorSet::parse(&args.sensors)?;
    if args.query_hz <= 0.0 {
        return Err(Error::config("query_hz", "must be positive"));
    }

    let measurements = io::read_measurements_csv(&args.scenario.join("measurements.csv"))?;
    let landmarks = io::read_landmarks_csv(&args.scenario.join("landmarks.csv"))?;
    // truth regenerates deterministically from the config echo; it provides
    // the initial prior mean and the evaluation reference
    let truth = generate_scenario(&config)?;

    std::fs::create_dir_all(&args.out)?;
    let manifest_base = |error: Option<String>, report, metrics, solve_s| Manifest {
        version: io::artifact_version(),
        command: "estimate".into(),
        seed: config.seed,
        config: config.clone(),
        backend: Some(config.estimator.backend),
        query_hz: Some(args.query_hz),
        sensors: Some(args.sensors.clone()),
        threads: Some(args.threads),
        metrics,
        solve_report: report,
        timings: Timings {
            total_s: started.elapsed().as_secs_f64(),
            solve_s,
        },
        error,
    };

    let out = match run_estimator(
        &config,
        &measurements,
        &landmarks,
        &truth.prior_mean,
        &sensors,
        args.threads,
    ) {
        Ok(out) => out,
        Err(Error::NoConvergence { reason, report }) => {
            // the report is still written so failed runs can be inspected
            io::write_manifest(
                &args.out.join("manifest.json"),
                &manifest_base(
                    Some(reason.clone()),
                    Some(*report.clone()),
                    None,
                    Some(report.wall_time_s),
                ),
            )?;
            return Err(Error::NoConvergence { reason, report });
        }
        Err(e) => return Err(e),
    };
    let solve_s = out.report.wall_time_s;

    let rows = sample_estimate(&out.trajectory, config.duration, args.query_hz)?;
    io::write_estimate_csv(&args.out.join("estimate.csv"), &rows)?;
    io::write_variables_csv(
        &args.out.join("variables.csv"),
        &variable_rows(&out.trajectory),
    )?;
    if let EstimatedTrajectory::Gp {
        pair_covs: Some(covs),
        ..
    } = &out.trajectory
    {
        io::write_state_cov_csv(&args.out.join("state_cov.csv"), covs)?;
    }

    let metrics = evaluate(&out.trajectory, &truth, config.duration, args.query_hz)?;
    io::write_manifest(
        &args.out.join("manifest.json"),
        &manifest_base(None, Some(out.report.clone()), Some(metrics), Some(solve_s)),
    )?;
    Ok(())
}

fn sample_estimate(
    traj: &EstimatedTrajectory,
    duration: f64,
    query_hz: f64,
) -> Result<Vec<EstimateRow>> {
    let n = (duration * query_hz).floor() as usize + 1;
    let mut rows = Vec::with_capacity(n);
    for j in 0..n {
        let t = j as f64 / query_hz;
        rows.push(estimate_row(traj, t)?);
    }
    Ok(rows)
}

fn estimate_row(traj: &EstimatedTrajectory, t: f64) -> Result<EstimateRow> {
    let pose = traj.pose_at(t)?;
    let cov = traj
        .pose_cov_at(t)?
        .map(|p| [p[(0, 0)], p[(0, 1)], p[(1, 1)], p[(2, 2)]]);
    Ok(EstimateRow {
        t,
        x: pose.data[0],
        y: pose.data[1],
        theta: pose.data[2],
        cov,
    })
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let truth = io::read_truth_csv(&args.scenario.join("truth.csv"))?;
    let estimate = io::read_estimate_csv(&args.estimate.join("estimate.csv"))?;
    let runtime_s = io::read_manifest(&args.estimate.join("manifest.json"))
        .ok()
        .map(|m| m.timings.total_s);

    // join on exact times
    let mut pos_sq = 0.0;
    let mut head_sq = 0.0;
    let mut nees_acc = 0.0;
    let mut nees_n = 0usize;
    let mut n = 0usize;
    let mut ti = 0usize;
    for row in &estimate {
        while ti < truth.len() && truth[ti].t < row.t - 1e-9 {
            ti += 1;
        }
        let Some(tr) = truth.get(ti).filter(|tr| (tr.t - row.t).abs() <= 1e-9) else {
            return Err(Error::OutOfDomain {
                t: row.t,
                start: truth.first().map(|r| r.t).unwrap_or(0.0),
                end: truth.last().map(|r| r.t).unwrap_or(0.0),
            });
        };
        let (dx, dy) = (row.x - tr.x, row.y - tr.y);
        pos_sq += dx * dx + dy * dy;
        let dth = crate::manifold::wrap_angle(row.theta - tr.theta);
        head_sq += dth * dth;
        n += 1;
        if let Some([sxx, sxy, syy, stt]) = row.cov {
            // block-diagonal approximation from the exported entries
            let p = DMatrix::from_row_slice(3, 3, &[sxx, sxy, 0.0, sxy, syy, 0.0, 0.0, 0.0, stt]);
            if let Some(chol) = p.cholesky() {
                let e = nalgebra::DVector::from_vec(vec![dx, dy, dth]);
                let sol = chol.solve(&e);
                nees_acc += e.dot(&sol);
                nees_n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Parse("estimate.csv has no rows".into()));
    }

    let out = serde_json::json!({
        "position_rmse": (pos_sq / n as f64).sqrt(),
        "heading_rmse": (head_sq / n as f64).sqrt(),
        "mean_nees": if nees_n > 0 { serde_json::json!(nees_acc / nees_n as f64) } else { serde_json::Value::Null },
        "runtime_s": runtime_s,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// interpolate
// ---------------------------------------------------------------------------

/// Rebuilds the estimated trajectory from an estimate directory.
pub fn load_trajectory(dir: &Path) -> Result<(EstimatedTrajectory, Manifest)> {
    let manifest = io::read_manifest(&dir.join("manifest.json"))?;
    let config = &manifest.config;
    let vars = io::read_variables_csv(&dir.join("variables.csv"))?;
    let backend = manifest.backend.ok_or_else(|| {
        Error::Parse("manifest has no backend; was this directory produced by `estimate`?".into())
    })?;

    let traj = match backend {
        BackendKind::Spline => {
            let k = config.estimator.order;
            let dt = 1.0 / config.estimator.knot_hz;
            let cps = vars.iter().map(|v| v.element()).collect::<Vec<_>>();
            let count = cps.len();
            let start = -dt / 2.0;
            let times = (0..count + k - 2)
                .map(|j| start + (j as f64 - (k as f64 - 2.0)) * dt)
                .collect();
            EstimatedTrajectory::Spline(SplineTrajectory::non_uniform(
                GroupDescriptor::Se2,
                k,
                KnotVector::new(times)?,
                cps,
            )?)
        }
        BackendKind::Gp => {
            let kind = config.estimator.prior.into();
            let qc =
                DMatrix::from_diagonal(&nalgebra::DVector::from_vec(config.estimator.qc.clone()));
            let prior = GpPriorModel::new(kind, qc)?;
            let blocks = prior.blocks();
            let states = vars
                .iter()
                .map(|v| v.support_state())
                .collect::<Result<Vec<_>>>()?;
            let dim = 2 * blocks * 3;
            let covs = io::read_state_cov_csv(&dir.join("state_cov.csv"), dim).ok();
            EstimatedTrajectory::Gp {
                traj: GpTrajectory::new(GroupDescriptor::Se2, prior, states)?,
                pair_covs: covs,
            }
        }
        BackendKind::Li => EstimatedTrajectory::Li {
            times: vars.iter().map(|v| v.t).collect(),
            poses: vars.iter().map(|v| v.element()).collect(),
        },
    };
    Ok((traj, manifest))
}

pub fn cmd_interpolate(args: &InterpolateArgs) -> Result<()> {
    let (traj, _) = load_trajectory(&args.estimate)?;
    let times: Vec<f64> = args
        .times
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config("times", format!("invalid time list `{}`", args.times)))?;

    let (start, end) = traj.domain();
    let bad: Vec<f64> = times
        .iter()
        .copied()
        .filter(|&t| !(t >= start && t <= end))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Config {
            field: "times".into(),
            message: format!("outside domain [{start}, {end}]: {bad:?}"),
        });
    }

    println!("{}", io::ESTIMATE_HEADER);
    for t in times {
        println!("{}", io::format_estimate_row(&estimate_row(&traj, t)?));
    }
    Ok(())
}
