//! File formats: CSV schemas for measurements, trajectories, and variables,
//! plus the JSON run manifest.
//!
//! Headers are exact contract strings; readers reject any deviation. Floats
//! are written with Rust's shortest round-trip formatting, so re-reading a
//! file reproduces the original values bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::VariableRow;
use crate::factors::Landmark;
use crate::gp::SupportState;
use crate::manifold::{GroupDescriptor, ManifoldElement};
use crate::sim::{BackendKind, Measurement, MeasurementKind, Metrics, ScenarioConfig};
use crate::solver::SolveReport;

pub const MEASUREMENTS_HEADER: &str = "type,t,v0,v1,landmark_id";
pub const TRUTH_HEADER: &str = "t,x,y,theta,vx,vy,omega";
pub const LANDMARKS_HEADER: &str = "id,x,y";
pub const ESTIMATE_HEADER: &str = "t,x,y,theta,sxx,sxy,syy,stt";
pub const VARIABLES_HEADER: &str = "index,t,x,y,theta,vx,vy,omega,ax,ay,alpha";
pub const STATE_COV_HEADER: &str = "pair,row,col,value";

/// Writes a file atomically: to a sibling temp path, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_lines(path: &Path, header: &str) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => {}
        Some(h) => {
            return Err(Error::Parse(format!(
                "{}: expected header `{header}`, found `{h}`",
                path.display()
            )))
        }
        None => return Err(Error::Parse(format!("{}: empty file", path.display()))),
    }
    Ok(lines.map(str::to_string).collect())
}

fn parse_f64(field: &str, context: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::Parse(format!("{context}: invalid number `{field}`")))
}

// ---------------------------------------------------------------------------
// measurements.csv
// ---------------------------------------------------------------------------

pub fn write_measurements_csv(path: &Path, measurements: &[Measurement]) -> Result<()> {
    let mut out = String::from(MEASUREMENTS_HEADER);
    out.push('\n');
    for m in measurements {
        match &m.kind {
            MeasurementKind::Gyro { w } => {
                out.push_str(&format!("gyro,{},{},,\n", m.t, w));
            }
            MeasurementKind::Accel { a } => {
                out.push_str(&format!("accel,{},{},{},\n", m.t, a[0], a[1]));
            }
            MeasurementKind::RangeBearing {
                landmark_id,
                range,
                bearing,
            } => {
                out.push_str(&format!(
                    "rb,{},{},{},{}\n",
                    m.t, range, bearing, landmark_id
                ));
            }
        }
    }
    write_atomic(path, &out)
}

pub fn read_measurements_csv(path: &Path) -> Result<Vec<Measurement>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path, MEASUREMENTS_HEADER)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let ctx = format!("{} line {}", path.display(), i + 2);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Parse(format!(
                "{ctx}: expected 5 fields, found {}",
                f.len()
            )));
        }
        let t = parse_f64(f[1], &ctx)?;
        let kind = match f[0] {
            "gyro" => MeasurementKind::Gyro {
                w: parse_f64(f[2], &ctx)?,
            },
            "accel" => MeasurementKind::Accel {
                a: [parse_f64(f[2], &ctx)?, parse_f64(f[3], &ctx)?],
            },
            "rb" => MeasurementKind::RangeBearing {
                range: parse_f64(f[2], &ctx)?,
                bearing: parse_f64(f[3], &ctx)?,
                landmark_id: f[4]
                    .parse()
                    .map_err(|_| Error::Parse(format!("{ctx}: invalid landmark id `{}`", f[4])))?,
            },
            other => {
                return Err(Error::Parse(format!(
                    "{ctx}: unknown measurement type `{other}`"
                )))
            }
        };
        out.push(Measurement { t, kind });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// truth.csv
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct TruthRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    /// World-frame velocity.
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

pub fn write_truth_csv(path: &Path, rows: &[TruthRow]) -> Result<()> {
    let mut out = String::from(TRUTH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.t, r.x, r.y, r.theta, r.vx, r.vy, r.omega
        ));
    }
    write_atomic(path, &out)
}

pub fn read_truth_csv(path: &Path) -> Result<Vec<TruthRow>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path, TRUTH_HEADER)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let ctx = format!("{} line {}", path.display(), i + 2);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Parse(format!(
                "{ctx}: expected 7 fields, found {}",
                f.len()
            )));
        }
        out.push(TruthRow {
            t: parse_f64(f[0], &ctx)?,
            x: parse_f64(f[1], &ctx)?,
            y: parse_f64(f[2], &ctx)?,
            theta: parse_f64(f[3], &ctx)?,
            vx: parse_f64(f[4], &ctx)?,
            vy: parse_f64(f[5], &ctx)?,
            omega: parse_f64(f[6], &ctx)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// landmarks.csv
// ---------------------------------------------------------------------------

pub fn write_landmarks_csv(path: &Path, landmarks: &[Landmark]) -> Result<()> {
    let mut out = String::from(LANDMARKS_HEADER);
    out.push('\n');
    for l in landmarks {
        out.push_str(&format!("{},{},{}\n", l.id, l.position.x, l.position.y));
    }
    write_atomic(path, &out)
}

pub fn read_landmarks_csv(path: &Path) -> Result<Vec<Landmark>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path, LANDMARKS_HEADER)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let ctx = format!("{} line {}", path.display(), i + 2);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Parse(format!(
                "{ctx}: expected 3 fields, found {}",
                f.len()
            )));
        }
        out.push(Landmark {
            id: f[0]
                .parse()
                .map_err(|_| Error::Parse(format!("{ctx}: invalid id `{}`", f[0])))?,
            position: Vector2::new(parse_f64(f[1], &ctx)?, parse_f64(f[2], &ctx)?),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// estimate.csv
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EstimateRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    /// (sxx, sxy, syy, stt) pose-covariance entries; absent for backends
    /// without covariance interpolation.
    pub cov: Option<[f64; 4]>,
}

pub fn format_estimate_row(r: &EstimateRow) -> String {
    match r.cov {
        Some([sxx, sxy, syy, stt]) => {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.t, r.x, r.y, r.theta, sxx, sxy, syy, stt
            )
        }
        None => format!("{},{},{},{},,,,", r.t, r.x, r.y, r.theta),
    }
}

pub fn write_estimate_csv(path: &Path, rows: &[EstimateRow]) -> Result<()> {
    let mut out = String::from(ESTIMATE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format_estimate_row(r));
        out.push('\n');
    }
    write_atomic(path, &out)
}

pub fn read_estimate_csv(path: &Path) -> Result<Vec<EstimateRow>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path, ESTIMATE_HEADER)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let ctx = format!("{} line {}", path.display(), i + 2);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Parse(format!(
                "{ctx}: expected 8 fields, found {}",
                f.len()
            )));
        }
        let cov = if f[4].is_empty() && f[5].is_empty() && f[6].is_empty() && f[7].is_empty() {
            None
        } else {
            Some([
                parse_f64(f[4], &ctx)?,
                parse_f64(f[5], &ctx)?,
                parse_f64(f[6], &ctx)?,
                parse_f64(f[7], &ctx)?,
            ])
        };
        out.push(EstimateRow {
            t: parse_f64(f[0], &ctx)?,
            x: parse_f64(f[1], &ctx)?,
            y: parse_f64(f[2], &ctx)?,
            theta: parse_f64(f[3], &ctx)?,
            cov,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// variables.csv
// ---------------------------------------------------------------------------

pub fn write_variables_csv(path: &Path, rows: &[VariableRow]) -> Result<()> {
    let mut out = String::from(VARIABLES_HEADER);
    out.push('\n');
    for r in rows {
        let vel = r
            .vel
            .as_ref()
            .map(|v| format!("{},{},{}", v.data[0], v.data[1], v.data[2]))
            .unwrap_or_else(|| ",,".into());
        let acc = r
            .acc
            .as_ref()
            .map(|a| format!("{},{},{}", a.data[0], a.data[1], a.data[2]))
            .unwrap_or_else(|| ",,".into());
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.index, r.t, r.pose.data[0], r.pose.data[1], r.pose.data[2], vel, acc
        ));
    }
    write_atomic(path, &out)
}

#[derive(Debug, Clone)]
pub struct ParsedVariable {
    pub index: usize,
    pub t: f64,
    pub pose: [f64; 3],
    pub vel: Option<[f64; 3]>,
    pub acc: Option<[f64; 3]>,
}

impl ParsedVariable {
    pub fn element(&self) -> ManifoldElement {
        GroupDescriptor::Se2
            .element(&self.pose)
            .expect("3 coordinates")
    }

    pub fn support_state(&self) -> Result<SupportState> {
        let v3 = GroupDescriptor::VectorSpace(3);
        let mut derivs = Vec::new();
        if let Some(v) = self.vel {
            derivs.push(v3.tangent(&v)?);
        }
        if let Some(a) = self.acc {
            derivs.push(v3.tangent(&a)?);
        }
        Ok(SupportState::new(self.t, self.element(), derivs))
    }
}

pub fn read_variables_csv(path: &Path) -> Result<Vec<ParsedVariable>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path, VARIABLES_HEADER)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let ctx = format!("{} line {}", path.display(), i + 2);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Parse(format!(
                "{ctx}: expected 11 fields, found {}",
                f.len()
            )));
        }
        let triple = |a: &str, b: &str, c: &str| -> Result<Option<[f64; 3]>> {
            if a.is_empty() && b.is_empty() && c.is_empty() {
                Ok(None)
            } else {
                Ok(Some([
                    parse_f64(a, &ctx)?,
                    parse_f64(b, &ctx)?,
                    parse_f64(c, &ctx)?,
                ]))
            }
        };
        out.push(ParsedVariable {
            index: f[0]
                .parse()
                .map_err(|_| Error::Parse(format!("{ctx}: invalid index `{}`", f[0])))?,
            t: parse_f64(f[1], &ctx)?,
            pose: [
                parse_f64(f[2], &ctx)?,
                parse_f64(f[3], &ctx)?,
                parse_f64(f[4], &ctx)?,
            ],
            vel: triple(f[5], f[6], f[7])?,
            acc: triple(f[8], f[9], f[10])?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// state_cov.csv (GP backend sidecar)
// ---------------------------------------------------------------------------

pub fn write_state_cov_csv(path: &Path, covs: &[DMatrix<f64>]) -> Result<()> {
    let mut out = String::from(STATE_COV_HEADER);
    out.push('\n');
    for (pair, m) in covs.iter().enumerate() {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.push_str(&format!("{},{},{},{}\n", pair, r, c, m[(r, c)]));
            }
        }
    }
    write_atomic(path, &out)
}

pub fn read_state_cov_csv(path: &Path, dim: usize) -> Result<Vec<DMatrix<f64>>> {
    let mut out: Vec<DMatrix<f64>> = Vec::new();
    for (i, line) in read_lines(path, STATE_COV_HEADER)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let ctx = format!("{} line {}", path.display(), i + 2);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Parse(format!(
                "{ctx}: expected 4 fields, found {}",
                f.len()
            )));
        }
        let pair: usize = f[0]
            .parse()
            .map_err(|_| Error::Parse(format!("{ctx}: bad pair index")))?;
        let r: usize = f[1]
            .parse()
            .map_err(|_| Error::Parse(format!("{ctx}: bad row")))?;
        let c: usize = f[2]
            .parse()
            .map_err(|_| Error::Parse(format!("{ctx}: bad col")))?;
        while out.len() <= pair {
            out.push(DMatrix::zeros(dim, dim));
        }
        if r >= dim || c >= dim {
            return Err(Error::Parse(format!(
                "{ctx}: index ({r}, {c}) outside {dim}x{dim}"
            )));
        }
        out[pair][(r, c)] = parse_f64(f[3], &ctx)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// manifest.json
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub total_s: f64,
    #[serde(default)]
    pub solve_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: ScenarioConfig,
    #[serde(default)]
    pub backend: Option<BackendKind>,
    #[serde(default)]
    pub query_hz: Option<f64>,
    #[serde(default)]
    pub sensors: Option<String>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub metrics: Option<Metrics>,
    #[serde(default)]
    pub solve_report: Option<SolveReport>,
    pub timings: Timings,
    #[serde(default)]
    pub error: Option<String>,
}

pub fn artifact_version() -> String {
    format!("ctraj {}", env!("CARGO_PKG_VERSION"))
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    write_atomic(path, &text)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_scenario, sample_measurements, ScenarioConfig};

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("ctraj-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn measurements_round_trip() {
        let cfg = ScenarioConfig {
            duration: 4.0,
            seed: 3,
            gyro_rate: 20.0,
            accel_rate: 20.0,
            rb_rate: 4.0,
            ..ScenarioConfig::default()
        };
        let truth = generate_scenario(&cfg).unwrap();
        let meas = sample_measurements(&truth, &cfg).unwrap();
        let path = tmpdir().join("measurements.csv");
        write_measurements_csv(&path, &meas).unwrap();
        let back = read_measurements_csv(&path).unwrap();
        assert_eq!(meas, back);
    }

    #[test]
    fn header_deviation_rejected() {
        let path = tmpdir().join("bad.csv");
        fs::write(&path, "type,t,v0,v1,landmark\ngyro,0,0.1,,\n").unwrap();
        match read_measurements_csv(&path) {
            Err(Error::Parse(msg)) => assert!(msg.contains("expected header")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn estimate_round_trip_with_and_without_cov() {
        let rows = vec![
            EstimateRow {
                t: 0.0,
                x: 1.5,
                y: -0.25,
                theta: 0.125,
                cov: None,
            },
            EstimateRow {
                t: 0.5,
                x: 2.5,
                y: 0.75,
                theta: -0.5,
                cov: Some([1e-4, 2e-6, 1.5e-4, 1e-5]),
            },
        ];
        let path = tmpdir().join("estimate.csv");
        write_estimate_csv(&path, &rows).unwrap();
        let back = read_estimate_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].cov.is_none());
        assert_eq!(back[1].cov.unwrap(), rows[1].cov.unwrap());
        assert_eq!(back[1].x, 2.5);
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            version: artifact_version(),
            command: "simulate".into(),
            seed: 42,
            config: ScenarioConfig::default(),
            backend: None,
            query_hz: None,
            sensors: None,
            threads: None,
            metrics: None,
            solve_report: None,
            timings: Timings {
                total_s: 0.5,
                solve_s: None,
            },
            error: None,
        };
        let path = tmpdir().join("manifest.json");
        write_manifest(&path, &m).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.config.duration, 60.0);
    }
}
