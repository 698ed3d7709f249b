//! On-disk formats: JSON schemas for experience, local models, and trained
//! policies (matrices stored row-major with explicit shapes), CSV emitters
//! for trajectories, learning curves, evaluation reports, value grids, and
//! action sequences.
//!
//! Every write goes through a temp-file-then-rename step so a crash never
//! leaves a truncated file under its final name, and all number formatting
//! is shortest-round-trip, so identical inputs always produce identical
//! bytes.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{EvaluationReport, ValueGrid};
use crate::error::{Error, Result};
use crate::ldsi::LinearModel;
use crate::lqr::Controller;
use crate::plant::Trajectory;
use crate::rl::FeatureMap;
use crate::sysid::Experience;

pub(crate) fn vec4_to_array(v: &Vector4<f64>) -> [f64; 4] {
    [v[0], v[1], v[2], v[3]]
}

pub(crate) fn array_to_vec4(a: &[f64; 4]) -> Vector4<f64> {
    Vector4::new(a[0], a[1], a[2], a[3])
}

/// Write `bytes` to `path` atomically (temp file in the same directory,
/// then rename), creating parent directories as needed.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Compact JSON for bulk data (experience files run to many megabytes).
pub fn write_json_compact<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Dense matrix wire format: row-major data with explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        MatrixJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data: (0..m.nrows())
                .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
                .map(|(i, j)| m[(i, j)])
                .collect(),
        }
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Self {
        Self::from_dmatrix(&DMatrix::from_iterator(4, 4, m.iter().cloned()))
    }

    pub fn to_dmatrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::DimensionMismatch {
                context: "matrix data length",
                expected: self.rows * self.cols,
                got: self.data.len(),
            });
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }

    pub fn to_matrix4(&self) -> Result<Matrix4<f64>> {
        let m = self.to_dmatrix()?;
        if m.nrows() != 4 || m.ncols() != 4 {
            return Err(Error::DimensionMismatch {
                context: "square state matrix",
                expected: 4,
                got: m.nrows().max(m.ncols()),
            });
        }
        Ok(Matrix4::from_iterator(m.iter().cloned()))
    }
}

/// One rollout: states are one row per step, controls one row per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryJson {
    pub states: MatrixJson,
    pub controls: MatrixJson,
}

impl TrajectoryJson {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        let n = t.states.len();
        let m = t.controls.first().map_or(0, |u| u.len());
        let states = MatrixJson {
            rows: n,
            cols: 4,
            data: t.states.iter().flat_map(|x| x.iter().cloned()).collect(),
        };
        let controls = MatrixJson {
            rows: t.controls.len(),
            cols: m,
            data: t.controls.iter().flat_map(|u| u.iter().cloned()).collect(),
        };
        TrajectoryJson { states, controls }
    }

    pub fn to_trajectory(&self, dt: f64) -> Result<Trajectory> {
        if self.states.cols != 4 {
            return Err(Error::DimensionMismatch {
                context: "trajectory state width",
                expected: 4,
                got: self.states.cols,
            });
        }
        if self.states.rows != self.controls.rows + 1 {
            return Err(Error::DimensionMismatch {
                context: "trajectory state/control rows",
                expected: self.controls.rows + 1,
                got: self.states.rows,
            });
        }
        let s = self.states.to_dmatrix()?;
        let c = self.controls.to_dmatrix()?;
        let states = (0..s.nrows())
            .map(|i| Vector4::new(s[(i, 0)], s[(i, 1)], s[(i, 2)], s[(i, 3)]))
            .collect();
        let controls = (0..c.nrows())
            .map(|i| DVector::from_iterator(c.ncols(), c.row(i).iter().cloned()))
            .collect();
        Ok(Trajectory {
            states,
            controls,
            dt,
            diverged: false,
        })
    }
}

/// Persisted motor-babbling experience plus collection metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceFile {
    pub plant: String,
    pub seed: u64,
    pub dt: f64,
    pub n_starts: usize,
    pub n_sequences: usize,
    /// Rollouts dropped because integration diverged.
    pub dropped: usize,
    pub records: Vec<TrajectoryJson>,
}

impl ExperienceFile {
    pub fn from_experience(exp: &Experience, plant: &str, dt: f64, seed: u64) -> Self {
        ExperienceFile {
            plant: plant.to_string(),
            seed,
            dt,
            n_starts: exp.n_starts,
            n_sequences: exp.n_sequences,
            dropped: exp.dropped,
            records: exp
                .records
                .iter()
                .map(TrajectoryJson::from_trajectory)
                .collect(),
        }
    }

    pub fn to_experience(&self) -> Result<Experience> {
        Ok(Experience {
            records: self
                .records
                .iter()
                .map(|r| r.to_trajectory(self.dt))
                .collect::<Result<_>>()?,
            n_starts: self.n_starts,
            n_sequences: self.n_sequences,
            dropped: self.dropped,
        })
    }
}

/// Persisted local linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub centre: [f64; 4],
    pub a: MatrixJson,
    pub b: MatrixJson,
    pub sigma_w: [f64; 4],
    pub sigma_v: [f64; 4],
    pub log_likelihood: Vec<f64>,
    pub n_segments: usize,
    pub regularized: bool,
}

impl ModelFile {
    pub fn from_model(m: &LinearModel) -> Self {
        ModelFile {
            centre: vec4_to_array(&m.centre),
            a: MatrixJson::from_matrix4(&m.a),
            b: MatrixJson::from_dmatrix(&m.b),
            sigma_w: vec4_to_array(&m.sigma_w),
            sigma_v: vec4_to_array(&m.sigma_v),
            log_likelihood: m.log_likelihood.clone(),
            n_segments: m.n_segments,
            regularized: m.regularized,
        }
    }

    pub fn to_model(&self) -> Result<LinearModel> {
        Ok(LinearModel {
            centre: array_to_vec4(&self.centre),
            a: self.a.to_matrix4()?,
            b: self.b.to_dmatrix()?,
            sigma_w: array_to_vec4(&self.sigma_w),
            sigma_v: array_to_vec4(&self.sigma_v),
            log_likelihood: self.log_likelihood.clone(),
            n_segments: self.n_segments,
            regularized: self.regularized,
        })
    }
}

/// Persisted feedback controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerJson {
    pub gain: MatrixJson,
    pub centre: [f64; 4],
    pub target: [f64; 4],
    pub model_id: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl ControllerJson {
    pub fn from_controller(c: &Controller) -> Self {
        ControllerJson {
            gain: MatrixJson::from_dmatrix(&c.gain),
            centre: vec4_to_array(&c.centre),
            target: vec4_to_array(&c.target),
            model_id: c.model_id,
            converged: c.converged,
            iterations: c.iterations,
        }
    }

    pub fn to_controller(&self) -> Result<Controller> {
        Ok(Controller {
            gain: self.gain.to_dmatrix()?,
            centre: array_to_vec4(&self.centre),
            target: array_to_vec4(&self.target),
            model_id: self.model_id,
            converged: self.converged,
            iterations: self.iterations,
        })
    }
}

/// Persisted symbolic-state grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapJson {
    pub dims: [usize; 2],
    pub ranges: [[f64; 2]; 2],
    pub bins: [usize; 2],
    pub periodic: [bool; 2],
}

impl FeatureMapJson {
    pub fn from_feature_map(fm: &FeatureMap) -> Self {
        FeatureMapJson {
            dims: fm.dims,
            ranges: [
                [fm.ranges[0].0, fm.ranges[0].1],
                [fm.ranges[1].0, fm.ranges[1].1],
            ],
            bins: fm.bins,
            periodic: fm.periodic,
        }
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap {
            dims: self.dims,
            ranges: [
                (self.ranges[0][0], self.ranges[0][1]),
                (self.ranges[1][0], self.ranges[1][1]),
            ],
            bins: self.bins,
            periodic: self.periodic,
        }
    }
}

/// Self-contained trained policy: everything evaluation needs (grid,
/// controllers, greedy action table, and the learnt values) in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub plant: String,
    pub seed: u64,
    pub target: [f64; 4],
    pub feature_map: FeatureMapJson,
    pub controllers: Vec<ControllerJson>,
    /// Greedy action per symbolic cell.
    pub policy: Vec<usize>,
    /// Learnt action values, cells x actions.
    pub q_values: MatrixJson,
    /// Visit counts, cells x actions (row-major).
    pub visits: Vec<u64>,
}

impl PolicyFile {
    pub fn to_bank(&self) -> Result<Vec<Controller>> {
        self.controllers.iter().map(|c| c.to_controller()).collect()
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub(crate) fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    atomic_write(path, &bytes)
}

/// One rollout as CSV: step index, time, the four state entries, then the
/// control entries.
pub fn write_trajectory_csv(path: &Path, t: &Trajectory, state_labels: [&str; 4]) -> Result<()> {
    let m = t.controls.first().map_or(0, |u| u.len());
    let mut header: Vec<String> = vec!["k".into(), "t".into()];
    header.extend(state_labels.iter().map(|s| s.to_string()));
    header.extend((0..m).map(|j| format!("u{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &header, &trajectory_rows(t, None))
}

/// Many rollouts in one CSV with a leading start-index column.
pub fn write_trajectories_csv(
    path: &Path,
    trajectories: &[Trajectory],
    state_labels: [&str; 4],
) -> Result<()> {
    let m = trajectories
        .first()
        .and_then(|t| t.controls.first())
        .map_or(0, |u| u.len());
    let mut header: Vec<String> = vec!["start".into(), "k".into(), "t".into()];
    header.extend(state_labels.iter().map(|s| s.to_string()));
    header.extend((0..m).map(|j| format!("u{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for (i, t) in trajectories.iter().enumerate() {
        rows.extend(trajectory_rows(t, Some(i)));
    }
    write_csv(path, &header, &rows)
}

fn trajectory_rows(t: &Trajectory, start: Option<usize>) -> Vec<Vec<String>> {
    let n = t.states.len();
    (0..n)
        .map(|k| {
            let mut row = Vec::new();
            if let Some(s) = start {
                row.push(s.to_string());
            }
            row.push(k.to_string());
            row.push(fmt_f64(k as f64 * t.dt));
            row.extend(t.states[k].iter().map(|v| fmt_f64(*v)));
            if k + 1 < n {
                row.extend(t.controls[k].iter().map(|v| fmt_f64(*v)));
            } else {
                // No control is applied at the terminal state.
                let m = t.controls.first().map_or(0, |u| u.len());
                row.extend(std::iter::repeat(String::new()).take(m));
            }
            row
        })
        .collect()
}

/// Learning curve: `(epoch, direct reward)` samples.
pub fn write_curve_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let rows = curve
        .iter()
        .map(|(e, r)| vec![e.to_string(), fmt_f64(*r)])
        .collect::<Vec<_>>();
    write_csv(path, &["epoch", "direct_reward"], &rows)
}

/// Evaluation report: one row per start state.
pub fn write_report_csv(
    path: &Path,
    report: &EvaluationReport,
    state_labels: [&str; 4],
) -> Result<()> {
    let mut header = vec!["start".to_string()];
    header.extend(state_labels.iter().map(|l| l.to_string()));
    header.extend(["cost", "success", "diverged"].map(String::from));
    header.extend(state_labels.iter().map(|l| format!("final_{l}")));
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows = report
        .outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let mut row = vec![i.to_string()];
            row.extend(o.start.iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(o.cost));
            row.push(o.success.to_string());
            row.push(o.diverged.to_string());
            row.extend(o.final_state.iter().map(|v| fmt_f64(*v)));
            row
        })
        .collect::<Vec<_>>();
    write_csv(path, &header, &rows)
}

/// Value grid: one row per grid point, row-major over (axis0, axis1).
pub fn write_value_grid_csv(path: &Path, grid: &ValueGrid, labels: [&str; 2]) -> Result<()> {
    let header = [labels[0], labels[1], "cost"];
    let n1 = grid.axes[1].len();
    let rows = grid
        .costs
        .iter()
        .enumerate()
        .map(|(idx, c)| {
            vec![
                fmt_f64(grid.axes[0][idx / n1]),
                fmt_f64(grid.axes[1][idx % n1]),
                fmt_f64(*c),
            ]
        })
        .collect::<Vec<_>>();
    write_csv(path, &header, &rows)
}

/// Per-start switching records: `(start, step, action)` per symbolic-cell
/// entry.
pub fn write_action_sequences_csv(path: &Path, seqs: &[Vec<(usize, usize)>]) -> Result<()> {
    let mut rows = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        for (step, action) in seq {
            rows.push(vec![i.to_string(), step.to_string(), action.to_string()]);
        }
    }
    write_csv(path, &["start", "step", "action"], &rows)
}

/// State labels used in CSV headers for each plant.
pub fn state_labels(plant: &str) -> [&'static str; 4] {
    match plant {
        "arm" => ["theta1", "theta2", "dtheta1", "dtheta2"],
        _ => ["z", "dz", "theta", "dtheta"],
    }
}

/// Labels of the two discretized dimensions for each plant.
pub fn grid_labels(plant: &str) -> [&'static str; 2] {
    match plant {
        "arm" => ["theta1", "theta2"],
        _ => ["theta", "dtheta"],
    }
}
