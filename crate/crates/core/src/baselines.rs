//! Non-learning baseline policies and the shared evaluation protocol.
//!
//! Evaluation rolls a policy out noise-free from a grid of start states for
//! a fixed duration, integrating the quadratic stage cost over time and
//! checking whether the final state is inside the task tolerance. The same
//! machinery drives the learnt switching policy, the nearest-centre
//! baseline, a single target LQR, and per-start LQR banks.

use nalgebra::Vector4;

use crate::error::{Error, Result};
use crate::lqr::{lqr_control, stage_cost, Controller, CostWeights};
use crate::plant::{wrap_angle, Control, PlantModel, PlantParams, PlantState, Trajectory};
use crate::rl::{FeatureMap, RlocPolicy};

/// A deterministic switching policy: which controller runs at a state, and
/// the control it produces there.
pub trait ControlPolicy {
    fn action(&self, x: &PlantState) -> usize;
    fn control(&self, x: &PlantState) -> Control;
}

impl ControlPolicy for RlocPolicy<'_> {
    fn action(&self, x: &PlantState) -> usize {
        RlocPolicy::action(self, x)
    }
    fn control(&self, x: &PlantState) -> Control {
        RlocPolicy::control(self, x)
    }
}

/// Index of the centre nearest to `x` in Euclidean distance over the
/// discretized dimensions only (wrapped on periodic axes). Ties resolve to
/// the lowest index.
pub fn nearest_centre(plant: &PlantParams, centres: &[PlantState], x: &PlantState) -> usize {
    let dims = plant.discretized_dims();
    let periodic = plant.periodic_dims();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centres.iter().enumerate() {
        let mut d = 0.0;
        for (axis, &dim) in dims.iter().enumerate() {
            let mut diff = x[dim] - c[dim];
            if periodic[axis] {
                diff = wrap_angle(diff);
            }
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Nearest-neighbour optimal control: always run the gain whose
/// linearisation centre is closest to the current state.
#[derive(Debug, Clone)]
pub struct NnocPolicy<'a> {
    pub plant: &'a PlantParams,
    pub bank: &'a [Controller],
}

impl ControlPolicy for NnocPolicy<'_> {
    fn action(&self, x: &PlantState) -> usize {
        let centres: Vec<PlantState> = self.bank.iter().map(|c| c.centre).collect();
        nearest_centre(self.plant, &centres, x)
    }
    fn control(&self, x: &PlantState) -> Control {
        lqr_control(&self.bank[self.action(x)], self.plant, x)
    }
}

/// A single fixed gain applied everywhere (target LQR, or one entry of a
/// per-start LQR bank).
#[derive(Debug, Clone)]
pub struct FixedPolicy<'a> {
    pub plant: &'a PlantParams,
    pub controller: &'a Controller,
}

impl ControlPolicy for FixedPolicy<'_> {
    fn action(&self, _x: &PlantState) -> usize {
        self.controller.model_id
    }
    fn control(&self, x: &PlantState) -> Control {
        lqr_control(self.controller, self.plant, x)
    }
}

/// Final-state success tolerances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetTolerance {
    /// Max absolute angle error (radians).
    pub angle: f64,
    /// Max absolute angular velocity error (radians per second).
    pub velocity: f64,
    /// Max absolute cart position error (metres; cart-pole only).
    pub position: f64,
}

impl Default for TargetTolerance {
    fn default() -> Self {
        TargetTolerance {
            angle: 3.0_f64.to_radians(),
            velocity: 10.0_f64.to_radians(),
            position: 0.1,
        }
    }
}

/// Whether `x` satisfies the task tolerance around the plant target. The
/// cart velocity is unconstrained for the cart-pole.
pub fn within_tolerance(plant: &PlantParams, tol: &TargetTolerance, x: &PlantState) -> bool {
    let e = plant.state_error(x, &plant.target);
    match plant.model {
        PlantModel::Arm(_) => {
            e[0].abs() < tol.angle
                && e[1].abs() < tol.angle
                && e[2].abs() < tol.velocity
                && e[3].abs() < tol.velocity
        }
        PlantModel::CartPole(_) => {
            e[2].abs() < tol.angle && e[3].abs() < tol.velocity && e[0].abs() < tol.position
        }
    }
}

/// `n` must be a perfect square; returns a `sqrt(n) x sqrt(n)` grid of cell
/// centres over the discretized dimensions (other dimensions zero).
pub fn evaluation_start_grid(plant: &PlantParams, n: usize) -> Result<Vec<PlantState>> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::InvalidConfig(format!(
            "evaluation grid size must be a perfect square, got {n}"
        )));
    }
    let dims = plant.discretized_dims();
    let ranges = plant.discretized_ranges();
    let centres = |axis: usize| -> Vec<f64> {
        let (lo, hi) = ranges[axis];
        let w = (hi - lo) / side as f64;
        (0..side).map(|i| lo + (i as f64 + 0.5) * w).collect()
    };
    let (v0, v1) = (centres(0), centres(1));
    let mut starts = Vec::with_capacity(n);
    for a in &v0 {
        for b in &v1 {
            let mut x = Vector4::zeros();
            x[dims[0]] = *a;
            x[dims[1]] = *b;
            starts.push(x);
        }
    }
    Ok(starts)
}

/// Outcome of evaluating one start state.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub start: PlantState,
    pub final_state: PlantState,
    /// Time-integrated stage cost.
    pub cost: f64,
    pub success: bool,
    pub diverged: bool,
}

/// Evaluation over a set of start states.
#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub outcomes: Vec<EvalOutcome>,
    pub mean_cost: f64,
    /// Standard error of the mean cost.
    pub sem_cost: f64,
    pub success_rate: f64,
    pub duration: f64,
    pub trajectories: Option<Vec<Trajectory>>,
}

pub(crate) fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Deterministic, noise-free policy evaluation: roll out for `duration`
/// seconds from every start, integrate the stage cost, and test the final
/// state against the tolerance. A diverging rollout counts as failure with
/// the cost accumulated so far.
pub fn evaluate_policy(
    plant: &PlantParams,
    cost: &CostWeights,
    policy: &dyn ControlPolicy,
    starts: &[PlantState],
    duration: f64,
    tol: &TargetTolerance,
    record_trajectories: bool,
) -> EvaluationReport {
    let mut quiet = plant.clone();
    quiet.noise_std = 0.0;
    let n_steps = (duration / quiet.dt).round() as usize;
    let mut outcomes = Vec::with_capacity(starts.len());
    let mut trajectories = record_trajectories.then(Vec::new);

    for x0 in starts {
        let mut x = quiet.normalize(x0);
        let mut acc = 0.0;
        let mut diverged = false;
        let mut traj = record_trajectories.then(|| Trajectory {
            states: vec![x],
            controls: Vec::with_capacity(n_steps),
            dt: quiet.dt,
            diverged: false,
        });
        for _ in 0..n_steps {
            let u = quiet.saturate(&policy.control(&x));
            acc += stage_cost(&quiet, cost, &x, &u) * quiet.dt;
            let next = quiet.step(&x, &u);
            if !next.iter().all(|v| v.is_finite()) {
                diverged = true;
                break;
            }
            x = next;
            if let Some(t) = traj.as_mut() {
                t.states.push(x);
                t.controls.push(u);
            }
        }
        let success = !diverged && within_tolerance(&quiet, tol, &x);
        outcomes.push(EvalOutcome {
            start: *x0,
            final_state: x,
            cost: acc,
            success,
            diverged,
        });
        if let (Some(all), Some(mut t)) = (trajectories.as_mut(), traj) {
            t.diverged = diverged;
            all.push(t);
        }
    }

    let costs: Vec<f64> = outcomes.iter().map(|o| o.cost).collect();
    let (mean_cost, sem_cost) = mean_sem(&costs);
    let success_rate =
        outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len().max(1) as f64;
    EvaluationReport {
        outcomes,
        mean_cost,
        sem_cost,
        success_rate,
        duration,
        trajectories,
    }
}

/// Evaluate a bank of per-start controllers: start `i` is driven for the
/// whole rollout by `controllers[i]` alone. This is the grid-of-independent-
/// LQRs baseline; it needs exactly one controller per start.
pub fn evaluate_per_start_controllers(
    plant: &PlantParams,
    cost: &CostWeights,
    controllers: &[Controller],
    starts: &[PlantState],
    duration: f64,
    tol: &TargetTolerance,
    record_trajectories: bool,
) -> Result<EvaluationReport> {
    if controllers.len() != starts.len() {
        return Err(Error::DimensionMismatch {
            context: "per-start controller bank",
            expected: starts.len(),
            got: controllers.len(),
        });
    }
    let mut outcomes = Vec::with_capacity(starts.len());
    let mut trajectories = record_trajectories.then(Vec::new);
    for (ctrl, x0) in controllers.iter().zip(starts) {
        let policy = FixedPolicy {
            plant,
            controller: ctrl,
        };
        let mut one = evaluate_policy(
            plant,
            cost,
            &policy,
            std::slice::from_ref(x0),
            duration,
            tol,
            record_trajectories,
        );
        outcomes.push(one.outcomes.pop().expect("one outcome per start"));
        if let (Some(all), Some(mut t)) = (trajectories.as_mut(), one.trajectories) {
            all.push(t.pop().expect("one trajectory per start"));
        }
    }
    let costs: Vec<f64> = outcomes.iter().map(|o| o.cost).collect();
    let (mean_cost, sem_cost) = mean_sem(&costs);
    let success_rate =
        outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len().max(1) as f64;
    Ok(EvaluationReport {
        outcomes,
        mean_cost,
        sem_cost,
        success_rate,
        duration,
        trajectories,
    })
}

/// Dense map of rollout cost over the discretized state plane.
#[derive(Debug, Clone)]
pub struct ValueGrid {
    /// State dimensions spanned by the grid rows/columns.
    pub dims: [usize; 2],
    /// Grid point coordinates along each axis.
    pub axes: [Vec<f64>; 2],
    /// Row-major costs: `costs[i * axes[1].len() + j]` for axes\[0\]\[i\], axes\[1\]\[j\].
    pub costs: Vec<f64>,
}

/// Evaluate `policy` from every point of a `resolution[0] x resolution[1]`
/// grid of cell centres over the discretized dimensions.
pub fn value_function_grid(
    plant: &PlantParams,
    cost: &CostWeights,
    policy: &dyn ControlPolicy,
    resolution: [usize; 2],
    duration: f64,
    tol: &TargetTolerance,
) -> ValueGrid {
    let dims = plant.discretized_dims();
    let ranges = plant.discretized_ranges();
    let axis = |k: usize| -> Vec<f64> {
        let (lo, hi) = ranges[k];
        let w = (hi - lo) / resolution[k] as f64;
        (0..resolution[k]).map(|i| lo + (i as f64 + 0.5) * w).collect()
    };
    let axes = [axis(0), axis(1)];
    let mut costs = Vec::with_capacity(resolution[0] * resolution[1]);
    for a in &axes[0] {
        for b in &axes[1] {
            let mut x = Vector4::zeros();
            x[dims[0]] = *a;
            x[dims[1]] = *b;
            let report = evaluate_policy(plant, cost, policy, &[x], duration, tol, false);
            costs.push(report.outcomes[0].cost);
        }
    }
    ValueGrid { dims, axes, costs }
}

/// For each start, the `(step, action)` sequence sampled at every symbolic
/// cell entry (step 0 records the initial action).
pub fn action_sequences(
    plant: &PlantParams,
    policy: &dyn ControlPolicy,
    fm: &FeatureMap,
    starts: &[PlantState],
    duration: f64,
) -> Vec<Vec<(usize, usize)>> {
    let mut quiet = plant.clone();
    quiet.noise_std = 0.0;
    let n_steps = (duration / quiet.dt).round() as usize;
    starts
        .iter()
        .map(|x0| {
            let mut x = quiet.normalize(x0);
            let mut cell = fm.cell_of(&x);
            let mut seq = vec![(0usize, policy.action(&x))];
            for k in 1..=n_steps {
                let u = quiet.saturate(&policy.control(&x));
                let next = quiet.step(&x, &u);
                if !next.iter().all(|v| v.is_finite()) {
                    break;
                }
                x = next;
                let c = fm.cell_of(&x);
                if c != cell {
                    cell = c;
                    seq.push((k, policy.action(&x)));
                }
            }
            seq
        })
        .collect()
}
