//! Infinite-horizon discrete-time LQR synthesis and quadratic stage costs.
//!
//! Gains are obtained by iterating the discrete algebraic Riccati recursion
//! to a fixed point starting from the state-cost matrix. A controller keeps
//! the linearisation centre it was synthesized around plus convergence
//! diagnostics so callers can avoid gains whose closed loop is not stable.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ldsi::LinearModel;
use crate::plant::{Control, PlantParams, PlantState};

/// Quadratic cost weights: state weight `w` (symmetric PSD) and control
/// weight `z` (symmetric PD).
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub w: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(w: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() || !z.is_square() {
            return Err(Error::InvalidConfig(
                "cost weight matrices must be square".into(),
            ));
        }
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() < 1e-12;
        if !sym(&w) || !sym(&z) {
            return Err(Error::InvalidConfig(
                "cost weight matrices must be symmetric".into(),
            ));
        }
        if w.clone().symmetric_eigenvalues().min() < -1e-12 {
            return Err(Error::InvalidConfig(
                "state cost weight must be positive semi-definite".into(),
            ));
        }
        if z.clone().cholesky().is_none() {
            return Err(Error::InvalidConfig(
                "control cost weight must be positive definite".into(),
            ));
        }
        Ok(CostWeights { w, z })
    }

    pub fn from_diagonals(w: &[f64], z: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_row_slice(w)),
            DMatrix::from_diagonal(&DVector::from_row_slice(z)),
        )
    }

    /// Arm reaching task weights: joint angles penalised, velocities free.
    pub fn arm_default() -> Self {
        Self::from_diagonals(&[30.0, 30.0, 0.0, 0.0], &[1.0, 1.0]).unwrap()
    }

    /// Cart-pole swing-up weights: heavy on pole angle, light on cart motion.
    pub fn cartpole_default() -> Self {
        Self::from_diagonals(&[30.0, 3.0, 2000.0, 200.0], &[1.0]).unwrap()
    }
}

/// Result of an infinite-horizon Riccati synthesis.
#[derive(Debug, Clone)]
pub struct RiccatiGain {
    /// State-feedback gain (control = -gain * state error).
    pub gain: DMatrix<f64>,
    /// Converged value matrix.
    pub value: DMatrix<f64>,
    /// True when the value iteration converged and the closed loop is stable.
    pub converged: bool,
    pub iterations: usize,
}

/// A feedback controller tied to the linearisation centre it came from.
#[derive(Debug, Clone)]
pub struct Controller {
    pub gain: DMatrix<f64>,
    pub centre: PlantState,
    pub target: PlantState,
    /// Index of the local model this gain was synthesized from.
    pub model_id: usize,
    pub converged: bool,
    pub iterations: usize,
}

fn riccati_update(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
    z: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let btv = b.transpose() * v;
    let s = z + &btv * b;
    let chol = s
        .cholesky()
        .ok_or(Error::Singular("Riccati control-cost inverse"))?;
    let gain = chol.solve(&(&btv * a));
    let mut next = w + a.transpose() * v * a - (a.transpose() * v * b) * gain;
    // Symmetrize to stop round-off drift from accumulating over iterations.
    next = (&next + next.transpose()) * 0.5;
    Ok(next)
}

/// Feedback gain for the value-iteration fixed point of the discrete
/// algebraic Riccati equation, starting from `V = W`.
///
/// Iteration stops when the max-abs change falls below `tol` or after
/// `max_iter` sweeps. Non-finite growth (e.g. for unstabilizable models)
/// yields `converged = false` with the last finite value matrix rather than
/// an error, so callers can keep bank positions aligned and skip the gain.
pub fn riccati_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cost: &CostWeights,
    max_iter: usize,
    tol: f64,
) -> Result<RiccatiGain> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "riccati_gain dynamics matrix",
            expected: n,
            got: a.ncols(),
        });
    }
    if b.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "riccati_gain input matrix rows",
            expected: n,
            got: b.nrows(),
        });
    }
    let m = b.ncols();
    if cost.w.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "riccati_gain state cost",
            expected: n,
            got: cost.w.nrows(),
        });
    }
    if cost.z.nrows() != m {
        return Err(Error::DimensionMismatch {
            context: "riccati_gain control cost",
            expected: m,
            got: cost.z.nrows(),
        });
    }

    let mut v = cost.w.clone();
    let mut converged = false;
    let mut iterations = max_iter;
    for it in 0..max_iter {
        let next = riccati_update(a, b, &cost.w, &cost.z, &v)?;
        if !next.iter().all(|x| x.is_finite()) {
            // Diverging value iteration: report the last finite iterate.
            let gain = feedback_gain(a, b, &cost.z, &v)?;
            return Ok(RiccatiGain {
                gain,
                value: v,
                converged: false,
                iterations: it + 1,
            });
        }
        let diff = (&next - &v).amax();
        v = next;
        if diff < tol {
            converged = true;
            iterations = it + 1;
            break;
        }
    }
    let gain = feedback_gain(a, b, &cost.z, &v)?;
    if converged {
        // Only report success if the resulting closed loop is actually stable.
        let closed = a - b * &gain;
        let rho = closed
            .complex_eigenvalues()
            .iter()
            .fold(0.0f64, |acc, e| acc.max(e.norm()));
        converged = rho < 1.0;
    }
    Ok(RiccatiGain {
        gain,
        value: v,
        converged,
        iterations,
    })
}

fn feedback_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    z: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let btv = b.transpose() * v;
    let s = z + &btv * b;
    let chol = s
        .cholesky()
        .ok_or(Error::Singular("Riccati control-cost inverse"))?;
    Ok(chol.solve(&(&btv * a)))
}

/// Feedback law `u = -L (x - target)` with the plant's angle-aware error.
/// The result is intentionally unsaturated; actuator limits are applied by
/// the plant when the control is used.
pub fn lqr_control(c: &Controller, plant: &PlantParams, x: &PlantState) -> Control {
    let e = plant.state_error(x, &c.target);
    let ed = DVector::from_column_slice(e.as_slice());
    -(&c.gain * ed)
}

/// Quadratic stage cost `0.5 (e' W e + u' Z u)` with `e` the angle-aware
/// deviation of `x` from the plant target.
pub fn stage_cost(plant: &PlantParams, cost: &CostWeights, x: &PlantState, u: &Control) -> f64 {
    let e = plant.state_error(x, &plant.target);
    let ed = DVector::from_column_slice(e.as_slice());
    0.5 * ((&cost.w * &ed).dot(&ed) + (&cost.z * u).dot(u))
}

/// Default iteration cap for the infinite-horizon synthesis: far beyond the
/// horizon at which stabilizable models converge.
pub const RICCATI_MAX_ITER: usize = 10_000;
/// Default max-abs value-matrix change at which iteration stops.
pub const RICCATI_TOL: f64 = 1e-10;

/// One infinite-horizon controller per local model, in model order (so the
/// learner's action index `i` always selects the gain of model `i`), all
/// regulating toward `target`. Models whose Riccati iteration does not
/// converge keep their bank slot with `converged = false`; selecting them is
/// allowed and the learner discovers their cost on its own.
pub fn build_controller_bank(
    models: &[LinearModel],
    cost: &CostWeights,
    target: &PlantState,
    max_iter: usize,
    tol: f64,
) -> Result<Vec<Controller>> {
    if models.is_empty() {
        return Err(Error::InvalidConfig(
            "controller bank needs at least one local model".into(),
        ));
    }
    models
        .iter()
        .enumerate()
        .map(|(id, model)| {
            let a = DMatrix::from_iterator(4, 4, model.a.iter().cloned());
            let r = riccati_gain(&a, &model.b, cost, max_iter, tol)?;
            Ok(Controller {
                gain: r.gain,
                centre: model.centre,
                target: *target,
                model_id: id,
                converged: r.converged,
                iterations: r.iterations,
            })
        })
        .collect()
}
