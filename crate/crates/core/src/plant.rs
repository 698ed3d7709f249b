//! Benchmark plants and their numerical integration.
//!
//! Two nonlinear plants are provided, both with a four-dimensional state:
//!
//! * a two-link planar robotic arm, state `(theta1, theta2, dtheta1, dtheta2)`,
//!   torque-controlled at both joints, no gravity (horizontal plane), with
//!   viscous joint friction and hard joint limits on `[0, pi]`;
//! * a cart-pole, state `(z, dz, theta, dtheta)` with `theta = 0` the upright
//!   unstable equilibrium, force-controlled at the cart, with Coulomb-style
//!   cart friction and viscous pole friction. The pole angle is kept wrapped
//!   to `(-pi, pi]`.
//!
//! Continuous dynamics are integrated with a classical fourth-order
//! Runge-Kutta step under zero-order-hold control.

use nalgebra::{DVector, Matrix2, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Plant state vector `(four dimensions for both benchmark plants)`.
pub type PlantState = Vector4<f64>;

/// Control vector; one entry for the cart-pole, two for the arm.
pub type Control = DVector<f64>;

/// Wrap an angle to the half-open interval `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    std::f64::consts::PI - (std::f64::consts::PI - a).rem_euclid(2.0 * std::f64::consts::PI)
}

/// Sign function with `sgn(0) = 0`, used for Coulomb friction.
pub(crate) fn sgn(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum()
    }
}

/// `n` equally spaced values covering `[lo, hi]` inclusive; the midpoint for `n = 1`.
pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

/// Physical constants of the two-link planar arm.
///
/// `i1`/`i2` are moments of inertia about the joints, `c1`/`c2` the
/// centre-of-mass distances from the joints, `b` the joint friction matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmParams {
    pub l1: f64,
    pub l2: f64,
    pub m1: f64,
    pub m2: f64,
    pub c1: f64,
    pub c2: f64,
    pub i1: f64,
    pub i2: f64,
    pub b: Matrix2<f64>,
}

impl Default for ArmParams {
    fn default() -> Self {
        ArmParams {
            l1: 0.3,
            l2: 0.33,
            m1: 1.4,
            m2: 2.5,
            c1: 0.11,
            c2: 0.165,
            i1: 0.025,
            i2: 0.072,
            b: Matrix2::new(0.5, 0.1, 0.1, 0.5),
        }
    }
}

/// Physical constants of the cart-pole.
#[derive(Debug, Clone, PartialEq)]
pub struct CartPoleParams {
    /// Distance from the pivot to the pole's centre of mass.
    pub l: f64,
    pub m_p: f64,
    pub m_c: f64,
    pub g: f64,
    /// Viscous pole friction coefficient.
    pub b_p: f64,
    /// Coulomb cart friction coefficient.
    pub b_c: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            l: 0.6,
            m_p: 0.5,
            m_c: 0.5,
            g: 9.80665,
            b_p: 0.0,
            b_c: 0.1,
        }
    }
}

/// Which plant is being simulated, with its physical constants.
#[derive(Debug, Clone, PartialEq)]
pub enum PlantModel {
    Arm(ArmParams),
    CartPole(CartPoleParams),
}

/// A plant together with its simulation, saturation, and task parameters.
#[derive(Debug, Clone)]
pub struct PlantParams {
    pub model: PlantModel,
    /// Integration/control time step.
    pub dt: f64,
    /// Episode length in steps (states per trajectory).
    pub n_steps: usize,
    /// Task target state.
    pub target: PlantState,
    /// Std of the additive per-dimension Gaussian noise applied after each step.
    pub noise_std: f64,
    pub u_min: f64,
    pub u_max: f64,
}

/// Time-discrete rollout: `states.len() == controls.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<PlantState>,
    pub controls: Vec<Control>,
    pub dt: f64,
    /// True when integration produced a non-finite state and the rollout was
    /// truncated at the last finite state.
    pub diverged: bool,
}

/// Forward dynamics of the two-link arm: returns `d/dt (theta1, theta2, dtheta1, dtheta2)`.
///
/// The inertia matrix is always positive definite for physically consistent
/// constants, so no inversion failure can occur.
pub fn arm_derivative(x: &PlantState, u: &Control, p: &ArmParams) -> PlantState {
    let (t2, dt1, dt2) = (x[1], x[2], x[3]);
    let a = p.m2 * p.l1 * p.c2;
    let cos2 = t2.cos();
    let m11 = p.i1 + p.i2 + p.m2 * p.l1 * p.l1 + 2.0 * a * cos2;
    let m12 = p.i2 + a * cos2;
    let m22 = p.i2;

    // Coriolis/centripetal torques and viscous joint friction.
    let h = a * t2.sin();
    let c1 = -h * dt2 * (2.0 * dt1 + dt2);
    let c2 = h * dt1 * dt1;
    let f1 = p.b[(0, 0)] * dt1 + p.b[(0, 1)] * dt2;
    let f2 = p.b[(1, 0)] * dt1 + p.b[(1, 1)] * dt2;

    let r1 = u[0] - c1 - f1;
    let r2 = u[1] - c2 - f2;
    let det = m11 * m22 - m12 * m12;
    debug_assert!(det > 0.0, "arm inertia matrix must be positive definite");
    Vector4::new(
        dt1,
        dt2,
        (m22 * r1 - m12 * r2) / det,
        (-m12 * r1 + m11 * r2) / det,
    )
}

/// Forward dynamics of the cart-pole: returns `d/dt (z, dz, theta, dtheta)`.
pub fn cartpole_derivative(x: &PlantState, u: &Control, p: &CartPoleParams) -> PlantState {
    let (dz, th, dth) = (x[1], x[2], x[3]);
    let (s, c) = th.sin_cos();
    let m11 = p.m_c + p.m_p;
    let m12 = p.m_p * p.l * c;
    let m22 = p.m_p * p.l * p.l;

    // Centripetal coupling on the cart, gravity on the pole, friction on both.
    let cq1 = -p.m_p * p.l * dth * dth * s;
    let g2 = -p.m_p * p.g * p.l * s;
    let r1 = u[0] - cq1 - p.b_c * sgn(dz);
    let r2 = -g2 - p.b_p * dth;

    let det = m11 * m22 - m12 * m12; // = m_p l^2 (m_c + m_p sin^2 th) > 0
    Vector4::new(
        dz,
        (m22 * r1 - m12 * r2) / det,
        dth,
        (-m12 * r1 + m11 * r2) / det,
    )
}

/// One classical Runge-Kutta step of size `dt` under constant control `u`.
pub fn rk4_step<F>(f: F, x: &PlantState, u: &Control, dt: f64) -> PlantState
where
    F: Fn(&PlantState, &Control) -> PlantState,
{
    let k1 = f(x, u) * dt;
    let k2 = f(&(x + k1 * 0.5), u) * dt;
    let k3 = f(&(x + k2 * 0.5), u) * dt;
    let k4 = f(&(x + k3), u) * dt;
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) / 6.0
}

impl PlantParams {
    /// Table defaults for the two-link arm task (reach `(pi/2, pi/2)` at rest).
    pub fn arm_default() -> Self {
        PlantParams {
            model: PlantModel::Arm(ArmParams::default()),
            dt: 0.01,
            n_steps: 300,
            target: Vector4::new(
                std::f64::consts::FRAC_PI_2,
                std::f64::consts::FRAC_PI_2,
                0.0,
                0.0,
            ),
            noise_std: 1e-3,
            u_min: -10.0,
            u_max: 10.0,
        }
    }

    /// Table defaults for the cart-pole swing-up task (upright, cart stopped at origin).
    pub fn cartpole_default() -> Self {
        PlantParams {
            model: PlantModel::CartPole(CartPoleParams::default()),
            dt: 0.01,
            n_steps: 300,
            target: Vector4::zeros(),
            noise_std: 1e-3,
            u_min: -20.0,
            u_max: 20.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.model {
            PlantModel::Arm(_) => "arm",
            PlantModel::CartPole(_) => "cartpole",
        }
    }

    pub fn control_dim(&self) -> usize {
        match self.model {
            PlantModel::Arm(_) => 2,
            PlantModel::CartPole(_) => 1,
        }
    }

    /// Indices of the two state dimensions used for symbolic discretization,
    /// start grids, and nearest-centre distances.
    pub fn discretized_dims(&self) -> [usize; 2] {
        match self.model {
            PlantModel::Arm(_) => [0, 1],
            PlantModel::CartPole(_) => [2, 3],
        }
    }

    /// Ranges of the discretized dimensions (radians / radians per second).
    pub fn discretized_ranges(&self) -> [(f64, f64); 2] {
        match self.model {
            PlantModel::Arm(_) => [(0.0, std::f64::consts::PI), (0.0, std::f64::consts::PI)],
            PlantModel::CartPole(_) => {
                let w = 250.0_f64.to_radians();
                [(-std::f64::consts::PI, std::f64::consts::PI), (-w, w)]
            }
        }
    }

    /// Whether each discretized dimension is periodic.
    pub fn periodic_dims(&self) -> [bool; 2] {
        match self.model {
            PlantModel::Arm(_) => [false, false],
            PlantModel::CartPole(_) => [true, false],
        }
    }

    /// State dimensions randomised when placing linearisation centres
    /// (all other dimensions stay zero).
    pub fn centre_dims(&self) -> &'static [usize] {
        match self.model {
            PlantModel::Arm(_) => &[0, 1],
            PlantModel::CartPole(_) => &[2],
        }
    }

    /// Continuous-time state derivative for the configured plant.
    pub fn derivative(&self, x: &PlantState, u: &Control) -> PlantState {
        match &self.model {
            PlantModel::Arm(p) => arm_derivative(x, u, p),
            PlantModel::CartPole(p) => cartpole_derivative(x, u, p),
        }
    }

    /// Clamp a control vector to the actuator bounds.
    pub fn saturate(&self, u: &Control) -> Control {
        u.map(|v| v.clamp(self.u_min, self.u_max))
    }

    /// Enforce state-space invariants after a step: the cart-pole angle is
    /// wrapped to `(-pi, pi]`; arm joints are clamped to `[0, pi]` with the
    /// joint velocity zeroed on contact with a limit.
    pub fn normalize(&self, x: &PlantState) -> PlantState {
        let mut x = *x;
        match self.model {
            PlantModel::CartPole(_) => x[2] = wrap_angle(x[2]),
            PlantModel::Arm(_) => {
                for j in 0..2 {
                    if x[j] < 0.0 {
                        x[j] = 0.0;
                        x[j + 2] = 0.0;
                    } else if x[j] > std::f64::consts::PI {
                        x[j] = std::f64::consts::PI;
                        x[j + 2] = 0.0;
                    }
                }
            }
        }
        x
    }

    /// One zero-order-hold RK4 step followed by state normalization.
    /// The control is applied as given (saturation is the caller's choice).
    pub fn step(&self, x: &PlantState, u: &Control) -> PlantState {
        let next = rk4_step(|x, u| self.derivative(x, u), x, u, self.dt);
        self.normalize(&next)
    }

    /// [`step`](Self::step) plus the plant's additive Gaussian process noise
    /// (std `noise_std` per dimension) and re-normalization.
    pub fn step_noisy<R: Rng + ?Sized>(
        &self,
        x: &PlantState,
        u: &Control,
        rng: &mut R,
    ) -> PlantState {
        let mut next = self.step(x, u);
        if self.noise_std > 0.0 {
            for i in 0..4 {
                let w: f64 = rng.sample(StandardNormal);
                next[i] += self.noise_std * w;
            }
            next = self.normalize(&next);
        }
        next
    }

    /// Express a state in the chart of a linearisation centre: periodic
    /// coordinates are rewritten as `centre + wrapped difference`, so values
    /// near the centre are continuous around it (possibly outside
    /// `(-pi, pi]`) instead of splitting into clusters `2*pi` apart at the
    /// angle seam. Non-periodic plants are returned unchanged.
    pub fn chart_state(&self, centre: &PlantState, x: &PlantState) -> PlantState {
        match self.model {
            PlantModel::Arm(_) => *x,
            PlantModel::CartPole(_) => {
                let mut y = *x;
                y[2] = centre[2] + wrap_angle(x[2] - centre[2]);
                y
            }
        }
    }

    /// Difference `x - reference` with the cart-pole angle error wrapped to
    /// the shortest arc.
    pub fn state_error(&self, x: &PlantState, reference: &PlantState) -> PlantState {
        let mut e = x - reference;
        if let PlantModel::CartPole(_) = self.model {
            e[2] = wrap_angle(e[2]);
        }
        e
    }

    /// Roll the plant forward for `n_steps - 1` transitions from `x0`.
    ///
    /// `policy` is called with the step index and current state and must
    /// return a control of the plant's control dimension; the control is
    /// saturated before being applied. Additive Gaussian noise of std
    /// `noise_std` per dimension perturbs every post-step state. If a state
    /// goes non-finite the rollout is truncated and flagged as diverged.
    pub fn simulate<F, R>(
        &self,
        x0: &PlantState,
        mut policy: F,
        n_steps: usize,
        rng: &mut R,
    ) -> Result<Trajectory>
    where
        F: FnMut(usize, &PlantState) -> Control,
        R: Rng + ?Sized,
    {
        if n_steps < 2 {
            return Err(Error::InvalidConfig(format!(
                "simulate requires at least 2 steps, got {n_steps}"
            )));
        }
        let m = self.control_dim();
        let mut states = Vec::with_capacity(n_steps);
        let mut controls = Vec::with_capacity(n_steps - 1);
        let mut x = self.normalize(x0);
        states.push(x);
        for k in 0..n_steps - 1 {
            let u = policy(k, &x);
            if u.len() != m {
                return Err(Error::DimensionMismatch {
                    context: "simulate control source",
                    expected: m,
                    got: u.len(),
                });
            }
            let u = self.saturate(&u);
            let next = self.step_noisy(&x, &u, rng);
            if !next.iter().all(|v| v.is_finite()) {
                return Ok(Trajectory {
                    states,
                    controls,
                    dt: self.dt,
                    diverged: true,
                });
            }
            controls.push(u);
            states.push(next);
            x = next;
        }
        Ok(Trajectory {
            states,
            controls,
            dt: self.dt,
            diverged: false,
        })
    }
}
