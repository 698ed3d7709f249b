//! Tabular Monte-Carlo reinforcement learning over a coarse symbolic state
//! grid, where each high-level action runs one LQR feedback gain.
//!
//! An epoch starts at the centre of a random grid cell and rolls the plant
//! forward for the episode length under the controller chosen by an
//! epsilon-greedy lookup. Quadratic stage cost accumulates while the state
//! stays in one cell; on every cell change the negated accumulated cost is
//! emitted as the reward of a `(reward, cell, action)` triplet and a new
//! action is drawn. The occupancy in progress at epoch end emits a closing
//! triplet, so the rewards partition the epoch cost. Action values are
//! updated by every-visit Monte-Carlo with a polynomially decaying per-visit
//! step size.

use nalgebra::{DVector, Vector4};
use rand::Rng;

use crate::error::Result;
use crate::lqr::{lqr_control, stage_cost, Controller, CostWeights};
use crate::plant::{Control, PlantParams, PlantState};

/// Uniform grid over the plant's two discretized state dimensions, mapping
/// continuous states to symbolic cell indices (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// State dimensions being discretized.
    pub dims: [usize; 2],
    pub ranges: [(f64, f64); 2],
    pub bins: [usize; 2],
    /// Periodic axes wrap before binning; the rest clamp to the edge bins.
    pub periodic: [bool; 2],
}

impl FeatureMap {
    /// Grid over the plant's discretized dimensions with the given bin counts.
    pub fn for_plant(plant: &PlantParams, bins: [usize; 2]) -> Self {
        FeatureMap {
            dims: plant.discretized_dims(),
            ranges: plant.discretized_ranges(),
            bins,
            periodic: plant.periodic_dims(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.bins[0] * self.bins[1]
    }

    fn axis_bin(&self, axis: usize, v: f64) -> usize {
        let (lo, hi) = self.ranges[axis];
        let n = self.bins[axis];
        let width = (hi - lo) / n as f64;
        let v = if self.periodic[axis] {
            lo + (v - lo).rem_euclid(hi - lo)
        } else {
            v
        };
        (((v - lo) / width).floor() as isize).clamp(0, n as isize - 1) as usize
    }

    /// Symbolic cell index of a continuous state.
    pub fn cell_of(&self, x: &PlantState) -> usize {
        let b0 = self.axis_bin(0, x[self.dims[0]]);
        let b1 = self.axis_bin(1, x[self.dims[1]]);
        b0 * self.bins[1] + b1
    }

    /// Continuous centre of a cell; non-discretized dimensions are zero.
    pub fn cell_centre(&self, cell: usize) -> PlantState {
        let b0 = cell / self.bins[1];
        let b1 = cell % self.bins[1];
        let mut x = Vector4::zeros();
        for (axis, b) in [(0, b0), (1, b1)] {
            let (lo, hi) = self.ranges[axis];
            let width = (hi - lo) / self.bins[axis] as f64;
            x[self.dims[axis]] = lo + (b as f64 + 0.5) * width;
        }
        x
    }
}

/// Tabular action-value estimates with per-pair visit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major `n_states x n_actions` values, initialised to zero.
    pub values: Vec<f64>,
    pub visits: Vec<u64>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        QTable {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
            visits: vec![0; n_states * n_actions],
        }
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    /// Greedy action with deterministic lowest-index tie-breaking.
    pub fn greedy(&self, s: usize) -> usize {
        let row = &self.values[s * self.n_actions..(s + 1) * self.n_actions];
        let mut best = 0;
        for (a, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    fn greedy_set(&self, s: usize) -> Vec<usize> {
        let row = &self.values[s * self.n_actions..(s + 1) * self.n_actions];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter()
            .enumerate()
            .filter(|(_, &v)| v == max)
            .map(|(a, _)| a)
            .collect()
    }
}

/// Learning schedule parameters.
#[derive(Debug, Clone, Copy)]
pub struct LearnParams {
    /// Base exploration rate.
    pub epsilon: f64,
    /// Exploration decay exponent: epoch j explores with `epsilon * j^-decay`.
    pub epsilon_decay: f64,
    /// Return discount.
    pub gamma: f64,
    /// Base learning step size.
    pub alpha: f64,
    /// Step-size decay exponent: visit i updates with `alpha / i^decay`.
    pub alpha_decay: f64,
    pub n_epochs: usize,
    /// The learning curve records every `curve_stride`-th epoch, starting at 1.
    pub curve_stride: usize,
}

impl Default for LearnParams {
    fn default() -> Self {
        LearnParams {
            epsilon: 0.1,
            epsilon_decay: 0.1,
            gamma: 1.0,
            alpha: 1.0,
            alpha_decay: 0.5,
            n_epochs: 2000,
            curve_stride: 6,
        }
    }
}

/// One `(reward, symbolic state, action)` experience triplet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub reward: f64,
    pub state: usize,
    pub action: usize,
}

/// Trace of one learning epoch.
#[derive(Debug, Clone)]
pub struct EpochTrace {
    /// One triplet per cell occupancy, in visit order; the rewards partition
    /// the epoch cost.
    pub triplets: Vec<Triplet>,
    /// Negated cost accumulated over the whole epoch (the epoch's direct
    /// reward); equals the sum of the triplet rewards.
    pub total_reward: f64,
    pub start_cell: usize,
    pub diverged: bool,
}

/// Epsilon-greedy draw: the greedy action with probability `1 - epsilon`
/// (ties broken uniformly at random), otherwise uniform over the non-greedy
/// actions, giving each probability `epsilon / (n_actions - 1)` when the
/// maximiser is unique.
pub fn select_action<R: Rng + ?Sized>(q: &QTable, s: usize, epsilon: f64, rng: &mut R) -> usize {
    if q.n_actions == 1 {
        return 0;
    }
    let greedy = q.greedy_set(s);
    if greedy.len() == q.n_actions || rng.gen::<f64>() >= epsilon {
        greedy[rng.gen_range(0..greedy.len())]
    } else {
        let others: Vec<usize> = (0..q.n_actions).filter(|a| !greedy.contains(a)).collect();
        others[rng.gen_range(0..others.len())]
    }
}

/// Pessimistic stage cost charged when an epoch diverges: the state error is
/// taken as the full width of both discretized ranges and the control sits at
/// the saturation bound.
fn divergence_stage_cost(plant: &PlantParams, cost: &CostWeights) -> f64 {
    let dims = plant.discretized_dims();
    let ranges = plant.discretized_ranges();
    let mut e = Vector4::zeros();
    e[dims[0]] = ranges[0].1 - ranges[0].0;
    e[dims[1]] = ranges[1].1 - ranges[1].0;
    let ed = DVector::from_column_slice(e.as_slice());
    let u = DVector::from_element(plant.control_dim(), plant.u_max);
    0.5 * ((&cost.w * &ed).dot(&ed) + (&cost.z * &u).dot(&u))
}

/// Run one learning epoch from a uniformly random cell centre.
///
/// The stage cost of each step (times `dt`) is charged to the cell occupied
/// at the start of the step. A triplet is emitted whenever the plant crosses
/// into a new cell, and the occupancy in progress when the epoch ends emits
/// a final triplet as well, so the triplet rewards partition the epoch cost.
/// Without that closing triplet, a controller that parks the plant at an
/// off-target equilibrium inside one cell would never be charged for it and
/// the cell's action value would keep its optimistic initialisation.
/// Divergence ends the epoch early; its closing triplet additionally carries
/// one pessimistic stage cost so the learner observes the blow-up.
pub fn run_epoch<R: Rng + ?Sized>(
    plant: &PlantParams,
    bank: &[Controller],
    fm: &FeatureMap,
    q: &QTable,
    epsilon: f64,
    cost: &CostWeights,
    rng: &mut R,
) -> Result<EpochTrace> {
    assert_eq!(bank.len(), q.n_actions, "bank size must match action count");
    let start_cell = rng.gen_range(0..fm.n_cells());
    let mut x = fm.cell_centre(start_cell);
    let mut s = start_cell;
    let mut a = select_action(q, s, epsilon, rng);
    let mut accum = 0.0;
    let mut total_cost = 0.0;
    let mut triplets = Vec::new();
    let mut diverged = false;

    for _ in 0..plant.n_steps - 1 {
        let u = plant.saturate(&lqr_control(&bank[a], plant, &x));
        let step_cost = stage_cost(plant, cost, &x, &u) * plant.dt;
        accum += step_cost;
        total_cost += step_cost;
        let next = plant.step_noisy(&x, &u, rng);
        if !next.iter().all(|v| v.is_finite()) {
            let penalty = divergence_stage_cost(plant, cost) * plant.dt;
            accum += penalty;
            total_cost += penalty;
            diverged = true;
            break;
        }
        x = next;
        let s_new = fm.cell_of(&x);
        if s_new != s {
            triplets.push(Triplet {
                reward: -accum,
                state: s,
                action: a,
            });
            s = s_new;
            a = select_action(q, s, epsilon, rng);
            accum = 0.0;
        }
    }
    // Close the partition with the occupancy in progress at epoch end.
    triplets.push(Triplet {
        reward: -accum,
        state: s,
        action: a,
    });
    Ok(EpochTrace {
        triplets,
        total_reward: -total_cost,
        start_cell,
        diverged,
    })
}

/// Every-visit Monte-Carlo update of `q` from one epoch trace.
///
/// The return of the t-th triplet is the discounted suffix sum of rewards
/// from t onwards. Visits are counted per state-action pair across the whole
/// learning run, and visit i updates with step size `alpha / i^alpha_decay`
/// (so the first visit overwrites the zero initialisation when `alpha = 1`).
pub fn update_q(q: &mut QTable, trace: &EpochTrace, p: &LearnParams) {
    let n = trace.triplets.len();
    let mut returns = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        acc = trace.triplets[t].reward + p.gamma * acc;
        returns[t] = acc;
    }
    for (t, tr) in trace.triplets.iter().enumerate() {
        let idx = tr.state * q.n_actions + tr.action;
        q.visits[idx] += 1;
        let alpha = p.alpha / (q.visits[idx] as f64).powf(p.alpha_decay);
        q.values[idx] += alpha * (returns[t] - q.values[idx]);
    }
}

/// Result of a learning run.
#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub q: QTable,
    /// Greedy action per symbolic state, lowest-index tie-breaking.
    pub policy: Vec<usize>,
    /// `(epoch, direct reward)` samples every `curve_stride` epochs.
    pub curve: Vec<(usize, f64)>,
}

/// Run `n_epochs` learning epochs with decaying exploration and return the
/// final table, greedy policy, and sampled learning curve.
pub fn learn<R: Rng + ?Sized>(
    plant: &PlantParams,
    bank: &[Controller],
    fm: &FeatureMap,
    cost: &CostWeights,
    params: &LearnParams,
    rng: &mut R,
) -> Result<LearnOutcome> {
    let mut q = QTable::new(fm.n_cells(), bank.len());
    let mut curve = Vec::new();
    for j in 1..=params.n_epochs {
        let epsilon = params.epsilon * (j as f64).powf(-params.epsilon_decay);
        let trace = run_epoch(plant, bank, fm, &q, epsilon, cost, rng)?;
        update_q(&mut q, &trace, params);
        if (j - 1) % params.curve_stride == 0 {
            curve.push((j, trace.total_reward));
        }
    }
    let policy = (0..q.n_states).map(|s| q.greedy(s)).collect();
    Ok(LearnOutcome { q, policy, curve })
}

/// The learnt switching controller: symbolic cell -> action -> LQR gain.
#[derive(Debug, Clone)]
pub struct RlocPolicy<'a> {
    pub plant: &'a PlantParams,
    pub bank: &'a [Controller],
    pub fm: &'a FeatureMap,
    pub policy: &'a [usize],
}

impl RlocPolicy<'_> {
    pub fn action(&self, x: &PlantState) -> usize {
        self.policy[self.fm.cell_of(x)]
    }

    pub fn control(&self, x: &PlantState) -> Control {
        lqr_control(&self.bank[self.action(x)], self.plant, x)
    }
}
