//! Experiment orchestration: the configuration file format, deterministic
//! seed derivation, and the four pipeline stages (system identification,
//! training, evaluation, controller-count sweeps) together with their
//! on-disk layout.
//!
//! Every stage is a pure function of (config, input artifacts, seed), so
//! rerunning a stage with the same inputs produces byte-identical output
//! files. An experiment directory accumulates:
//!
//! ```text
//! out/
//!   config.toml            exact snapshot of the effective configuration
//!   experience.json        naive motor-babbling rollouts
//!   models/                one JSON per local linear model + index.json
//!   policies/              policy.json + curve.csv from training
//!   reports/               per-mode evaluation CSVs and JSON summaries
//!   sweep.csv, aggregate.csv, curves.csv, summary.json   (sweep stage)
//! ```

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use nalgebra::Matrix2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    evaluate_per_start_controllers, evaluate_policy, evaluation_start_grid, value_function_grid,
    action_sequences, ControlPolicy, EvaluationReport, NnocPolicy, FixedPolicy, TargetTolerance,
    ValueGrid,
};
use crate::error::{Error, Result};
use crate::io::{
    self, array_to_vec4, vec4_to_array, ControllerJson, ExperienceFile, FeatureMapJson,
    MatrixJson, ModelFile, PolicyFile,
};
use crate::ldsi::{ldsi_fit, EmConfig, LinearModel};
use crate::lqr::{
    build_controller_bank, Controller, CostWeights, RICCATI_MAX_ITER, RICCATI_TOL,
};
use crate::plant::{ArmParams, CartPoleParams, PlantModel, PlantParams, PlantState};
use crate::rl::{learn, FeatureMap, LearnOutcome, LearnParams, RlocPolicy};
use crate::sysid::{
    collect_experience, naive_controls, naive_start_grid, place_centres, sample_subtrajectories,
    Experience,
};

// ---------------------------------------------------------------------------
// Configuration

/// Integration and episode parameters shared by both plants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Integration/control time step in seconds.
    pub dt: f64,
    /// Steps per rollout/learning epoch.
    pub n_steps: usize,
    /// Per-dimension process noise std during experience collection and
    /// learning (evaluation is always noise-free).
    pub noise_std: f64,
}

/// Two-link arm physical constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmPhysicsConfig {
    pub l1: f64,
    pub l2: f64,
    pub m1: f64,
    pub m2: f64,
    pub c1: f64,
    pub c2: f64,
    pub i1: f64,
    pub i2: f64,
    /// Joint friction matrix, row-major.
    pub b_j: [[f64; 2]; 2],
    pub u_min: f64,
    pub u_max: f64,
    /// Task target (theta1, theta2, dtheta1, dtheta2), radians.
    pub target: [f64; 4],
}

/// Cart-pole physical constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartPolePhysicsConfig {
    pub l: f64,
    pub m_p: f64,
    pub m_c: f64,
    pub g: f64,
    pub b_p: f64,
    pub b_c: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Task target (z, dz, theta, dtheta); theta = 0 is upright.
    pub target: [f64; 4],
}

/// Diagonal quadratic cost weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    /// State weight diagonal (length 4).
    pub w: Vec<f64>,
    /// Control weight diagonal (length = control dimension).
    pub z: Vec<f64>,
}

/// System-identification stage parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SysidConfig {
    /// Naive start-grid size.
    pub n_starts: usize,
    /// Harmonic decay constant of the naive control sequences.
    pub b: f64,
    /// Sub-trajectory length in states.
    pub h: usize,
    /// Max sub-trajectories per linearisation centre.
    pub n_subtrajectories: usize,
    /// Max EM cycles.
    pub n_cycles: usize,
    /// EM stops when the log-likelihood improves by less than this.
    pub tol: f64,
    /// Sampling-box half-width on angles, degrees.
    pub delta_theta_deg: f64,
    /// Sampling-box half-width on angular velocities, degrees per second.
    pub delta_theta_dot_deg: f64,
}

/// High-level learner parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    /// Controller count used by sysid/train/evaluate (and the sweep's
    /// learning-curve slice).
    pub n_actions: usize,
    /// Top of the sweep range `1..=n_actions_max`.
    pub n_actions_max: usize,
    pub epsilon: f64,
    /// Exploration decay exponent.
    pub nu: f64,
    pub gamma: f64,
    /// Base Monte-Carlo step size.
    pub alpha: f64,
    /// Step-size decay exponent.
    pub mu: f64,
    pub n_epochs: usize,
    /// Sweep trial count (CLI `--trials` overrides for desk-scale runs).
    pub n_trials: usize,
    /// Symbolic grid resolution over the two discretized dimensions.
    pub bins: [usize; 2],
    /// Learning-curve sampling interval in epochs.
    pub curve_stride: usize,
}

/// Evaluation protocol parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    /// Start-grid size (perfect square).
    pub n_starts: usize,
    /// Rollout length in seconds.
    pub duration: f64,
    pub angle_tol_deg: f64,
    pub velocity_tol_deg: f64,
    pub position_tol: f64,
}

/// The complete experiment description; round-trips through TOML unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// "arm" or "cartpole".
    pub plant: String,
    /// Master seed; CLI `--seed` overrides it.
    pub seed: u64,
    pub simulation: SimulationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<ArmPhysicsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cartpole: Option<CartPolePhysicsConfig>,
    pub cost: CostConfig,
    pub sysid: SysidConfig,
    pub rl: RlConfig,
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    /// Cart-pole swing-up benchmark defaults.
    pub fn cartpole() -> Self {
        ExperimentConfig {
            plant: "cartpole".into(),
            seed: 31,
            simulation: SimulationConfig {
                dt: 0.01,
                n_steps: 300,
                noise_std: 1e-3,
            },
            arm: None,
            cartpole: Some(CartPolePhysicsConfig {
                l: 0.6,
                m_p: 0.5,
                m_c: 0.5,
                g: 9.80665,
                b_p: 0.0,
                b_c: 0.1,
                u_min: -20.0,
                u_max: 20.0,
                target: [0.0, 0.0, 0.0, 0.0],
            }),
            cost: CostConfig {
                w: vec![30.0, 3.0, 2000.0, 200.0],
                z: vec![1.0],
            },
            sysid: SysidConfig {
                n_starts: 253,
                b: 10.0,
                h: 20,
                n_subtrajectories: 170,
                n_cycles: 100,
                tol: 1e-7,
                delta_theta_deg: 20.0,
                delta_theta_dot_deg: 120.0,
            },
            rl: RlConfig {
                n_actions: 8,
                n_actions_max: 10,
                epsilon: 0.1,
                nu: 0.1,
                gamma: 1.0,
                alpha: 1.0,
                mu: 0.5,
                n_epochs: 2000,
                n_trials: 500,
                bins: [7, 7],
                curve_stride: 6,
            },
            evaluation: EvaluationConfig {
                n_starts: 100,
                duration: 10.0,
                angle_tol_deg: 3.0,
                velocity_tol_deg: 10.0,
                position_tol: 0.1,
            },
        }
    }

    /// Two-link arm reaching benchmark defaults.
    pub fn arm() -> Self {
        let mut cfg = Self::cartpole();
        cfg.plant = "arm".into();
        cfg.cartpole = None;
        cfg.arm = Some(ArmPhysicsConfig {
            l1: 0.3,
            l2: 0.33,
            m1: 1.4,
            m2: 2.5,
            c1: 0.11,
            c2: 0.165,
            i1: 0.025,
            i2: 0.072,
            b_j: [[0.5, 0.1], [0.1, 0.5]],
            u_min: -10.0,
            u_max: 10.0,
            target: [FRAC_PI_2, FRAC_PI_2, 0.0, 0.0],
        });
        cfg.cost = CostConfig {
            w: vec![30.0, 30.0, 0.0, 0.0],
            z: vec![1.0, 1.0],
        };
        cfg.sysid.n_starts = 790;
        cfg.sysid.h = 7;
        cfg.sysid.n_subtrajectories = 6500;
        cfg.rl.n_actions = 5;
        cfg.rl.bins = [6, 6];
        cfg
    }

    /// Built-in defaults by plant name.
    pub fn default_for(plant: &str) -> Result<Self> {
        match plant {
            "arm" => Ok(Self::arm()),
            "cartpole" => Ok(Self::cartpole()),
            other => Err(Error::InvalidConfig(format!(
                "unknown plant '{other}' (expected 'arm' or 'cartpole')"
            ))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        match self.plant.as_str() {
            "arm" => {
                if self.arm.is_none() {
                    return fail("plant is 'arm' but the [arm] section is missing");
                }
            }
            "cartpole" => {
                if self.cartpole.is_none() {
                    return fail("plant is 'cartpole' but the [cartpole] section is missing");
                }
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown plant '{other}' (expected 'arm' or 'cartpole')"
                )))
            }
        }
        if !(self.simulation.dt > 0.0) {
            return fail("simulation.dt must be positive");
        }
        if self.simulation.n_steps < 2 {
            return fail("simulation.n_steps must be at least 2");
        }
        if self.simulation.noise_std < 0.0 {
            return fail("simulation.noise_std must be non-negative");
        }
        if self.cost.w.len() != 4 {
            return fail("cost.w must have 4 diagonal entries");
        }
        if self.sysid.n_starts == 0 || self.sysid.h < 2 || self.sysid.b <= 0.0 {
            return fail("sysid needs n_starts >= 1, h >= 2, b > 0");
        }
        if self.rl.n_actions == 0 || self.rl.n_actions > self.rl.n_actions_max {
            return fail("rl.n_actions must be in 1..=rl.n_actions_max");
        }
        if self.rl.bins[0] == 0 || self.rl.bins[1] == 0 || self.rl.curve_stride == 0 {
            return fail("rl.bins and rl.curve_stride must be positive");
        }
        if !(0.0..=1.0).contains(&self.rl.epsilon) || !(0.0..=1.0).contains(&self.rl.gamma) {
            return fail("rl.epsilon and rl.gamma must lie in [0, 1]");
        }
        if self.evaluation.n_starts == 0 || !(self.evaluation.duration > 0.0) {
            return fail("evaluation needs n_starts >= 1 and a positive duration");
        }
        // Constructing the plant validates physical constants and target.
        let plant = self.plant_params()?;
        if self.cost.z.len() != plant.control_dim() {
            return Err(Error::InvalidConfig(format!(
                "cost.z must have {} entries for this plant",
                plant.control_dim()
            )));
        }
        Ok(())
    }

    /// Build simulation parameters from the config.
    pub fn plant_params(&self) -> Result<PlantParams> {
        let (model, u_min, u_max, target) = match self.plant.as_str() {
            "arm" => {
                let p = self.arm.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("plant is 'arm' but the [arm] section is missing".into())
                })?;
                if p.l1 <= 0.0 || p.l2 <= 0.0 || p.m1 <= 0.0 || p.m2 <= 0.0 || p.i1 <= 0.0
                    || p.i2 <= 0.0
                {
                    return Err(Error::InvalidConfig(
                        "arm lengths, masses, and inertias must be positive".into(),
                    ));
                }
                let model = PlantModel::Arm(ArmParams {
                    l1: p.l1,
                    l2: p.l2,
                    m1: p.m1,
                    m2: p.m2,
                    c1: p.c1,
                    c2: p.c2,
                    i1: p.i1,
                    i2: p.i2,
                    b: Matrix2::new(p.b_j[0][0], p.b_j[0][1], p.b_j[1][0], p.b_j[1][1]),
                });
                (model, p.u_min, p.u_max, p.target)
            }
            "cartpole" => {
                let p = self.cartpole.as_ref().ok_or_else(|| {
                    Error::InvalidConfig(
                        "plant is 'cartpole' but the [cartpole] section is missing".into(),
                    )
                })?;
                if p.l <= 0.0 || p.m_p <= 0.0 || p.m_c <= 0.0 {
                    return Err(Error::InvalidConfig(
                        "cart-pole length and masses must be positive".into(),
                    ));
                }
                let model = PlantModel::CartPole(CartPoleParams {
                    l: p.l,
                    m_p: p.m_p,
                    m_c: p.m_c,
                    g: p.g,
                    b_p: p.b_p,
                    b_c: p.b_c,
                });
                (model, p.u_min, p.u_max, p.target)
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown plant '{other}' (expected 'arm' or 'cartpole')"
                )))
            }
        };
        if u_min >= u_max {
            return Err(Error::InvalidConfig("u_min must be below u_max".into()));
        }
        Ok(PlantParams {
            model,
            dt: self.simulation.dt,
            n_steps: self.simulation.n_steps,
            target: array_to_vec4(&target),
            noise_std: self.simulation.noise_std,
            u_min,
            u_max,
        })
    }

    pub fn cost_weights(&self) -> Result<CostWeights> {
        CostWeights::from_diagonals(&self.cost.w, &self.cost.z)
    }

    pub fn learn_params(&self) -> LearnParams {
        LearnParams {
            epsilon: self.rl.epsilon,
            epsilon_decay: self.rl.nu,
            gamma: self.rl.gamma,
            alpha: self.rl.alpha,
            alpha_decay: self.rl.mu,
            n_epochs: self.rl.n_epochs,
            curve_stride: self.rl.curve_stride,
        }
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            max_cycles: self.sysid.n_cycles,
            tol: self.sysid.tol,
        }
    }

    pub fn feature_map(&self, plant: &PlantParams) -> FeatureMap {
        FeatureMap::for_plant(plant, self.rl.bins)
    }

    pub fn tolerance(&self) -> TargetTolerance {
        TargetTolerance {
            angle: self.evaluation.angle_tol_deg.to_radians(),
            velocity: self.evaluation.velocity_tol_deg.to_radians(),
            position: self.evaluation.position_tol,
        }
    }
}

// ---------------------------------------------------------------------------
// Seed derivation

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stage tags for seed derivation; distinct tags give independent streams.
pub const TAG_EXPERIENCE: u64 = 1;
pub const TAG_CENTRES: u64 = 2;
pub const TAG_TRAIN: u64 = 3;
pub const TAG_TRIAL: u64 = 4;

/// Deterministic sub-seed: folds each tag into the master seed through a
/// splittable counter scheme, so parallel consumers get independent,
/// platform-stable streams.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(master);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// Seeded generator for one (stage, indices...) slot.
pub fn rng_for(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

// ---------------------------------------------------------------------------
// Pipeline stages

/// Everything the sysid stage produces.
#[derive(Debug, Clone)]
pub struct SysidArtifacts {
    pub experience: Experience,
    pub models: Vec<LinearModel>,
    /// Sub-trajectories found per centre (0 means the no-data fallback).
    pub segment_counts: Vec<usize>,
}

/// Fit one local model per centre from shared experience. Centres with no
/// in-box sub-trajectories get the no-data fallback model instead of a fit.
pub fn fit_local_models(
    cfg: &ExperimentConfig,
    plant: &PlantParams,
    experience: &Experience,
    centres: &[PlantState],
) -> Result<(Vec<LinearModel>, Vec<usize>)> {
    let em = cfg.em_config();
    let d_theta = cfg.sysid.delta_theta_deg.to_radians();
    let d_theta_dot = cfg.sysid.delta_theta_dot_deg.to_radians();
    let mut models = Vec::with_capacity(centres.len());
    let mut counts = Vec::with_capacity(centres.len());
    for centre in centres {
        let set = sample_subtrajectories(
            experience,
            plant,
            centre,
            d_theta,
            d_theta_dot,
            cfg.sysid.h,
            cfg.sysid.n_subtrajectories,
        );
        counts.push(set.segments.len());
        if set.segments.is_empty() {
            models.push(LinearModel::no_data(centre, plant.control_dim()));
        } else {
            models.push(ldsi_fit(&set, &em)?);
        }
    }
    Ok((models, counts))
}

/// Collect naive experience, place `rl.n_actions` linearisation centres
/// (first at the target), and fit a local model per centre.
pub fn run_sysid(cfg: &ExperimentConfig, seed: u64) -> Result<SysidArtifacts> {
    cfg.validate()?;
    let plant = cfg.plant_params()?;
    let starts = naive_start_grid(&plant, cfg.sysid.n_starts);
    let controls = naive_controls(&plant, cfg.sysid.b);
    let mut erng = rng_for(seed, &[TAG_EXPERIENCE]);
    let experience = collect_experience(&plant, &starts, &controls, &mut erng);
    if experience.records.is_empty() {
        return Err(Error::EmptySegments);
    }
    let mut crng = rng_for(seed, &[TAG_CENTRES]);
    let centres = place_centres(&plant, cfg.rl.n_actions, &[], &mut crng);
    let (models, segment_counts) = fit_local_models(cfg, &plant, &experience, &centres)?;
    Ok(SysidArtifacts {
        experience,
        models,
        segment_counts,
    })
}

/// Everything the training stage produces.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub bank: Vec<Controller>,
    pub fm: FeatureMap,
    pub outcome: LearnOutcome,
}

/// Synthesize the controller bank from the fitted models and run the
/// Monte-Carlo learner.
pub fn run_train(cfg: &ExperimentConfig, models: &[LinearModel], seed: u64) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let plant = cfg.plant_params()?;
    let cost = cfg.cost_weights()?;
    let bank = build_controller_bank(models, &cost, &plant.target, RICCATI_MAX_ITER, RICCATI_TOL)?;
    let fm = cfg.feature_map(&plant);
    let mut rng = rng_for(seed, &[TAG_TRAIN]);
    let outcome = learn(&plant, &bank, &fm, &cost, &cfg.learn_params(), &mut rng)?;
    Ok(TrainArtifacts { bank, fm, outcome })
}

/// Which policy the evaluation stage runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Learnt switching policy.
    Rloc,
    /// Nearest-centre switching over the same controller bank.
    Nnoc,
    /// The single target-centred controller everywhere.
    LqrTarget,
    /// One independently fitted controller per evaluation start.
    LqrGrid,
}

impl EvalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Rloc => "rloc",
            EvalMode::Nnoc => "nnoc",
            EvalMode::LqrTarget => "lqr-target",
            EvalMode::LqrGrid => "lqr-grid",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rloc" => Ok(EvalMode::Rloc),
            "nnoc" => Ok(EvalMode::Nnoc),
            "lqr-target" => Ok(EvalMode::LqrTarget),
            "lqr-grid" => Ok(EvalMode::LqrGrid),
            other => Err(Error::InvalidConfig(format!(
                "unknown evaluation mode '{other}' \
                 (expected rloc, nnoc, lqr-target, or lqr-grid)"
            ))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Optional evaluation dumps.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub trajectories: bool,
    pub action_sequences: bool,
    /// Value-grid resolution per axis, when requested.
    pub value_grid: Option<usize>,
}

/// Everything the evaluation stage produces.
#[derive(Debug, Clone)]
pub struct EvaluateArtifacts {
    pub mode: EvalMode,
    pub report: EvaluationReport,
    pub value_grid: Option<ValueGrid>,
    pub action_sequences: Option<Vec<Vec<(usize, usize)>>>,
}

/// Evaluate one mode over the standard start grid. `trained` supplies the
/// bank/grid/policy for the rloc, nnoc, and lqr-target modes; `experience`
/// supplies the raw data the lqr-grid mode fits its per-start models from.
pub fn run_evaluate(
    cfg: &ExperimentConfig,
    mode: EvalMode,
    trained: Option<&TrainArtifacts>,
    experience: Option<&Experience>,
    opts: &EvalOptions,
) -> Result<EvaluateArtifacts> {
    cfg.validate()?;
    let plant = cfg.plant_params()?;
    let cost = cfg.cost_weights()?;
    let tol = cfg.tolerance();
    let starts = evaluation_start_grid(&plant, cfg.evaluation.n_starts)?;
    let duration = cfg.evaluation.duration;

    let finish = |policy: &dyn ControlPolicy, fm: &FeatureMap| -> EvaluateArtifacts {
        let report = evaluate_policy(
            &plant,
            &cost,
            policy,
            &starts,
            duration,
            &tol,
            opts.trajectories,
        );
        let value_grid = opts
            .value_grid
            .map(|res| value_function_grid(&plant, &cost, policy, [res, res], duration, &tol));
        let action_sequences = opts
            .action_sequences
            .then(|| action_sequences(&plant, policy, fm, &starts, duration));
        EvaluateArtifacts {
            mode,
            report,
            value_grid,
            action_sequences,
        }
    };

    let need_trained = || {
        trained.ok_or_else(|| {
            Error::InvalidConfig(format!("mode '{mode}' needs a trained policy file"))
        })
    };

    match mode {
        EvalMode::Rloc => {
            let t = need_trained()?;
            let policy = RlocPolicy {
                plant: &plant,
                bank: &t.bank,
                fm: &t.fm,
                policy: &t.outcome.policy,
            };
            Ok(finish(&policy, &t.fm))
        }
        EvalMode::Nnoc => {
            let t = need_trained()?;
            let policy = NnocPolicy {
                plant: &plant,
                bank: &t.bank,
            };
            Ok(finish(&policy, &t.fm))
        }
        EvalMode::LqrTarget => {
            let t = need_trained()?;
            let ctrl = t
                .bank
                .iter()
                .find(|c| c.centre == plant.target)
                .ok_or_else(|| {
                    Error::InvalidConfig(
                        "lqr-target mode needs a controller centred at the task target".into(),
                    )
                })?;
            let policy = FixedPolicy {
                plant: &plant,
                controller: ctrl,
            };
            Ok(finish(&policy, &t.fm))
        }
        EvalMode::LqrGrid => {
            if opts.value_grid.is_some() || opts.action_sequences {
                return Err(Error::InvalidConfig(
                    "value grids and action sequences are not defined for the \
                     per-start lqr-grid baseline"
                        .into(),
                ));
            }
            let exp = experience.ok_or_else(|| {
                Error::InvalidConfig("lqr-grid mode needs an experience file".into())
            })?;
            let (models, _) = fit_local_models(cfg, &plant, exp, &starts)?;
            let cost_ref = &cost;
            let bank = build_controller_bank(
                &models,
                cost_ref,
                &plant.target,
                RICCATI_MAX_ITER,
                RICCATI_TOL,
            )?;
            let report = evaluate_per_start_controllers(
                &plant,
                &cost,
                &bank,
                &starts,
                duration,
                &tol,
                opts.trajectories,
            )?;
            Ok(EvaluateArtifacts {
                mode,
                report,
                value_grid: None,
                action_sequences: None,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Sweep

/// Per-(trial, controller-count) evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NaResult {
    pub n_a: usize,
    pub rloc_mean: f64,
    pub rloc_sem: f64,
    pub rloc_success_rate: f64,
    pub nnoc_mean: f64,
    pub nnoc_sem: f64,
    pub nnoc_success_rate: f64,
}

/// One sweep trial: incremental centre growth over `n_a = 1..=max`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    /// The full centre set; `n_a = k` uses the first `k` as a prefix.
    pub centres: Vec<PlantState>,
    pub per_na: Vec<NaResult>,
    /// Learning curve of the `rl.n_actions` slice.
    pub curve: Vec<(usize, f64)>,
    /// Set when the trial failed; its partial results are excluded from
    /// aggregates.
    pub error: Option<String>,
}

/// Across-trial aggregate for one controller count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub n_a: usize,
    pub n_trials: usize,
    pub rloc_mean: f64,
    pub rloc_sem: f64,
    pub nnoc_mean: f64,
    pub nnoc_sem: f64,
    /// Fraction of trials where the learnt policy's mean cost beat the
    /// nearest-centre baseline's.
    pub rloc_win_rate: f64,
}

/// Full sweep output.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub trials: Vec<TrialResult>,
    pub aggregates: Vec<AggregateRow>,
    /// Controller count whose learning curves were recorded.
    pub curve_n_a: usize,
}

fn run_trial(
    cfg: &ExperimentConfig,
    plant: &PlantParams,
    cost: &CostWeights,
    fm: &FeatureMap,
    tol: &TargetTolerance,
    starts: &[PlantState],
    experience: &Experience,
    master: u64,
    trial: usize,
) -> TrialResult {
    let seed = derive_seed(master, &[TAG_TRIAL, trial as u64]);
    let mut centres = Vec::new();
    let mut inner = || -> Result<(Vec<NaResult>, Vec<(usize, f64)>)> {
        let mut crng = rng_for(master, &[TAG_TRIAL, trial as u64, TAG_CENTRES]);
        centres = place_centres(plant, cfg.rl.n_actions_max, &[], &mut crng);
        let (models, _) = fit_local_models(cfg, plant, experience, &centres)?;
        let bank =
            build_controller_bank(&models, cost, &plant.target, RICCATI_MAX_ITER, RICCATI_TOL)?;
        let mut per_na = Vec::with_capacity(cfg.rl.n_actions_max);
        let mut curve = Vec::new();
        for n_a in 1..=cfg.rl.n_actions_max {
            let sub = &bank[..n_a];
            let mut trng = rng_for(master, &[TAG_TRIAL, trial as u64, TAG_TRAIN, n_a as u64]);
            let outcome = learn(plant, sub, fm, cost, &cfg.learn_params(), &mut trng)?;
            let rloc_policy = RlocPolicy {
                plant,
                bank: sub,
                fm,
                policy: &outcome.policy,
            };
            let rloc = evaluate_policy(
                plant,
                cost,
                &rloc_policy,
                starts,
                cfg.evaluation.duration,
                tol,
                false,
            );
            let nnoc_policy = NnocPolicy { plant, bank: sub };
            let nnoc = evaluate_policy(
                plant,
                cost,
                &nnoc_policy,
                starts,
                cfg.evaluation.duration,
                tol,
                false,
            );
            if n_a == cfg.rl.n_actions {
                curve = outcome.curve.clone();
            }
            per_na.push(NaResult {
                n_a,
                rloc_mean: rloc.mean_cost,
                rloc_sem: rloc.sem_cost,
                rloc_success_rate: rloc.success_rate,
                nnoc_mean: nnoc.mean_cost,
                nnoc_sem: nnoc.sem_cost,
                nnoc_success_rate: nnoc.success_rate,
            });
        }
        Ok((per_na, curve))
    };
    match inner() {
        Ok((per_na, curve)) => TrialResult {
            trial,
            seed,
            centres,
            per_na,
            curve,
            error: None,
        },
        Err(e) => TrialResult {
            trial,
            seed,
            centres,
            per_na: Vec::new(),
            curve: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

/// Grow the controller count from 1 to `rl.n_actions_max` across `n_trials`
/// independently seeded trials, evaluating the learnt policy against the
/// nearest-centre baseline on the shared start grid. Experience is collected
/// once and shared; trials run in parallel but reproduce the serial order
/// exactly because every trial derives its own seeds.
pub fn run_sweep(cfg: &ExperimentConfig, seed: u64, n_trials: usize) -> Result<SweepResult> {
    cfg.validate()?;
    if n_trials == 0 {
        return Err(Error::InvalidConfig("sweep needs at least one trial".into()));
    }
    let plant = cfg.plant_params()?;
    let cost = cfg.cost_weights()?;
    let fm = cfg.feature_map(&plant);
    let tol = cfg.tolerance();
    let starts = evaluation_start_grid(&plant, cfg.evaluation.n_starts)?;

    let grid = naive_start_grid(&plant, cfg.sysid.n_starts);
    let controls = naive_controls(&plant, cfg.sysid.b);
    let mut erng = rng_for(seed, &[TAG_EXPERIENCE]);
    let experience = collect_experience(&plant, &grid, &controls, &mut erng);
    if experience.records.is_empty() {
        return Err(Error::EmptySegments);
    }

    let trials: Vec<TrialResult> = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            run_trial(
                cfg,
                &plant,
                &cost,
                &fm,
                &tol,
                &starts,
                &experience,
                seed,
                t,
            )
        })
        .collect();

    let mut aggregates = Vec::with_capacity(cfg.rl.n_actions_max);
    for n_a in 1..=cfg.rl.n_actions_max {
        let rows: Vec<&NaResult> = trials
            .iter()
            .filter(|t| t.error.is_none())
            .filter_map(|t| t.per_na.get(n_a - 1))
            .collect();
        let rloc: Vec<f64> = rows.iter().map(|r| r.rloc_mean).collect();
        let nnoc: Vec<f64> = rows.iter().map(|r| r.nnoc_mean).collect();
        let (rloc_mean, rloc_sem) = crate::baselines::mean_sem(&rloc);
        let (nnoc_mean, nnoc_sem) = crate::baselines::mean_sem(&nnoc);
        let wins = rows.iter().filter(|r| r.rloc_mean < r.nnoc_mean).count();
        aggregates.push(AggregateRow {
            n_a,
            n_trials: rows.len(),
            rloc_mean,
            rloc_sem,
            nnoc_mean,
            nnoc_sem,
            rloc_win_rate: wins as f64 / rows.len().max(1) as f64,
        });
    }
    Ok(SweepResult {
        trials,
        aggregates,
        curve_n_a: cfg.rl.n_actions,
    })
}

// ---------------------------------------------------------------------------
// Experiment directory layout

/// Index of the persisted model files plus collection metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIndex {
    pub plant: String,
    pub seed: u64,
    pub n_models: usize,
    pub n_records: usize,
    pub dropped: usize,
    pub segment_counts: Vec<usize>,
}

/// Write the effective config (with the seed actually used) to
/// `out/config.toml`.
pub fn write_config_snapshot(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let mut snapshot = cfg.clone();
    snapshot.seed = seed;
    io::atomic_write(&out.join("config.toml"), snapshot.to_toml_string()?.as_bytes())
}

fn model_path(out: &Path, i: usize) -> std::path::PathBuf {
    out.join("models").join(format!("model_{i:03}.json"))
}

/// Persist the sysid stage: config snapshot, experience, and one JSON per
/// model plus an index.
pub fn write_sysid_outputs(
    cfg: &ExperimentConfig,
    seed: u64,
    art: &SysidArtifacts,
    out: &Path,
) -> Result<()> {
    write_config_snapshot(cfg, seed, out)?;
    let plant = cfg.plant_params()?;
    io::write_json_compact(
        &out.join("experience.json"),
        &ExperienceFile::from_experience(&art.experience, plant.name(), plant.dt, seed),
    )?;
    for (i, m) in art.models.iter().enumerate() {
        io::write_json(&model_path(out, i), &ModelFile::from_model(m))?;
    }
    io::write_json(
        &out.join("models/index.json"),
        &ModelIndex {
            plant: plant.name().into(),
            seed,
            n_models: art.models.len(),
            n_records: art.experience.records.len(),
            dropped: art.experience.dropped,
            segment_counts: art.segment_counts.clone(),
        },
    )
}

/// Load the models written by [`write_sysid_outputs`], in bank order.
pub fn load_models(out: &Path) -> Result<Vec<LinearModel>> {
    let index: ModelIndex = io::read_json(&out.join("models/index.json"))?;
    (0..index.n_models)
        .map(|i| io::read_json::<ModelFile>(&model_path(out, i))?.to_model())
        .collect()
}

/// Load a persisted experience file.
pub fn load_experience(out: &Path) -> Result<Experience> {
    io::read_json::<ExperienceFile>(&out.join("experience.json"))?.to_experience()
}

/// Persist the training stage: self-contained policy JSON plus the learning
/// curve CSV.
pub fn write_train_outputs(
    cfg: &ExperimentConfig,
    seed: u64,
    art: &TrainArtifacts,
    out: &Path,
) -> Result<()> {
    let plant = cfg.plant_params()?;
    let q = &art.outcome.q;
    let file = PolicyFile {
        plant: plant.name().into(),
        seed,
        target: vec4_to_array(&plant.target),
        feature_map: FeatureMapJson::from_feature_map(&art.fm),
        controllers: art
            .bank
            .iter()
            .map(ControllerJson::from_controller)
            .collect(),
        policy: art.outcome.policy.clone(),
        q_values: MatrixJson {
            rows: q.n_states,
            cols: q.n_actions,
            data: q.values.clone(),
        },
        visits: q.visits.clone(),
    };
    io::write_json(&out.join("policies/policy.json"), &file)?;
    io::write_curve_csv(&out.join("policies/curve.csv"), &art.outcome.curve)
}

/// Load a persisted policy back into in-memory training artifacts.
pub fn load_policy(out: &Path) -> Result<(PolicyFile, TrainArtifacts)> {
    let file: PolicyFile = io::read_json(&out.join("policies/policy.json"))?;
    let bank = file.to_bank()?;
    let fm = file.feature_map.to_feature_map();
    let n_states = fm.n_cells();
    let n_actions = bank.len();
    if file.policy.len() != n_states || file.q_values.data.len() != n_states * n_actions {
        return Err(Error::InvalidConfig(
            "policy file shapes are inconsistent with its feature map".into(),
        ));
    }
    let q = crate::rl::QTable {
        n_states,
        n_actions,
        values: file.q_values.data.clone(),
        visits: file.visits.clone(),
    };
    let outcome = LearnOutcome {
        q,
        policy: file.policy.clone(),
        curve: Vec::new(),
    };
    Ok((
        file,
        TrainArtifacts {
            bank,
            fm,
            outcome,
        },
    ))
}

/// JSON summary of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: String,
    pub plant: String,
    pub n_starts: usize,
    pub duration: f64,
    pub mean_cost: f64,
    pub sem_cost: f64,
    pub success_rate: f64,
    pub n_diverged: usize,
}

/// Persist one evaluation: report CSV + JSON summary + requested dumps,
/// all under `out/reports/` prefixed with the mode name.
pub fn write_evaluate_outputs(
    cfg: &ExperimentConfig,
    art: &EvaluateArtifacts,
    out: &Path,
) -> Result<()> {
    let labels = io::state_labels(&cfg.plant);
    let reports = out.join("reports");
    let prefix = art.mode.as_str();
    io::write_report_csv(
        &reports.join(format!("{prefix}_report.csv")),
        &art.report,
        labels,
    )?;
    io::write_json(
        &reports.join(format!("{prefix}_summary.json")),
        &EvalSummary {
            mode: prefix.into(),
            plant: cfg.plant.clone(),
            n_starts: art.report.outcomes.len(),
            duration: art.report.duration,
            mean_cost: art.report.mean_cost,
            sem_cost: art.report.sem_cost,
            success_rate: art.report.success_rate,
            n_diverged: art.report.outcomes.iter().filter(|o| o.diverged).count(),
        },
    )?;
    if let Some(trajs) = &art.report.trajectories {
        io::write_trajectories_csv(
            &reports.join(format!("{prefix}_trajectories.csv")),
            trajs,
            labels,
        )?;
    }
    if let Some(grid) = &art.value_grid {
        io::write_value_grid_csv(
            &reports.join(format!("{prefix}_value_grid.csv")),
            grid,
            io::grid_labels(&cfg.plant),
        )?;
    }
    if let Some(seqs) = &art.action_sequences {
        io::write_action_sequences_csv(&reports.join(format!("{prefix}_actions.csv")), seqs)?;
    }
    Ok(())
}

/// JSON summary of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub plant: String,
    pub seed: u64,
    pub n_trials: usize,
    pub n_failed: usize,
    pub curve_n_a: usize,
    pub aggregates: Vec<AggregateRow>,
}

/// Persist a sweep: per-(trial, n_a) CSV, across-trial aggregate CSV,
/// learning curves of the headline controller count, and a JSON summary.
pub fn write_sweep_outputs(
    cfg: &ExperimentConfig,
    seed: u64,
    res: &SweepResult,
    out: &Path,
) -> Result<()> {
    write_config_snapshot(cfg, seed, out)?;
    let f = io::fmt_f64;

    let mut rows = Vec::new();
    for t in &res.trials {
        for r in &t.per_na {
            rows.push(vec![
                t.trial.to_string(),
                r.n_a.to_string(),
                f(r.rloc_mean),
                f(r.rloc_sem),
                f(r.rloc_success_rate),
                f(r.nnoc_mean),
                f(r.nnoc_sem),
                f(r.nnoc_success_rate),
            ]);
        }
    }
    io::write_csv(
        &out.join("sweep.csv"),
        &[
            "trial",
            "n_a",
            "rloc_mean_cost",
            "rloc_sem",
            "rloc_success_rate",
            "nnoc_mean_cost",
            "nnoc_sem",
            "nnoc_success_rate",
        ],
        &rows,
    )?;

    let rows = res
        .aggregates
        .iter()
        .map(|a| {
            vec![
                a.n_a.to_string(),
                a.n_trials.to_string(),
                f(a.rloc_mean),
                f(a.rloc_sem),
                f(a.nnoc_mean),
                f(a.nnoc_sem),
                f(a.rloc_win_rate),
            ]
        })
        .collect::<Vec<_>>();
    io::write_csv(
        &out.join("aggregate.csv"),
        &[
            "n_a",
            "n_trials",
            "rloc_mean_cost",
            "rloc_sem",
            "nnoc_mean_cost",
            "nnoc_sem",
            "rloc_win_rate",
        ],
        &rows,
    )?;

    let mut rows = Vec::new();
    for t in &res.trials {
        for (epoch, reward) in &t.curve {
            rows.push(vec![t.trial.to_string(), epoch.to_string(), f(*reward)]);
        }
    }
    io::write_csv(
        &out.join("curves.csv"),
        &["trial", "epoch", "direct_reward"],
        &rows,
    )?;

    io::write_json(
        &out.join("summary.json"),
        &SweepSummary {
            plant: cfg.plant.clone(),
            seed,
            n_trials: res.trials.len(),
            n_failed: res.trials.iter().filter(|t| t.error.is_some()).count(),
            curve_n_a: res.curve_n_a,
            aggregates: res.aggregates.clone(),
        },
    )
}
