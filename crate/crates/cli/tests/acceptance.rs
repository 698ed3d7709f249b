//! Acceptance checks for the whole stack, one test per criterion.
//!
//! Every test prints a single `ACCEPTANCE <n> (<name>): PASS|FAIL — <detail>`
//! line before asserting, so the status of each criterion is visible in the
//! test output even when one of them fails. The heavyweight 50-trial sweep
//! behind criteria 5b, 5c, and 6 runs once and is shared.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rloc_core::baselines::{evaluate_policy, FixedPolicy};
use rloc_core::experiment::{
    run_evaluate, run_sweep, run_sysid, run_train, EvalMode, EvalOptions, ExperimentConfig,
    SweepResult,
};
use rloc_core::ldsi::{ldsi_fit, EmConfig};
use rloc_core::lqr::{
    build_controller_bank, riccati_gain, CostWeights, RICCATI_MAX_ITER, RICCATI_TOL,
};
use rloc_core::plant::{
    arm_derivative, rk4_step, ArmParams, PlantModel, PlantParams, PlantState,
};
use rloc_core::sysid::{Segment, SubTrajectorySet};

fn report(n: &str, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "acceptance criterion {n} ({name}) failed: {detail}");
}

fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// 1. Riccati synthesis against closed form and an independent solver.

/// Independent solver for the discrete algebraic Riccati equation:
/// structure-preserving doubling, a different algorithm from the value
/// iteration used by the library.
fn dare_doubling(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut ak = a.clone();
    let mut g = b * r.clone().try_inverse().unwrap() * b.transpose();
    let mut h = q.clone();
    for _ in 0..100 {
        let inv = (&eye + &g * &h)
            .try_inverse()
            .expect("doubling iterate invertible");
        let a_next = &ak * &inv * &ak;
        let g_next = &g + &ak * &inv * &g * ak.transpose();
        let h_next = &h + ak.transpose() * &h * &inv * &ak;
        let delta = (&h_next - &h).amax();
        ak = a_next;
        g = (&g_next + g_next.transpose()) * 0.5;
        h = (&h_next + h_next.transpose()) * 0.5;
        if delta < 1e-14 * (1.0 + h.amax()) {
            break;
        }
    }
    h
}

/// Random (A, B) with full-rank controllability matrix.
fn random_controllable(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    loop {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let mut ctrb = DMatrix::zeros(n, n * m);
        let mut blk = b.clone();
        for k in 0..n {
            ctrb.view_mut((0, k * m), (n, m)).copy_from(&blk);
            blk = &a * blk;
        }
        if ctrb.rank(1e-9) == n {
            return (a, b);
        }
    }
}

#[test]
fn criterion_1_riccati_solver() {
    let t0 = Instant::now();

    // Scalar closed form: for a = b = w = z = 1 the fixed point satisfies
    // v^2 - v - 1 = 0, so v is the golden ratio and the gain its reciprocal.
    let scalar = |v: f64| DMatrix::from_element(1, 1, v);
    let cost = CostWeights::new(scalar(1.0), scalar(1.0)).unwrap();
    let sol = riccati_gain(&scalar(1.0), &scalar(1.0), &cost, 10_000, 1e-12).unwrap();
    let v_err = (sol.value[(0, 0)] - (1.0 + 5.0f64.sqrt()) / 2.0).abs();
    let l_err = (sol.gain[(0, 0)] - (5.0f64.sqrt() - 1.0) / 2.0).abs();
    let scalar_ok = sol.converged && v_err < 1e-9 && l_err < 1e-9;

    // 100 random controllable 4x4 systems against the doubling oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut max_rel_v = 0.0f64;
    let mut max_rel_l = 0.0f64;
    let mut all_converged = true;
    for _ in 0..100 {
        let (a, b) = random_controllable(&mut rng, 4, 2);
        let q_half = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let q = &q_half * q_half.transpose() + DMatrix::identity(4, 4) * 0.1;
        let cost = CostWeights::new(q, DMatrix::identity(2, 2)).unwrap();
        let sol = riccati_gain(&a, &b, &cost, 100_000, 1e-13).unwrap();
        all_converged &= sol.converged;
        let v_star = dare_doubling(&a, &b, &cost.w, &cost.z);
        let btv = b.transpose() * &v_star;
        let l_star = (&cost.z + &btv * &b)
            .try_inverse()
            .unwrap()
            * (&btv * &a);
        max_rel_v = max_rel_v.max((&sol.value - &v_star).amax() / v_star.amax());
        max_rel_l = max_rel_l.max((&sol.gain - &l_star).amax() / l_star.amax());
    }
    let secs = t0.elapsed().as_secs_f64();

    let pass = scalar_ok && all_converged && max_rel_v < 1e-8 && max_rel_l < 1e-8 && secs < 5.0;
    report(
        "1",
        "riccati-solver",
        pass,
        &format!(
            "scalar golden-ratio errs v={v_err:.1e} L={l_err:.1e}; 100 random 4x4 systems \
             max rel errs value={max_rel_v:.1e} gain={max_rel_l:.1e}, all converged={all_converged}, \
             {secs:.2}s (limit 5s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Linear system identification recovers known systems.

fn random_stable_system(rng: &mut ChaCha8Rng, m: usize, rho_max: f64) -> (Matrix4<f64>, DMatrix<f64>) {
    let a_raw = Matrix4::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    let rho = a_raw
        .complex_eigenvalues()
        .iter()
        .fold(0.0f64, |acc, e| acc.max(e.norm()));
    let target: f64 = rng.gen_range(0.3..rho_max);
    let a = a_raw * (target / rho);
    let b = DMatrix::from_fn(4, m, |_, _| rng.gen_range(-1.0..1.0));
    (a, b)
}

fn synthetic_segments(
    rng: &mut ChaCha8Rng,
    a: &Matrix4<f64>,
    b: &DMatrix<f64>,
    noise_std: f64,
    n_samples: usize,
    n_segments: usize,
) -> SubTrajectorySet {
    let m = b.ncols();
    let seg_len = n_samples / n_segments;
    let mut segments = Vec::new();
    for _ in 0..n_segments {
        let mut z = Vector4::from_fn(|_, _| rng.gen_range(-0.5..0.5));
        let mut states = Vec::with_capacity(seg_len);
        let mut controls = Vec::with_capacity(seg_len - 1);
        let noisy = |z: &Vector4<f64>, rng: &mut ChaCha8Rng| {
            Vector4::from_fn(|i, _| z[i] + noise_std * rng.sample::<f64, _>(StandardNormal))
        };
        states.push(noisy(&z, rng));
        for _ in 0..seg_len - 1 {
            let u = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let mut next = a * z + b * &u;
            for i in 0..4 {
                next[i] += noise_std * rng.sample::<f64, _>(StandardNormal);
            }
            z = next;
            controls.push(u);
            states.push(noisy(&z, rng));
        }
        segments.push(Segment { states, controls });
    }
    SubTrajectorySet {
        centre: Vector4::zeros(),
        len: seg_len,
        segments,
    }
}

#[test]
fn criterion_2_system_identification() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut max_rel_a = 0.0f64;
    let mut max_rel_b = 0.0f64;
    let mut ll_monotone = true;
    for trial in 0..20 {
        let m = 1 + trial % 2;
        let (a, b) = random_stable_system(&mut rng, m, 0.95);
        let set = synthetic_segments(&mut rng, &a, &b, 1e-3, 200, 4);
        // Run EM to numerical convergence; the experiment pipeline's cycle
        // budget is a runtime choice, not part of the algorithm under test.
        let em = EmConfig {
            max_cycles: 1000,
            tol: 1e-10,
        };
        let model = ldsi_fit(&set, &em).unwrap();
        max_rel_a = max_rel_a.max((model.a - a).norm() / a.norm());
        max_rel_b = max_rel_b.max((&model.b - &b).norm() / b.norm());
        for w in model.log_likelihood.windows(2) {
            ll_monotone &= w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = max_rel_a < 0.02 && max_rel_b < 0.02 && ll_monotone && secs < 30.0;
    report(
        "2",
        "system-identification",
        pass,
        &format!(
            "20 random stable systems, noise 1e-3, 200 samples: max rel Frobenius err \
             A={:.3}% B={:.3}% (limit 2%), likelihood non-decreasing={ll_monotone}, \
             {secs:.2}s (limit 30s)",
            100.0 * max_rel_a,
            100.0 * max_rel_b
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Plant dynamics and integrator.

/// Independent arm dynamics built from the Lagrangian: kinetic energy in
/// centre-of-mass coordinates defines the inertia matrix, and Coriolis terms
/// come from finite-difference Christoffel symbols.
fn arm_lagrangian_oracle(x: &PlantState, u: &DVector<f64>, p: &ArmParams) -> PlantState {
    let ke = |q: Vector2<f64>, w: Vector2<f64>| -> f64 {
        let i1c = p.i1 - p.m1 * p.c1 * p.c1;
        let i2c = p.i2 - p.m2 * p.c2 * p.c2;
        let v1 = p.c1 * w[0];
        let ke1 = 0.5 * p.m1 * v1 * v1 + 0.5 * i1c * w[0] * w[0];
        let wtot = w[0] + w[1];
        let v2sq = p.l1 * p.l1 * w[0] * w[0]
            + p.c2 * p.c2 * wtot * wtot
            + 2.0 * p.l1 * p.c2 * w[0] * wtot * q[1].cos();
        ke1 + 0.5 * p.m2 * v2sq + 0.5 * i2c * wtot * wtot
    };
    let mass = |q: Vector2<f64>| -> Matrix2<f64> {
        let e1 = Vector2::new(1.0, 0.0);
        let e2 = Vector2::new(0.0, 1.0);
        let m11 = 2.0 * ke(q, e1);
        let m22 = 2.0 * ke(q, e2);
        let m12 = ke(q, e1 + e2) - ke(q, e1) - ke(q, e2);
        Matrix2::new(m11, m12, m12, m22)
    };
    let q = Vector2::new(x[0], x[1]);
    let w = Vector2::new(x[2], x[3]);
    let h = 1e-5;
    let dm: Vec<Matrix2<f64>> = (0..2)
        .map(|k| {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            (mass(qp) - mass(qm)) / (2.0 * h)
        })
        .collect();
    let mut cor = Vector2::zeros();
    for k in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                let gamma = 0.5 * (dm[j][(k, i)] + dm[i][(k, j)] - dm[k][(i, j)]);
                cor[k] += gamma * w[i] * w[j];
            }
        }
    }
    let tau = Vector2::new(u[0], u[1]);
    let acc = mass(q).try_inverse().expect("oracle inertia invertible") * (tau - cor - p.b * w);
    Vector4::new(w[0], w[1], acc[0], acc[1])
}

#[test]
fn criterion_3_plant_dynamics_and_integrator() {
    // (a) Frictionless unforced cart-pole conserves total energy over 10 s.
    let mut plant = PlantParams::cartpole_default();
    plant.noise_std = 0.0;
    let PlantModel::CartPole(ref mut cp) = plant.model else {
        unreachable!()
    };
    cp.b_c = 0.0;
    cp.b_p = 0.0;
    let cp = cp.clone();
    let energy = |x: &PlantState| {
        let (dz, th, dth) = (x[1], x[2], x[3]);
        0.5 * (cp.m_c + cp.m_p) * dz * dz
            + cp.m_p * cp.l * th.cos() * dz * dth
            + 0.5 * cp.m_p * cp.l * cp.l * dth * dth
            + cp.m_p * cp.g * cp.l * th.cos()
    };
    let mut x = Vector4::new(0.0, 0.0, 2.0, 0.0);
    let e0 = energy(&x);
    let u = DVector::from_element(1, 0.0);
    let mut max_drift = 0.0f64;
    for _ in 0..1000 {
        x = plant.step(&x, &u);
        max_drift = max_drift.max((energy(&x) - e0).abs());
    }
    let energy_ok = max_drift < 1e-5;

    // (b) Arm derivative matches the Lagrangian oracle at random states.
    let p = ArmParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pi = std::f64::consts::PI;
    let mut max_arm_err = 0.0f64;
    for _ in 0..1000 {
        let x = Vector4::new(
            rng.gen_range(0.0..pi),
            rng.gen_range(0.0..pi),
            rng.gen_range(-6.0..6.0),
            rng.gen_range(-6.0..6.0),
        );
        let u = DVector::from_vec(vec![rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)]);
        max_arm_err = max_arm_err.max((arm_derivative(&x, &u, &p) - arm_lagrangian_oracle(&x, &u, &p)).amax());
    }
    let arm_ok = max_arm_err < 1e-6;

    // (c) The integrator reproduces the degree-4 Taylor polynomial of the
    // exponential in one step and shows fourth-order global convergence.
    let x0 = Vector4::new(1.0, 0.0, 0.0, 0.0);
    let dt = 0.1;
    let one = rk4_step(|x, _| *x, &x0, &u, dt);
    let series = 1.0 + dt + dt * dt / 2.0 + dt.powi(3) / 6.0 + dt.powi(4) / 24.0;
    let taylor_ok = (one[0] - series).abs() < 1e-12;
    let global_err = |dt: f64| {
        let n = (1.0 / dt).round() as usize;
        let mut x = Vector4::new(1.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            x = rk4_step(|x, _| -x, &x, &u, dt);
        }
        (x[0] - (-1.0f64).exp()).abs()
    };
    let ratio = global_err(0.02) / global_err(0.01);
    let order_ok = ratio >= 12.0;

    let pass = energy_ok && arm_ok && taylor_ok && order_ok;
    report(
        "3",
        "plant-dynamics",
        pass,
        &format!(
            "cart-pole 10s energy drift {max_drift:.2e} J (limit 1e-5); arm vs Lagrangian \
             oracle max err {max_arm_err:.2e} over 1000 states (limit 1e-6); integrator \
             Taylor-4 exact={taylor_ok}, halving error ratio {ratio:.1} (>=12)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. A single identified LQR balances but cannot swing up.

#[test]
fn criterion_4_single_lqr_balances_but_cannot_swing_up() {
    let cfg = ExperimentConfig::cartpole();
    let plant = cfg.plant_params().unwrap();
    let cost = cfg.cost_weights().unwrap();
    let tol = cfg.tolerance();
    let art = run_sysid(&cfg, cfg.seed).unwrap();
    let bank =
        build_controller_bank(&art.models, &cost, &plant.target, RICCATI_MAX_ITER, RICCATI_TOL)
            .unwrap();
    let ctrl = bank
        .iter()
        .find(|c| c.centre == plant.target)
        .expect("bank contains the target-centred controller");
    let policy = FixedPolicy {
        plant: &plant,
        controller: ctrl,
    };

    // 10 degree perturbation must come back under 1 degree within 3 s.
    let deg = std::f64::consts::PI / 180.0;
    let perturbed = Vector4::new(0.0, 0.0, 10.0 * deg, 0.0);
    let balance = evaluate_policy(&plant, &cost, &policy, &[perturbed], 3.0, &tol, false);
    let theta_final = balance.outcomes[0].final_state[2].abs();
    let balances = ctrl.converged && theta_final < deg;

    // From hanging, the same gain must not reach the success tolerance.
    let hanging = Vector4::new(0.0, 0.0, std::f64::consts::PI, 0.0);
    let swing = evaluate_policy(
        &plant,
        &cost,
        &policy,
        &[hanging],
        cfg.evaluation.duration,
        &tol,
        false,
    );
    let cannot_swing_up = !swing.outcomes[0].success;

    let pass = balances && cannot_swing_up;
    report(
        "4",
        "single-lqr-envelope",
        pass,
        &format!(
            "|theta| after 3s from 10deg: {:.3}deg (limit 1deg, gain converged={}); \
             hanging start reaches tolerance in {}s: {}",
            theta_final / deg,
            ctrl.converged,
            cfg.evaluation.duration,
            !cannot_swing_up
        ),
    );
}

// ---------------------------------------------------------------------------
// 5 + 6. Cart-pole learning: canonical run, baseline comparison, controller
// sweep, and learning-curve improvement. The 50-trial sweep is shared.

const SWEEP_TRIALS: usize = 50;

fn cartpole_sweep() -> &'static SweepResult {
    static SWEEP: OnceLock<SweepResult> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let cfg = ExperimentConfig::cartpole();
        run_sweep(&cfg, cfg.seed, SWEEP_TRIALS).expect("sweep")
    })
}

#[test]
fn criterion_5a_canonical_cartpole_run_reaches_target() {
    let cfg = ExperimentConfig::cartpole();
    let t0 = Instant::now();
    let sysid = run_sysid(&cfg, cfg.seed).unwrap();
    let trained = run_train(&cfg, &sysid.models, cfg.seed).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let rloc = run_evaluate(
        &cfg,
        EvalMode::Rloc,
        Some(&trained),
        None,
        &EvalOptions::default(),
    )
    .unwrap();
    let rate = rloc.report.success_rate;
    let n = rloc.report.outcomes.len();
    let pass = rate >= 0.90 && n == cfg.evaluation.n_starts && train_secs < 300.0;
    report(
        "5a",
        "cartpole-success-rate",
        pass,
        &format!(
            "{:.0}% of {} evaluation starts reach the tolerance in {}s (limit >=90%); \
             sysid+train took {train_secs:.0}s (limit 300s)",
            100.0 * rate,
            n,
            cfg.evaluation.duration
        ),
    );
}

#[test]
fn criterion_5b_learnt_policy_beats_nearest_centre_baseline() {
    let cfg = ExperimentConfig::cartpole();
    let sweep = cartpole_sweep();
    let agg = sweep
        .aggregates
        .iter()
        .find(|a| a.n_a == cfg.rl.n_actions)
        .expect("aggregate row for the default controller count");
    let pass = agg.rloc_mean < agg.nnoc_mean && agg.rloc_win_rate >= 0.80;
    report(
        "5b",
        "beats-nearest-centre",
        pass,
        &format!(
            "n_a={}: learnt mean cost {:.0} vs nearest-centre {:.0} over {} trials; \
             per-trial win rate {:.0}% (limit >=80%)",
            agg.n_a,
            agg.rloc_mean,
            agg.nnoc_mean,
            SWEEP_TRIALS,
            100.0 * agg.rloc_win_rate
        ),
    );
}

#[test]
fn criterion_5c_mean_cost_non_increasing_in_controller_count() {
    let cfg = ExperimentConfig::cartpole();
    let sweep = cartpole_sweep();
    let mut detail = String::new();
    let mut pass = true;
    for k in 1..cfg.rl.n_actions_max {
        // Paired per-trial differences: the sweep reuses each trial's seeds
        // and centre prefix across controller counts by construction.
        let diffs: Vec<f64> = sweep
            .trials
            .iter()
            .filter(|t| t.error.is_none())
            .map(|t| t.per_na[k].rloc_mean - t.per_na[k - 1].rloc_mean)
            .collect();
        let (mean, sem) = mean_sem(&diffs);
        let ok = mean <= sem;
        pass &= ok;
        if !ok || k == cfg.rl.n_actions_max - 1 {
            detail.push_str(&format!(
                "{}->{}: mean diff {:+.0} vs SEM {:.0}{}; ",
                k,
                k + 1,
                mean,
                sem,
                if ok { "" } else { " (INCREASE)" }
            ));
        }
    }
    report(
        "5c",
        "sweep-non-increasing",
        pass,
        &format!(
            "paired consecutive mean-cost differences over n_a=1..={} must not exceed \
             their SEM: {}",
            cfg.rl.n_actions_max,
            detail.trim_end_matches("; ")
        ),
    );
}

#[test]
fn criterion_6_learning_curve_improves() {
    let sweep = cartpole_sweep();
    let diffs: Vec<f64> = sweep
        .trials
        .iter()
        .filter(|t| t.error.is_none() && t.curve.len() >= 2)
        .map(|t| t.curve.last().unwrap().1 - t.curve.first().unwrap().1)
        .collect();
    let (first_epoch, last_epoch) = {
        let c = &sweep.trials[0].curve;
        (c.first().unwrap().0, c.last().unwrap().0)
    };
    let (mean, sem) = mean_sem(&diffs);
    let t = mean / sem;
    // One-sided 5% critical value of Student's t at 49 degrees of freedom.
    let t_crit = 1.677;
    let pass = diffs.len() == SWEEP_TRIALS && t > t_crit;
    report(
        "6",
        "learning-curve",
        pass,
        &format!(
            "direct reward at epoch {last_epoch} vs epoch {first_epoch} over {} trials: \
             mean improvement {mean:.0}, paired t = {t:.2} (critical {t_crit})",
            diffs.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Two-link arm: every start reaches the target and the value map is
// shaped like the task.

#[test]
fn criterion_7_arm_reaches_target_from_every_start() {
    let cfg = ExperimentConfig::arm();
    let sysid = run_sysid(&cfg, cfg.seed).unwrap();
    let trained = run_train(&cfg, &sysid.models, cfg.seed).unwrap();
    assert_eq!(trained.bank.len(), cfg.rl.n_actions);
    assert_eq!(trained.fm.n_cells(), cfg.rl.bins[0] * cfg.rl.bins[1]);

    // Odd resolution puts a grid node exactly on the target (pi/2, pi/2).
    let res = 21usize;
    let rloc = run_evaluate(
        &cfg,
        EvalMode::Rloc,
        Some(&trained),
        None,
        &EvalOptions {
            value_grid: Some(res),
            ..Default::default()
        },
    )
    .unwrap();
    let rate = rloc.report.success_rate;
    let all_reach = rate == 1.0 && rloc.report.outcomes.len() == cfg.evaluation.n_starts;

    let grid = rloc.value_grid.as_ref().expect("value grid requested");
    let pi_2 = std::f64::consts::FRAC_PI_2;
    let nearest = |axis: &[f64]| {
        axis.iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (*a - pi_2).abs().total_cmp(&(*b - pi_2).abs()))
            .map(|(i, _)| i)
            .unwrap()
    };
    let (ti, tj) = (nearest(&grid.axes[0]), nearest(&grid.axes[1]));
    let on_node = (grid.axes[0][ti] - pi_2).abs() < 1e-9 && (grid.axes[1][tj] - pi_2).abs() < 1e-9;
    let argmin = grid
        .costs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.total_cmp(b))
        .map(|(i, _)| i)
        .unwrap();
    let min_at_target = argmin == ti * res + tj;

    // Along the theta1 = pi/2 row, cost must grow as theta2 leaves the
    // target and approach its maximum toward the stretched-arm side
    // (theta2 near 0).
    let row: Vec<f64> = (0..res).map(|j| grid.costs[ti * res + j]).collect();
    let v_target = row[tj];
    let v_edge = row[0];
    let edge_dominates = v_edge > 5.0 * v_target;
    let mut monotone_toward_zero = true;
    for j in 0..tj {
        // Moving away from the target (decreasing j) must not reduce cost
        // beyond a small slack for plateaus.
        monotone_toward_zero &= row[j] >= row[j + 1] * 0.95;
    }

    let pass = all_reach && on_node && min_at_target && edge_dominates && monotone_toward_zero;
    report(
        "7",
        "arm-task",
        pass,
        &format!(
            "{:.0}% of {} starts reach the target in {}s (need 100%); value grid {res}x{res}: \
             min at target node={min_at_target}, cost at theta2~0 edge {v_edge:.1} vs target \
             node {v_target:.1} (need >5x), monotone toward stretched arm={monotone_toward_zero}",
            100.0 * rate,
            rloc.report.outcomes.len(),
            cfg.evaluation.duration
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Reruns with the same config and seed are byte-identical.

fn rloc_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rloc"))
}

fn run_stage(args: &[&str]) {
    let out = rloc_bin().args(args).output().expect("spawn rloc");
    assert!(
        out.status.success(),
        "rloc {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn criterion_8_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::cartpole();
    cfg.simulation.n_steps = 80;
    cfg.sysid.n_starts = 16;
    cfg.sysid.n_subtrajectories = 40;
    cfg.sysid.n_cycles = 15;
    cfg.rl.n_actions = 2;
    cfg.rl.n_actions_max = 3;
    cfg.rl.n_epochs = 20;
    cfg.rl.n_trials = 2;
    cfg.evaluation.n_starts = 9;
    cfg.evaluation.duration = 1.0;
    let cfg_path = tmp.path().join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string().unwrap()).unwrap();
    let cfg_arg = cfg_path.to_str().unwrap();

    let pipeline = |dir: &Path| {
        let out = dir.to_str().unwrap();
        run_stage(&["sysid", "--config", cfg_arg, "--seed", "9", "--out", out]);
        run_stage(&["train", "--config", cfg_arg, "--seed", "9", "--out", out]);
        run_stage(&[
            "evaluate", "--config", cfg_arg, "--seed", "9", "--out", out, "--mode", "rloc",
            "--value-grid", "5",
        ]);
        run_stage(&["evaluate", "--config", cfg_arg, "--seed", "9", "--out", out, "--mode", "nnoc"]);
        run_stage(&[
            "sweep", "--config", cfg_arg, "--seed", "9", "--out", out, "--trials", "2",
        ]);
    };

    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    pipeline(&dir_a);
    pipeline(&dir_b);
    let a = snapshot(&dir_a);
    let b = snapshot(&dir_b);
    let same_names = a.keys().eq(b.keys());
    let mut diff = Vec::new();
    for (rel, bytes) in &a {
        if b.get(rel) != Some(bytes) {
            diff.push(rel.display().to_string());
        }
    }
    let csv_json = a
        .keys()
        .filter(|p| {
            let e = p.extension().and_then(|e| e.to_str()).unwrap_or("");
            e == "csv" || e == "json"
        })
        .count();
    let pass = same_names && diff.is_empty() && csv_json > 0 && !a.is_empty();
    report(
        "8",
        "deterministic-reruns",
        pass,
        &format!(
            "two fresh runs of sysid/train/evaluate/sweep with the same config and seed: \
             {} files ({} CSV/JSON), differing: {:?}",
            a.len(),
            csv_json,
            diff
        ),
    );
}
