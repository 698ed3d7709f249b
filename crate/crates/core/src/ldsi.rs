//! Local linear dynamical system identification with inputs, fitted by
//! expectation-maximisation.
//!
//! The model for each linearisation centre is
//!
//! ```text
//! z_{k+1} = A z_k + B u_k + w,   w ~ N(0, diag(sigma_w))
//! x_k     = z_k + v,             v ~ N(0, diag(sigma_v))
//! ```
//!
//! with an identity observation matrix. The E-step runs a Kalman filter and
//! Rauch-Tung-Striebel smoother over every segment (accumulating the
//! innovations log-likelihood); the M-step re-estimates `[A B]` jointly by
//! regressing smoothed next states on smoothed current states and controls,
//! and re-estimates both noise covariances as diagonals. Each segment's
//! initial-state prior is pinned to its first observation with unit
//! covariance and is not re-estimated, so every cycle is a generalized EM
//! step and the likelihood trace is non-decreasing.

use nalgebra::{Cholesky, DMatrix, Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::plant::PlantState;
use crate::sysid::{Segment, SubTrajectorySet};

/// Fitted local linear model around one centre.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub centre: PlantState,
    pub a: Matrix4<f64>,
    /// Input matrix, 4 x control-dim.
    pub b: DMatrix<f64>,
    /// Diagonal of the process noise covariance.
    pub sigma_w: Vector4<f64>,
    /// Diagonal of the observation noise covariance.
    pub sigma_v: Vector4<f64>,
    /// Innovations log-likelihood, one entry per EM cycle.
    pub log_likelihood: Vec<f64>,
    pub n_segments: usize,
    /// True when the regression Gram matrix needed ridge regularization.
    pub regularized: bool,
}

impl LinearModel {
    /// Placeholder model for a centre with no nearby experience: identity
    /// state transition, zero input response. Its Riccati synthesis cannot
    /// converge (the pair is uncontrollable), so the derived gain is zero
    /// and flagged, which downstream layers treat as "this controller does
    /// nothing".
    pub fn no_data(centre: &PlantState, control_dim: usize) -> Self {
        LinearModel {
            centre: *centre,
            a: Matrix4::identity(),
            b: DMatrix::zeros(4, control_dim),
            sigma_w: Vector4::from_element(1.0),
            sigma_v: Vector4::from_element(1.0),
            log_likelihood: Vec::new(),
            n_segments: 0,
            regularized: true,
        }
    }
}

/// EM stopping parameters.
#[derive(Debug, Clone, Copy)]
pub struct EmConfig {
    /// Maximum number of EM cycles.
    pub max_cycles: usize,
    /// Stop once the log-likelihood improvement falls below this value.
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_cycles: 100,
            tol: 1e-7,
        }
    }
}

const COV_FLOOR: f64 = 1e-12;
const RIDGE: f64 = 1e-8;

/// Sufficient statistics accumulated over all segments in one E-step.
struct Stats {
    /// sum E[z_k z_k'] over transition sources.
    s_zz: Matrix4<f64>,
    /// sum E[z_k] u_k'.
    s_zu: DMatrix<f64>,
    /// sum u_k u_k'.
    s_uu: DMatrix<f64>,
    /// sum E[z_{k+1} z_k'].
    s_nz: Matrix4<f64>,
    /// sum E[z_{k+1}] u_k'.
    s_nu: DMatrix<f64>,
    /// sum E[z_{k+1} z_{k+1}'].
    s_nn: Matrix4<f64>,
    n_trans: f64,
    /// Per-dimension sum of E[(x_k - z_k)^2].
    obs: Vector4<f64>,
    n_obs: f64,
}

impl Stats {
    fn zero(m: usize) -> Self {
        Stats {
            s_zz: Matrix4::zeros(),
            s_zu: DMatrix::zeros(4, m),
            s_uu: DMatrix::zeros(m, m),
            s_nz: Matrix4::zeros(),
            s_nu: DMatrix::zeros(4, m),
            s_nn: Matrix4::zeros(),
            n_trans: 0.0,
            obs: Vector4::zeros(),
            n_obs: 0.0,
        }
    }
}

/// Per-segment filter/smoother storage, reused across segments.
#[derive(Default)]
struct Workspace {
    m_pred: Vec<Vector4<f64>>,
    p_pred: Vec<Matrix4<f64>>,
    m_filt: Vec<Vector4<f64>>,
    p_filt: Vec<Matrix4<f64>>,
    m_smooth: Vec<Vector4<f64>>,
    p_smooth: Vec<Matrix4<f64>>,
    gains: Vec<Matrix4<f64>>,
}

fn sym4(m: &Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

fn chol4(m: &Matrix4<f64>, what: &'static str) -> Result<Cholesky<f64, nalgebra::Const<4>>> {
    if let Some(c) = Cholesky::new(sym4(m)) {
        return Ok(c);
    }
    // Round-off can push a PSD matrix marginally indefinite; nudge and retry.
    let jitter = Matrix4::identity() * (1e-12 * (1.0 + m.amax()));
    Cholesky::new(sym4(m) + jitter).ok_or(Error::Singular(what))
}

/// One Kalman filter + RTS smoother pass over a segment. Returns the
/// segment's innovations log-likelihood and adds its sufficient statistics
/// to `stats`.
fn smooth_segment(
    seg: &Segment,
    a: &Matrix4<f64>,
    b: &DMatrix<f64>,
    sigma_w: &Vector4<f64>,
    sigma_v: &Vector4<f64>,
    ws: &mut Workspace,
    stats: &mut Stats,
) -> Result<f64> {
    let t = seg.states.len();
    ws.m_pred.resize(t, Vector4::zeros());
    ws.p_pred.resize(t, Matrix4::zeros());
    ws.m_filt.resize(t, Vector4::zeros());
    ws.p_filt.resize(t, Matrix4::zeros());
    ws.m_smooth.resize(t, Vector4::zeros());
    ws.p_smooth.resize(t, Matrix4::zeros());
    ws.gains.resize(t, Matrix4::zeros());

    let mut ll = 0.0;
    for k in 0..t {
        if k == 0 {
            // Fixed prior: first observation with unit covariance.
            ws.m_pred[0] = seg.states[0];
            ws.p_pred[0] = Matrix4::identity();
        } else {
            let bu = b * &seg.controls[k - 1];
            let mut mp = a * ws.m_filt[k - 1];
            for i in 0..4 {
                mp[i] += bu[i];
            }
            ws.m_pred[k] = mp;
            let mut pp = a * ws.p_filt[k - 1] * a.transpose();
            for i in 0..4 {
                pp[(i, i)] += sigma_w[i];
            }
            ws.p_pred[k] = sym4(&pp);
        }

        let mut s = ws.p_pred[k];
        for i in 0..4 {
            s[(i, i)] += sigma_v[i];
        }
        let chol = chol4(&s, "innovation covariance")?;
        let e = seg.states[k] - ws.m_pred[k];
        let ldet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let maha = e.dot(&chol.solve(&e));
        ll += -0.5 * (4.0 * (2.0 * std::f64::consts::PI).ln() + ldet + maha);

        // Gain K = P S^-1 (S symmetric).
        let gain = chol.solve(&ws.p_pred[k]).transpose();
        ws.m_filt[k] = ws.m_pred[k] + gain * e;
        ws.p_filt[k] = sym4(&(ws.p_pred[k] - gain * s * gain.transpose()));
    }

    // Backward smoother.
    ws.m_smooth[t - 1] = ws.m_filt[t - 1];
    ws.p_smooth[t - 1] = ws.p_filt[t - 1];
    for k in (0..t - 1).rev() {
        let chol = chol4(&ws.p_pred[k + 1], "smoother predicted covariance")?;
        // J = P_f A' P_pred^-1.
        let j = chol.solve(&(a * ws.p_filt[k])).transpose();
        ws.m_smooth[k] = ws.m_filt[k] + j * (ws.m_smooth[k + 1] - ws.m_pred[k + 1]);
        ws.p_smooth[k] =
            sym4(&(ws.p_filt[k] + j * (ws.p_smooth[k + 1] - ws.p_pred[k + 1]) * j.transpose()));
        ws.gains[k] = j;
    }

    // Accumulate sufficient statistics.
    for k in 0..t - 1 {
        let zs = &ws.m_smooth[k];
        let zn = &ws.m_smooth[k + 1];
        let u = &seg.controls[k];
        stats.s_zz += ws.p_smooth[k] + zs * zs.transpose();
        // Cross-covariance of (z_{k+1}, z_k) given all data: P_smooth[k+1] J_k'.
        stats.s_nz += ws.p_smooth[k + 1] * ws.gains[k].transpose() + zn * zs.transpose();
        stats.s_nn += ws.p_smooth[k + 1] + zn * zn.transpose();
        for r in 0..4 {
            for c in 0..u.len() {
                stats.s_zu[(r, c)] += zs[r] * u[c];
                stats.s_nu[(r, c)] += zn[r] * u[c];
            }
        }
        for r in 0..u.len() {
            for c in 0..u.len() {
                stats.s_uu[(r, c)] += u[r] * u[c];
            }
        }
        stats.n_trans += 1.0;
    }
    for k in 0..t {
        let r = seg.states[k] - ws.m_smooth[k];
        for i in 0..4 {
            stats.obs[i] += r[i] * r[i] + ws.p_smooth[k][(i, i)];
        }
        stats.n_obs += 1.0;
    }
    Ok(ll)
}

/// Fit a local linear model to a set of sub-trajectory segments.
///
/// Starts from `A = I`, `B = 0`, unit noise covariances, and runs EM until
/// the log-likelihood improvement drops below `cfg.tol` or `cfg.max_cycles`
/// is reached. Errors on an empty segment set or inconsistent control
/// dimensions; a degenerate regression (e.g. all-zero controls) is handled
/// by ridge regularization and flagged in the result.
pub fn ldsi_fit(set: &SubTrajectorySet, cfg: &EmConfig) -> Result<LinearModel> {
    if set.segments.is_empty() {
        return Err(Error::EmptySegments);
    }
    let m = set.segments[0]
        .controls
        .first()
        .map(|u| u.len())
        .unwrap_or(0);
    if m == 0 {
        return Err(Error::DimensionMismatch {
            context: "ldsi_fit control dimension",
            expected: 1,
            got: 0,
        });
    }
    for seg in &set.segments {
        if seg.states.len() < 2 || seg.controls.len() != seg.states.len() - 1 {
            return Err(Error::InvalidConfig(
                "segments need h >= 2 states and h - 1 controls".into(),
            ));
        }
        if seg.controls.iter().any(|u| u.len() != m) {
            return Err(Error::DimensionMismatch {
                context: "ldsi_fit segment controls",
                expected: m,
                got: seg.controls.iter().find(|u| u.len() != m).unwrap().len(),
            });
        }
    }

    let mut a = Matrix4::identity();
    let mut b = DMatrix::zeros(4, m);
    let mut sigma_w = Vector4::repeat(1.0);
    let mut sigma_v = Vector4::repeat(1.0);
    let mut trace = Vec::with_capacity(cfg.max_cycles);
    let mut regularized = false;
    let mut ws = Workspace::default();

    for _ in 0..cfg.max_cycles {
        // E-step.
        let mut stats = Stats::zero(m);
        let mut ll = 0.0;
        for seg in &set.segments {
            ll += smooth_segment(seg, &a, &b, &sigma_w, &sigma_v, &mut ws, &mut stats)?;
        }
        let improved = trace.last().map_or(f64::INFINITY, |prev| ll - prev);
        trace.push(ll);

        // M-step: joint regression of next state on [state; control].
        let d = 4 + m;
        let mut gram = DMatrix::zeros(d, d);
        gram.view_mut((0, 0), (4, 4)).copy_from(&stats.s_zz);
        gram.view_mut((0, 4), (4, m)).copy_from(&stats.s_zu);
        gram.view_mut((4, 0), (m, 4))
            .copy_from(&stats.s_zu.transpose());
        gram.view_mut((4, 4), (m, m)).copy_from(&stats.s_uu);
        gram = (&gram + gram.transpose()) * 0.5;
        let mut s_np = DMatrix::zeros(4, d);
        s_np.view_mut((0, 0), (4, 4)).copy_from(&stats.s_nz);
        s_np.view_mut((0, 4), (4, m)).copy_from(&stats.s_nu);

        let mut ridge = RIDGE;
        let chol = loop {
            if let Some(c) = gram.clone().cholesky() {
                break c;
            }
            regularized = true;
            for i in 0..d {
                gram[(i, i)] += ridge;
            }
            ridge *= 10.0;
            if ridge > 1e6 {
                return Err(Error::Singular("ldsi_fit regression Gram matrix"));
            }
        };
        let ab = chol.solve(&s_np.transpose()).transpose();
        a = Matrix4::from_fn(|r, c| ab[(r, c)]);
        for r in 0..4 {
            for c in 0..m {
                b[(r, c)] = ab[(r, 4 + c)];
            }
        }

        // Process noise: residual second moment of the regression.
        let resid =
            DMatrix::from_fn(4, 4, |r, c| stats.s_nn[(r, c)]) - &ab * s_np.transpose()
                - &s_np * ab.transpose()
                + &ab * &gram * ab.transpose();
        for i in 0..4 {
            sigma_w[i] = (resid[(i, i)] / stats.n_trans).max(COV_FLOOR);
            sigma_v[i] = (stats.obs[i] / stats.n_obs).max(COV_FLOOR);
        }

        if improved < cfg.tol {
            break;
        }
    }

    Ok(LinearModel {
        centre: set.centre,
        a,
        b,
        sigma_w,
        sigma_v,
        log_likelihood: trace,
        n_segments: set.segments.len(),
        regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dvector, DVector};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Random system with spectral radius below `rho_max`.
    pub(crate) fn random_stable_system(
        rng: &mut ChaCha8Rng,
        m: usize,
        rho_max: f64,
    ) -> (Matrix4<f64>, DMatrix<f64>) {
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

    /// Simulate the LDS and split the rollout into equal segments.
    pub(crate) fn synthetic_segments(
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
                Vector4::from_fn(|i, _| {
                    z[i] + noise_std * rng.sample::<f64, _>(StandardNormal)
                })
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
    fn recovers_known_system_with_tiny_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (a, b) = random_stable_system(&mut rng, 1, 0.95);
        let set = synthetic_segments(&mut rng, &a, &b, 1e-6, 240, 4);
        let model = ldsi_fit(&set, &EmConfig::default()).unwrap();
        let rel_a = (model.a - a).norm() / a.norm();
        let rel_b = (&model.b - &b).norm() / b.norm();
        assert!(rel_a < 1e-3, "A error {rel_a}");
        assert!(rel_b < 1e-3, "B error {rel_b}");
    }

    #[test]
    fn recovers_random_systems_within_two_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..3 {
            let m = 1 + trial % 2;
            let (a, b) = random_stable_system(&mut rng, m, 0.95);
            let set = synthetic_segments(&mut rng, &a, &b, 1e-3, 200, 4);
            let model = ldsi_fit(&set, &EmConfig::default()).unwrap();
            let rel_a = (model.a - a).norm() / a.norm();
            let rel_b = (&model.b - &b).norm() / b.norm();
            assert!(rel_a < 0.02, "A error {rel_a} on trial {trial}");
            assert!(rel_b < 0.02, "B error {rel_b} on trial {trial}");
        }
    }

    #[test]
    fn log_likelihood_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (a, b) = random_stable_system(&mut rng, 2, 0.9);
        let set = synthetic_segments(&mut rng, &a, &b, 1e-2, 150, 3);
        let model = ldsi_fit(&set, &EmConfig::default()).unwrap();
        assert!(model.log_likelihood.len() >= 2);
        for w in model.log_likelihood.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs()),
                "log-likelihood decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn empty_segment_set_is_an_error() {
        let set = SubTrajectorySet {
            centre: Vector4::zeros(),
            len: 7,
            segments: vec![],
        };
        assert!(matches!(
            ldsi_fit(&set, &EmConfig::default()),
            Err(Error::EmptySegments)
        ));
    }

    #[test]
    fn degenerate_constant_zero_segment_engages_regularization() {
        let seg = Segment {
            states: vec![Vector4::zeros(); 10],
            controls: vec![dvector![0.0]; 9],
        };
        let set = SubTrajectorySet {
            centre: Vector4::zeros(),
            len: 10,
            segments: vec![seg],
        };
        let model = ldsi_fit(&set, &EmConfig::default()).unwrap();
        assert!(model.regularized);
        assert!(model.a.iter().all(|v| v.is_finite()));
        assert!(model.b.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fitting_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b) = random_stable_system(&mut rng, 1, 0.9);
        let set = synthetic_segments(&mut rng, &a, &b, 1e-3, 100, 2);
        let m1 = ldsi_fit(&set, &EmConfig::default()).unwrap();
        let m2 = ldsi_fit(&set, &EmConfig::default()).unwrap();
        assert_eq!(m1.a, m2.a);
        assert_eq!(m1.b, m2.b);
        assert_eq!(m1.log_likelihood, m2.log_likelihood);
    }

    #[test]
    fn stops_early_when_likelihood_plateaus() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (a, b) = random_stable_system(&mut rng, 1, 0.8);
        let set = synthetic_segments(&mut rng, &a, &b, 1e-4, 120, 2);
        // A tolerance larger than any possible improvement stops after the
        // second cycle (the first has no previous likelihood to compare to).
        let loose = ldsi_fit(
            &set,
            &EmConfig {
                max_cycles: 100,
                tol: 1e18,
            },
        )
        .unwrap();
        assert_eq!(loose.log_likelihood.len(), 2);
        let tight = ldsi_fit(&set, &EmConfig::default()).unwrap();
        assert!(tight.log_likelihood.len() > 2);
    }
}
