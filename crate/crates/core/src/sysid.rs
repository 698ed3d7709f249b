//! Naive exploratory data collection and sub-trajectory extraction.
//!
//! Training data for the local linear models is produced without any
//! controller in the loop: the plant is rolled out from a grid of start
//! states under a small family of open-loop, harmonically decaying control
//! sequences. Windows of those rollouts that stay close to a chosen
//! linearisation centre are then cut into fixed-length segments for the
//! expectation-maximisation fit.

use nalgebra::{DMatrix, Vector4};
use rand::Rng;

use crate::plant::{linspace, wrap_angle, Control, PlantModel, PlantParams, PlantState, Trajectory};

/// Open-loop exploratory control schedule.
///
/// Sequence `i` applies `u_k = d_i * b * u_max / (b + k - 1)` for steps
/// `k = 1..n_steps-1`, where `d_i` ranges over all sign combinations in
/// `{0, +1, -1}` per control dimension (so `3^m` sequences). The magnitude
/// starts at `u_max` and halves by step `b + 1`.
#[derive(Debug, Clone)]
pub struct NaiveControls {
    /// One sequence per sign combination: control-dim rows, one column per step.
    pub sequences: Vec<DMatrix<f64>>,
    pub b: f64,
}

pub fn naive_controls(plant: &PlantParams, b: f64) -> NaiveControls {
    let m = plant.control_dim();
    let n = plant.n_steps - 1;
    let dirs = [0.0, 1.0, -1.0];
    let count = 3usize.pow(m as u32);
    let mut sequences = Vec::with_capacity(count);
    for idx in 0..count {
        // Decode the sign combination, first control dimension varying slowest.
        let mut d = vec![0.0; m];
        let mut rem = idx;
        for dim in (0..m).rev() {
            d[dim] = dirs[rem % 3];
            rem /= 3;
        }
        sequences.push(DMatrix::from_fn(m, n, |r, col| {
            d[r] * b * plant.u_max / (b + col as f64)
        }));
    }
    NaiveControls { sequences, b }
}

/// Near-square factorization `n = larger * smaller` minimising the gap.
pub(crate) fn near_square_factors(n: usize) -> (usize, usize) {
    let mut best = (n, 1);
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            best = (n / d, d);
        }
        d += 1;
    }
    best
}

/// Equally spaced grid of `n_starts` states over the plant's two discretized
/// dimensions (all other dimensions zero). The factor pair is as square as
/// possible, with the larger factor on the first discretized dimension.
pub fn naive_start_grid(plant: &PlantParams, n_starts: usize) -> Vec<PlantState> {
    let (n1, n2) = near_square_factors(n_starts);
    let dims = plant.discretized_dims();
    let ranges = plant.discretized_ranges();
    let v1 = linspace(ranges[0].0, ranges[0].1, n1);
    let v2 = linspace(ranges[1].0, ranges[1].1, n2);
    let mut starts = Vec::with_capacity(n_starts);
    for a in &v1 {
        for b in &v2 {
            let mut x = Vector4::zeros();
            x[dims[0]] = *a;
            x[dims[1]] = *b;
            starts.push(x);
        }
    }
    starts
}

/// Full naive training set: every control sequence applied from every start.
#[derive(Debug, Clone)]
pub struct Experience {
    pub records: Vec<Trajectory>,
    pub n_starts: usize,
    pub n_sequences: usize,
    /// Rollouts dropped because integration produced non-finite states.
    pub dropped: usize,
}

pub fn collect_experience<R: Rng + ?Sized>(
    plant: &PlantParams,
    starts: &[PlantState],
    controls: &NaiveControls,
    rng: &mut R,
) -> Experience {
    let mut records = Vec::with_capacity(starts.len() * controls.sequences.len());
    let mut dropped = 0;
    for x0 in starts {
        for seq in &controls.sequences {
            match plant.simulate(x0, |k, _| seq.column(k).into_owned(), plant.n_steps, rng) {
                Ok(t) if !t.diverged => records.push(t),
                _ => dropped += 1,
            }
        }
    }
    Experience {
        records,
        n_starts: starts.len(),
        n_sequences: controls.sequences.len(),
        dropped,
    }
}

/// A fixed-length window of a rollout: `states.len() == controls.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub states: Vec<PlantState>,
    pub controls: Vec<Control>,
}

/// Sub-trajectories gathered around one linearisation centre.
#[derive(Debug, Clone)]
pub struct SubTrajectorySet {
    pub centre: PlantState,
    /// Segment length in states (`h`).
    pub len: usize,
    pub segments: Vec<Segment>,
}

/// True when `x` lies in the sampling box around `centre`: angles within
/// `delta_theta` (wrapped for the cart-pole pole angle) and angular
/// velocities within `delta_theta_dot`. Cart position and velocity are
/// unconstrained for the cart-pole.
fn in_box(
    plant: &PlantParams,
    centre: &PlantState,
    x: &PlantState,
    delta_theta: f64,
    delta_theta_dot: f64,
) -> bool {
    match plant.model {
        PlantModel::Arm(_) => {
            (x[0] - centre[0]).abs() <= delta_theta
                && (x[1] - centre[1]).abs() <= delta_theta
                && (x[2] - centre[2]).abs() <= delta_theta_dot
                && (x[3] - centre[3]).abs() <= delta_theta_dot
        }
        PlantModel::CartPole(_) => {
            wrap_angle(x[2] - centre[2]).abs() <= delta_theta
                && (x[3] - centre[3]).abs() <= delta_theta_dot
        }
    }
}

/// Cut non-overlapping segments of `h` states (`h - 1` controls) out of the
/// maximal in-box runs of every record, scanning left to right, stopping
/// after `n_max` segments. Runs shorter than `h` contribute nothing; the
/// result may be empty and the caller decides how to handle that.
///
/// Segment states are expressed in the centre's chart (see
/// [`PlantParams::chart_state`]) so a linear model fitted to them never sees
/// a 2*pi jump inside the box.
pub fn sample_subtrajectories(
    exp: &Experience,
    plant: &PlantParams,
    centre: &PlantState,
    delta_theta: f64,
    delta_theta_dot: f64,
    h: usize,
    n_max: usize,
) -> SubTrajectorySet {
    assert!(h >= 2, "segments need at least one transition");
    let mut segments = Vec::new();
    'records: for t in &exp.records {
        let n = t.states.len();
        let mut i = 0;
        while i < n {
            if !in_box(plant, centre, &t.states[i], delta_theta, delta_theta_dot) {
                i += 1;
                continue;
            }
            // Maximal in-box run starting at i.
            let mut j = i;
            while j + 1 < n
                && in_box(plant, centre, &t.states[j + 1], delta_theta, delta_theta_dot)
            {
                j += 1;
            }
            let mut s = i;
            while s + h <= j + 1 {
                segments.push(Segment {
                    states: t.states[s..s + h]
                        .iter()
                        .map(|x| plant.chart_state(centre, x))
                        .collect(),
                    controls: t.controls[s..s + h - 1].to_vec(),
                });
                if segments.len() == n_max {
                    break 'records;
                }
                s += h;
            }
            i = j + 1;
        }
    }
    SubTrajectorySet {
        centre: *centre,
        len: h,
        segments,
    }
}

/// Choose `n_centres` linearisation centres. The first is always the plant
/// target; the rest are sampled uniformly over the plant's centre dimensions
/// (all other dimensions zero). Any previously placed centres are kept as a
/// prefix so growing the bank never invalidates earlier models.
pub fn place_centres<R: Rng + ?Sized>(
    plant: &PlantParams,
    n_centres: usize,
    previous: &[PlantState],
    rng: &mut R,
) -> Vec<PlantState> {
    let mut centres = previous.to_vec();
    centres.truncate(n_centres);
    if centres.is_empty() && n_centres > 0 {
        centres.push(plant.target);
    }
    let dims = plant.discretized_dims();
    let ranges = plant.discretized_ranges();
    while centres.len() < n_centres {
        let mut x = Vector4::zeros();
        for &d in plant.centre_dims() {
            let slot = dims.iter().position(|&dd| dd == d).expect("centre dim");
            let (lo, hi) = ranges[slot];
            x[d] = rng.gen_range(lo..hi);
        }
        centres.push(x);
    }
    centres
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const PI: f64 = std::f64::consts::PI;

    fn cartpole_quiet() -> PlantParams {
        let mut p = PlantParams::cartpole_default();
        p.noise_std = 0.0;
        p
    }

    #[test]
    fn naive_controls_follow_harmonic_decay() {
        let plant = cartpole_quiet();
        let nc = naive_controls(&plant, 10.0);
        assert_eq!(nc.sequences.len(), 3);
        // First sequence is the zero combination.
        assert_eq!(nc.sequences[0].amax(), 0.0);
        let pos = &nc.sequences[1];
        // u_1 = u_max, u_{b+1} = u_max / 2, u_291 = 10*20/300.
        assert_relative_eq!(pos[(0, 0)], 20.0);
        assert_relative_eq!(pos[(0, 10)], 10.0);
        assert_relative_eq!(pos[(0, 290)], 200.0 / 300.0);
        let neg = &nc.sequences[2];
        assert_relative_eq!(neg[(0, 0)], -20.0);
        for s in &nc.sequences {
            assert!(s.amax() <= plant.u_max + 1e-12);
            assert_eq!(s.ncols(), plant.n_steps - 1);
        }
    }

    #[test]
    fn naive_controls_enumerate_all_sign_combinations_for_two_dims() {
        let plant = PlantParams::arm_default();
        let nc = naive_controls(&plant, 10.0);
        assert_eq!(nc.sequences.len(), 9);
        let mut signs: Vec<(f64, f64)> = nc
            .sequences
            .iter()
            .map(|s| (s[(0, 0)].signum() * (s[(0, 0)] != 0.0) as i32 as f64,
                      (s[(1, 0)].signum() * (s[(1, 0)] != 0.0) as i32 as f64)))
            .collect();
        signs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        signs.dedup();
        assert_eq!(signs.len(), 9, "all 9 sign combinations must be distinct");
    }

    #[test]
    fn near_square_factorization() {
        assert_eq!(near_square_factors(253), (23, 11));
        assert_eq!(near_square_factors(790), (79, 10));
        assert_eq!(near_square_factors(100), (10, 10));
        assert_eq!(near_square_factors(7), (7, 1));
        assert_eq!(near_square_factors(1), (1, 1));
    }

    #[test]
    fn start_grid_covers_discretized_ranges() {
        let plant = cartpole_quiet();
        let starts = naive_start_grid(&plant, 253);
        assert_eq!(starts.len(), 253);
        let mut thetas: Vec<f64> = starts.iter().map(|x| x[2]).collect();
        thetas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        thetas.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert_eq!(thetas.len(), 23);
        assert_relative_eq!(thetas[0], -PI);
        assert_relative_eq!(*thetas.last().unwrap(), PI);
        let mut rates: Vec<f64> = starts.iter().map(|x| x[3]).collect();
        rates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rates.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert_eq!(rates.len(), 11);
        assert_relative_eq!(rates[10], 250.0_f64.to_radians());
        // Cart position/velocity stay zero.
        assert!(starts.iter().all(|x| x[0] == 0.0 && x[1] == 0.0));

        let arm = PlantParams::arm_default();
        let astarts = naive_start_grid(&arm, 790);
        assert_eq!(astarts.len(), 790);
        let mut t1: Vec<f64> = astarts.iter().map(|x| x[0]).collect();
        t1.sort_by(|a, b| a.partial_cmp(b).unwrap());
        t1.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert_eq!(t1.len(), 79);

        // A single start sits at the midpoint of the ranges.
        let single = naive_start_grid(&plant, 1);
        assert_relative_eq!(single[0][2], 0.0);
        assert_relative_eq!(single[0][3], 0.0);
    }

    #[test]
    fn experience_has_one_record_per_start_and_sequence() {
        let plant = cartpole_quiet();
        let starts = naive_start_grid(&plant, 253);
        let nc = naive_controls(&plant, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let exp = collect_experience(&plant, &starts, &nc, &mut rng);
        assert_eq!(exp.records.len(), 759);
        assert_eq!(exp.dropped, 0);
        assert_eq!(exp.records[0].states.len(), 300);
        assert_eq!(exp.records[0].controls.len(), 299);
    }

    #[test]
    fn zero_sequence_from_equilibrium_is_constant() {
        let plant = cartpole_quiet();
        let nc = naive_controls(&plant, 10.0);
        let hanging = Vector4::new(0.0, 0.0, PI, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let exp = collect_experience(&plant, &[hanging], &nc, &mut rng);
        let zero_record = &exp.records[0];
        for x in &zero_record.states {
            assert!(plant.state_error(x, &hanging).norm() < 1e-3);
        }
    }

    #[test]
    fn stored_pairs_replay_exactly_through_the_plant_step() {
        // The pairing convention is (x_k, u_k) -> x_{k+1}: replaying each
        // stored control from each stored state must reproduce the next state
        // bit-for-bit in the noise-free case.
        let plant = cartpole_quiet();
        let starts = naive_start_grid(&plant, 9);
        let nc = naive_controls(&plant, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let exp = collect_experience(&plant, &starts, &nc, &mut rng);
        for t in &exp.records {
            for k in 0..t.controls.len() {
                let next = plant.step(&t.states[k], &t.controls[k]);
                assert_eq!(next, t.states[k + 1]);
            }
        }
    }

    fn segment_record(pattern: &[bool], centre: &PlantState) -> Trajectory {
        // Build an arm trajectory whose states are in/out of the box
        // according to `pattern`.
        let inside = *centre;
        let mut outside = *centre;
        outside[0] = (centre[0] + 1.0).min(PI);
        let states: Vec<PlantState> = pattern
            .iter()
            .map(|&p| if p { inside } else { outside })
            .collect();
        let controls = vec![dvector![0.0, 0.0]; pattern.len() - 1];
        Trajectory {
            states,
            controls,
            dt: 0.01,
            diverged: false,
        }
    }

    fn experience_of(records: Vec<Trajectory>) -> Experience {
        Experience {
            n_starts: records.len(),
            n_sequences: 1,
            dropped: 0,
            records,
        }
    }

    #[test]
    fn window_cutting_matches_hand_counts() {
        let plant = PlantParams::arm_default();
        let centre = Vector4::new(1.0, 1.0, 0.0, 0.0);
        let dth = 20.0_f64.to_radians();
        let dthd = 120.0_f64.to_radians();
        // 14 in-box states, h = 7 -> exactly two segments.
        let rec = segment_record(&vec![true; 14], &centre);
        let set = sample_subtrajectories(&experience_of(vec![rec]), &plant, &centre, dth, dthd, 7, 100);
        assert_eq!(set.segments.len(), 2);
        assert_eq!(set.segments[0].states.len(), 7);
        assert_eq!(set.segments[0].controls.len(), 6);

        // A 13-state run yields one segment; a 6-state run yields none.
        let rec13 = segment_record(&vec![true; 13], &centre);
        let set13 =
            sample_subtrajectories(&experience_of(vec![rec13]), &plant, &centre, dth, dthd, 7, 100);
        assert_eq!(set13.segments.len(), 1);
        let rec6 = segment_record(&vec![true; 6], &centre);
        let set6 =
            sample_subtrajectories(&experience_of(vec![rec6]), &plant, &centre, dth, dthd, 7, 100);
        assert!(set6.segments.is_empty());

        // Runs are separated by out-of-box states: 7 in, 1 out, 7 in -> two.
        let mut pat = vec![true; 7];
        pat.push(false);
        pat.extend(vec![true; 7]);
        let rec2 = segment_record(&pat, &centre);
        let set2 =
            sample_subtrajectories(&experience_of(vec![rec2]), &plant, &centre, dth, dthd, 7, 100);
        assert_eq!(set2.segments.len(), 2);

        // The n_max cap truncates.
        let recbig = segment_record(&vec![true; 70], &centre);
        let capped =
            sample_subtrajectories(&experience_of(vec![recbig]), &plant, &centre, dth, dthd, 7, 3);
        assert_eq!(capped.segments.len(), 3);
    }

    #[test]
    fn cartpole_box_wraps_pole_angle() {
        let plant = cartpole_quiet();
        // Centre at the wrap boundary: theta = pi.
        let centre = Vector4::new(0.0, 0.0, PI, 0.0);
        let near = Vector4::new(5.0, -3.0, -PI + 0.1, 0.0); // wrapped distance 0.1
        let far = Vector4::new(0.0, 0.0, PI / 2.0, 0.0);
        let dth = 20.0_f64.to_radians();
        let dthd = 120.0_f64.to_radians();
        assert!(in_box(&plant, &centre, &near, dth, dthd));
        assert!(!in_box(&plant, &centre, &far, dth, dthd));
    }

    /// Brute-force reference: expected number of segments for a given
    /// in-box mask, computed straight from the definition.
    fn expected_segments(mask: &[bool], h: usize) -> usize {
        let mut total = 0;
        let mut run = 0;
        for &m in mask {
            if m {
                run += 1;
            } else {
                total += run / h;
                run = 0;
            }
        }
        total + run / h
    }

    proptest! {
        #[test]
        fn window_cutting_matches_reference_on_random_masks(
            mask in proptest::collection::vec(any::<bool>(), 2..120),
            h in 2usize..9,
        ) {
            let plant = PlantParams::arm_default();
            let centre = Vector4::new(1.0, 1.0, 0.0, 0.0);
            let rec = segment_record(&mask, &centre);
            let set = sample_subtrajectories(
                &experience_of(vec![rec]),
                &plant,
                &centre,
                20.0_f64.to_radians(),
                120.0_f64.to_radians(),
                h,
                usize::MAX,
            );
            prop_assert_eq!(set.segments.len(), expected_segments(&mask, h));
            for s in &set.segments {
                prop_assert_eq!(s.states.len(), h);
                prop_assert_eq!(s.controls.len(), h - 1);
            }
        }
    }

    #[test]
    fn centres_start_at_target_and_preserve_prefix() {
        let plant = cartpole_quiet();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let four = place_centres(&plant, 4, &[], &mut rng);
        assert_eq!(four.len(), 4);
        assert_eq!(four[0], plant.target);
        for c in &four[1..] {
            assert_eq!(c[0], 0.0);
            assert_eq!(c[1], 0.0);
            assert_eq!(c[3], 0.0);
            assert!(c[2] >= -PI && c[2] < PI);
        }
        let five = place_centres(&plant, 5, &four, &mut rng);
        assert_eq!(&five[..4], &four[..]);
        assert_eq!(five.len(), 5);
        // Shrinking keeps the prefix too.
        let two = place_centres(&plant, 2, &five, &mut rng);
        assert_eq!(&two[..], &five[..2]);

        // Arm centres randomise both joint angles.
        let arm = PlantParams::arm_default();
        let ac = place_centres(&arm, 6, &[], &mut rng);
        assert_eq!(ac[0], arm.target);
        assert!(ac[1..].iter().all(|c| c[2] == 0.0 && c[3] == 0.0));
        assert!(ac[1..].iter().any(|c| c[0] != c[1]));
    }
}
