//! Cross-module property tests: round trips, projection feasibility, and
//! metric conventions under randomized inputs.

use pimpcs_core::dataset::{Dataset, DatasetMeta, TransitionSample};
use pimpcs_core::dynamics::{Control, State};
use pimpcs_core::evaluate::classify_landing;
use pimpcs_core::lyapunov::project_feasible;
use pimpcs_core::numerics::{jacobi_eigen_sym, SymMat6};
use pimpcs_core::surrogate::{forward, init_params, SurrogateParams};
use proptest::prelude::*;

fn finite_f64(magnitude: f64) -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL.prop_map(move |x| {
        // Fold arbitrary normals into a bounded band, keeping the sign and
        // mantissa texture.
        let m = x.abs().log2().rem_euclid(1.0);
        x.signum() * m * magnitude
    })
}

fn any_state(magnitude: f64) -> impl Strategy<Value = State> {
    (
        finite_f64(magnitude),
        finite_f64(magnitude),
        finite_f64(magnitude),
        finite_f64(magnitude),
        finite_f64(magnitude),
        finite_f64(magnitude),
    )
        .prop_map(|(x, y, theta, xd, yd, td)| State::new(x, y, theta, xd, yd, td))
}

fn any_sample() -> impl Strategy<Value = (State, (f64, f64), State)> {
    (
        any_state(10.0),
        (finite_f64(50.0), finite_f64(50.0)),
        any_state(10.0),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The dataset file format reproduces every bit of every float.
    #[test]
    fn dataset_round_trip_is_bitwise(rows in prop::collection::vec(any_sample(), 1..40)) {
        let samples: Vec<TransitionSample> = rows
            .iter()
            .enumerate()
            .map(|(k, (s, (ur, ul), sp))| TransitionSample {
                traj_id: 0,
                k: k as u32,
                s: *s,
                u_c: Control::new(*ur, *ul),
                s_plus: *sp,
            })
            .collect();
        let d = Dataset {
            samples,
            meta: DatasetMeta {
                control_dt: 0.05,
                duration: 15.0,
                plant_digest: "0123456789abcdef".to_string(),
                seed: 7,
            },
        };
        let back = Dataset::from_file_string(&d.to_file_string()).unwrap();
        prop_assert_eq!(back, d);
    }

    /// The feasible projection always returns a matrix with the eigenvalue
    /// floor and unit-average trace, whatever it is fed.
    #[test]
    fn projection_lands_in_the_feasible_set(entries in prop::collection::vec(-100.0f64..100.0, 21)) {
        let mut rows = [[0.0; 6]; 6];
        let mut it = entries.into_iter();
        for i in 0..6 {
            for j in i..6 {
                rows[i][j] = it.next().unwrap();
            }
        }
        let m = SymMat6::from_upper(rows);
        let p = project_feasible(&m, 1e-6).unwrap();
        let (lambda, _) = jacobi_eigen_sym(&p).unwrap();
        prop_assert!(lambda.0[0] >= 1e-6 - 1e-12, "eigenvalue floor violated: {}", lambda.0[0]);
        prop_assert!((p.trace() - 6.0).abs() <= 1e-9, "trace off: {}", p.trace());
    }

    /// Network evaluation is finite on finite inputs for any seed, and the
    /// flat parameter layout round-trips.
    #[test]
    fn forward_is_finite_and_flat_round_trips(seed in 0u64..500, s in any_state(100.0)) {
        let mu = init_params(seed);
        let u = forward(&mu, &s);
        prop_assert!(u.is_finite());
        let back = SurrogateParams::from_flat(&mu.to_flat(), mu.seed, None);
        prop_assert_eq!(back.weights, mu.weights);
        prop_assert_eq!(back.biases, mu.biases);
    }

    /// Landing classification invariants: landing_time exists iff success,
    /// sits inside the horizon, and safety is exactly the sign of the lowest
    /// altitude.
    #[test]
    fn classification_invariants(ys in prop::collection::vec(-0.3f64..0.6, 2..120)) {
        use pimpcs_core::dynamics::{TrajStep, Trajectory};
        let states: Vec<State> = ys.iter().map(|&y| State::new(0.0, y, 0.0, 0.0, 0.0, 0.0)).collect();
        let traj = Trajectory {
            steps: states
                .windows(2)
                .map(|w| TrajStep { state: w[0], control_term: Control::zero(), next_state: w[1] })
                .collect(),
            control_dt: 0.05,
        };
        let class = classify_landing(&traj).unwrap();
        let min_y = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(class.safe, min_y >= 0.0);
        prop_assert_eq!(class.landing_time.is_some(), class.success);
        if let Some(t) = class.landing_time {
            prop_assert!(t >= 0.0 && t <= (ys.len() - 1) as f64 * 0.05 + 1e-12);
            // The suffix from the landing tick onward stays in the pad band.
            let k0 = (t / 0.05).round() as usize;
            for y in &ys[k0..] {
                prop_assert!((0.0..=0.5).contains(y));
            }
        }
    }
}
