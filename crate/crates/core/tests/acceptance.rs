//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Run with `cargo test -p pimpcs-core --test acceptance --
//! --nocapture` to see every verdict.
//!
//! The heavyweight fixtures (reference dataset, fitted profile, trained
//! controllers, the paired campaign) are built once and shared; expect a few
//! minutes of wall time on first touch.

use pimpcs_core::dataset::{generate_reference, sample_auxiliary, AuxSet, Dataset, GridSpec};
use pimpcs_core::dynamics::{
    derivative, euler_step, rk4_step, stabilizer_control, Control, PlantParams, State,
};
use pimpcs_core::evaluate::{
    bench_cpu, classify_landing, run_campaign, tracking_error, CampaignReport, Controller,
    EvalConfig,
};
use pimpcs_core::lyapunov::{
    dataset_from_pairs, fit_profile, profile_objective, trace_reform_check, violation_fraction,
    FitConfig, StabilityProfile,
};
use pimpcs_core::mpc::MpcConfig;
use pimpcs_core::numerics::{SymMat6, Vec6};
use pimpcs_core::surrogate::{
    init_params, total_loss_and_grad, train, LossToggles, LossWeights, SurrogateParams,
    TrainConfig, PARAM_COUNT,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

/// Pinned seeds: the ordering criteria are evaluated on this exact run.
const TRAIN_SEED: u64 = 3;
const AUX_SEED: u64 = 1;
const AUX_COUNT: usize = 5000;
const EVAL_SEED: u64 = 7;
const EVAL_RUNS: usize = 100;

fn pass(criterion: u32, detail: &str) {
    println!("ACCEPTANCE criterion {criterion}: PASS - {detail}");
}

struct Context {
    plant: PlantParams,
    mpc_cfg: MpcConfig,
    dataset: Dataset,
    dataset_digest: String,
    flagged: Vec<u32>,
    profile: StabilityProfile,
    aux: AuxSet,
    /// (label, loss set, use_aux, trained parameters).
    models: Vec<(&'static str, LossToggles, bool, SurrogateParams)>,
    campaign: Vec<CampaignReport>,
}

fn train_variant(
    ctx_dataset: &Dataset,
    aux: &AuxSet,
    profile: &StabilityProfile,
    plant: &PlantParams,
    losses: &str,
    use_aux: bool,
) -> SurrogateParams {
    let toggles = LossToggles::parse(losses).expect("loss set");
    let cfg = TrainConfig {
        toggles,
        use_aux,
        seed: TRAIN_SEED,
        ..TrainConfig::default()
    };
    let aux_opt = if use_aux { Some(aux) } else { None };
    let profile_opt = if toggles.l3 { Some(profile) } else { None };
    train(ctx_dataset, aux_opt, profile_opt, &cfg, plant)
        .expect("training")
        .params
}

fn context() -> &'static Context {
    static CTX: OnceLock<Context> = OnceLock::new();
    CTX.get_or_init(|| {
        let plant = PlantParams::default();
        let mpc_cfg = MpcConfig::default();
        let grid = GridSpec::default();
        let (dataset, report) =
            generate_reference(&grid, &mpc_cfg, &plant).expect("reference generation");
        let dataset_digest = dataset.digest();
        let profile = fit_profile(&dataset, &FitConfig::default()).expect("profile fit");
        let aux = sample_auxiliary(&dataset, AUX_COUNT, AUX_SEED).expect("auxiliary sampling");

        let models = vec![
            (
                "l1",
                LossToggles::parse("l1").unwrap(),
                false,
                train_variant(&dataset, &aux, &profile, &plant, "l1", false),
            ),
            (
                "l1+l2+l3",
                LossToggles::parse("l1,l2,l3").unwrap(),
                false,
                train_variant(&dataset, &aux, &profile, &plant, "l1,l2,l3", false),
            ),
            (
                "l1+l2+l3+l4",
                LossToggles::parse("l1,l2,l3,l4").unwrap(),
                false,
                train_variant(&dataset, &aux, &profile, &plant, "l1,l2,l3,l4", false),
            ),
            (
                "l1+l2+l3 aux",
                LossToggles::parse("l1,l2,l3").unwrap(),
                true,
                train_variant(&dataset, &aux, &profile, &plant, "l1,l2,l3", true),
            ),
            (
                "l1+l2+l3+l4 aux",
                LossToggles::parse("l1,l2,l3,l4").unwrap(),
                true,
                train_variant(&dataset, &aux, &profile, &plant, "l1,l2,l3,l4", true),
            ),
        ];

        let eval_cfg = EvalConfig {
            n_runs: EVAL_RUNS,
            seed: EVAL_SEED,
            ..EvalConfig::default()
        };
        let mut controllers = vec![Controller::Mpc {
            label: "mpc".to_string(),
            cfg: &mpc_cfg,
        }];
        for (label, _, _, params) in &models {
            controllers.push(Controller::Surrogate {
                label: (*label).to_string(),
                params,
            });
        }
        let campaign = run_campaign(&controllers, &eval_cfg, &plant).expect("campaign");

        Context {
            plant,
            mpc_cfg,
            dataset,
            dataset_digest,
            flagged: report.flagged,
            profile,
            aux,
            models,
            campaign,
        }
    })
}

fn report_for<'a>(ctx: &'a Context, label: &str) -> &'a CampaignReport {
    ctx.campaign
        .iter()
        .find(|r| r.label == label)
        .unwrap_or_else(|| panic!("campaign has no controller {label}"))
}

#[test]
fn criterion_01_equilibrium_exactness() {
    let plant = PlantParams::default();
    let u_e = Control::new(0.5 * plant.m * plant.g, 0.5 * plant.m * plant.g);
    let f = derivative(&State::origin(), &u_e, &plant);
    assert_eq!(f.0, [0.0; 6], "criterion 1: hover derivative not exactly zero");
    // The stabilizer adds nothing at the origin, so the closed loop shares
    // the fixed point.
    let u_net = stabilizer_control(&State::origin(), &plant);
    assert_eq!(derivative(&State::origin(), &u_net, &plant).0, [0.0; 6]);
    pass(1, "derivative at hover equilibrium is exactly zero");
}

#[test]
fn criterion_02_parameter_census() {
    let mu = init_params(0);
    assert_eq!(mu.param_count(), 312, "criterion 2: parameter count");
    assert_eq!(PARAM_COUNT, 312);
    let dims: Vec<usize> = mu.weights.iter().map(Vec::len).collect();
    assert_eq!(dims, vec![60, 100, 100, 20], "criterion 2: layer shapes");
    let biases: Vec<usize> = mu.biases.iter().map(Vec::len).collect();
    assert_eq!(biases, vec![10, 10, 10, 2]);
    pass(2, "network is 6->10->10->10->2 with exactly 312 scalars");
}

#[test]
fn criterion_03_gradient_fidelity() {
    let plant = PlantParams::default();
    let profile = StabilityProfile {
        p: SymMat6::identity(),
        eps_floor: 1e-6,
        final_objective: 0.0,
        violation_fraction: 0.0,
        iterations: 0,
        objective_curve: Vec::new(),
        dataset_digest: "-".to_string(),
    };
    let dt = 0.05;
    let weights = LossWeights::default();
    let toggle_sets = [
        ("L1", LossToggles::parse("l1").unwrap()),
        ("L2", LossToggles::parse("l2").unwrap()),
        ("L3", LossToggles::parse("l3").unwrap()),
        ("L4", LossToggles::parse("l4").unwrap()),
        ("total", LossToggles::default()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce01);
    let mut worst_overall = 0.0_f64;
    for batch_idx in 0..20u64 {
        let mu = init_params(1000 + batch_idx);
        let batch: Vec<pimpcs_core::dataset::TransitionSample> = (0..3)
            .map(|i| pimpcs_core::dataset::TransitionSample {
                traj_id: 0,
                k: i,
                s: State::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.5..6.0),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.5..0.5),
                ),
                u_c: Control::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                s_plus: State::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.5..6.0),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.5..0.5),
                ),
            })
            .collect();
        let aux = vec![
            State::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(0.0..0.5),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ),
            State::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(0.5..6.0),
                0.0,
                0.0,
                rng.random_range(-1.0..1.0),
                0.0,
            ),
        ];
        for (name, toggles) in &toggle_sets {
            let (_, grad) = total_loss_and_grad(
                &mu,
                &batch,
                &aux,
                &weights,
                toggles,
                Some(&profile),
                &plant,
                dt,
            )
            .unwrap();
            // Central differences, step scaled per coordinate.
            let flat = mu.to_flat();
            let mut worst = 0.0_f64;
            for i in 0..PARAM_COUNT {
                let h = 1e-6 * flat.0[i].abs().max(1.0);
                let mut plus = flat.clone();
                plus.0[i] += h;
                let mut minus = flat.clone();
                minus.0[i] -= h;
                let mu_p = SurrogateParams::from_flat(&plus, 0, None);
                let mu_m = SurrogateParams::from_flat(&minus, 0, None);
                let (fp, _) = total_loss_and_grad(
                    &mu_p, &batch, &aux, &weights, toggles, Some(&profile), &plant, dt,
                )
                .unwrap();
                let (fm, _) = total_loss_and_grad(
                    &mu_m, &batch, &aux, &weights, toggles, Some(&profile), &plant, dt,
                )
                .unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let denom = grad.0[i].abs().max(fd.abs()).max(1.0);
                worst = worst.max((grad.0[i] - fd).abs() / denom);
            }
            assert!(
                worst < 1e-4,
                "criterion 3: {name} gradient mismatch {worst:e} on batch {batch_idx}"
            );
            worst_overall = worst_overall.max(worst);
        }
    }
    pass(
        3,
        &format!("analytic gradients match finite differences (max rel err {worst_overall:.2e})"),
    );
}

#[test]
fn criterion_04_convexity_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce04);
    let rand_vec = |rng: &mut ChaCha8Rng| {
        let mut v = [0.0; 6];
        for slot in &mut v {
            *slot = rng.random_range(-3.0..3.0);
        }
        Vec6(v)
    };
    let pairs: Vec<(Vec6, Vec6)> = (0..500)
        .map(|_| (rand_vec(&mut rng), rand_vec(&mut rng)))
        .collect();
    let d = dataset_from_pairs(&pairs);

    let random_symmetric = |rng: &mut ChaCha8Rng| {
        let mut rows = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in i..6 {
                rows[i][j] = rng.random_range(-2.0..2.0);
            }
        }
        SymMat6::from_upper(rows)
    };
    for trial in 0..200 {
        let p1 = random_symmetric(&mut rng);
        let p2 = random_symmetric(&mut rng);
        let mid = p1.add(&p2).scale(0.5);
        let lhs = profile_objective(&mid, &d);
        let rhs = 0.5 * (profile_objective(&p1, &d) + profile_objective(&p2, &d));
        assert!(
            lhs <= rhs + 1e-9 * rhs.abs().max(1.0),
            "criterion 4: midpoint convexity failed on pair {trial}: {lhs} > {rhs}"
        );
    }

    // Trace reformulation over the violating subset of 1000 fresh
    // transitions.
    let pairs: Vec<(Vec6, Vec6)> = (0..1000)
        .map(|_| (rand_vec(&mut rng), rand_vec(&mut rng)))
        .collect();
    let d = dataset_from_pairs(&pairs);
    let p = {
        let raw = random_symmetric(&mut rng);
        pimpcs_core::lyapunov::project_feasible(&raw, 1e-6).unwrap()
    };
    let subset: Vec<_> = d
        .samples
        .iter()
        .filter(|t| p.quadratic_form(&t.s_plus.as_vec6()) > p.quadratic_form(&t.s.as_vec6()))
        .copied()
        .collect();
    assert!(subset.len() > 200, "criterion 4: degenerate violating subset");
    let (lhs, rhs) = trace_reform_check(&subset, &p);
    let err = (lhs - rhs).abs();
    assert!(
        err <= 1e-9 * lhs.abs().max(1.0),
        "criterion 4: trace reformulation |lhs - rhs| = {err:e}"
    );
    pass(
        4,
        &format!(
            "midpoint convexity on 200 pairs and Tr(CP) reformulation agree (|lhs-rhs| = {err:.2e})"
        ),
    );
}

#[test]
fn criterion_05_profile_recovery() {
    // Synthetic stable map with shear: spectral radius 0.9 but expansive in
    // the Euclidean norm, so the identity is infeasible and the solver has
    // to work.
    let mut a = [[0.0; 6]; 6];
    for i in 0..6 {
        a[i][i] = 0.9;
    }
    a[0][1] = 0.9;
    a[2][3] = 0.8;
    a[4][5] = 0.7;
    a[1][4] = 0.3;
    let map = pimpcs_core::numerics::Mat6(a);
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce05);
    let pairs: Vec<(Vec6, Vec6)> = (0..1000)
        .map(|_| {
            let mut v = [0.0; 6];
            for slot in &mut v {
                *slot = rng.random_range(-1.0..1.0);
            }
            (Vec6(v), map.mul_vec(&Vec6(v)))
        })
        .collect();
    let synthetic = dataset_from_pairs(&pairs);
    assert!(
        profile_objective(&SymMat6::identity(), &synthetic) > 0.0,
        "criterion 5: synthetic data must not be trivially feasible at P = I"
    );
    let prof = fit_profile(&synthetic, &FitConfig::default()).unwrap();
    assert_eq!(
        prof.violation_fraction, 0.0,
        "criterion 5: synthetic fit left violations (objective {})",
        prof.final_objective
    );

    // Real reference dataset: strictly fewer violations than the identity.
    let ctx = context();
    let identity_violations = violation_fraction(&SymMat6::identity(), &ctx.dataset);
    assert!(
        identity_violations > 0.0,
        "criterion 5: identity has no violations on the reference data; comparison is vacuous"
    );
    assert!(
        ctx.profile.violation_fraction < identity_violations,
        "criterion 5: fitted violations {} not below identity violations {}",
        ctx.profile.violation_fraction,
        identity_violations
    );
    pass(
        5,
        &format!(
            "synthetic violations 0; reference violations {:.4} < identity {:.4}",
            ctx.profile.violation_fraction, identity_violations
        ),
    );
}

#[test]
fn criterion_06_dataset_shape() {
    let ctx = context();
    assert_eq!(ctx.dataset.num_trajectories(), 273, "criterion 6: trajectory count");
    assert_eq!(ctx.dataset.len(), 81_900, "criterion 6: sample count");
    assert!(
        (ctx.dataset.meta.control_dt - 0.05).abs() < 1e-12,
        "criterion 6: 20 Hz control rate"
    );
    assert!(
        ctx.flagged.is_empty(),
        "criterion 6: reference trajectories flagged unsuccessful: {:?}",
        ctx.flagged
    );
    // Initial conditions cover the hover box with zero rates.
    for s0 in GridSpec::default().initial_states() {
        assert!((-2.5..=2.5).contains(&s0.x) && (3.5..=6.5).contains(&s0.y));
        assert_eq!((s0.theta, s0.xdot, s0.ydot, s0.thetadot), (0.0, 0.0, 0.0, 0.0));
    }
    // Chain consistency, bitwise.
    for pair in ctx.dataset.samples.windows(2) {
        if pair[0].traj_id == pair[1].traj_id {
            assert_eq!(pair[0].s_plus, pair[1].s, "criterion 6: chain break");
        }
    }
    // Byte reproducibility: regenerate and compare digests.
    let (again, _) =
        generate_reference(&GridSpec::default(), &ctx.mpc_cfg, &ctx.plant).unwrap();
    assert_eq!(
        again.digest(),
        ctx.dataset_digest,
        "criterion 6: regeneration changed the dataset bytes"
    );
    pass(
        6,
        &format!(
            "273 x 300 chain-consistent samples, digest {} stable across reruns",
            &ctx.dataset_digest[..12]
        ),
    );
}

#[test]
fn criterion_07_ordering_reproduction() {
    let ctx = context();
    let l1 = report_for(ctx, "l1");
    let l123 = report_for(ctx, "l1+l2+l3");
    let l1234 = report_for(ctx, "l1+l2+l3+l4");
    let l123_aux = report_for(ctx, "l1+l2+l3 aux");
    let l1234_aux = report_for(ctx, "l1+l2+l3+l4 aux");

    // (a) The physics-informed controller is at least as successful as the
    // mimicry-only benchmark.
    assert!(
        l123.success_rate >= l1.success_rate,
        "criterion 7a: success {} (l1+l2+l3) < {} (l1)",
        l123.success_rate,
        l1.success_rate
    );

    // (b) Adding the feasibility term does not lower the safe-landing rate,
    // with and without the auxiliary set.
    assert!(
        l1234.safe_rate >= l123.safe_rate,
        "criterion 7b: safe {} (with l4) < {} (without)",
        l1234.safe_rate,
        l123.safe_rate
    );
    assert!(
        l1234_aux.safe_rate >= l123_aux.safe_rate,
        "criterion 7b (aux): safe {} (with l4) < {} (without)",
        l1234_aux.safe_rate,
        l123_aux.safe_rate
    );
    pass(
        7,
        &format!(
            "success {:.2} (l1+l2+l3) >= {:.2} (l1); safe {:.2} >= {:.2} and {:.2} >= {:.2} with l4",
            l123.success_rate,
            l1.success_rate,
            l1234.safe_rate,
            l123.safe_rate,
            l1234_aux.safe_rate,
            l123_aux.safe_rate
        ),
    );
}

#[test]
fn criterion_08_timing_direction() {
    let ctx = context();
    let model = &ctx.models[1].3; // l1+l2+l3
    let controllers = [
        Controller::Mpc {
            label: "mpc".to_string(),
            cfg: &ctx.mpc_cfg,
        },
        Controller::Surrogate {
            label: "surrogate".to_string(),
            params: model,
        },
    ];
    let cfg = EvalConfig {
        n_runs: 10,
        seed: EVAL_SEED,
        ..EvalConfig::default()
    };
    let summaries = bench_cpu(&controllers, &cfg, &ctx.plant).unwrap();
    let mpc = &summaries[0];
    let net = &summaries[1];
    assert!(
        net.mean_tick_latency_s * 10.0 <= mpc.mean_tick_latency_s,
        "criterion 8: tick latency ratio {:.1} below 10x",
        mpc.mean_tick_latency_s / net.mean_tick_latency_s
    );
    assert!(
        net.mean_cpu_s < mpc.mean_cpu_s,
        "criterion 8: total simulation CPU {} not below MPC {}",
        net.mean_cpu_s,
        mpc.mean_cpu_s
    );
    pass(
        8,
        &format!(
            "per-tick {:.1}x faster ({:.1e}s vs {:.1e}s); full-sim CPU {:.4}s vs {:.4}s",
            mpc.mean_tick_latency_s / net.mean_tick_latency_s,
            net.mean_tick_latency_s,
            mpc.mean_tick_latency_s,
            net.mean_cpu_s,
            mpc.mean_cpu_s
        ),
    );
}

#[test]
fn criterion_09_metric_definitions() {
    use pimpcs_core::dynamics::{TrajStep, Trajectory};
    let path_of = |points: &[(f64, f64)]| {
        let states: Vec<State> = points
            .iter()
            .map(|&(x, y)| State::new(x, y, 0.0, 0.0, 0.0, 0.0))
            .collect();
        Trajectory {
            steps: states
                .windows(2)
                .map(|w| TrajStep {
                    state: w[0],
                    control_term: Control::zero(),
                    next_state: w[1],
                })
                .collect(),
            control_dt: 0.05,
        }
    };

    // Constant pad hover.
    let class = classify_landing(&path_of(&vec![(0.0, 0.25); 301])).unwrap();
    assert!(class.success && class.safe && class.landing_time == Some(0.0));

    // Re-entry: in over [5, 10), out to 12, in to the end -> landing at 12 s.
    let mut points = Vec::new();
    for k in 0..=300usize {
        let t = k as f64 * 0.05;
        points.push(if (5.0..10.0).contains(&t) {
            (0.0, 0.25)
        } else if t < 12.0 {
            (2.0, 2.0)
        } else {
            (0.0, 0.2)
        });
    }
    let class = classify_landing(&path_of(&points)).unwrap();
    assert!(class.success && class.landing_time == Some(12.0), "criterion 9: re-entry case");

    // A single dip below ground voids safety but not success.
    let mut points = vec![(0.0, 0.25); 301];
    points[100] = (0.0, -0.01);
    let class = classify_landing(&path_of(&points)).unwrap();
    assert!(!class.safe && class.success, "criterion 9: negative-altitude case");

    // Tracking error: identical -> 0; constant (0.3, 0.4) offset -> 0.5.
    let a = path_of(&vec![(1.0, 2.0); 301]);
    let b = path_of(&vec![(1.3, 2.4); 301]);
    let (_, zero) = tracking_error(&a, &a).unwrap();
    assert_eq!(zero, 0.0);
    let (ticks, mean) = tracking_error(&b, &a).unwrap();
    assert!(ticks.iter().all(|e| (e - 0.5).abs() <= 1e-12));
    assert!((mean - 0.5).abs() <= 1e-12, "criterion 9: 3-4-5 offset");
    pass(9, "landing classification and tracking-error fixtures all agree");
}

#[test]
fn criterion_10_integrator_orders() {
    let plant = PlantParams::default();
    let s0 = State::new(0.5, 5.0, 0.4, 0.5, -0.4, 0.3);
    let horizon = 1.0;
    let err = |dt: f64, use_rk4: bool| {
        let ticks = (horizon / dt).round() as usize;
        let mut coarse = s0;
        let mut fine = s0;
        for _ in 0..ticks {
            let u_c = stabilizer_control(&coarse, &plant);
            coarse = if use_rk4 {
                rk4_step(&coarse, &u_c, dt, &plant)
            } else {
                euler_step(&coarse, &u_c, dt, &plant)
            };
            let u_f = stabilizer_control(&fine, &plant);
            for _ in 0..100 {
                fine = rk4_step(&fine, &u_f, dt / 100.0, &plant);
            }
        }
        coarse.as_vec6().sub(&fine.as_vec6()).norm()
    };
    let euler_ratio = err(0.02, false) / err(0.01, false);
    assert!(
        (1.5..=2.5).contains(&euler_ratio),
        "criterion 10: euler halving ratio {euler_ratio}"
    );
    let rk4_ratio = err(0.02, true) / err(0.01, true);
    assert!(
        (12.0..=20.0).contains(&rk4_ratio),
        "criterion 10: rk4 halving ratio {rk4_ratio}"
    );
    pass(
        10,
        &format!("euler halving ratio {euler_ratio:.2} in [1.5, 2.5]; rk4 {rk4_ratio:.2} in [12, 20]"),
    );
}

/// Not a numbered criterion: sanity on the shared fixtures so a broken
/// context fails loudly here rather than obscurely inside a criterion.
#[test]
fn context_sanity() {
    let ctx = context();
    assert_eq!(ctx.models.len(), 5);
    for (label, toggles, use_aux, params) in &ctx.models {
        assert_eq!(params.param_count(), 312, "{label}");
        let p = params.provenance.as_ref().expect("trained provenance");
        assert_eq!(&p.toggles, toggles);
        assert_eq!(p.aux_used, *use_aux);
        assert_eq!(p.dataset_digest, ctx.dataset_digest);
    }
    assert_eq!(ctx.aux.states.len(), AUX_COUNT);
    let mpc = report_for(ctx, "mpc");
    assert!(
        mpc.success_rate == 1.0,
        "reference MPC must land every evaluation run, got {}",
        mpc.success_rate
    );
    for run in &mpc.runs {
        if run.success {
            assert_eq!(run.tracking_error_mean, Some(0.0));
        }
    }
}
