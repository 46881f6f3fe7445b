//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured numbers (visible with `--nocapture`).
//!
//! Run with:
//!   cargo test -p harq-nc --test acceptance -- --nocapture

#![allow(clippy::needless_range_loop)]

mod util;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use harq_nc::channel::Decision;
use harq_nc::dp_oracle::{
    build_tables, decision_map_one_step, lookahead_agreement, one_step_decision, DpConfig,
};
use harq_nc::lqr::riccati_backward;
use harq_nc::model::{CostSpec, FadingState, Policy, Schedule, SystemModel};
use harq_nc::sim::{
    analytic_loss_perfect_channel, monte_carlo, monte_carlo_compare, run_episode, Simulator,
};

fn report(criterion: usize, name: &str, detail: String, elapsed: Duration, budget: Duration) {
    println!(
        "ACCEPTANCE {criterion} ({name}): PASS — {detail} [{:.2}s of {:.0}s budget]",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    assert!(
        elapsed <= budget,
        "criterion {criterion} exceeded its runtime budget: {:.2}s > {:.0}s",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
}

#[test]
fn criterion_1_riccati_correctness() {
    let start = Instant::now();

    // Scalar fixture converges to the golden ratio by N = 60.
    let sys = SystemModel {
        a: Schedule::Constant(DMatrix::from_element(1, 1, 1.0)),
        b: Schedule::Constant(DMatrix::from_element(1, 1, 1.0)),
        c: Schedule::Constant(DMatrix::from_element(1, 1, 1.0)),
        w: Schedule::Constant(DMatrix::from_element(1, 1, 1.0)),
        v: Schedule::Constant(DMatrix::from_element(1, 1, 1.0)),
        m0: DVector::zeros(1),
        m0_cov: DMatrix::from_element(1, 1, 1.0),
    };
    let cost = CostSpec {
        q: Schedule::Constant(DMatrix::from_element(1, 1, 1.0)),
        r: Schedule::Constant(DMatrix::from_element(1, 1, 1.0)),
    };
    let sched = riccati_backward(&sys, &cost, 60).unwrap();
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let fixed_point_gap = (sched.s(0)[(0, 0)] - phi).abs();
    assert!(
        fixed_point_gap < 1e-9,
        "golden-ratio gap {fixed_point_gap:.3e}"
    );

    // Pendulum S_0 against an independent re-evaluation of the recursion.
    let cfg = util::pendulum_config(1, 1, Policy::HarqOptimal);
    let sched = riccati_backward(&cfg.system, &cfg.cost, cfg.horizon).unwrap();
    let reference = util::riccati_reference(&cfg, cfg.horizon);
    let rel = (sched.s(0) - &reference[0]).norm() / reference[0].norm();
    assert!(rel < 1e-8, "pendulum S_0 relative gap {rel:.3e}");
    let spd = sched
        .s(0)
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .all(|&e| e > 0.0);
    assert!(spd, "pendulum S_0 not SPD");

    report(
        1,
        "riccati correctness",
        format!("golden-ratio gap {fixed_point_gap:.2e}, pendulum S_0 rel gap {rel:.2e}"),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn criterion_2_filter_vs_batch_oracle() {
    let start = Instant::now();

    // n = 2 fixture over N = 5 against joint-Gaussian conditioning.
    let cfg = harq_nc::model::ScenarioConfig {
        system: SystemModel {
            a: Schedule::Constant(DMatrix::from_row_slice(2, 2, &[1.1, 0.3, -0.2, 0.8])),
            b: Schedule::Constant(DMatrix::from_row_slice(2, 1, &[0.5, 1.0])),
            c: Schedule::Constant(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 1.0])),
            w: Schedule::Constant(DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.6])),
            v: Schedule::Constant(DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.2])),
            m0: DVector::from_row_slice(&[1.0, -0.5]),
            m0_cov: DMatrix::from_row_slice(2, 2, &[0.9, -0.2, -0.2, 0.7]),
        },
        cost: CostSpec {
            q: Schedule::Constant(DMatrix::identity(2, 2)),
            r: Schedule::Constant(DMatrix::identity(1, 1)),
        },
        channel: harq_nc::model::ChannelSpec::constant_rates(vec![0.5, 0.05], 1),
        horizon: 5,
        seed: 12,
        runs: 1,
        policy: Policy::HarqOptimal,
        test_mode: false,
    };
    let sys = &cfg.system;
    let controls: Vec<DVector<f64>> = (0..5)
        .map(|t| DVector::from_element(1, (t as f64) * 0.4 - 1.0))
        .collect();

    let mut prng = harq_nc::rng::substream(12, 0, harq_nc::rng::Substream::ProcessNoise);
    let mut mrng = harq_nc::rng::substream(12, 0, harq_nc::rng::Substream::MeasurementNoise);
    let sqrt_m0 = harq_nc::rng::psd_sqrt(&sys.m0_cov);
    let sqrt_w = harq_nc::rng::psd_sqrt(sys.w_at(0));
    let sqrt_v = harq_nc::rng::psd_sqrt(sys.v_at(0));
    let mut x = harq_nc::rng::sample_gaussian(&sys.m0, &sqrt_m0, &mut prng);
    let mut ys = Vec::new();
    for t in 0..=5 {
        let v = harq_nc::rng::sample_gaussian(&DVector::zeros(2), &sqrt_v, &mut mrng);
        ys.push(sys.c_at(t) * &x + v);
        if t < 5 {
            let w = harq_nc::rng::sample_gaussian(&DVector::zeros(2), &sqrt_w, &mut prng);
            x = sys.a_at(t) * &x + sys.b_at(t) * &controls[t] + w;
        }
    }

    let cov = std::sync::Arc::new(harq_nc::estimator::CovarianceSchedule::compute(sys, 5).unwrap());
    let mut st = harq_nc::estimator::kf_initialize(sys, &ys[0], std::sync::Arc::clone(&cov));
    let oracle = util::BatchConditioner::new(&cfg, &controls, 5);
    let mut worst = 0.0f64;
    for t in 0..=5 {
        if t > 0 {
            st = harq_nc::estimator::kf_step(&st, &controls[t - 1], &ys[t], sys);
        }
        let (mean, cov_o) = oracle.condition(&cfg, t, t, &ys);
        worst = worst
            .max((st.x_check() - &mean).amax())
            .max((cov.p(t) - &cov_o).amax());
    }
    assert!(worst < 1e-8, "filter vs batch oracle gap {worst:.3e}");

    report(
        2,
        "filter vs batch oracle",
        format!("max deviation {worst:.2e} over 6 steps"),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn criterion_3_recursion_equivalence() {
    let start = Instant::now();

    let cfg = util::pendulum_config(1, 1, Policy::HarqOptimal);
    let sim = Simulator::new(&cfg).unwrap();
    let runs = 1000u64;
    let mut worst_mismatch = 0.0f64;
    let mut worst_error = 0.0f64;
    for run in 0..runs {
        let trace = sim.run_episode(run).unwrap();
        // TX + RTX = N+1 exactly, per run (τ = ω is asserted inside).
        assert_eq!(trace.totals.tx + trace.totals.rtx, cfg.horizon + 1);
        worst_mismatch = worst_mismatch.max(trace.audit_max_mismatch_gap);
        worst_error = worst_error.max(trace.audit_max_error_gap);
    }
    assert!(
        worst_mismatch <= 1e-9,
        "mismatch recursion gap {worst_mismatch:.3e}"
    );
    assert!(worst_error <= 1e-9, "error recursion gap {worst_error:.3e}");

    report(
        3,
        "recursion equivalence",
        format!(
            "over {runs} runs: max |e~ − (x̌−x̂)| = {worst_mismatch:.2e}, \
             max |ê − (x−x̂)| = {worst_error:.2e}"
        ),
        start.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_4_analytic_loss_oracle() {
    let start = Instant::now();

    let mut cfg = util::pendulum_config(2024, 10_000, Policy::HarqOptimal);
    cfg.channel.fading = vec![FadingState {
        lambda: vec![0.0, 0.0],
    }];
    let analytic = analytic_loss_perfect_channel(&cfg).unwrap();
    let summary = monte_carlo(&cfg).unwrap();
    let gap = (summary.upsilon_mean - analytic).abs();
    assert!(
        gap <= 3.0 * summary.upsilon_se,
        "MC mean {} vs analytic {analytic} (gap {gap:.3e}, 3se {:.3e})",
        summary.upsilon_mean,
        3.0 * summary.upsilon_se
    );

    report(
        4,
        "analytic loss oracle",
        format!(
            "MC {:.6} vs analytic {:.6}, gap {:.2e} <= 3se {:.2e} over 10^4 runs",
            summary.upsilon_mean,
            analytic,
            gap,
            3.0 * summary.upsilon_se
        ),
        start.elapsed(),
        Duration::from_secs(120),
    );
}

#[test]
fn criterion_5_policy_non_inferiority() {
    let start = Instant::now();

    let cfg = util::pendulum_config(42, 500, Policy::HarqOptimal);
    let (summaries, pairs) =
        monte_carlo_compare(&cfg, &[Policy::HarqOptimal, Policy::AlwaysTx]).unwrap();
    let opt = &summaries[0];
    let base = &summaries[1];

    assert!(
        opt.upsilon_mean <= base.upsilon_mean,
        "threshold policy lost: {} > {}",
        opt.upsilon_mean,
        base.upsilon_mean
    );
    assert!(opt.totals.rtx > 0, "threshold policy never retransmitted");
    assert!(opt.totals.forced_tau0 > 0, "tau=0 forcing never exercised");
    assert!(
        opt.totals.forced_omega_cap > 0,
        "retransmission cap never exercised"
    );

    // Realized erasures vs the decision-weighted mixture Σ λ_used.
    let realized = opt.totals.packet_losses as f64;
    let expected = opt.totals.expected_erasures;
    let band = 3.0 * opt.totals.erasure_variance.sqrt();
    assert!(
        (realized - expected).abs() <= band,
        "erasures {realized} vs mixture {expected:.1} (3se band {band:.1})"
    );

    report(
        5,
        "policy non-inferiority",
        format!(
            "paired mean gap {:.6} (se {:.6}); threshold policy {:.6} <= always_tx {:.6}; \
             rtx {} forced_tau0 {} forced_cap {}; erasures {realized} vs {expected:.1} ± {band:.1}",
            pairs[0].mean_diff,
            pairs[0].se_diff,
            opt.upsilon_mean,
            base.upsilon_mean,
            opt.totals.rtx,
            opt.totals.forced_tau0,
            opt.totals.forced_omega_cap
        ),
        start.elapsed(),
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_6_dp_oracle() {
    let start = Instant::now();

    let cfg = util::scalar_config(3, 1, Policy::HarqOptimal);
    let tables = build_tables(&cfg, DpConfig::default()).unwrap();

    // Terminal value vanishes; values are non-negative everywhere.
    for node in tables.grid(cfg.horizon + 1).nodes() {
        assert_eq!(node.value, 0.0);
    }
    let mut min_value = f64::INFINITY;
    for k in 0..=cfg.horizon {
        for node in tables.grid(k).nodes() {
            min_value = min_value.min(node.value);
        }
    }
    assert!(min_value >= -1e-9, "negative grid value {min_value:.3e}");

    // Grid refinement shrinks the change at common nodes.
    let dp = |points: usize| DpConfig {
        e_points: points,
        nu_points: points,
        quad_points: 33,
        span_sigmas: 8.0,
    };
    let coarse = build_tables(&cfg, dp(51)).unwrap();
    let medium = build_tables(&cfg, dp(101)).unwrap();
    let mut change1 = 0.0f64;
    let mut change2 = 0.0f64;
    for node in coarse.grid(0).nodes() {
        let vm = medium
            .grid(0)
            .value_at(node.tau, node.fading, node.e_tilde, &node.window);
        let vf = tables
            .grid(0)
            .value_at(node.tau, node.fading, node.e_tilde, &node.window);
        change1 = change1.max((vm - node.value).abs());
        change2 = change2.max((vf - vm).abs());
    }
    assert!(
        change2 <= change1 + 1e-12,
        "refinement not contracting: {change1:.3e} then {change2:.3e}"
    );

    // The Δ=0 decision map agrees with the closed-form sign node-for-node.
    for k in 0..cfg.horizon {
        for node in decision_map_one_step(&tables, k) {
            let expect = one_step_decision(
                &tables,
                k,
                node.e_tilde,
                &node.window,
                node.tau,
                node.fading,
            );
            assert_eq!(node.decision, expect, "map mismatch at k={k}");
        }
    }

    // Exact-vs-lookahead agreement is a report-only metric.
    let (agree, total) = lookahead_agreement(&tables, &cfg.channel, 2000, cfg.seed);
    let fraction = agree as f64 / total.max(1) as f64;

    report(
        6,
        "dp oracle",
        format!(
            "min value {min_value:.1e}; refinement {change1:.2e} -> {change2:.2e}; \
             one-step map exact nodewise; exact-vs-lookahead agreement \
             {agree}/{total} ({:.1}%)",
            fraction * 100.0
        ),
        start.elapsed(),
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_7_degenerate_channel_branches() {
    let start = Instant::now();

    // λ ≡ 0: never retransmits, never loses a packet.
    let mut clear = util::pendulum_config(31, 1, Policy::HarqOptimal);
    clear.channel.fading = vec![FadingState {
        lambda: vec![0.0, 0.0],
    }];
    let t = run_episode(&clear, 0).unwrap();
    assert_eq!(t.totals.rtx, 0, "perfect channel produced RTX");
    assert_eq!(t.totals.packet_losses, 0);

    // λ ≡ 1 under a retransmitting baseline: the budget cap fires.
    let mut blocked = util::pendulum_config(31, 1, Policy::AgeThreshold(1));
    blocked.channel.fading = vec![FadingState {
        lambda: vec![1.0, 1.0],
    }];
    let t = run_episode(&blocked, 0).unwrap();
    assert_eq!(t.totals.packet_losses, blocked.horizon + 1);
    assert!(t.totals.forced_omega_cap > 0, "omega cap never fired");

    // λ(s) ≡ λ(0) with Δ = 0: the threshold policy degenerates to
    // always-TX decision-for-decision under common random numbers.
    let mut flat = util::pendulum_config(31, 1, Policy::HarqOptimal);
    flat.channel.fading = vec![FadingState {
        lambda: vec![0.5, 0.5],
    }];
    let t_opt = run_episode(&flat, 0).unwrap();
    assert_eq!(t_opt.totals.rtx, 0, "equal rates must degenerate to TX");
    let mut flat_base = flat.clone();
    flat_base.policy = Policy::AlwaysTx;
    let t_base = run_episode(&flat_base, 0).unwrap();
    let d_opt: Vec<Decision> = t_opt.steps.iter().map(|s| s.u).collect();
    let d_base: Vec<Decision> = t_base.steps.iter().map(|s| s.u).collect();
    assert_eq!(d_opt, d_base);

    report(
        7,
        "degenerate channel branches",
        "perfect channel all-TX; blocked channel hits the cap; equal rates degenerate to always-TX"
            .to_string(),
        start.elapsed(),
        Duration::from_secs(60),
    );
}

#[test]
fn criterion_8_determinism() {
    let start = Instant::now();

    // Library level: repeated Monte Carlo and different worker counts give
    // identical summaries.
    let cfg = util::pendulum_config(7, 100, Policy::HarqOptimal);
    let sim = Simulator::new(&cfg).unwrap();
    let a = serde_json::to_string(&sim.monte_carlo().unwrap()).unwrap();
    let b = serde_json::to_string(&sim.monte_carlo().unwrap()).unwrap();
    assert_eq!(a, b);
    for threads in [1usize, 3] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let c = serde_json::to_string(&pool.install(|| sim.monte_carlo()).unwrap()).unwrap();
        assert_eq!(a, c, "worker count {threads} changed the summary");
    }

    // Binary level: byte-identical trace and summary files.
    let dir = tempfile::tempdir().unwrap();
    let scenario = util::pendulum_path();
    let mut outputs = Vec::new();
    for (i, workers) in [("0", "2"), ("1", "5")].iter().enumerate() {
        let trace = dir.path().join(format!("t{i}.csv"));
        let summary = dir.path().join(format!("s{i}.json"));
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_harq-nc"))
            .arg("simulate")
            .arg(&scenario)
            .args(["--seed", "9", "--output"])
            .arg(&trace)
            .status()
            .unwrap();
        assert!(status.success());
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_harq-nc"))
            .arg("montecarlo")
            .arg(&scenario)
            .args([
                "--seed",
                "9",
                "--runs",
                "50",
                "--format",
                "json",
                "--workers",
            ])
            .arg(workers.1)
            .arg("--output")
            .arg(&summary)
            .status()
            .unwrap();
        assert!(status.success());
        outputs.push((
            std::fs::read(&trace).unwrap(),
            std::fs::read(&summary).unwrap(),
        ));
    }
    assert_eq!(outputs[0].0, outputs[1].0, "trace files differ");
    assert_eq!(outputs[0].1, outputs[1].1, "summary files differ");

    report(
        8,
        "determinism",
        "summaries identical across reruns and worker counts; emitted files byte-identical"
            .to_string(),
        start.elapsed(),
        Duration::from_secs(120),
    );
}
